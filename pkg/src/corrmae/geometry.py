"""Two-view epipolar geometry for calibrated cameras.

Conventions: a correspondence is the 4-vector ``(x1, x2, y1, y2)`` in
intrinsics-normalized coordinates, ``x`` in the source view and ``y`` in the
target view. A pose ``(R, t)`` maps source camera coordinates to target camera
coordinates, ``X_t = R X_s + t``, so that ``y_h^T E x_h = 0`` with
``E = [t]_x R``.

The differentiable routines (:func:`symmetric_epipolar_distance`,
:func:`weighted_eight_point`) are torch-native and always compute in float64.
They accept numpy arrays too, in which case numpy arrays are returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import (
    AmbiguousCheirality,
    DegenerateConfiguration,
    DegenerateLine,
    EmptyInput,
    TooFewCorrespondences,
    ZeroTranslation,
)

__all__ = [
    "CameraPose",
    "CorrespondenceSet",
    "skew",
    "essential_from_pose",
    "canonicalize_essential",
    "project_to_essential",
    "symmetric_epipolar_distance",
    "weights_from_logits",
    "weighted_eight_point",
    "eight_point_design_matrix",
    "decompose_essential",
    "pose_error",
    "max_pose_error",
    "pose_auc",
]

# An entry counts as "first nonzero" for sign canonicalization above this.
SIGN_EPS = 1e-9
# Minimum eigen-gap of the weighted normal matrix.
EIGEN_GAP_EPS = 1e-12
# Epipolar line direction norms below this make the line undefined.
LINE_EPS = 1e-15


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def validate(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")

    def as_vector(self) -> np.ndarray:
        """12 values: rotation row-major, then translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_vector(cls, v) -> "CameraPose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:9].reshape(3, 3), v[9:12])


@dataclass
class CorrespondenceSet:
    """Ordered correspondences as an ``(N, 4)`` array plus optional labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("correspondence coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per correspondence")

    def __len__(self):
        return len(self.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 2:]

    def subset(self, idx) -> "CorrespondenceSet":
        labels = None if self.labels is None else self.labels[idx]
        return CorrespondenceSet(self.points[idx], labels)


def _as_array(corrs):
    if isinstance(corrs, CorrespondenceSet):
        return corrs.points
    return corrs


def _to_torch(a):
    """Return (float64 tensor, input_was_numpy)."""
    a = _as_array(a)
    if isinstance(a, torch.Tensor):
        return a.to(torch.float64), False
    return torch.as_tensor(np.asarray(a, dtype=np.float64)), True


def _homogeneous(p: torch.Tensor) -> torch.Tensor:
    return torch.cat([p, torch.ones_like(p[..., :1])], dim=-1)


def skew(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def essential_from_pose(pose: CameraPose) -> np.ndarray:
    """``[t]_x R`` with unit Frobenius norm."""
    if np.linalg.norm(pose.translation) <= 1e-12:
        raise ZeroTranslation("translation norm must exceed 1e-12")
    E = skew(pose.translation) @ pose.rotation
    return E / np.linalg.norm(E)


def canonicalize_essential(E):
    """Scale to unit Frobenius norm and make the first entry above 1e-9 positive.

    Works on numpy arrays or tensors of shape ``(..., 3, 3)``; differentiable
    for tensors (the sign is piecewise constant).
    """
    if not isinstance(E, torch.Tensor):
        return canonicalize_essential(torch.as_tensor(np.asarray(E, dtype=np.float64))).numpy()
    E = E / torch.linalg.matrix_norm(E).clamp_min(1e-300)[..., None, None]
    flat = E.reshape(*E.shape[:-2], 9)
    with torch.no_grad():
        big = flat.abs() > SIGN_EPS
        first = torch.argmax(big.to(torch.int8), dim=-1, keepdim=True)
        sign = torch.sign(torch.gather(flat, -1, first))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return E * sign[..., None]


class _SmallestEigvec(torch.autograd.Function):
    """Eigenvector of the smallest eigenvalue of a symmetric matrix.

    The backward only needs the gap between the smallest eigenvalue and the
    rest, so ties among the larger eigenvalues are harmless.
    """

    @staticmethod
    def forward(ctx, A):
        lam, V = torch.linalg.eigh(0.5 * (A + A.mT))
        ctx.save_for_backward(lam, V)
        ctx.mark_non_differentiable(lam)
        return V[..., :, 0], lam

    @staticmethod
    def backward(ctx, grad_v, grad_lam):
        lam, V = ctx.saved_tensors
        v0 = V[..., :, :1]
        rest = V[..., :, 1:]
        denom = lam[..., :1] - lam[..., 1:]
        coef = (rest.mT @ grad_v[..., :, None])[..., 0] / denom
        gA = (rest * coef[..., None, :]).sum(-1, keepdim=True) @ v0.mT
        return 0.5 * (gA + gA.mT)


class _EssentialProjection(torch.autograd.Function):
    """Nearest matrix with singular values (1, 1, 0): ``U diag(1,1,0) V^T``.

    The closed-form backward stays finite when the two leading singular
    values coincide, which is exactly the regime of a good estimate.
    """

    @staticmethod
    def forward(ctx, E):
        U, S, Vh = torch.linalg.svd(E)
        D = torch.tensor([1.0, 1.0, 0.0], dtype=E.dtype, device=E.device)
        ctx.save_for_backward(U, S, Vh)
        return (U * D) @ Vh

    @staticmethod
    def backward(ctx, G):
        U, S, Vh = ctx.saved_tensors
        H = U.mT @ G @ Vh.mT
        R = torch.zeros_like(H)
        s0, s1, s2 = S[..., 0], S[..., 1], S[..., 2]
        r01 = (H[..., 0, 1] - H[..., 1, 0]) / (s0 + s1)
        R[..., 0, 1] = r01
        R[..., 1, 0] = -r01
        for i, si in ((0, s0), (1, s1)):
            d = si * si - s2 * s2
            R[..., i, 2] = (H[..., i, 2] * si + H[..., 2, i] * s2) / d
            R[..., 2, i] = (H[..., i, 2] * s2 + H[..., 2, i] * si) / d
        return U @ R @ Vh


def project_to_essential(E):
    """Enforce the essential constraints: singular values become (1, 1, 0)."""
    Et, was_np = _to_torch(E)
    out = _EssentialProjection.apply(Et)
    return out.numpy() if was_np else out


def symmetric_epipolar_distance(corrs, E, strict: bool = False):
    """Symmetric epipolar distance per correspondence.

    ``r = (y^T E x)^2 * (1/|(Ex)_{1:2}|^2 + 1/|(E^T y)_{1:2}|^2)``.
    A term whose line direction is undefined (norm < 1e-15) is dropped; when
    both are undefined the residual is +inf, or :class:`DegenerateLine` is
    raised if ``strict``. Broadcasts over leading batch dimensions.
    """
    c, was_np = _to_torch(corrs)
    Et, _ = _to_torch(E)
    xh = _homogeneous(c[..., :2])
    yh = _homogeneous(c[..., 2:])
    Ex = xh @ Et.mT
    Ety = yh @ Et
    num = (yh * Ex).sum(-1) ** 2
    n1 = Ex[..., 0] ** 2 + Ex[..., 1] ** 2
    n2 = Ety[..., 0] ** 2 + Ety[..., 1] ** 2
    ok1 = n1 >= LINE_EPS**2
    ok2 = n2 >= LINE_EPS**2
    zero = torch.zeros_like(num)
    t1 = torch.where(ok1, num / torch.where(ok1, n1, torch.ones_like(n1)), zero)
    t2 = torch.where(ok2, num / torch.where(ok2, n2, torch.ones_like(n2)), zero)
    both_bad = ~(ok1 | ok2)
    if strict and bool(both_bad.any()):
        raise DegenerateLine("both epipolar lines are undefined for some correspondences")
    r = torch.where(both_bad, torch.full_like(num, math.inf), t1 + t2)
    return r.numpy() if was_np else r


def weights_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """``relu(tanh(logits))`` normalized to sum 1 over the last axis."""
    w = torch.relu(torch.tanh(logits))
    return w / w.sum(-1, keepdim=True).clamp_min(1e-12)


def eight_point_design_matrix(corrs: torch.Tensor) -> torch.Tensor:
    """Rows ``kron(y_h, x_h)`` so that ``row . vec(E) = y_h^T E x_h``."""
    xh = _homogeneous(corrs[..., :2])
    yh = _homogeneous(corrs[..., 2:])
    A = yh[..., :, :, None] * xh[..., :, None, :]
    return A.reshape(*A.shape[:-2], 9)


def weighted_eight_point(corrs, weights, check: bool = True, return_degenerate: bool = False):
    """Weighted eight-point estimate of the essential matrix.

    Row ``i`` of the design matrix is scaled by the normalized weight ``w_i``;
    the estimate is the smallest eigenvector of the 9x9 normal matrix,
    projected onto the essential manifold and canonicalized. Batched over
    leading dimensions and differentiable with respect to ``weights``.

    With ``check=False`` degenerate inputs produce an (arbitrary) estimate
    instead of raising; ``return_degenerate=True`` additionally returns the
    boolean degeneracy flag per batch entry.
    """
    c, was_np = _to_torch(corrs)
    w, _ = _to_torch(weights)
    n = c.shape[-2]
    if n < 8:
        raise TooFewCorrespondences(f"need at least 8 correspondences, got {n}")
    if w.shape != c.shape[:-1]:
        raise ValueError(f"weights shape {tuple(w.shape)} does not match correspondences {tuple(c.shape[:-1])}")
    if bool((w < 0).any()):
        raise ValueError("weights must be nonnegative")
    bad = ~(torch.isfinite(w).all(-1) & torch.isfinite(c).flatten(-2).all(-1))
    if bool(bad.any()):
        if check:
            raise ValueError("weights and correspondences must be finite")
        # non-finite rows are flagged degenerate and solved on zeros
        w = torch.where(bad[..., None], torch.zeros_like(w), w)
        c = torch.where(bad[..., None, None], torch.zeros_like(c), c)
    total = w.sum(-1, keepdim=True)
    w = w / total.clamp_min(1e-300)
    Aw = eight_point_design_matrix(c) * w[..., None]
    M = Aw.mT @ Aw
    v, lam = _SmallestEigvec.apply(M)
    degenerate = (lam[..., 1] - lam[..., 0] < EIGEN_GAP_EPS) | (total[..., 0] <= 0) | bad
    if check and bool(degenerate.any()):
        raise DegenerateConfiguration("null space of the weighted normal matrix is not one-dimensional")
    E = v.reshape(*v.shape[:-1], 3, 3)
    E = canonicalize_essential(_EssentialProjection.apply(E))
    if was_np:
        E = E.detach().numpy()
        degenerate = degenerate.numpy()
    return (E, degenerate) if return_degenerate else E


def _cheirality_count(R, t, xh, yh):
    # z2 * yh = z1 * R xh + t, least squares in (z1, z2) per point
    a = xh @ R.T
    b = -yh
    aa = (a * a).sum(1)
    bb = (b * b).sum(1)
    ab = (a * b).sum(1)
    at = (a * t).sum(1)
    bt = (b * t).sum(1)
    det = aa * bb - ab * ab
    ok = np.abs(det) > 1e-18
    det = np.where(ok, det, 1.0)
    z1 = (-at * bb + bt * ab) / det
    z2 = (-bt * aa + at * ab) / det
    return int(np.sum(ok & (z1 > 0) & (z2 > 0)))


def decompose_essential(E, corrs) -> CameraPose:
    """Recover ``(R, t)`` with unit ``t`` by cheirality voting over the four candidates."""
    pts = np.asarray(_as_array(corrs), dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        raise EmptyInput("cheirality test needs at least one correspondence")
    E = canonicalize_essential(np.asarray(E, dtype=np.float64))
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    ones = np.ones((len(pts), 1))
    xh = np.hstack([pts[:, :2], ones])
    yh = np.hstack([pts[:, 2:], ones])
    counts = [_cheirality_count(R, tt, xh, yh) for R, tt in candidates]
    order = np.argsort(counts, kind="stable")[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise AmbiguousCheirality(f"cheirality tie: counts {counts}")
    R, tt = candidates[order[0]]
    return CameraPose(R, tt / np.linalg.norm(tt))


def pose_error(estimate: CameraPose, truth: CameraPose):
    """(rotation error, translation direction error) in degrees.

    The translation error ignores the sign of ``t``, which an essential
    matrix cannot resolve on its own. Both angles use ``atan2`` forms, which
    equal the arccos definitions but stay accurate near zero.
    """
    Rd = estimate.rotation.T @ truth.rotation
    skew_part = np.array([Rd[2, 1] - Rd[1, 2], Rd[0, 2] - Rd[2, 0], Rd[1, 0] - Rd[0, 1]])
    rot = math.degrees(math.atan2(float(np.linalg.norm(skew_part)), float(np.trace(Rd) - 1.0)))
    te, tt = estimate.translation, truth.translation
    if np.linalg.norm(te) * np.linalg.norm(tt) == 0:
        return rot, 180.0
    trans = math.degrees(math.atan2(float(np.linalg.norm(np.cross(te, tt))), abs(float(te @ tt))))
    return rot, trans


def max_pose_error(estimate: CameraPose, truth: CameraPose) -> float:
    return max(pose_error(estimate, truth))


def pose_auc(errors: Sequence[float], thresholds: Sequence[float] = (5.0, 10.0, 20.0)):
    """Area under the cumulative recall curve up to each threshold, in percent.

    The curve passes through ``(e_(i), i/n)`` for the sorted errors and is
    integrated exactly with the trapezoid rule; past the last error below a
    threshold the recall is held flat up to it. The area is divided by the
    threshold.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("pose_auc needs at least one error")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("errors must be finite and nonnegative")
    e = np.sort(e)
    recall = np.arange(1, e.size + 1) / e.size
    e = np.concatenate([[0.0], e])
    recall = np.concatenate([[0.0], recall])
    out = []
    for t in thresholds:
        last = int(np.searchsorted(e, t, side="left"))
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        x = np.concatenate([e[:last], [t]])
        area = float(np.sum((x[1:] - x[:-1]) * (r[1:] + r[:-1]) / 2.0))
        out.append(100.0 * area / t)
    return out
