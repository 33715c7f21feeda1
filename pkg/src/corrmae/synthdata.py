"""Seeded synthetic two-view scenes and the dataset file format.

Dataset file layout (all multi-byte values little-endian)::

    line 1   UTF-8 JSON header terminated by b"\\n":
             {"format": "corrmae-dataset", "version": 1, "scene_count": S,
              "dtype": "<f8" | "<f4", "config": {...}, "checksum": "sha256:<hex>"}
    payload  S records, back to back; each record is
             uint32   N                      correspondence count
             float    pose[12]               rotation row-major, then translation
             float    corrs[N * 4]           (x1, x2, y1, y2) per correspondence
             uint8    mask[N]                1 = inlier

The checksum covers the payload bytes only. The essential matrix is not stored;
it is recomputed from the pose on read.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import (
    ChecksumMismatch,
    ConfigError,
    DatasetIOError,
    FormatVersionMismatch,
    TooFewInliers,
    UnreachableConfig,
)
from .geometry import CameraPose, CorrespondenceSet, essential_from_pose, symmetric_epipolar_distance

FORMAT_NAME = "corrmae-dataset"
FORMAT_VERSION = 1
PRETRAIN_THRESHOLD = 1e-4
EVAL_THRESHOLD = 3e-5

_MAX_ROUNDS = 100


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 2000
    outlier_ratio: float = 0.9
    noise_sigma: float = 1e-3
    depth_range: Tuple[float, float] = (2.0, 8.0)
    rotation_max: float = 15.0
    translation_scale: float = 1.0
    seed: int = 0
    label_threshold: float = PRETRAIN_THRESHOLD
    # "smooth": depth is a random low-frequency surface over the source view,
    # so neighbouring correspondences share structure; "uniform": iid depths.
    depth_model: str = "smooth"

    def __post_init__(self):
        object.__setattr__(self, "depth_range", tuple(float(d) for d in self.depth_range))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> List[str]:
        p = []
        if int(self.n_points) != self.n_points or self.n_points < 8:
            p.append(f"n_points must be an integer >= 8, got {self.n_points}")
        if not 0.0 <= self.outlier_ratio < 1.0:
            p.append(f"outlier_ratio must lie in [0, 1), got {self.outlier_ratio}")
        if not self.noise_sigma >= 0.0:
            p.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.depth_range) != 2 or not (0.0 < self.depth_range[0] <= self.depth_range[1]):
            p.append(f"depth_range must satisfy 0 < min <= max, got {self.depth_range}")
        if not self.rotation_max >= 0.0:
            p.append(f"rotation_max must be >= 0, got {self.rotation_max}")
        if not self.translation_scale > 0.0:
            p.append(f"translation_scale must be > 0, got {self.translation_scale}")
        if not self.label_threshold > 0.0:
            p.append(f"label_threshold must be > 0, got {self.label_threshold}")
        if self.depth_model not in ("smooth", "uniform"):
            p.append(f"depth_model must be 'smooth' or 'uniform', got {self.depth_model!r}")
        return p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown scene config key {k!r}" for k in unknown])
        return cls(**d)


@dataclass
class TwoViewScene:
    pose: CameraPose
    essential: np.ndarray
    correspondences: np.ndarray  # (N, 4)
    inlier_mask: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.correspondences)

    @property
    def corrs(self) -> CorrespondenceSet:
        return CorrespondenceSet(self.correspondences, self.inlier_mask)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-scene seed as a pure function of (master seed, scene index)."""
    return int(np.random.SeedSequence([int(master_seed) & (2**64 - 1), int(index)]).generate_state(1, np.uint64)[0])


def random_rotation(rng: np.random.Generator, max_degrees: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_degrees))
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def _depth_field(rng, cfg: SceneConfig):
    lo, hi = cfg.depth_range
    if cfg.depth_model == "uniform":
        return lambda uv: rng.uniform(lo, hi, size=len(uv))
    freq = rng.normal(scale=1.5, size=(3, 2))
    phase = rng.uniform(0.0, 2 * math.pi, size=3)
    amp = rng.uniform(0.2, 1.0, size=3)
    tilt = rng.normal(scale=0.5, size=2)

    def depth(uv):
        s = uv @ tilt + np.sin(uv @ freq.T + phase) @ amp
        s = 0.5 * (1.0 + np.tanh(0.5 * s))
        return lo + (hi - lo) * s

    return depth


def generate_scene(cfg: SceneConfig) -> TwoViewScene:
    """Sample a relative pose, a 3-D point set visible in both views, and correspondences.

    Points are sampled in the source view window [-1, 1]^2 and kept only if
    they land in front of the target camera and inside its window. Inlier
    target points get isotropic Gaussian noise; ``floor(outlier_ratio * n)``
    entries get a uniformly resampled target point instead. Both are redrawn
    until they fall on the correct side of ``label_threshold``, so the inlier
    mask agrees exactly with thresholding the residual under the true E.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(cfg.n_points)
    R = random_rotation(rng, cfg.rotation_max)
    t = rng.normal(size=3)
    t *= cfg.translation_scale / np.linalg.norm(t)
    pose = CameraPose(R, t)
    E = essential_from_pose(pose)
    depth = _depth_field(rng, cfg)

    xs, ys = [], []
    have = 0
    for _ in range(_MAX_ROUNDS):
        uv = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        X1 = np.hstack([uv, np.ones((len(uv), 1))]) * depth(uv)[:, None]
        X2 = X1 @ R.T + t
        front = X2[:, 2] > 1e-6
        proj = X2[:, :2] / np.where(front, X2[:, 2], 1.0)[:, None]
        keep = front & np.all(np.abs(proj) <= 1.0, axis=1)
        xs.append(uv[keep])
        ys.append(proj[keep])
        have += int(keep.sum())
        if have >= n:
            break
    else:
        raise UnreachableConfig(f"could only place {have} of {n} points visible in both views")
    x = np.concatenate(xs)[:n]
    y = np.concatenate(ys)[:n]

    n_out = int(math.floor(cfg.outlier_ratio * n))
    outlier = np.zeros(n, dtype=bool)
    outlier[rng.choice(n, size=n_out, replace=False)] = True
    y_true = y.copy()
    thr = cfg.label_threshold

    todo = ~outlier
    if cfg.noise_sigma > 0:
        for _ in range(_MAX_ROUNDS):
            idx = np.flatnonzero(todo)
            if idx.size == 0:
                break
            y[idx] = y_true[idx] + rng.normal(scale=cfg.noise_sigma, size=(idx.size, 2))
            r = symmetric_epipolar_distance(np.hstack([x[idx], y[idx]]), E)
            todo[idx] = ~(r < thr)
        else:
            raise UnreachableConfig("noise_sigma too large for label_threshold")

    todo = outlier.copy()
    for _ in range(_MAX_ROUNDS):
        idx = np.flatnonzero(todo)
        if idx.size == 0:
            break
        y[idx] = rng.uniform(-1.0, 1.0, size=(idx.size, 2))
        r = symmetric_epipolar_distance(np.hstack([x[idx], y[idx]]), E)
        todo[idx] = ~(r >= thr)
    else:
        raise UnreachableConfig("could not place outliers away from the epipolar lines")

    return TwoViewScene(pose, E, np.hstack([x, y]), ~outlier)


def _generate_indexed(args):
    cfg, i = args
    return generate_scene(dataclasses.replace(cfg, seed=derive_seed(cfg.seed, i)))


def generate_dataset(cfg: SceneConfig, count: int, workers: int = 1) -> List[TwoViewScene]:
    """``count`` scenes; scene ``i`` uses ``derive_seed(cfg.seed, i)``."""
    jobs = [(cfg, i) for i in range(count)]
    if workers <= 1:
        return [_generate_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_generate_indexed, jobs, chunksize=max(1, count // (4 * workers))))


def label_inliers(scene: TwoViewScene, threshold: float) -> np.ndarray:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return symmetric_epipolar_distance(scene.correspondences, scene.essential) < threshold


def select_pretrain_inliers(scene: TwoViewScene, threshold: float = PRETRAIN_THRESHOLD) -> CorrespondenceSet:
    """The correspondences whose residual under the true E is below ``threshold``."""
    mask = label_inliers(scene, threshold)
    if mask.sum() < 8:
        raise TooFewInliers(f"only {int(mask.sum())} correspondences pass the threshold")
    return CorrespondenceSet(scene.correspondences[mask], np.ones(int(mask.sum()), dtype=bool))


def pretrain_corpus(scenes: Sequence[TwoViewScene], threshold: float = PRETRAIN_THRESHOLD) -> List[np.ndarray]:
    """Inlier arrays of every scene with at least 8 inliers."""
    out = []
    for s in scenes:
        try:
            out.append(select_pretrain_inliers(s, threshold).points)
        except TooFewInliers:
            continue
    return out


def _encode_payload(scenes: Sequence[TwoViewScene], dtype: str) -> bytes:
    buf = io.BytesIO()
    for s in scenes:
        n = len(s.correspondences)
        buf.write(np.uint32(n).astype("<u4").tobytes())
        buf.write(np.asarray(s.pose.as_vector(), dtype=dtype).tobytes())
        buf.write(np.asarray(s.correspondences, dtype=dtype).tobytes())
        buf.write(np.asarray(s.inlier_mask, dtype=np.uint8).tobytes())
    return buf.getvalue()


def write_dataset(scenes: Sequence[TwoViewScene], path, config: dict = None, dtype: str = "<f8") -> None:
    """Write scenes; ``dtype="<f4"`` halves the size but is not lossless."""
    if dtype not in ("<f8", "<f4"):
        raise ValueError("dtype must be '<f8' or '<f4'")
    payload = _encode_payload(scenes, dtype)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "scene_count": len(scenes),
        "dtype": dtype,
        "config": config or {},
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(payload)
    except OSError as e:
        raise DatasetIOError(str(e)) from e


def read_header(path) -> Tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetIOError(str(e)) from e
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatVersionMismatch("missing dataset header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatVersionMismatch(f"unreadable dataset header: {e}") from e
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FormatVersionMismatch("not a corrmae dataset file")
    if header.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"dataset version {header.get('version')} != {FORMAT_VERSION}")
    return header, raw[nl + 1 :]


def read_dataset(path) -> List[TwoViewScene]:
    header, payload = read_header(path)
    if header.get("checksum") != "sha256:" + hashlib.sha256(payload).hexdigest():
        raise ChecksumMismatch("payload checksum does not match header")
    dtype = np.dtype(header.get("dtype", "<f8"))
    fsize = dtype.itemsize
    scenes = []
    off = 0
    try:
        for _ in range(int(header["scene_count"])):
            n = int(np.frombuffer(payload, "<u4", 1, off)[0])
            off += 4
            pose = np.frombuffer(payload, dtype, 12, off).astype(np.float64)
            off += 12 * fsize
            corrs = np.frombuffer(payload, dtype, 4 * n, off).astype(np.float64).reshape(n, 4)
            off += 4 * n * fsize
            mask = np.frombuffer(payload, np.uint8, n, off).astype(bool)
            off += n
            p = CameraPose.from_vector(pose)
            scenes.append(TwoViewScene(p, essential_from_pose(p), corrs.copy(), mask.copy()))
    except (ValueError, KeyError, IndexError) as e:
        raise ChecksumMismatch(f"payload does not match header: {e}") from e
    if off != len(payload):
        raise ChecksumMismatch("trailing bytes after the declared scenes")
    return scenes


def raw_payload_bytes(scenes: Sequence[TwoViewScene], itemsize: int = 8) -> int:
    """Bytes of pose + correspondence + mask data, without framing."""
    return sum(12 * itemsize + len(s) * (4 * itemsize + 1) for s in scenes)


def file_size(path) -> int:
    return os.path.getsize(path)
