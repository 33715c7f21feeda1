import pytest
import torch

from corrmae.corrformer import CorrFormerBlock, CorrFormerEncoder, EncoderConfig, encode
from corrmae.errors import ConfigError, EmptyInput, ShapeMismatch
from corrmae.nn_core import grad_check

D = torch.float64


def small_encoder(**kw):
    torch.manual_seed(0)
    cfg = EncoderConfig(**{"blocks": 2, "channels": 16, "k": 4, "heads": 4, **kw})
    return CorrFormerEncoder(cfg).double()


def corrs(n, B=None, seed=0):
    shape = (n, 4) if B is None else (B, n, 4)
    return torch.rand(*shape, dtype=D, generator=torch.Generator().manual_seed(seed)) * 2 - 1


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.blocks, cfg.channels) == (2, 128)
        assert len(CorrFormerEncoder(cfg).blocks) == 2

    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(blocks=0)

    def test_collects_all_problems(self):
        with pytest.raises(ConfigError) as e:
            EncoderConfig(blocks=0, channels=10, heads=4, levels="neither")
        assert len(e.value.problems) == 3


class TestEmbedding:
    def test_single_correspondence(self):
        enc = CorrFormerEncoder()
        assert enc.embed_correspondences(torch.rand(1, 4)).shape == (1, 128)

    def test_row_wise_oracle(self):
        enc = small_encoder()
        x = corrs(7)
        rows = torch.stack([enc.embed(x[i]) for i in range(7)])
        torch.testing.assert_close(enc.embed_correspondences(x), rows)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            small_encoder().embed_correspondences(torch.zeros(0, 4, dtype=D))

    def test_not_quads(self):
        with pytest.raises(ShapeMismatch):
            small_encoder()(torch.zeros(5, 3, dtype=D))


class TestBlock:
    def test_shape(self):
        block = CorrFormerBlock(16, 4, 4).double()
        assert block(torch.randn(3, 11, 16, dtype=D)).shape == (3, 11, 16)

    def test_permutation_equivariance(self):
        block = CorrFormerBlock(16, 4, 4).double()
        t = torch.randn(1, 12, 16, dtype=D)
        for s in range(5):
            perm = torch.randperm(12, generator=torch.Generator().manual_seed(s))
            torch.testing.assert_close(block(t)[:, perm], block(t[:, perm]), atol=1e-5, rtol=0)

    def test_levels_share_input(self):
        block = CorrFormerBlock(16, 4, 4).double()
        seen = {}
        hooks = [
            block.gnn.register_forward_hook(lambda m, a, o: seen.update(gnn_in=a[0], gnn_out=o)),
            block.local.register_forward_hook(lambda m, a, o: seen.update(local_in=a[0], local_out=o)),
            block.global_.register_forward_hook(lambda m, a, o: seen.update(global_in=a[0], global_out=o)),
        ]
        t = torch.randn(2, 10, 16, dtype=D)
        out = block(t)
        for h in hooks:
            h.remove()
        assert seen["gnn_in"] is t and seen["global_in"] is t
        assert seen["local_in"] is seen["gnn_out"]
        torch.testing.assert_close(out, seen["local_out"] + seen["global_out"])

    @pytest.mark.parametrize("levels,live", [("local", "local"), ("global", "global_")])
    def test_single_level_ablation(self, levels, live):
        torch.manual_seed(0)
        block = CorrFormerBlock(16, 4, 4, levels=levels).double()
        t = torch.randn(1, 9, 16, dtype=D)
        ref = block.local(block.gnn(t, block.neighbors(t))) if live == "local" else block.global_(t)
        torch.testing.assert_close(block(t), ref)

    def test_single_token(self):
        block = CorrFormerBlock(16, 4, 4).double()
        assert torch.isfinite(block(torch.randn(1, 1, 16, dtype=D))).all()

    def test_grad(self):
        block = CorrFormerBlock(8, 3, 2).double()
        t = torch.randn(1, 8, 8, dtype=D, generator=torch.Generator().manual_seed(3)).requires_grad_(True)
        nbrs = block.neighbors(t)
        res = grad_check(
            lambda: block(t),
            [t, *block.parameters()],
            max_coords=24,
            nondiff_probe=lambda: block.gnn.has_max_tie(t, nbrs),
        )
        # the kNN graph is piecewise constant; small steps keep it fixed
        assert torch.equal(block.neighbors(t), nbrs)
        assert res.passed(1e-4)


class TestEncoder:
    def test_permutation_equivariance(self):
        enc = small_encoder()
        x = corrs(30)
        perm = torch.randperm(30, generator=torch.Generator().manual_seed(0))
        torch.testing.assert_close(encode(enc, x)[perm], encode(enc, x[perm]), atol=1e-5, rtol=0)

    def test_translation_sensitive(self):
        enc = small_encoder()
        x = corrs(20)
        assert (enc(x) - enc(x + 0.1)).abs().max() >= 1e-6

    def test_batched_matches_single(self):
        enc = small_encoder()
        x = corrs(15, B=3)
        torch.testing.assert_close(enc(x)[1], enc(x[1]))

    def test_no_dead_parameters(self):
        enc = small_encoder()
        x = corrs(25)
        proj = torch.randn(25, 16, dtype=D, generator=torch.Generator().manual_seed(9))
        params = dict(enc.named_parameters())
        grads = torch.autograd.grad((enc(x) * proj).sum(), list(params.values()))
        dead = [name for name, g in zip(params, grads) if g.abs().max() == 0]
        assert dead == []

    def test_single_parameter_perturbation_changes_output(self):
        enc = small_encoder()
        x = corrs(25)
        base = enc(x).detach()
        for name, p in enc.named_parameters():
            with torch.no_grad():
                p.add_(1e-3)
                changed = (enc(x) - base).abs().max().item()
                p.sub_(1e-3)
            assert changed > 0, name
