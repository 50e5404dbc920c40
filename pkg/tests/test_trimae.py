import numpy as np
import pytest
import torch

from foresee.errors import ShapeError, ValidationError
from foresee.numerics import RngStream, finite_difference_check, init_parameters
from foresee.trimae import (
    BRANCHES,
    MaskRatioError,
    MaskSpec,
    TriMAE,
    masked_mse,
    sample_mask,
    trimae_forward,
    trimae_loss,
)

from .conftest import randn

D = torch.float64


def micro(counts=(6, 6, 6), dim=4, ratio=0.85, seed=0, **kw):
    m = TriMAE(counts, dim=dim, heads=2, ratio=ratio, **kw).double()
    init_parameters(m, RngStream(seed, "init"))
    return m.eval()


def tokens_for(gen, counts, dim=4, batch=2):
    return [randn(gen, batch, n, dim) for n in counts]


class TestSampleMask:
    def test_count(self):
        spec = sample_mask(20, 0.85, "P", RngStream(0, "masking"))
        assert spec.n_masked == 17 and spec.visible().shape == (1, 3)

    def test_keeps_one_visible(self):
        # ceil(0.85 * 6) would hide all six tokens
        assert sample_mask(6, 0.85, "P", RngStream(0, "masking")).n_masked == 5

    def test_deterministic(self):
        a = sample_mask(50, 0.9, "R", RngStream(3, "masking"), batch=4)
        b = sample_mask(50, 0.9, "R", RngStream(3, "masking"), batch=4)
        assert np.array_equal(a.masked, b.masked)

    def test_rows_unique_sorted_in_range(self):
        spec = sample_mask(30, 0.8, "CM", RngStream(1, "masking"), batch=16)
        for row in spec.masked:
            assert len(set(row)) == len(row) == 24
            assert np.all(np.diff(row) > 0) and row.min() >= 0 and row.max() < 30

    def test_low_ratio_needs_override(self):
        with pytest.raises(MaskRatioError):
            sample_mask(20, 0.5, "P", RngStream(0, "masking"))
        assert sample_mask(20, 0.5, "P", RngStream(0, "masking"), allow_low_mask=True).n_masked == 10

    @pytest.mark.parametrize("n,ratio", [(1, 0.85), (10, 0.0), (10, 1.0), (10, 1.2)])
    def test_invalid(self, n, ratio):
        with pytest.raises(ValidationError):
            sample_mask(n, ratio, "P", RngStream(0, "masking"))

    def test_unknown_branch(self):
        with pytest.raises(ValidationError):
            sample_mask(10, 0.9, "X", RngStream(0, "masking"))

    def test_model_guard(self):
        with pytest.raises(MaskRatioError):
            TriMAE((6, 6, 6), dim=4, heads=2, ratio=0.5)
        TriMAE((6, 6, 6), dim=4, heads=2, ratio=0.5, allow_low_mask=True)


class TestMaskSpec:
    def test_visible_complements_masked(self):
        spec = sample_mask(12, 0.85, "P", RngStream(2, "masking"), batch=3)
        for b in range(3):
            assert sorted(spec.visible()[b].tolist() + spec.masked[b].tolist()) == list(range(12))
        assert spec.bool_mask().sum() == 3 * spec.n_masked

    def test_from_indices(self):
        spec = MaskSpec.from_indices("R", 5, [3, 1])
        assert spec.masked.tolist() == [[1, 3]] and spec.ratio == 0.4
        assert MaskSpec.from_indices("R", 5, np.zeros((2, 0), dtype=int)).n_masked == 0

    @pytest.mark.parametrize("idx", [[5], [-1], [1, 1]])
    def test_from_indices_invalid(self, idx):
        with pytest.raises(ValidationError):
            MaskSpec.from_indices("R", 5, idx)


class TestEncoder:
    def test_visible_length(self, gen):
        m = micro((10, 6, 6), ratio=0.8)
        spec = sample_mask(10, 0.8, "P", RngStream(0, "masking"), batch=2)
        assert spec.n_masked == 8
        assert m.encode_visible(randn(gen, 2, 10, 4), spec).shape == (2, 2, 4)

    def test_masked_values_do_not_matter(self, gen):
        m = micro((10, 6, 6))
        spec = sample_mask(10, 0.85, "P", RngStream(0, "masking"), batch=2)
        x = randn(gen, 2, 10, 4)
        y = x.clone()
        mask = torch.as_tensor(spec.bool_mask())
        y[mask] = randn(gen, int(mask.sum()), 4) * 100
        assert torch.equal(m.encode_visible(x, spec), m.encode_visible(y, spec))

    def test_all_masked(self, gen):
        m = micro()
        spec = MaskSpec.from_indices("P", 6, [0, 1, 2, 3, 4, 5])
        with pytest.raises(ValidationError):
            m.encode_visible(randn(gen, 1, 6, 4), spec)

    def test_length_mismatch(self, gen):
        m = micro()
        spec = sample_mask(8, 0.85, "P", RngStream(0, "masking"))
        with pytest.raises(ShapeError):
            m.encode_visible(randn(gen, 1, 6, 4), spec)

    def test_gradient(self, gen):
        m = micro()
        spec = sample_mask(6, 0.8, "P", RngStream(0, "masking"), batch=2)
        x = randn(gen, 2, 6, 4)
        w = randn(gen, 2, 1, 4)
        params = list(m.branches["P"].parameters())
        assert finite_difference_check(lambda: (m.encode_visible(x, spec) * w).sum(), params) <= 1e-4


class TestDecoder:
    def test_output_lengths(self, gen):
        counts = (9, 5, 7)
        m = micro(counts)
        toks = tokens_for(gen, counts)
        specs = m.sample_masks(counts, 2, RngStream(0, "masking"))
        out = m.reconstruct(toks, specs)
        assert [tuple(o.shape) for o in out] == [(2, n, 4) for n in counts]

    def test_zero_context_reduces_to_self_attention(self, gen):
        m = micro()
        branch = m.branches["P"]
        with torch.no_grad():
            branch.cross.v.bias.zero_()
            branch.cross.out.bias.zero_()
            branch.norm_kv.bias.zero_()
        seq = randn(gen, 2, 6, m.dec_dim)
        kv = torch.zeros(2, 12, m.dec_dim, dtype=D)
        assert torch.allclose(branch.decode(seq, kv), branch.decode(seq), atol=1e-15)

    def test_anchor_is_visible_mean_when_head_silent(self, gen):
        m = micro()
        for b in m.branches.values():
            with torch.no_grad():
                b.head.weight.zero_()
                b.head.bias.zero_()
        toks = tokens_for(gen, (6, 6, 6))
        specs = m.sample_masks((6, 6, 6), 2, RngStream(0, "masking"))
        for t, s, r in zip(toks, specs, m.reconstruct(toks, specs)):
            vis = torch.as_tensor(s.visible())
            mean = torch.stack([t[b, vis[b]].mean(dim=0) for b in range(2)])
            assert torch.allclose(r, mean[:, None, :].expand_as(r), atol=1e-15)

    def test_needs_three(self, gen):
        m = micro()
        with pytest.raises(ValidationError):
            m.decode_reconstruct([randn(gen, 1, 1, 4)], [])

    def test_end_to_end_gradient(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6), batch=1)
        specs = m.sample_masks((6, 6, 6), 1, RngStream(0, "masking"))
        ws = [randn(gen, 1, 6, 4) for _ in range(3)]
        loss = lambda: sum((r * w).sum() for r, w in zip(m.reconstruct(toks, specs), ws))
        assert finite_difference_check(loss, list(m.parameters()), coords_per_param=8) <= 1e-4

    def test_anchor_carries_no_gradient(self, gen):
        m = micro()
        for b in m.branches.values():
            with torch.no_grad():
                b.head.weight.zero_()
        toks = [t.requires_grad_() for t in tokens_for(gen, (6, 6, 6), batch=1)]
        specs = m.sample_masks((6, 6, 6), 1, RngStream(0, "masking"))
        sum(r.sum() for r in m.reconstruct(toks, specs)).backward()
        assert all(t.grad is None or torch.count_nonzero(t.grad) == 0 for t in toks)


class TestLoss:
    def specs(self, batch=2):
        return [sample_mask(6, 0.85, b, RngStream(i, "masking"), batch=batch) for i, b in enumerate(BRANCHES)]

    def test_perfect_reconstruction(self, gen):
        toks = tokens_for(gen, (6, 6, 6))
        assert trimae_loss(toks, toks, self.specs()).item() == 0.0

    def test_constant_offset(self, gen):
        toks = tokens_for(gen, (6, 6, 6))
        eps = 0.3
        assert abs(trimae_loss([t + eps for t in toks], toks, self.specs()).item() - eps**2) < 1e-15

    def test_visible_positions_ignored(self, gen):
        toks = tokens_for(gen, (6, 6, 6))
        specs = self.specs()
        recon = [t + 0.1 for t in toks]
        moved = []
        for r, s in zip(recon, specs):
            r = r.clone()
            r[~torch.as_tensor(s.bool_mask())] = 42.0
            moved.append(r)
        assert trimae_loss(recon, toks, specs).item() == trimae_loss(moved, toks, specs).item()

    def test_empty_mask(self, gen):
        spec = MaskSpec.from_indices("P", 6, np.zeros((1, 0), dtype=int))
        with pytest.raises(ValidationError):
            masked_mse(randn(gen, 1, 6, 4), randn(gen, 1, 6, 4), spec)

    def test_shape_mismatch(self, gen):
        spec = sample_mask(6, 0.85, "P", RngStream(0, "masking"))
        with pytest.raises(ShapeError):
            masked_mse(randn(gen, 1, 6, 4), randn(gen, 1, 6, 3), spec)


class TestForward:
    def test_disabled_is_passthrough(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6))
        out, loss = trimae_forward(toks, RngStream(0, "masking"), m, enabled=False)
        assert all(a is b for a, b in zip(out, toks)) and loss.item() == 0.0

    def test_deterministic(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6))
        _, a = trimae_forward(toks, RngStream(5, "masking"), m)
        _, b = trimae_forward(toks, RngStream(5, "masking"), m)
        assert a.item() == b.item()

    def test_refined_splices_reconstructions(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6))
        refined, _, specs = m(toks, rng=RngStream(1, "masking"))
        recon = m.reconstruct(toks, specs)
        for t, r, f, s in zip(toks, recon, refined, specs):
            mask = torch.as_tensor(s.bool_mask())
            assert torch.equal(f[~mask], t[~mask]) and torch.equal(f[mask], r[mask])

    def test_missing_positions_reconstructed(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6), batch=1)
        missing = [np.array([[1, 4]]), np.zeros((1, 0), dtype=int), np.zeros((1, 0), dtype=int)]
        refined, loss, specs = m(toks, missing=missing)
        assert torch.equal(refined[1], toks[1]) and torch.equal(refined[2], toks[2])
        assert not torch.equal(refined[0][0, [1, 4]], toks[0][0, [1, 4]])
        assert torch.equal(refined[0][0, [0, 2, 3, 5]], toks[0][0, [0, 2, 3, 5]])
        assert loss.item() > 0

    def test_nothing_missing_is_passthrough(self, gen):
        m = micro()
        toks = tokens_for(gen, (6, 6, 6), batch=1)
        empty = [np.zeros((1, 0), dtype=int)] * 3
        refined, loss, _ = m(toks, missing=empty)
        assert all(torch.equal(a, b) for a, b in zip(refined, toks)) and loss.item() == 0.0

    def test_training_needs_rng(self, gen):
        with pytest.raises(ValidationError):
            micro()(tokens_for(gen, (6, 6, 6)))
