"""Fusion-block checks: alignment/integration/weight contracts, the
weighted-sum oracle, zero-contribution absorption, and non-negativity."""

import numpy as np
import pytest

from amgformer import ops
from amgformer.errors import ShapeError
from amgformer.gradcheck import grad_check, module_cases
from amgformer.qib import QibScale, fuse
from amgformer.tape import Param, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def block(rng):
    return QibScale(8, rng, np.float64)


def four(rng, shape=(1, 8, 4, 4, 4)):
    return [Tensor(rng.normal(size=shape)) for _ in range(4)]


class TestAlign:
    def test_shapes_preserved(self, block, rng):
        out = block.align(four(rng))
        assert [o.data.shape for o in out] == [(1, 8, 4, 4, 4)] * 4

    def test_outputs_nonnegative(self, block, rng):
        for o in block.align(four(rng)):
            assert (o.data >= 0).all()

    def test_matches_composed_ops(self, block, rng):
        # manual conv -> train-mode batch stats -> relu, straight numpy
        xs = four(rng)
        out = block.align(xs)
        for m in range(4):
            w = block.align_convs[m].w.data
            conv = np.einsum("oc,bcdhw->bodhw", w, xs[m].data)
            mean = conv.mean(axis=(0, 2, 3, 4), keepdims=True)
            var = conv.var(axis=(0, 2, 3, 4), keepdims=True)
            want = np.maximum((conv - mean) / np.sqrt(var + 1e-5), 0)
            np.testing.assert_allclose(out[m].data, want, atol=1e-10)

    def test_independent_parameters_per_modality(self, block):
        ws = [block.align_convs[m].w.data for m in range(4)]
        for m in range(1, 4):
            assert not np.array_equal(ws[0], ws[m])

    def test_shape_disagreement_raises(self, block, rng):
        xs = four(rng)
        xs[2] = Tensor(rng.normal(size=(1, 8, 4, 4, 2)))
        with pytest.raises(ShapeError):
            block.align(xs)
        with pytest.raises(ShapeError):
            block.align(xs[:3])


class TestSimAndWeights:
    def test_sim_shape(self, block, rng):
        out = block.sim_integrate(block.align(four(rng)))
        assert out.data.shape == (1, 8, 4, 4, 4)

    def test_weights_shape_and_nonnegative(self, block, rng):
        w = block.safc_weights(block.sim_integrate(block.align(four(rng))))
        assert w.data.shape == (1, 4, 4, 4, 4)
        assert (w.data >= 0).all()

    def test_weights_not_normalized_across_modalities(self, block, rng):
        # counterexample requirement: some voxel's modality-sum differs from 1
        w = block.safc_weights(block.sim_integrate(block.align(four(rng)))).data
        sums = w.sum(axis=1)
        assert np.abs(sums - 1.0).max() > 1e-3

    def test_weights_vary_spatially(self, block, rng):
        w = block.safc_weights(block.sim_integrate(block.align(four(rng)))).data
        assert np.ptp(w) > 1e-6


class TestFuse:
    def test_matches_sum_loop_oracle(self, rng):
        aligned = four(rng)
        w = Tensor(rng.uniform(0, 2, size=(1, 4, 4, 4, 4)))
        got = fuse(aligned, w).data
        want = np.zeros_like(aligned[0].data)
        for m in range(4):
            want += w.data[:, m:m + 1] * aligned[m].data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_onehot_weights_select_one_modality(self, rng):
        aligned = four(rng)
        w = np.zeros((1, 4, 4, 4, 4))
        w[:, 2] = 1.0
        got = fuse(aligned, Tensor(w)).data
        np.testing.assert_array_equal(got, aligned[2].data)

    def test_zeroed_modality_contributes_exactly_nothing(self, rng):
        aligned = four(rng)
        w = Tensor(rng.uniform(0, 2, size=(1, 4, 4, 4, 4)))
        zeroed = list(aligned)
        zeroed[1] = Tensor(np.zeros_like(aligned[1].data))
        got = fuse(zeroed, w).data
        wm = w.data
        want = wm[:, 0:1] * aligned[0].data
        want = want + wm[:, 2:3] * aligned[2].data
        want = want + wm[:, 3:4] * aligned[3].data
        np.testing.assert_array_equal(got, want)

    def test_weight_shape_mismatch(self, rng):
        aligned = four(rng)
        with pytest.raises(ShapeError):
            fuse(aligned, Tensor(np.zeros((1, 3, 4, 4, 4))))


class TestForward:
    def test_forward_returns_fused_and_weights(self, block, rng):
        fused, w = block(four(rng))
        assert fused.data.shape == (1, 8, 4, 4, 4)
        assert w.data.shape == (1, 4, 4, 4, 4)

    def test_hard_mask_zeroes_absent_weight_maps(self, rng):
        blk = QibScale(8, rng, np.float64, hard_mask=True)
        _, w = blk(four(rng), mask=(True, False, True, False))
        assert (w.data[:, 1] == 0).all()
        assert (w.data[:, 3] == 0).all()
        assert w.data[:, 0].max() > 0

    def test_soft_default_ignores_mask(self, block, rng):
        xs = four(rng)
        _, w1 = block(xs, mask=(True, False, True, True))
        _, w2 = block(xs)
        np.testing.assert_array_equal(w1.data, w2.data)

    def test_grad_check(self):
        rep = grad_check(module_cases()["module:qib"], seeds=5, tol=1e-5,
                         h=1e-5, dtype=np.float64)
        assert rep.passed, rep.summary()
