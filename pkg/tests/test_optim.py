import numpy as np
import pytest

from amgformer.errors import NumericError, ParameterError
from amgformer.optim import Adam, clip_global_norm
from amgformer.tape import Param

from oracles import adam_scalar


def params_with_grads(grads):
    ps = []
    for i, g in enumerate(grads):
        p = Param(np.zeros_like(g), f"p{i}")
        p.grad = g.copy()
        ps.append(p)
    return ps


class TestClip:
    def test_under_limit_untouched(self):
        g = np.array([0.3, -0.4])
        (p,) = params_with_grads([g])
        norm = clip_global_norm([p], 5.0)
        assert norm == pytest.approx(0.5)
        assert np.array_equal(p.grad, g)

    def test_over_limit_rescaled_globally(self):
        ps = params_with_grads([np.array([3.0, 4.0]), np.array([12.0])])
        norm = clip_global_norm(ps, 5.0)
        assert norm == pytest.approx(13.0)
        clipped = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in ps))
        assert clipped == pytest.approx(5.0, rel=1e-12)
        # direction preserved
        assert np.allclose(ps[0].grad / ps[1].grad[0], np.array([3.0, 4.0]) / 12.0)

    def test_missing_grads_skipped(self):
        p = Param(np.zeros(3), "p")
        assert clip_global_norm([p], 1.0) == 0.0

    def test_bad_limit(self):
        with pytest.raises(ParameterError):
            clip_global_norm([], 0.0)

    def test_nonfinite_norm(self):
        (p,) = params_with_grads([np.array([np.inf])])
        with pytest.raises(NumericError):
            clip_global_norm([p], 1.0)


class TestAdam:
    def test_zero_grad_no_move(self):
        p = Param(np.array([1.0, -2.0]), "p")
        opt = Adam([p])
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Param(np.zeros(3, dtype=np.float64), "p")
        opt = Adam([p], lr=1e-3)
        p.grad = np.array([0.7, -2.5, 31.0])
        opt.step()
        # first step: mhat = g, vhat = g^2, so the move is lr*sign(g) up to eps
        assert np.allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)

    def test_trajectory_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(5, 3))
        theta0 = rng.normal(size=3)
        p = Param(theta0.copy(), "p")
        opt = Adam([p], lr=2e-4)
        for g in grads:
            p.grad = g.copy()
            opt.step()
        for j in range(3):
            want = adam_scalar(theta0[j], grads[:, j], 2e-4, 0.9, 0.999, 1e-8)
            assert abs(p.data[j] - want) <= 1e-7

    def test_state_is_per_parameter(self):
        a = Param(np.zeros(1), "a")
        b = Param(np.zeros(1), "b")
        opt = Adam([a, b], lr=1e-2)
        a.grad = np.array([1.0])
        b.grad = np.array([-1.0])
        opt.step()
        assert a.data[0] == pytest.approx(-b.data[0], rel=1e-12)

    def test_nonfinite_grad_names_param(self):
        p = Param(np.zeros(2), "enc.w")
        opt = Adam([p])
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NumericError, match="enc.w"):
            opt.step()

    def test_missing_grad_skipped(self):
        p = Param(np.ones(2), "p")
        opt = Adam([p])
        opt.step()
        assert np.array_equal(p.data, [1.0, 1.0])

    def test_zero_grad_clears(self):
        p = Param(np.zeros(2), "p")
        opt = Adam([p])
        p.grad[:] = 1.0
        opt.zero_grad()
        assert np.array_equal(p.grad, np.zeros(2))

    def test_bad_lr(self):
        with pytest.raises(ParameterError):
            Adam([Param(np.zeros(1), "p")], lr=0.0)

    def test_non_param_rejected(self):
        with pytest.raises(ParameterError):
            Adam([np.zeros(3)])

    def test_f32_params_stay_f32(self):
        p = Param(np.zeros(2, dtype=np.float32), "p")
        opt = Adam([p], lr=1e-3)
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert p.data.dtype == np.float32
