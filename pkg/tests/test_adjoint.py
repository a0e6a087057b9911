import numpy as np
import pytest

from dcvar import adjoint
from dcvar.adjoint import (
    adjoint_state, directional_check, fd_gradient_check, grad_dc, grad_dcwme, grad_standard,
)
from dcvar.cost import WindowProblem, evaluate, make_window
from dcvar.cov import isotropic
from dcvar.dynamics import lorenz63, lorenz96, propagate
from dcvar.observation import ObservationSet, alternating, full, generate_twin_data, schedule
from dcvar.rng import stream

from linear_problems import linear_window


def nonlinear_window(model, op, window, every, variant, sigma=1.0, alpha=4.0, seed=0):
    rng = stream(seed, "test")
    zt = propagate(model, rng.standard_normal(model.dim) + (1.0 if model.dim == 3 else 8.0),
                   800).last
    _, obs = generate_twin_data(model, zt, schedule(window, every), op, sigma, rng, steps=window)
    zb = zt + np.sqrt(alpha) * rng.standard_normal(model.dim)
    p = make_window(model, zb, isotropic(alpha, model.dim), obs, variant, steps=window)
    z0 = zt + 0.5 * rng.standard_normal(model.dim)
    return p, z0


def costfn(p):
    return lambda z: evaluate(p, z)


VARIANTS = ["standard", "dc", "dc_wme"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_l63_window10_every2(variant):
    p, z0 = nonlinear_window(lorenz63(), full(3), 10, 2, variant)
    rep = fd_gradient_check(costfn(p), z0, grad=adjoint.gradient(p, z0).gradient)
    assert rep.max_rel_error < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_l96_k12_window20_every4(variant):
    p, z0 = nonlinear_window(lorenz96(12), alternating(12), 20, 4, variant, sigma=1.2)
    rep = fd_gradient_check(costfn(p), z0, grad=adjoint.gradient(p, z0).gradient)
    assert rep.max_rel_error < 1e-5


def test_dc_l96_k8():
    p, z0 = nonlinear_window(lorenz96(8), full(8), 12, 3, "dc")
    rep = fd_gradient_check(costfn(p), z0, grad=grad_dc(p, z0).gradient)
    assert rep.max_rel_error < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_linear_models_machine_precision(variant):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p, _ = linear_window(rng, variant, times=(1, 2, 3))
        z = rng.standard_normal(4)
        rep = fd_gradient_check(costfn(p), z, grad=adjoint.gradient(p, z).gradient)
        assert rep.max_rel_error < 1e-9


@pytest.mark.parametrize("variant", ["dc", "dc_wme"])
def test_directional_sign_convention(variant):
    p, z0 = nonlinear_window(lorenz63(), full(3), 10, 2, variant)
    g = adjoint.gradient(p, z0).gradient
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.standard_normal(3)
        assert directional_check(costfn(p), z0, g, d, eps=1e-5) < 1e-5


class TestSpecialCases:
    def test_no_obs_gradient(self):
        m = lorenz63()
        obs = ObservationSet([], np.zeros((0, 3)), full(3), 1.0)
        p = WindowProblem(m, np.zeros(3), isotropic(2.0, 3), obs, steps=4)
        z = np.array([1.0, -2.0, 4.0])
        np.testing.assert_allclose(grad_standard(p, z).gradient, z / 2.0)

    def test_exact_obs_at_background_zero_gradient(self):
        m = lorenz96(8)
        zb = propagate(m, 8 + 0.1 * np.arange(8), 300).last
        _, clean = generate_twin_data(m, zb, [3, 6], alternating(8), 0.0)
        obs = ObservationSet(clean.times, clean.values, alternating(8), 1.0)
        for variant in ("dc", "dc_wme"):
            p = make_window(m, zb, isotropic(4.0, 8), obs, variant)
            np.testing.assert_allclose(adjoint.gradient(p, zb).gradient, 0.0, atol=1e-12)

    def test_standard_minimizer_zero_gradient(self):
        rng = np.random.default_rng(2)
        p, A = linear_window(rng, "standard", times=(2,))
        Q = np.linalg.matrix_power(A, 2)
        Binv, Rinv = p.B.precision, p.R.precision
        z = np.linalg.solve(Binv + Q.T @ Rinv @ Q, Binv @ p.zb + Q.T @ Rinv @ p.obs.values[0])
        assert np.linalg.norm(grad_standard(p, z).gradient) < 1e-8

    def test_dc_zero_precision_equals_standard(self):
        rng = np.random.default_rng(3)
        p, _ = linear_window(rng, "standard", times=(1, 3))
        huge = [isotropic(1e300, p.obs.operator.out_dim)] * 2
        q = WindowProblem(p.model, p.zb, p.B, p.obs, "dc", huge, p.R)
        z = rng.standard_normal(4)
        np.testing.assert_allclose(grad_dc(q, z).gradient, grad_standard(p, z).gradient,
                                   rtol=1e-12)

    def test_wme_zero_precision(self):
        # L_wme^{-1} = 0: gradient of 1/2||Q_wme||^2 + background only
        rng = np.random.default_rng(4)
        p, A = linear_window(rng, "dc_wme", times=(1, 2))
        q = WindowProblem(p.model, p.zb, p.B, p.obs, "dc_wme",
                          isotropic(1e300, p.obs.operator.out_dim), p.R)
        z = rng.standard_normal(4)
        s = 1 / p.obs.noise_std
        J = s * (A + A @ A) / np.sqrt(2)
        w = s * ((A @ z) + (A @ A @ z) - p.obs.values.sum(0)) / np.sqrt(2)
        expect = p.B.precision @ (z - p.zb) + J.T @ w
        np.testing.assert_allclose(grad_dcwme(q, z).gradient, expect, rtol=1e-10)

    def test_cross_variant_single_observation(self):
        # one observation time: WME with L^{-1}=0 is standard 4D-Var (N = 1)
        rng = np.random.default_rng(5)
        p, _ = linear_window(rng, "standard", times=(2,))
        d = p.obs.operator.out_dim
        q = WindowProblem(p.model, p.zb, p.B, p.obs, "dc_wme", isotropic(1e300, d), p.R)
        r = WindowProblem(p.model, p.zb, p.B, p.obs, "dc", [isotropic(1e300, d)], p.R)
        z = rng.standard_normal(4)
        g = grad_standard(p, z).gradient
        np.testing.assert_allclose(grad_dcwme(q, z).gradient, g, rtol=1e-10)
        np.testing.assert_allclose(grad_dc(r, z).gradient, g, rtol=1e-10)

    def test_variant_guard(self):
        rng = np.random.default_rng(6)
        p, _ = linear_window(rng, "standard")
        with pytest.raises(ValueError):
            grad_dc(p, p.zb)

    def test_blowup_gives_infinite(self):
        p, _ = nonlinear_window(lorenz96(8), full(8), 8, 4, "standard")
        ev = adjoint.gradient(p, 1e5 * np.arange(8.0))
        assert ev.value == np.inf and not ev.finite


@pytest.mark.parametrize("variant", VARIANTS)
def test_one_forward_one_backward(variant):
    p, z0 = nonlinear_window(lorenz96(12), alternating(12), 20, 4, variant)
    adjoint.gradient(p, z0)  # warm the cached background QoI
    c = p.model.counter
    c.reset()
    adjoint.gradient(p, z0)
    assert c.step == p.steps
    assert c.adjoint == int(p.obs.times.max())
    assert c.tangent == 0


def test_adjoint_state_shapes():
    p, z0 = nonlinear_window(lorenz63(), full(3), 10, 2, "dc")
    st_ = adjoint_state(p, z0)
    assert st_.lambdas.shape == (11, 3)
    np.testing.assert_allclose(p.B.apply_precision(z0 - p.zb) + st_.lambdas[0],
                               adjoint.gradient(p, z0).gradient)


class TestChecker:
    def test_quadratic_exact(self):
        f = lambda z: 0.5 * float(z @ z)
        z = np.array([1.0, -2.0, 3.0])
        rep = fd_gradient_check(f, z, (1e-5,), grad=z)
        assert rep.max_rel_error < 1e-9
        assert rep.passed(1e-9)

    def test_broken_gradient_detected(self):
        f = lambda z: 0.5 * float(z @ z)
        z = np.array([1.0, -2.0, 3.0])
        rep = fd_gradient_check(f, z, grad=2 * z)
        assert rep.max_rel_error == pytest.approx(1.0, rel=1e-6)
        assert not rep.passed(1e-5)

    def test_nan_flag(self):
        f = lambda z: float("nan") if z[0] > 1.00001 else 0.5 * float(z @ z)
        rep = fd_gradient_check(f, np.array([1.0]), (1e-4, 1e-6), grad=np.array([1.0]))
        assert rep.nan_flag
        assert rep.best_eps == 1e-6

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            fd_gradient_check(lambda z: 0.0, np.zeros(1), ())
        with pytest.raises(ValueError):
            fd_gradient_check(lambda z: 0.0, np.zeros(1), (0.0,))
