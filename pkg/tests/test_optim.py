import numpy as np
import pytest

from neuralvar import optim
from neuralvar.autodiff import ParameterSet, Tensor
from neuralvar.models import FcnConfig, fcn_init, loss_and_grads, save_checkpoint, load_checkpoint
from neuralvar.optim import (
    AdamState,
    ConfigError,
    ContractViolation,
    NoiseSpec,
    NvrmState,
    SgdState,
    StateError,
    adam_step,
    nvrm_checkpoint_arrays,
    nvrm_finalize,
    nvrm_restore_eps,
    nvrm_step,
    psgd_step,
    sample_noise,
    sgd_step,
    with_clean_weights,
)


def small_problem(seed=0, widths=(5, 8, 8, 3), n=16):
    cfg = FcnConfig(widths)
    rng = np.random.default_rng(seed)
    params = fcn_init(cfg, np.random.default_rng(seed + 1))
    x = rng.normal(size=(n, widths[0]))
    y = rng.integers(0, widths[-1], size=n)
    return cfg, params, x, y


# ---------------------------------------------------------------------------
# noise sampling


def test_noise_spec_validation():
    with pytest.raises(ConfigError):
        NoiseSpec("gaussian", -0.1)
    with pytest.raises(ConfigError):
        NoiseSpec("cauchy", 0.1)


def test_zero_scale_noise_is_exact_zeros():
    rng = np.random.default_rng(0)
    for family in ("gaussian", "laplace", "uniform"):
        eps = sample_noise(NoiseSpec(family, 0.0), {"a": (10, 10)}, rng)
        assert np.array_equal(eps["a"], np.zeros((10, 10)))


def test_gaussian_noise_moments():
    rng = np.random.default_rng(1)
    eps = sample_noise(NoiseSpec("gaussian", 0.05), {"a": (1_000_000,)}, rng)["a"]
    assert abs(eps.std() - 0.05) < 0.0005  # within 1%
    assert abs(eps.mean()) < 3 * 0.05 / 1000


def test_uniform_noise_bounds_and_variance():
    rng = np.random.default_rng(2)
    b = 0.1
    eps = sample_noise(NoiseSpec("uniform", b), {"a": (1_000_000,)}, rng)["a"]
    assert eps.min() >= -b and eps.max() <= b
    assert abs(eps.var() - b**2 / 3) < 0.02 * b**2 / 3


def test_laplace_noise_variance():
    rng = np.random.default_rng(3)
    b = 0.07
    eps = sample_noise(NoiseSpec("laplace", b), {"a": (1_000_000,)}, rng)["a"]
    assert abs(eps.var() - 2 * b**2) < 0.03 * 2 * b**2


def test_noise_deterministic_under_seed():
    e1 = sample_noise(NoiseSpec("gaussian", 0.1), {"a": (50,)}, np.random.default_rng(7))
    e2 = sample_noise(NoiseSpec("gaussian", 0.1), {"a": (50,)}, np.random.default_rng(7))
    assert np.array_equal(e1["a"], e2["a"])


# ---------------------------------------------------------------------------
# sgd / adam


def test_plain_sgd_update():
    p = ParameterSet({"w": Tensor(np.array([1.0, 2.0]))})
    sgd_step(SgdState(lr=0.5), p, {"w": np.array([0.2, -0.4])})
    np.testing.assert_allclose(p["w"].data, [0.9, 2.2], atol=1e-15)


def test_sgd_zero_grad_zero_velocity_is_noop():
    p = ParameterSet({"w": Tensor(np.array([1.0, -1.0]))})
    sgd_step(SgdState(lr=0.5, momentum=0.9), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -1.0])


def test_sgd_momentum_two_step_recursion():
    g1, g2, mu, lr = 0.3, -0.1, 0.9, 0.01
    p = ParameterSet({"w": Tensor(np.array([1.0]))})
    state = SgdState(lr=lr, momentum=mu)
    sgd_step(state, p, {"w": np.array([g1])})
    sgd_step(state, p, {"w": np.array([g2])})
    v2 = mu * g1 + g2
    assert state.velocity["w"][0] == pytest.approx(v2, abs=1e-15)
    assert p["w"].data[0] == pytest.approx(1.0 - lr * g1 - lr * v2, abs=1e-15)


def test_sgd_missing_gradient_names_parameter():
    p = ParameterSet({"w": Tensor(np.ones(2)), "b": Tensor(np.ones(1))})
    state = SgdState(lr=0.1)
    sgd_step(state, p, {"w": np.zeros(2), "b": np.zeros(1)})
    with pytest.raises(ValueError, match="'b'"):
        sgd_step(state, p, {"w": np.zeros(2)})


def test_adam_first_step_magnitude():
    lr = 1e-3
    p = ParameterSet({"w": Tensor(np.array([0.0]))})
    adam_step(AdamState(lr=lr), p, {"w": np.array([0.37])})
    # at t=1 the bias-corrected update is lr * g/(|g| + eps') ~ lr * sign(g)
    assert abs(p["w"].data[0] + lr) < 1e-6 * lr + 1e-9


def test_adam_zero_gradient_noop():
    p = ParameterSet({"w": Tensor(np.array([2.0, -3.0]))})
    adam_step(AdamState(lr=1e-3), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [2.0, -3.0])


def test_adam_matches_independent_scalar_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta_ref = 1.3
    m = v = 0.0
    p = ParameterSet({"w": Tensor(np.array([1.3]))})
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    for t in range(1, 4):
        g = theta_ref  # quadratic loss 0.5 theta^2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta_ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        adam_step(state, p, {"w": p["w"].data.copy()})
        assert abs(p["w"].data[0] - theta_ref) < 1e-12


# ---------------------------------------------------------------------------
# nvrm


def test_nvrm_zero_noise_equals_inner_bitwise():
    for make_state, step in (
        (lambda: SgdState(lr=0.1, momentum=0.9, weight_decay=1e-4), sgd_step),
        (lambda: AdamState(lr=1e-3, weight_decay=1e-4), adam_step),
    ):
        cfg, p1, x, y = small_problem(0)
        _, p2, _, _ = small_problem(0)
        s1, s2 = make_state(), make_state()
        nv = NvrmState(s2, NoiseSpec("gaussian", 0.0), p2)
        rng = np.random.default_rng(9)
        for _ in range(30):
            _, g1 = loss_and_grads(p1, cfg, x, y)
            step(s1, p1, g1)
            _, g2 = loss_and_grads(p2, cfg, x, y)
            nvrm_step(nv, p2, g2, rng)
        nvrm_finalize(nv, p2)
        for n in p1.names:
            assert np.array_equal(p1[n].data, p2[n].data)


def test_nvrm_lr_zero_denoising_is_identity():
    cfg, params, x, y = small_problem(1)
    init = {n: t.data.copy() for n, t in params.items()}
    nv = NvrmState(SgdState(lr=0.0), NoiseSpec("gaussian", 0.05), params)
    rng = np.random.default_rng(10)
    for _ in range(200):
        _, grads = loss_and_grads(params, cfg, x, y)
        nvrm_step(nv, params, grads, rng)
    nvrm_finalize(nv, params)
    for n in init:
        assert np.array_equal(params[n].data, init[n])


def direct_nvrm_sgd(cfg, params, x, y, noise, lr, momentum, steps, rng):
    """Independent reference: perturb clean weights, take the gradient there,
    restore, update the clean weights."""
    vel = {n: np.zeros_like(params[n].data) for n in params.names}
    eps = {n: np.zeros_like(params[n].data) for n in params.names}
    for _ in range(steps):
        saved = {n: params[n].data for n in params.names}
        for n in params.names:
            params[n].data = saved[n] + eps[n]
        _, grads = loss_and_grads(params, cfg, x, y)
        for n in params.names:
            params[n].data = saved[n]
            vel[n] = momentum * vel[n] + grads[n]
            params[n].data = params[n].data - lr * vel[n]
        eps = sample_noise(noise, params.shapes(), rng)
    return params


def test_nvrm_clean_trajectory_matches_direct_form():
    cfg, p1, x, y = small_problem(2)
    _, p2, _, _ = small_problem(2)
    noise = NoiseSpec("gaussian", 0.05)
    nv = NvrmState(SgdState(lr=0.05, momentum=0.9), noise, p1)
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    for _ in range(100):
        _, grads = loss_and_grads(p1, cfg, x, y)
        nvrm_step(nv, p1, grads, r1)
    direct_nvrm_sgd(cfg, p2, x, y, noise, lr=0.05, momentum=0.9, steps=100, rng=r2)
    for n in p1.names:
        assert np.max(np.abs(nv.clean[n] - p2[n].data)) < 1e-10


def test_nvrm_finalize_shifts_by_current_perturbation():
    cfg, params, x, y = small_problem(3)
    nv = NvrmState(SgdState(lr=0.01), NoiseSpec("gaussian", 0.1), params)
    rng = np.random.default_rng(12)
    _, grads = loss_and_grads(params, cfg, x, y)
    nvrm_step(nv, params, grads, rng)
    eps1 = {n: nv.eps[n].copy() for n in nv.names}
    stored = {n: params[n].data.copy() for n in nv.names}
    nvrm_finalize(nv, params)
    assert not nv.perturbed
    for n in nv.names:
        # exact restore of the maintained clean weights; the subtraction form
        # only matches up to float rounding
        np.testing.assert_array_equal(params[n].data, nv.clean[n])
        np.testing.assert_allclose(params[n].data, stored[n] - eps1[n], atol=1e-12)
        assert np.array_equal(nv.eps[n], np.zeros_like(eps1[n]))


def test_nvrm_finalize_right_after_init_is_noop():
    cfg, params, _, _ = small_problem(4)
    init = {n: t.data.copy() for n, t in params.items()}
    nv = NvrmState(SgdState(lr=0.1), NoiseSpec("gaussian", 0.1), params)
    nvrm_finalize(nv, params)
    for n in init:
        assert np.array_equal(params[n].data, init[n])


def test_nvrm_double_finalize_and_step_after_finalize_raise():
    cfg, params, x, y = small_problem(5)
    nv = NvrmState(SgdState(lr=0.1), NoiseSpec("gaussian", 0.1), params)
    nvrm_finalize(nv, params)
    with pytest.raises(StateError):
        nvrm_finalize(nv, params)
    _, grads = loss_and_grads(params, cfg, x, y)
    with pytest.raises(StateError):
        nvrm_step(nv, params, grads, np.random.default_rng(0))


def test_with_clean_weights_matches_copy_and_restores_bitwise():
    cfg, params, x, y = small_problem(6)
    nv = NvrmState(SgdState(lr=0.05), NoiseSpec("gaussian", 0.08), params)
    rng = np.random.default_rng(13)
    for _ in range(5):
        _, grads = loss_and_grads(params, cfg, x, y)
        nvrm_step(nv, params, grads, rng)
    stored_before = {n: params[n].data for n in params.names}

    def eval_loss():
        loss, _ = loss_and_grads(params, cfg, x, y)
        return loss

    v1 = with_clean_weights(nv, params, eval_loss)
    v2 = with_clean_weights(nv, params, eval_loss)
    assert v1 == v2  # purity
    # copy oracle: evaluate on an explicit clean copy
    clean_copy = ParameterSet()
    for n in params.names:
        clean_copy.add(n, Tensor(params[n].data - nv.eps[n]))
    v3, _ = loss_and_grads(clean_copy, cfg, x, y)
    assert v1 == pytest.approx(v3, abs=1e-12)
    for n in params.names:
        assert params[n].data is stored_before[n]  # bit-identical restore


def test_with_clean_weights_detects_mutation():
    cfg, params, x, y = small_problem(7)
    nv = NvrmState(SgdState(lr=0.05), NoiseSpec("gaussian", 0.08), params)
    _, grads = loss_and_grads(params, cfg, x, y)
    nvrm_step(nv, params, grads, np.random.default_rng(0))

    def bad_eval():
        params[params.names[0]].data[0, 0] += 1.0
        return 0.0

    with pytest.raises(ContractViolation):
        with_clean_weights(nv, params, bad_eval)


def test_nvrm_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg, p1, x, y = small_problem(8)
    _, p2, _, _ = small_problem(8)
    noise = NoiseSpec("gaussian", 0.05)
    nv1 = NvrmState(SgdState(lr=0.05, momentum=0.9), noise, p1)
    nv2 = NvrmState(SgdState(lr=0.05, momentum=0.9), noise, p2)
    r1, r2 = np.random.default_rng(14), np.random.default_rng(14)
    for _ in range(10):
        _, g = loss_and_grads(p1, cfg, x, y)
        nvrm_step(nv1, p1, g, r1)
        _, g = loss_and_grads(p2, cfg, x, y)
        nvrm_step(nv2, p2, g, r2)

    # checkpoint nv2 and resume into a fresh state
    clean, extra = nvrm_checkpoint_arrays(nv2)
    ckpt = ParameterSet({n: Tensor(a.copy()) for n, a in clean.items()})
    path = tmp_path / "resume.ckpt"
    save_checkpoint(ckpt, path, extra=extra)
    entries = load_checkpoint(path)
    p3 = ParameterSet({n: Tensor(entries[n]) for n in p2.names})
    inner = SgdState(lr=0.05, momentum=0.9,
                     velocity={n: nv2.inner.velocity[n].copy() for n in p2.names},
                     names=list(nv2.inner.names))
    nv3 = NvrmState(inner, noise, p3)
    nvrm_restore_eps(nv3, p3, entries)
    for n in p1.names:
        assert np.array_equal(p3[n].data, p1[n].data)

    r1b, r3 = np.random.default_rng(15), np.random.default_rng(15)
    for _ in range(10):
        _, g = loss_and_grads(p1, cfg, x, y)
        nvrm_step(nv1, p1, g, r1b)
        _, g = loss_and_grads(p3, cfg, x, y)
        nvrm_step(nv3, p3, g, r3)
    nvrm_finalize(nv1, p1)
    nvrm_finalize(nv3, p3)
    for n in p1.names:
        np.testing.assert_allclose(p3[n].data, p1[n].data, atol=1e-12)


# ---------------------------------------------------------------------------
# psgd


def test_psgd_zero_noise_equals_sgd_bitwise():
    cfg, p1, x, y = small_problem(9)
    _, p2, _, _ = small_problem(9)
    s1, s2 = SgdState(lr=0.1, momentum=0.9), SgdState(lr=0.1, momentum=0.9)
    rng = np.random.default_rng(16)
    for _ in range(20):
        _, g1 = loss_and_grads(p1, cfg, x, y)
        sgd_step(s1, p1, g1)
        _, g2 = loss_and_grads(p2, cfg, x, y)
        psgd_step(s2, NoiseSpec("gaussian", 0.0), p2, g2, rng)
    for n in p1.names:
        assert np.array_equal(p1[n].data, p2[n].data)


def test_psgd_lr_zero_is_noop():
    p = ParameterSet({"w": Tensor(np.ones(10))})
    psgd_step(SgdState(lr=0.0), NoiseSpec("gaussian", 5.0), p,
              {"w": np.random.default_rng(0).normal(size=10)}, np.random.default_rng(1))
    np.testing.assert_array_equal(p["w"].data, np.ones(10))


def test_psgd_requires_gaussian():
    p = ParameterSet({"w": Tensor(np.ones(3))})
    with pytest.raises(ConfigError):
        psgd_step(SgdState(lr=0.1), NoiseSpec("uniform", 0.1), p,
                  {"w": np.zeros(3)}, np.random.default_rng(0))


def test_psgd_zero_gradient_step_statistics():
    b, lr = 0.2, 0.05
    rng = np.random.default_rng(17)
    deltas = []
    for _ in range(200):
        p = ParameterSet({"w": Tensor(np.zeros(50))})
        psgd_step(SgdState(lr=lr), NoiseSpec("gaussian", b), p, {"w": np.zeros(50)}, rng)
        deltas.append(p["w"].data / -lr)
    flat = np.concatenate(deltas)
    assert abs(flat.std() - b) < 0.02 * b


def test_psgd_retains_noise_nvrm_does_not():
    cfg, p_ref, x, y = small_problem(10)
    _, p_psgd, _, _ = small_problem(10)
    _, p_nvrm, _, _ = small_problem(10)
    rng_p, rng_n = np.random.default_rng(18), np.random.default_rng(18)
    s_ref, s_psgd = SgdState(lr=0.05), SgdState(lr=0.05)
    nv = NvrmState(SgdState(lr=0.05), NoiseSpec("gaussian", 0.05), p_nvrm)
    for _ in range(20):
        _, g = loss_and_grads(p_ref, cfg, x, y)
        sgd_step(s_ref, p_ref, g)
        _, g = loss_and_grads(p_psgd, cfg, x, y)
        psgd_step(s_psgd, NoiseSpec("gaussian", 0.05), p_psgd, g, rng_p)
        _, g = loss_and_grads(p_nvrm, cfg, x, y)
        nvrm_step(nv, p_nvrm, g, rng_n)
    nvrm_finalize(nv, p_nvrm)
    # psgd weights differ from the noise-free run
    assert any(not np.allclose(p_psgd[n].data, p_ref[n].data) for n in p_ref.names)
    # nvrm holds no residual perturbation
    for n in nv.names:
        assert np.array_equal(nv.eps[n], np.zeros_like(nv.eps[n]))
