import numpy as np
import pytest

from rgcaware.optim import Adadelta, AdadeltaState, adadelta_step


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adadelta_step(AdadeltaState(), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_first_step_hand_value():
    p = {"w": np.array([0.0])}
    s = AdadeltaState(rho=0.95, eps=1e-6)
    adadelta_step(s, p, {"w": np.array([1.0])})
    assert s.sq_grad["w"][0] == pytest.approx(0.05)
    expected = -np.sqrt(1e-6) / np.sqrt(0.05 + 1e-6)
    assert p["w"][0] == pytest.approx(expected, rel=1e-12)
    # the quoted -0.004471 truncates -0.0044721
    assert abs(p["w"][0] - (-0.004471)) < 2e-6
    assert s.sq_update["w"][0] == pytest.approx(0.05 * expected**2)


def test_matches_reference_loop(rng):
    rho, eps, lr = 0.9, 1e-4, 0.5
    grads = [rng.normal(size=3) for _ in range(6)]
    x, eg, ed = np.zeros(3), np.zeros(3), np.zeros(3)
    for g in grads:
        eg = rho * eg + (1 - rho) * g**2
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed = rho * ed + (1 - rho) * dx**2
        x = x + lr * dx
    opt, p = Adadelta(rho, eps, lr), {"w": np.zeros(3)}
    for g in grads:
        opt.step(p, {"w": g})
    np.testing.assert_allclose(p["w"], x, rtol=1e-13)


def test_non_finite_gradient_rejected_without_mutation():
    p = {"a": np.ones(2), "b": np.ones(2)}
    s = AdadeltaState()
    with pytest.raises(FloatingPointError):
        adadelta_step(s, p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    assert np.array_equal(p["a"], np.ones(2)) and s.steps == 0 and not s.sq_grad


def test_rho_validated():
    with pytest.raises(ValueError):
        AdadeltaState(rho=1.0)


def test_deterministic_trajectories(rng):
    grads = [rng.normal(size=(2, 2)) for _ in range(5)]
    runs = []
    for _ in range(2):
        opt, p = Adadelta(), {"w": np.ones((2, 2))}
        for g in grads:
            opt.step(p, {"w": g})
        runs.append(p["w"].copy())
    assert np.array_equal(runs[0], runs[1])


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_update_ratio_scale_free_without_eps(rng, c):
    # with eps = 0 and nonzero history, scaling every gradient by c leaves the updates unchanged
    eg0, ed0 = rng.uniform(0.1, 1, 4), rng.uniform(0.1, 1, 4)
    grads = [rng.normal(size=4) for _ in range(8)]
    outs = []
    for scale in (1.0, c):
        s = AdadeltaState(eps=0.0, sq_grad={"w": eg0 * scale**2}, sq_update={"w": ed0.copy()})
        p = {"w": np.zeros(4)}
        for g in grads:
            adadelta_step(s, p, {"w": scale * g})
        outs.append(p["w"])
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10)
