import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import textured
from lyaflow.diffeo import TeacherTrajectory, random_smooth_svf
from lyaflow.losses import (
    LossError,
    LossWeights,
    PlaneSpec,
    guidance_field,
    loss_img,
    loss_lyap,
    loss_mse_distill,
    loss_rf,
    loss_total,
    lyapunov_energy,
    resection_weight,
)


def fd_check(fn, x, grad, rng, probes=10, h=1e-3):
    for _ in range(probes):
        u = rng.standard_normal(x.shape)
        u /= np.linalg.norm(u)
        fd = (fn(x + h * u) - fn(x - h * u)) / (2 * h)
        an = float(np.sum(grad * u))
        assert abs(fd - an) <= 1e-6 * max(abs(fd), abs(an), 1e-12)


@pytest.fixture
def teacher(rng):
    base = textured(rng, 8)
    return TeacherTrajectory(random_smooth_svf((8, 8, 8), 1.0, rng), base)


def test_rf_examples(rng):
    x_d5, x_y1 = textured(rng, 6), textured(rng, 6)
    value, grad = loss_rf(x_y1 - x_d5, x_d5, x_y1)
    assert value == 0.0 and not grad.any()
    assert loss_rf(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), np.full((4, 4, 4), 10.0))[0] == 100.0


def test_rf_gradient(rng):
    x_d5, x_y1, v = textured(rng, 6), textured(rng, 6), textured(rng, 6)
    fd_check(lambda p: loss_rf(p, x_d5, x_y1)[0], v, loss_rf(v, x_d5, x_y1)[1], rng)


def test_guidance_on_path_and_pure_feedback(rng, teacher):
    x_star, x_dot = teacher.state_and_tangent(0.4)
    assert np.array_equal(guidance_field(x_star, 0.4, teacher), x_dot)
    base = textured(rng, 6)
    still = TeacherTrajectory(np.zeros((3, 6, 6, 6)), base)
    assert np.allclose(guidance_field(base + 7.0, 0.3, still, alpha=2.0), -14.0)


@given(st.floats(0.0, 3.0), st.floats(0.0, 1.0))
def test_guidance_affine_in_state(alpha, t):
    rng = np.random.default_rng(0)
    base = textured(rng, 6)
    traj = TeacherTrajectory(random_smooth_svf((6, 6, 6), 1.0, rng), base)
    x = textured(rng, 6)
    delta = rng.standard_normal(x.shape)
    diff = guidance_field(x + delta, t, traj, alpha) - guidance_field(x, t, traj, alpha)
    assert np.allclose(diff, -alpha * delta, atol=1e-9)


def test_lyapunov_energy(teacher):
    x_star = teacher.state(0.5)
    assert lyapunov_energy(x_star, 0.5, teacher) == 0.0
    assert lyapunov_energy(x_star + 1.0, 0.5, teacher, alpha=1.0) == pytest.approx(x_star.size / 2)


def test_lyap_losses(rng, teacher):
    t = 0.6
    state = teacher.state_and_tangent(t)
    x_t = state[0] + 20.0 * rng.standard_normal(state[0].shape)
    g = guidance_field(x_t, t, teacher)
    assert loss_lyap(g, x_t, t, teacher)[0] == 0.0
    assert loss_lyap(state[1], state[0], t, teacher)[0] == 0.0
    v = textured(rng, 8)
    a = loss_lyap(v, x_t, t, teacher, alpha=0.0, state=state)
    b = loss_mse_distill(v, x_t, t, teacher, state=state)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert loss_lyap(v, x_t, t, teacher, state=state)[0] != b[0]
    fd_check(lambda p: loss_lyap(p, x_t, t, teacher, state=state)[0], v, loss_lyap(v, x_t, t, teacher, state=state)[1], rng)


def test_resection_weight_values():
    x = np.full((9, 9, 9), 800.0)
    x[:, :, 0] = 100.0
    rw = resection_weight(x, sigma=2.0, plane=PlaneSpec.axis_aligned(x.shape, 0, 4))
    assert rw.W.max() == 1.0 and rw.W[4, 4, 4] == 1.0
    assert not rw.W[:, :, 0].any()
    assert rw.W[6, 4, 4] == pytest.approx(np.exp(-0.5) * rw.W[4, 4, 4])
    assert np.all((rw.W >= 0) & (rw.W <= 1))


def test_resection_weight_degenerate(caplog):
    with caplog.at_level(logging.WARNING):
        rw = resection_weight(np.zeros((6, 6, 6)))
    assert rw.degenerate and not rw.W.any()
    assert "all zero" in caplog.text
    with pytest.raises(ValueError):
        resection_weight(np.zeros((6, 6, 6)), sigma=0.0)


def test_loss_img(rng):
    truth = textured(rng, 8)
    W = (truth > 500.0).astype(float)
    assert loss_img(truth, truth, W)[0] == 0.0
    value, _ = loss_img(truth + 10.0, truth, W)
    assert value == pytest.approx(100.0 * W.mean())
    W = rng.random(truth.shape)
    pred = textured(rng, 8)
    fd_check(lambda p: loss_img(p, truth, W)[0], pred, loss_img(pred, truth, W)[1], rng)


def test_loss_total():
    w = LossWeights(lambda_img=0.2, lambda_lyap=1.0)
    assert loss_total({"rf": 0.0, "img": 0.0, "lyap": 0.0}, w) == 0.0
    assert loss_total({"rf": 1.0, "img": 1.0, "lyap": 1.0}, w) == pytest.approx(2.2)
    assert loss_total({"rf": 3.0, "img": 5.0, "lyap": 7.0}, LossWeights(lambda_lyap=0.0)) == 3.0 + 0.2 * 5.0
    with pytest.raises(LossError, match="img"):
        loss_total({"rf": 1.0, "img": float("nan")}, w)
    with pytest.raises(KeyError):
        loss_total({"bogus": 1.0}, w)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_img=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_lyap=2.0, lambda_max=1.0)


@given(st.integers(0, 2**31 - 1))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(0, 100, (4, 4, 4)) for _ in range(3))
    assert loss_rf(a, b, c)[0] >= 0
    assert loss_img(a, b, rng.random((4, 4, 4)))[0] >= 0
