import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import textured
from lyaflow.diffeo import (
    TeacherTrajectory,
    compose,
    exp_svf,
    jacobian_positivity,
    max_norm,
    random_smooth_svf,
    squaring_steps,
)
from lyaflow.volume import Stencil, identity_grid, warp


def euler_flow(v, steps=4096):
    """Oracle: integrate d phi / ds = v(phi) from the identity with explicit Euler."""
    shape = v.shape[1:]
    pos = identity_grid(shape)
    h = 1.0 / steps
    for _ in range(steps):
        st_ = Stencil(shape, pos)
        pos = pos + h * np.stack([st_.sample(v[a]) for a in range(3)])
    return pos - identity_grid(shape)


def norm(d):
    return np.sqrt((d**2).sum(axis=0))


def test_exp_zero_time_and_zero_field(rng):
    v = random_smooth_svf((8, 8, 8), 2.0, rng)
    assert not exp_svf(v, 0.0, 5).any()
    assert not exp_svf(np.zeros_like(v)).any()


@given(st.floats(-3, 3), st.floats(0, 1), st.integers(0, 8))
def test_uniform_translation_is_exact(c, t, K):
    v = np.zeros((3, 5, 5, 5))
    v[0] = c
    d = exp_svf(v, t, K)
    assert np.allclose(d[0], t * c, atol=1e-12) and not d[1:].any()


def test_squaring_rule():
    v = np.zeros((3, 4, 4, 4))
    assert squaring_steps(v) == 4
    v[0] = 40.0
    k = squaring_steps(v)
    assert 40.0 / 2**k < 0.5 <= 40.0 / 2 ** (k - 1)


def test_exp_matches_dense_euler_flow(rng):
    v = random_smooth_svf((12, 12, 12), 2.0, rng)
    # beyond the faces clamped displacement sampling is not the flow of a clamped
    # velocity, so compare where points stay ceil(max|v|) + 1 voxels inside
    err = norm(exp_svf(v, 1.0, 6) - euler_flow(v))[3:-3, 3:-3, 3:-3].max()
    assert err < 1e-2


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_group_property(seed, s, t):
    v = random_smooth_svf((10, 10, 10), 2.0, np.random.default_rng(seed))
    err = norm(compose(exp_svf(v, s), exp_svf(v, t)) - exp_svf(v, s + t)).max()
    assert err < 1e-2


@given(st.integers(0, 2**31 - 1))
def test_inverse_composition(seed):
    v = random_smooth_svf((12, 12, 12), 2.0, np.random.default_rng(seed))
    inv = compose(exp_svf(v), exp_svf(-v))
    # faces are excluded: clamped sampling there is not invertible
    assert norm(inv)[3:-3, 3:-3, 3:-3].max() < 2e-2


@given(st.integers(0, 2**31 - 1))
def test_jacobian_positive_for_smooth_fields(seed):
    v = random_smooth_svf((10, 10, 10), 2.0, np.random.default_rng(seed))
    assert jacobian_positivity(exp_svf(v)) == 1.0


def test_jacobian_detects_folding():
    assert jacobian_positivity(np.zeros((3, 5, 5, 5))) == 1.0
    d = np.zeros((3, 5, 5, 5))
    d[0] = -2.0 * identity_grid((5, 5, 5))[0]
    assert jacobian_positivity(d) < 1.0


def test_random_smooth_svf_scale(rng):
    v = random_smooth_svf((8, 8, 8), 1.5, rng)
    assert max_norm(v) == pytest.approx(1.5)
    assert not random_smooth_svf((8, 8, 8), 0.0, rng).any()


def ramp_volume(n=10, slope=10.0):
    return slope * identity_grid((n, n, n))[0]


def test_teacher_state_t0_is_base(rng):
    base = textured(rng, 8)
    traj = TeacherTrajectory(random_smooth_svf((8, 8, 8), 1.0, rng), base)
    assert np.array_equal(traj.state(0.0), base)


def test_teacher_state_translation_of_ramp():
    v = np.zeros((3, 10, 10, 10))
    v[0] = 1.5
    traj = TeacherTrajectory(v, ramp_volume())
    # pull warp samples at x + t*c; interior voxels away from the clamped face
    out = traj.state(0.6)
    expect = 10.0 * (identity_grid((10, 10, 10))[0] + 0.9)
    assert np.allclose(out[:8], expect[:8])


def test_tangent_of_translated_ramp_is_constant():
    v = np.zeros((3, 10, 10, 10))
    v[0] = 1.5
    traj = TeacherTrajectory(v, ramp_volume())
    for t in (0.0, 0.3, 0.99):
        assert np.allclose(traj.tangent(t)[:7], 15.0)


def test_zero_svf_zero_tangent(rng):
    traj = TeacherTrajectory(np.zeros((3, 6, 6, 6)), textured(rng, 6))
    for t in (0.0, 0.5, 1.0):
        assert not traj.tangent(t).any()


def test_tangent_backward_difference_near_one(rng):
    base = textured(rng, 8)
    traj = TeacherTrajectory(random_smooth_svf((8, 8, 8), 1.0, rng), base, dt_fd=0.05)
    expect = (traj.state(1.0) - traj.state(0.95)) / 0.05
    assert np.allclose(traj.tangent(0.98 + 0.02), expect)
    x, xdot = traj.state_and_tangent(0.4)
    assert np.allclose(xdot, traj.tangent(0.4)) and np.allclose(x, traj.state(0.4))


def test_tangent_richardson(rng):
    base = textured(rng, 12, sigma=2.0)
    v = random_smooth_svf((12, 12, 12), 1.0, rng, 3.0)
    tangents = [TeacherTrajectory(v, base, dt_fd=dt, squaring_steps=6).tangent(0.3) for dt in (0.1, 0.05, 0.025)]
    d1 = np.abs(tangents[0] - tangents[1]).max()
    d2 = np.abs(tangents[1] - tangents[2]).max()
    # first-order scheme: successive differences shrink roughly by half
    assert 0.3 < d2 / d1 < 0.7


def test_state_continuity(rng):
    base = textured(rng, 10)
    v = random_smooth_svf((10, 10, 10), 1.0, rng)
    traj = TeacherTrajectory(v, base, squaring_steps=6)
    eps = 1e-3
    grad = np.abs(np.stack(np.gradient(base))).max()
    delta = np.abs(traj.state(0.5 + eps) - traj.state(0.5)).max()
    assert delta < 10 * eps * grad * max_norm(v)


def test_teacher_validation(rng):
    with pytest.raises(ValueError):
        TeacherTrajectory(np.zeros((3, 4, 4, 4)), np.zeros((4, 4, 4)), dt_fd=0.0)
    traj = TeacherTrajectory(np.zeros((3, 4, 4, 4)), np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        traj.state(1.5)


def test_teacher_save_load(tmp_path, rng):
    from lyaflow.volume import write_vol

    base = textured(rng, 6)
    base_path = tmp_path / "d5.vol"
    write_vol(base_path, base)
    base32 = base.astype(np.float32).astype(np.float64)
    v = random_smooth_svf((6, 6, 6), 1.0, rng).astype(np.float32).astype(np.float64)
    traj = TeacherTrajectory(v, base32, dt_fd=0.05, squaring_steps=5)
    traj.save(tmp_path / "t.vol", base_path)
    back = TeacherTrajectory.load(tmp_path / "t.vol")
    assert back.squaring_steps == 5 and back.dt_fd == 0.05
    assert np.array_equal(back.state(0.7), traj.state(0.7))


def test_compose_matches_sequential_warps(rng):
    img = textured(rng, 10)
    d = exp_svf(random_smooth_svf((10, 10, 10), 1.0, rng), 1.0)
    e = exp_svf(random_smooth_svf((10, 10, 10), 1.0, rng), 1.0)
    a = warp(img, compose(d, e))
    b = warp(warp(img, e), d)
    # equal up to interpolation of the intermediate image
    assert np.abs(a - b)[2:-2, 2:-2, 2:-2].mean() < 0.05 * np.abs(img).mean()
