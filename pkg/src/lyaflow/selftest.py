"""Fast built-in oracle checks (seconds), printed as one PASS/FAIL line each."""

import numpy as np

from .diffeo import TeacherTrajectory, compose, exp_svf, jacobian_positivity, random_smooth_svf
from .losses import guidance_field, loss_rf, lyapunov_energy
from .metrics import dice_bone, evaluate_pair, mae, msssim3d
from .ode import rollout
from .registration import registration_objective
from .student import StudentConfig, StudentNet, init_params
from .trainer import OptimizerState, adamw_update


def _textured(rng, n):
    from scipy.ndimage import gaussian_filter

    return 500.0 + 400.0 * gaussian_filter(rng.standard_normal((n, n, n)), 1.0, mode="wrap")


def check_student_gradient(rng):
    cfg = StudentConfig(base_width=4)
    theta = init_params(cfg, 1)
    # perturb so the zero-initialised gates and output layer carry gradient signal
    net = StudentNet(cfg, theta + 0.05 * rng.standard_normal(theta.size))
    x_d5, x_y1 = _textured(rng, 6), _textured(rng, 6)
    x_t = 0.6 * x_d5 + 0.4 * x_y1

    def f(theta):
        return loss_rf(StudentNet(cfg, theta).forward(x_t, 0.4, x_d5), x_d5, x_y1)[0]

    v, cache = net.forward(x_t, 0.4, x_d5, cache=True)
    g_theta, _ = net.backward(loss_rf(v, x_d5, x_y1)[1], cache)
    worst = 0.0
    # directional probes: the derivative along a random unit direction
    for _ in range(5):
        u = rng.standard_normal(net.param_count)
        u /= np.linalg.norm(u)
        fd = (f(net.params + 1e-4 * u) - f(net.params - 1e-4 * u)) / 2e-4
        an = float(g_theta @ u)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_registration_gradient(rng):
    x_d5 = _textured(rng, 6)
    x_y1 = _textured(rng, 6)
    v = random_smooth_svf((6, 6, 6), 1.0, rng, 1.0)
    w = np.ones_like(x_d5)
    _, _, grad = registration_objective(v, x_d5, x_y1, w, 0.1, 4)
    worst = 0.0
    for _ in range(5):
        idx = tuple(rng.integers(0, s) for s in v.shape)
        e = np.zeros_like(v)
        e[idx] = 1e-6
        fp = registration_objective(v + e, x_d5, x_y1, w, 0.1, 4, with_grad=False)[0]
        fm = registration_objective(v - e, x_d5, x_y1, w, 0.1, 4, with_grad=False)[0]
        fd = (fp - fm) / 2e-6
        worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-12))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def check_diffeo(rng):
    v = random_smooth_svf((16, 16, 16), 2.0, rng)
    inv = compose(exp_svf(v), exp_svf(-v))
    # clamped sampling at the faces is not invertible; check where the flow stays inside
    err = float(np.sqrt((inv**2).sum(axis=0))[3:-3, 3:-3, 3:-3].max())
    jac = jacobian_positivity(exp_svf(v))
    return err < 2e-2 and jac == 1.0, f"inverse residual {err:.2e} voxel, jacobian-positive {jac:.3f}"


def check_lyapunov(rng):
    base = _textured(rng, 8)
    teacher = TeacherTrajectory(random_smooth_svf((8, 8, 8), 1.0, rng, 2.0), base)
    x0 = base + 50.0 * rng.standard_normal(base.shape)
    res = rollout(lambda x, t: guidance_field(x, t, teacher, 1.0), x0, "rk4", 0.1)
    energy = [lyapunov_energy(x, t, teacher) for x, t in zip(res.states, res.times)]
    ok = all(b <= a * (1 + 1e-6) for a, b in zip(energy, energy[1:]))
    return ok, f"V: {energy[0]:.3g} -> {energy[-1]:.3g}"


def check_metrics(rng):
    x = _textured(rng, 24)
    row = evaluate_pair(x, x)
    ok = row.mid_dice == 100 and row.full_msssim == 100 and row.mid_mae_all == 0
    ok &= abs(mae(x + 10.0, x) - 10.0) < 1e-12 and msssim3d(x + 50.0, x) < 100.0
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[:2] = 1000.0
    b[1:3] = 1000.0
    ok &= abs(dice_bone(a, b) - 50.0) < 1e-12
    return bool(ok), "identities"


def check_adamw(rng):
    p = rng.standard_normal(10)
    p0 = p.copy()
    opt = OptimizerState.zeros(10)
    for _ in range(3):
        adamw_update(p, np.zeros(10), opt, 1e-2, 0.1)
    ok = np.allclose(p, p0 * (1 - 1e-3) ** 3, rtol=0, atol=1e-15)
    return bool(ok), "decoupled decay"


CHECKS = (
    ("student gradient", check_student_gradient),
    ("registration gradient", check_registration_gradient),
    ("diffeomorphism", check_diffeo),
    ("lyapunov descent", check_lyapunov),
    ("metric identities", check_metrics),
    ("adamw", check_adamw),
)


def run_selftest(seed=0):
    rng = np.random.default_rng(seed)
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn(rng)
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
