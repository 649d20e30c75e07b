"""Student training: curriculum ramps, off-/on-policy sampling, AdamW, early stopping.

One update (``train_step``):

1. draw ``t ~ U(0, 1)`` and build the anchor ``(1 - t) x_d5 + t x_y1``;
2. roll the student out from ``x_d5`` with Euler steps (differentiable, used by
   ``L_img`` and as the on-policy state source);
3. with probability ``p_on`` evaluate the velocity losses at the rollout state
   nearest ``t`` (treated as a constant input), otherwise at the anchor;
4. backpropagate ``L_RF + lambda_img L_img + lambda_lyap L_Lyap`` and apply AdamW.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .losses import (
    LossWeights,
    loss_img,
    loss_lyap,
    loss_mse_distill,
    loss_rf,
    loss_total,
    resection_weight,
)
from .metrics import SlabSpec, mae
from .ode import infer, n_steps, snap_index
from .student import StudentConfig, StudentNet, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "L_RF", "L_img", "L_Lyap", "lambda_lyap", "p_on", "total", "val_mid_bone_mae")
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class TrainingError(RuntimeError):
    pass


class NonFiniteError(TrainingError, ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs_max: int = 50
    patience: int = 10
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch: int = 1
    ramp_epochs: int = 10
    p_on_max: float = 0.5
    lambda_img: float = 0.2
    lambda_max: float = 1.0
    alpha: float = 1.0
    dt_fd: float = 0.05
    sigma_vox: float = 6.0
    tau_hu: float = 300.0
    seed: int = 0
    use_rf: bool = True
    use_lyap: bool = True
    use_mse_distill: bool = False
    use_img: bool = True
    use_weight_W: bool = True
    use_aug: bool = True
    # runtime knobs (not part of the method itself)
    rollout_step: float = 0.1
    variants_per_epoch: int = 0
    val_solver: str = "rk4"
    val_step: float = 0.1
    precision: str = "float64"
    base_width: int = 8

    def __post_init__(self):
        if self.use_lyap and self.use_mse_distill:
            raise ValueError("use_lyap and use_mse_distill are mutually exclusive")
        if not (self.use_rf or self.use_lyap or self.use_mse_distill):
            raise ValueError("at least one velocity loss must be enabled")
        if not 0.0 <= self.p_on_max <= 1.0:
            raise ValueError("p_on_max must lie in [0, 1]")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.epochs_max < 1 or self.patience < 1 or self.ramp_epochs < 0:
            raise ValueError("epochs_max and patience must be >= 1, ramp_epochs >= 0")
        n_steps(self.rollout_step)
        n_steps(self.val_step)

    @property
    def uses_teacher(self):
        return self.use_lyap or self.use_mse_distill

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        if os.fspath(path).endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            with open(path) as fh:
                data = json.load(fh)
        return cls.from_dict(data)


@dataclass
class RampState:
    k: int
    p_on: float
    lambda_lyap: float


def ramp(epoch, cfg, k=0):
    """Per-epoch linear ramps of the on-policy probability and the distillation weight.

    Both are 0 at epoch 0 and saturate after ``ramp_epochs``.  Without a teacher
    term the trainer stays off-policy (plain rectified flow).
    """
    frac = 1.0 if cfg.ramp_epochs == 0 else min(1.0, epoch / cfg.ramp_epochs)
    if not cfg.uses_teacher:
        return RampState(k, 0.0, 0.0)
    return RampState(k, cfg.p_on_max * frac, cfg.lambda_max * frac)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_update(params, grads, opt, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW step in place; decay acts on the parameters, not through the moments."""
    if params.shape != grads.shape or opt.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    opt.step += 1
    opt.m *= beta1
    opt.m += (1.0 - beta1) * grads
    opt.v *= beta2
    opt.v += (1.0 - beta2) * grads * grads
    m_hat = opt.m / (1.0 - beta1**opt.step)
    v_hat = opt.v / (1.0 - beta2**opt.step)
    if wd:
        params *= 1.0 - lr * wd
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, opt


@dataclass
class StepLog:
    L_RF: float = 0.0
    L_img: float = 0.0
    L_Lyap: float = 0.0
    lambda_lyap: float = 0.0
    p_on: float = 0.0
    total: float = 0.0
    t: float = 0.0
    on_policy: bool = False


def weight_map(pair, cfg):
    """Resection-weighted bone map, or all ones when the weighting is disabled."""
    if not cfg.use_weight_W:
        return np.ones_like(pair.x_d5)
    # an all-zero map (no bone) simply switches L_img off for this sample
    return resection_weight(pair.x_d5, cfg.sigma_vox, cfg.tau_hu, pair.plane).W


def step_gradient(net, pair, teacher, rmp, cfg, rng, W=None):
    """Loss parts and parameter gradient for one pair; returns ``(StepLog, grad)``.

    The rollout is Euler with ``cfg.rollout_step``; ``L_img`` is differentiated
    through all of it while on-policy velocity losses see the rollout state as
    a constant.
    """
    if cfg.uses_teacher and teacher is None:
        raise TrainingError("a teacher trajectory is required when use_lyap/use_mse_distill is set")
    dtype = PRECISIONS[cfg.precision]
    x_d5, x_y1 = pair.x_d5, pair.x_y1
    t = float(rng.random())
    on_policy = bool(rng.random() < rmp.p_on)
    need_rollout = cfg.use_img or on_policy

    theta = torch.tensor(net.params, dtype=dtype, requires_grad=True)
    d5 = torch.as_tensor(x_d5, dtype=dtype)
    outputs, upstream = [], []
    rec = StepLog(lambda_lyap=rmp.lambda_lyap, p_on=rmp.p_on, on_policy=on_policy)

    states = None
    if need_rollout:
        h = cfg.rollout_step
        x = d5
        states = [x]
        # the graph is only needed when L_img differentiates through the rollout
        with torch.set_grad_enabled(cfg.use_img):
            for i in range(n_steps(h)):
                x = x + h * net.velocity_torch(theta, x, i * h, d5)
                states.append(x)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite rollout state at step {rmp.k}")

    if on_policy:
        i = snap_index(t, cfg.rollout_step)
        t = i * cfg.rollout_step
        x_t = states[i].detach().numpy().astype(np.float64)
    else:
        x_t = (1.0 - t) * x_d5 + t * x_y1
    rec.t = t

    if cfg.use_rf or cfg.uses_teacher:
        v = net.velocity_torch(theta, torch.as_tensor(x_t, dtype=dtype), t, d5)
        v_np = v.detach().numpy().astype(np.float64)
        g_v = np.zeros_like(v_np)
        if cfg.use_rf:
            rec.L_RF, g = loss_rf(v_np, x_d5, x_y1)
            g_v += g
        if cfg.uses_teacher:
            state = teacher.state_and_tangent(t)
            if cfg.use_lyap:
                rec.L_Lyap, g = loss_lyap(v_np, x_t, t, teacher, cfg.alpha, state)
            else:
                rec.L_Lyap, g = loss_mse_distill(v_np, x_t, t, teacher, state)
            g_v += rmp.lambda_lyap * g
        outputs.append(v)
        upstream.append(g_v)

    if cfg.use_img:
        W = weight_map(pair, cfg) if W is None else W
        x_end = states[-1]
        rec.L_img, g = loss_img(x_end.detach().numpy().astype(np.float64), x_y1, W)
        outputs.append(x_end)
        upstream.append(cfg.lambda_img * g)

    parts = {"rf": rec.L_RF, "img": rec.L_img, "lyap": rec.L_Lyap}
    weights = LossWeights(cfg.lambda_img, rmp.lambda_lyap, cfg.lambda_max, cfg.alpha)
    try:
        rec.total = loss_total(parts, weights)
    except ArithmeticError as exc:
        raise NonFiniteError(f"step {rmp.k} (t={t:.4f}, on_policy={on_policy}): {exc}") from exc

    (grad,) = torch.autograd.grad(
        outputs, [theta], grad_outputs=[torch.as_tensor(u, dtype=dtype) for u in upstream]
    )
    grad = grad.numpy().astype(np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient at step {rmp.k} (t={t:.4f})")
    return rec, grad


def train_step(net, pair, teacher, rmp, cfg, rng, opt, W=None):
    """One AdamW update on a single pair; returns a :class:`StepLog`.

    ``net.params`` and ``opt`` are updated in place.
    """
    rec, grad = step_gradient(net, pair, teacher, rmp, cfg, rng, W)
    adamw_update(net.params, grad, opt, cfg.lr, cfg.weight_decay)
    return rec


# -- epoch loop -----------------------------------------------------------


@dataclass
class Dataset:
    """``train`` maps phantom id -> list of PairedSample variants (index 0 = original);
    ``val`` is a list of original PairedSamples."""

    train: dict
    val: list = field(default_factory=list)


def validation_metric(net, samples, cfg, slab=None):
    """Mean mid-slab bone MAE of ``infer`` over ``samples``."""
    scores = []
    for s in samples:
        pred = infer(net, s.x_d5, step=cfg.val_step, solver=cfg.val_solver)
        region = (slab or SlabSpec.central(s.x_d5.shape[0])).mask(s.x_d5.shape)
        scores.append(mae(pred, s.x_y1, region=region, bone_only=True))
    scores = [s for s in scores if math.isfinite(s)]
    return float(np.mean(scores)) if scores else float("nan")


def epoch_items(dataset, cfg, rng):
    """Shuffled ``(phantom_id, variant_index)`` list for one epoch."""
    items = []
    for pid in sorted(dataset.train):
        n = len(dataset.train[pid])
        if not cfg.use_aug or n == 1:
            items.append((pid, 0))
        elif cfg.variants_per_epoch and cfg.variants_per_epoch < n:
            picks = rng.choice(n, cfg.variants_per_epoch, replace=False)
            items.extend((pid, int(v)) for v in sorted(picks))
        else:
            items.extend((pid, v) for v in range(n))
    return [items[i] for i in rng.permutation(len(items))]


@dataclass
class TrainResult:
    best_params: np.ndarray
    best_epoch: int
    best_metric: float
    epochs_run: int
    history: list


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])


def train(net, dataset, teachers, cfg, out_dir=None, validate=None):
    """Epoch loop with seeded shuffling, validation after each epoch and early stopping.

    ``teachers`` maps ``(phantom_id, variant_index)`` to a TeacherTrajectory (may be
    empty when no teacher term is enabled).  ``validate(net) -> float`` overrides the
    default validation metric.  With ``out_dir`` set, writes ``config.json``,
    ``history.csv``, ``best.ckpt`` and ``last.ckpt``.
    """
    if not dataset.train:
        raise TrainingError("empty training split")
    if validate is None:
        if not dataset.val:
            raise TrainingError("empty validation split")
        validate = lambda model: validation_metric(model, dataset.val, cfg)  # noqa: E731
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState.zeros(net.param_count)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(asdict(cfg), fh, indent=1)
    W_cache = {}
    history = []
    best = (math.inf, -1, net.params.copy())
    k = 0
    epoch = 0
    for epoch in range(cfg.epochs_max):
        for pid, vidx in epoch_items(dataset, cfg, rng):
            pair = dataset.train[pid][vidx]
            teacher = teachers.get((pid, vidx)) if cfg.uses_teacher else None
            if cfg.uses_teacher and teacher is None:
                raise TrainingError(f"no teacher for phantom {pid} variant {vidx}")
            if cfg.use_img and (pid, vidx) not in W_cache:
                W_cache[(pid, vidx)] = weight_map(pair, cfg)
            rmp = ramp(epoch, cfg, k)
            rec = train_step(net, pair, teacher, rmp, cfg, rng, opt, W_cache.get((pid, vidx)))
            history.append(
                {"step": k, "epoch": epoch, "L_RF": rec.L_RF, "L_img": rec.L_img, "L_Lyap": rec.L_Lyap,
                 "lambda_lyap": rec.lambda_lyap, "p_on": rec.p_on, "total": rec.total}
            )
            k += 1
        metric = float(validate(net))
        history[-1]["val_mid_bone_mae"] = metric
        log.info("epoch %d: val mid-slab bone MAE %.3f", epoch, metric)
        if metric < best[0] * (1.0 - 1e-3):
            best = (metric, epoch, net.params.copy())
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), StudentNet(net.config, best[2]), k, opt)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), net, k, opt)
            write_history(os.path.join(out_dir, "history.csv"), history)
        if epoch - best[1] >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
    return TrainResult(best[2], best[1], best[0], epoch + 1, history)


def make_net(cfg):
    return StudentNet(StudentConfig(base_width=cfg.base_width, seed=cfg.seed))
