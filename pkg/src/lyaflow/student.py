"""Time-conditioned residual U-Net velocity field ``v_theta(x_t, t; x_d5)``.

Parameters live in one flat float64 vector; ``layout`` names the slices.  The
convolutions run through ``torch.nn.functional`` and gradients come from torch
autograd on that flat vector.

Default desk configuration (base width 8, 2 levels, 1 block per level,
16-dim time embedding, 32 hidden): 30545 parameters.
"""

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volume import check_same_shape

CKPT_MAGIC = "OFCKPT1"

# fixed affine normalisation between HU and network units
HU_CENTER = 500.0
HU_SCALE = 600.0


@dataclass
class StudentConfig:
    base_width: int = 8
    levels: int = 2
    blocks_per_level: int = 1
    time_embed_dim: int = 16
    time_hidden: int = 32
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.levels != 2:
            raise ValueError("only the 2-level (full + half resolution) network is implemented")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")


def time_embedding(t, dim=16):
    """Sinusoidal features ``sin/cos(2**k * pi * t)`` for ``k = 0 .. dim/2 - 1``."""
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def _block_layout(prefix, cin, cout, hidden, k):
    entries = [
        (f"{prefix}.conv1.w", (cout, cin, k, k, k)),
        (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.film.w", (2 * cout, hidden)),
        (f"{prefix}.film.b", (2 * cout,)),
        (f"{prefix}.film.gate", (2 * cout,)),
        (f"{prefix}.conv2.w", (cout, cout, k, k, k)),
        (f"{prefix}.conv2.b", (cout,)),
    ]
    if cin != cout:
        entries += [(f"{prefix}.skip.w", (cout, cin, 1, 1, 1)), (f"{prefix}.skip.b", (cout,))]
    return entries


def param_layout(cfg):
    """Ordered ``name -> (offset, shape)``."""
    c, c2, h, k = cfg.base_width, 2 * cfg.base_width, cfg.time_hidden, cfg.kernel
    entries = [
        ("time.w1", (h, cfg.time_embed_dim)),
        ("time.b1", (h,)),
        ("stem.w", (c, 2, k, k, k)),
        ("stem.b", (c,)),
    ]
    for b in range(cfg.blocks_per_level):
        entries += _block_layout(f"enc{b}", c, c, h, k)
    entries += [("down.w", (c2, c, k, k, k)), ("down.b", (c2,))]
    for b in range(cfg.blocks_per_level):
        entries += _block_layout(f"mid{b}", c2, c2, h, k)
    entries += [("up.w", (c2, c, 2, 2, 2)), ("up.b", (c,))]
    for b in range(cfg.blocks_per_level):
        entries += _block_layout(f"dec{b}", 2 * c if b == 0 else c, c, h, k)
    entries += [("out.w", (1, c, k, k, k)), ("out.b", (1,))]
    layout = OrderedDict()
    offset = 0
    for name, shape in entries:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout


def param_count(cfg):
    return sum(int(np.prod(shape)) for _, shape in param_layout(cfg).values())


def _fan_in(layout, name):
    group = name.rsplit(".", 1)[0]
    shape = layout[group + (".w1" if group == "time" else ".w")][1]
    if group == "up":
        # stride-2 transposed conv with a 2-wide kernel: one tap per input channel
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(cfg, seed=None):
    """Fan-in scaled uniform init; FiLM gates and the output layer start at zero."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layout = param_layout(cfg)
    theta = np.zeros(param_count(cfg))
    for name, (off, shape) in layout.items():
        if name.startswith("out.") or name.endswith("film.gate"):
            continue
        size = int(np.prod(shape))
        bound = 1.0 / math.sqrt(_fan_in(layout, name))
        theta[off : off + size] = rng.uniform(-bound, bound, size)
    return theta


class CacheError(RuntimeError):
    pass


class StudentNet:
    """Velocity network with a flat parameter vector."""

    def __init__(self, config=None, params=None):
        self.config = config or StudentConfig()
        self.layout = param_layout(self.config)
        n = param_count(self.config)
        self.params = init_params(self.config) if params is None else np.asarray(params, np.float64)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")

    @property
    def param_count(self):
        return self.params.size

    def copy(self):
        return StudentNet(self.config, self.params.copy())

    # -- torch graph ------------------------------------------------------

    def unpack(self, theta):
        return {
            name: theta[off : off + int(np.prod(shape))].view(shape)
            for name, (off, shape) in self.layout.items()
        }

    def _block(self, p, prefix, x, temb):
        pad = self.config.kernel // 2
        h = F.conv3d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=pad)
        c = h.shape[1]
        mod = (p[f"{prefix}.film.w"] @ temb + p[f"{prefix}.film.b"]) * p[f"{prefix}.film.gate"]
        scale = (1.0 + mod[:c]).view(1, c, 1, 1, 1)
        shift = mod[c:].view(1, c, 1, 1, 1)
        h = F.silu(h * scale + shift)
        h = F.silu(F.conv3d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=pad))
        skip = x
        if f"{prefix}.skip.w" in p:
            skip = F.conv3d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
        return skip + h

    def velocity_torch(self, theta, x_t, t, x_d5):
        """Torch forward on ``(nx, ny, nz)`` tensors; returns HU per unit time."""
        cfg = self.config
        p = self.unpack(theta)
        pad = cfg.kernel // 2
        emb = torch.as_tensor(time_embedding(t, cfg.time_embed_dim), dtype=theta.dtype)
        temb = F.silu(p["time.w1"] @ emb + p["time.b1"])
        inp = (torch.stack([x_t, x_d5]) - HU_CENTER) / HU_SCALE
        h = F.silu(F.conv3d(inp[None], p["stem.w"], p["stem.b"], padding=pad))
        for b in range(cfg.blocks_per_level):
            h = self._block(p, f"enc{b}", h, temb)
        skip = h
        h = F.silu(F.conv3d(h, p["down.w"], p["down.b"], stride=2, padding=pad))
        for b in range(cfg.blocks_per_level):
            h = self._block(p, f"mid{b}", h, temb)
        h = F.silu(F.conv_transpose3d(h, p["up.w"], p["up.b"], stride=2))
        h = torch.cat([h, skip], dim=1)
        for b in range(cfg.blocks_per_level):
            h = self._block(p, f"dec{b}", h, temb)
        out = F.conv3d(h, p["out.w"], p["out.b"], padding=pad)
        return out[0, 0] * HU_SCALE

    def theta_tensor(self, requires_grad=False):
        return torch.tensor(self.params, dtype=torch.float64, requires_grad=requires_grad)

    # -- numpy surface ----------------------------------------------------

    def _check(self, x_t, t, x_d5):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        check_same_shape(x_t, x_d5)
        if any(n % 2 for n in np.shape(x_t)):
            raise ValueError(f"grid sides must be even for the 2x down/upsampling: {np.shape(x_t)}")

    def forward(self, x_t, t, x_d5, cache=False):
        """Velocity volume; with ``cache=True`` returns ``(velocity, cache)`` for :meth:`backward`."""
        self._check(x_t, t, x_d5)
        if not cache:
            with torch.no_grad():
                out = self.velocity_torch(
                    self.theta_tensor(),
                    torch.as_tensor(np.asarray(x_t, np.float64)),
                    float(t),
                    torch.as_tensor(np.asarray(x_d5, np.float64)),
                )
            return out.numpy().copy()
        theta = self.theta_tensor(requires_grad=True)
        x = torch.tensor(np.asarray(x_t, np.float64), requires_grad=True)
        out = self.velocity_torch(theta, x, float(t), torch.as_tensor(np.asarray(x_d5, np.float64)))
        return out.detach().numpy().copy(), {"theta": theta, "x": x, "out": out}

    def backward(self, upstream, cache):
        """Return ``(dL/dtheta, dL/dx_t)`` given ``upstream = dL/d(output)``."""
        if not cache or "out" not in cache:
            raise CacheError("backward needs the cache returned by forward(..., cache=True)")
        g_theta, g_x = torch.autograd.grad(
            cache["out"],
            [cache["theta"], cache["x"]],
            grad_outputs=torch.as_tensor(np.asarray(upstream, np.float64)),
        )
        return g_theta.numpy().copy(), g_x.numpy().copy()


def save_checkpoint(path, net, step=0, opt_state=None):
    """Header JSON line + little-endian f64 params (+ first/second moments)."""
    header = {
        "magic": CKPT_MAGIC,
        "config": asdict(net.config),
        "param_count": int(net.param_count),
        "step": int(step),
        "optimizer_state_present": opt_state is not None,
    }
    if opt_state is not None:
        header["optimizer_step"] = int(opt_state.step)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())
        if opt_state is not None:
            fh.write(np.ascontiguousarray(opt_state.m, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(opt_state.v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, header, opt_state or None)``."""
    from .trainer import OptimizerState

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    if header.get("magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    n = header["param_count"]
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    net = StudentNet(StudentConfig(**header["config"]), arr[:n].copy())
    opt = None
    if header["optimizer_state_present"]:
        opt = OptimizerState(arr[n : 2 * n].copy(), arr[2 * n : 3 * n].copy(), header["optimizer_step"])
    return net, header, opt
