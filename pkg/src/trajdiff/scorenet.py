"""Noise-conditional score network over [1, 6, n] trajectory images.

A small encoder-decoder: 3x3 convolutions, SiLU activations, stride-2
contractions along the node axis, nearest-neighbor expansions, and skip
connections from each encoder level to its decoder mirror.  Noise
conditioning is by output division only: score(x, sigma) = f(x) / sigma, so
sigma * score is exactly sigma-independent.

Forward and backward passes are hand-written numpy (channels-last layout,
shift-and-matmul convolutions), which keeps gradients analytic and testable
against finite differences.  Presets S1..S4 size the network to roughly
117k / 466k / 1.86M / 7.43M trainable parameters.
"""

from dataclasses import dataclass

import numpy as np

PRESETS = {"S1": 14, "S2": 28, "S3": 56, "S4": 112}
N_ROWS = 6


@dataclass(frozen=True)
class NetworkConfig:
    n: int                    # image length (node count), even
    base_width: int = 14
    depth: int = 2            # down/up levels
    rows: int = N_ROWS

    def __post_init__(self):
        if self.n % (1 << self.depth) != 0 or self.n < (1 << self.depth):
            raise ValueError(f"n={self.n} not divisible by 2^depth={1 << self.depth}")
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be positive")

    @classmethod
    def preset(cls, name: str, n: int) -> "NetworkConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(n=n, base_width=PRESETS[name])

    def widths(self) -> list:
        return [self.base_width << k for k in range(self.depth + 1)]


def _conv_shapes(config: NetworkConfig):
    """Ordered (name, c_in, c_out, stride_w) for every convolution."""
    w = config.widths()
    layers = [("in", 1, w[0], 1)]
    for lev in range(config.depth):
        layers.append((f"down{lev}", w[lev], w[lev + 1], 2))
        layers.append((f"enc{lev}", w[lev + 1], w[lev + 1], 1))
    layers.append(("mid", w[config.depth], w[config.depth], 1))
    for lev in reversed(range(config.depth)):
        layers.append((f"up{lev}a", w[lev + 1] + w[lev], w[lev], 1))
        layers.append((f"up{lev}b", w[lev], w[lev], 1))
    layers.append(("out", w[0], 1, 1))
    return layers


def count_params(config: NetworkConfig) -> int:
    """Exact trainable parameter count, from shapes alone."""
    total = 0
    for _, c_in, c_out, _ in _conv_shapes(config):
        total += 9 * c_in * c_out + c_out
    return total


def _conv_forward(x, w, b, sw):
    """3x3 convolution, zero padding 1, stride (1, sw); channels-last.

    im2col (single strided-window copy) + one GEMM; returns (out, cols) with
    cols kept for the backward pass.
    """
    batch, h, width, c_in = x.shape
    wo = width // sw
    c_out = w.shape[3]
    xp = np.zeros((batch, h + 2, width + 2, c_in), dtype=x.dtype)
    xp[:, 1:h + 1, 1:width + 1] = x
    sb, sh, sw_, sc = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(batch, h, wo, 3, 3, c_in),
        strides=(sb, sh, sw_ * sw, sh, sw_, sc))
    cols = np.ascontiguousarray(win).reshape(batch * h * wo, 9 * c_in)
    out = np.empty((batch * h * wo, c_out), dtype=x.dtype)
    np.dot(cols, w.reshape(9 * c_in, c_out), out=out)
    out += b
    return out.reshape(batch, h, wo, c_out), cols


def _conv_backward(dy, cols, w, sw, x_shape):
    batch, h, width, c_in = x_shape
    wo = width // sw
    c_out = w.shape[3]
    dy_flat = dy.reshape(-1, c_out)
    dw = (cols.T @ dy_flat).reshape(3, 3, c_in, c_out)
    db = dy_flat.sum(axis=0)
    dcols = (dy_flat @ w.reshape(9 * c_in, c_out).T) \
        .reshape(batch, h, wo, 3, 3, c_in)
    dxp = np.zeros((batch, h + 2, width + 2, c_in), dtype=dy.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + h, kj:kj + sw * wo:sw, :] += dcols[:, :, :, ki, kj]
    return dxp[:, 1:h + 1, 1:width + 1], dw, db


def _silu(x):
    # clip keeps exp in range; sigmoid is exactly 0/1 beyond +-30 anyway
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))
    return x * sig, sig


def _silu_backward(dy, x, sig):
    return dy * (sig * (1.0 + x * (1.0 - sig)))


def _upsample(x):
    return np.repeat(x, 2, axis=2)


def _upsample_backward(dy):
    batch, h, w2, c = dy.shape
    return dy.reshape(batch, h, w2 // 2, 2, c).sum(axis=3)


class ScoreNet:
    """Stateless network; parameters travel as a dict of named tensors."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.layers = _conv_shapes(config)

    def param_shapes(self) -> dict:
        shapes = {}
        for name, c_in, c_out, _ in self.layers:
            shapes[f"{name}.w"] = (3, 3, c_in, c_out)
            shapes[f"{name}.b"] = (c_out,)
        return shapes

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for name, c_in, c_out, _ in self.layers:
            std = np.sqrt(2.0 / (9 * c_in))
            params[f"{name}.w"] = rng.normal(
                0.0, std, size=(3, 3, c_in, c_out)).astype(self.dtype)
            params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype)
        return params

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.rows \
                or x.shape[3] != self.config.n:
            raise ValueError(f"expected [*, 1, {self.config.rows}, "
                             f"{self.config.n}] input, got {x.shape}")
        return x, squeeze

    def raw_forward(self, params, x, want_cache=False):
        """Unconditional f(x); input/output [B, 1, rows, n] (or unbatched)."""
        x, squeeze = self._check_input(x)
        h = x.transpose(0, 2, 3, 1)  # channels-last [B, rows, n, 1]
        depth = self.config.depth
        cache = {"skips": [], "convs": {}, "acts": {}}

        def conv(name, t, act=True):
            w = params[f"{name}.w"]
            sw = 2 if name.startswith("down") else 1
            out, cols = _conv_forward(t, w, params[f"{name}.b"], sw)
            if want_cache:
                cache["convs"][name] = (cols, t.shape)
            if not act:
                return out
            y, sig = _silu(out)
            if want_cache:
                cache["acts"][name] = (out, sig)
            return y

        h = conv("in", h)
        skips = [h]
        for lev in range(depth):
            h = conv(f"down{lev}", h)
            h = conv(f"enc{lev}", h)
            if lev < depth - 1:
                skips.append(h)
        h = conv("mid", h)
        for lev in reversed(range(depth)):
            h = np.concatenate([_upsample(h), skips[lev]], axis=3)
            h = conv(f"up{lev}a", h)
            h = conv(f"up{lev}b", h)
        f = conv("out", h, act=False)

        out = f.transpose(0, 3, 1, 2)  # [B, 1, rows, n]
        if squeeze:
            out = out[0]
        if not want_cache:
            return out
        return out, cache

    def forward(self, params, x, sigma):
        """Score estimate s(x, sigma) = f(x) / sigma, same shape as x."""
        x_arr = np.asarray(x)
        f = self.raw_forward(params, x)
        sig = np.asarray(sigma, dtype=self.dtype)
        if sig.ndim == 0:
            if not sig > 0:
                raise ValueError("sigma must be positive")
            return f / sig
        if np.any(sig <= 0):
            raise ValueError("sigma must be positive")
        shape = (-1,) + (1,) * (f.ndim - 1)
        return f / sig.reshape(shape)

    def backward(self, params, cache, dout):
        """Gradients of sum(f * dout) w.r.t. every parameter tensor."""
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.ndim == 3:
            dout = dout[None]
        depth = self.config.depth
        grads = {}

        def conv_bw(name, dy):
            sw = 2 if name.startswith("down") else 1
            cols, x_shape = cache["convs"][name]
            dx, dw, db = _conv_backward(dy, cols, params[f"{name}.w"], sw,
                                        x_shape)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        def act_bw(name, dy):
            pre, sig = cache["acts"][name]
            return _silu_backward(dy, pre, sig)

        widths = self.config.widths()
        dh = conv_bw("out", dout.transpose(0, 2, 3, 1))
        dskips = [None] * depth
        for lev in range(depth):
            dh = conv_bw(f"up{lev}b", act_bw(f"up{lev}b", dh))
            dh = conv_bw(f"up{lev}a", act_bw(f"up{lev}a", dh))
            c_up = widths[lev + 1]
            dskips[lev] = dh[..., c_up:]
            dh = _upsample_backward(dh[..., :c_up])
        dh = conv_bw("mid", act_bw("mid", dh))
        for lev in reversed(range(depth)):
            if lev < depth - 1:
                dh = dh + dskips[lev + 1]
            dh = conv_bw(f"enc{lev}", act_bw(f"enc{lev}", dh))
            dh = conv_bw(f"down{lev}", act_bw(f"down{lev}", dh))
        dh = dh + dskips[0]
        conv_bw("in", act_bw("in", dh))
        return grads
