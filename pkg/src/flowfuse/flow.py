"""Invertible image-to-image model.

The model is a stack of blocks, each a learnable channel-mixing matrix
(a per-pixel 1x1 linear map) followed by an enhanced affine coupling layer.
The coupling splits the channels into two halves, lifts the first half by
``r`` of the second, then rescales/translates the second half by ``s``/``t``
of the *lifted* first half -- that ordering is what makes the inverse exact:

    forward                         inverse
    n1 = m1 + r(m2)                 m2 = (n2 - t(n1)) * exp(-sc(n1))
    n2 = m2 * exp(sc(n1)) + t(n1)   m1 = n1 - r(m2)

where ``sc`` is the soft-clamped scale subnet. ``r``, ``s`` and ``t`` are
five-layer 3x3 conv nets (stride 1, padding 1, Leaky ReLU after layers 1-4,
linear final layer) and need not be invertible themselves.

Besides plain evaluation, every pass has a cached variant plus a matching
backward that accumulates analytic parameter gradients -- including the
path through the inverted mixing matrix in the inverse pass.

Public functions take (N, C, H, W) tensors; the private ``_*`` machinery
runs on the channel-first (C, N, H, W) layout of :mod:`flowfuse.numerics`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError
from .numerics import (
    DEFAULT_DTYPE,
    conv_cnhw,
    conv_cnhw_vjp,
    from_cnhw,
    leaky_relu,
    leaky_relu_grad,
    make_rng,
    mat_inverse,
    require_finite,
    to_cnhw,
)

N_SUBNET_LAYERS = 5
DEFAULT_S_CLAMP = 2.0
DEFAULT_SLOPE = 0.2
DEFAULT_HIDDEN = 32


def soft_clamp(u: np.ndarray, limit: float) -> np.ndarray:
    """Smooth symmetric clamp: limit * (2/pi) * arctan(u), bounded by +-limit."""
    return np.asarray(limit * (2.0 / math.pi), dtype=u.dtype) * np.arctan(u)


def soft_clamp_grad(u: np.ndarray, limit: float) -> np.ndarray:
    one = np.asarray(1.0, dtype=u.dtype)
    return np.asarray(limit * (2.0 / math.pi), dtype=u.dtype) / (one + u * u)


@dataclass
class Subnet:
    """Five 3x3 conv layers; Leaky ReLU after the first four, final layer linear."""

    weights: list  # five (out, in, 3, 3) arrays
    biases: list  # five (out,) arrays
    slope: float = DEFAULT_SLOPE

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]


def subnet_zero(in_ch: int, out_ch: int, hidden: int, slope: float = DEFAULT_SLOPE,
                dtype=DEFAULT_DTYPE) -> Subnet:
    """All-zero subnet (constant zero function)."""
    widths = [in_ch] + [hidden] * (N_SUBNET_LAYERS - 1)
    outs = [hidden] * (N_SUBNET_LAYERS - 1) + [out_ch]
    weights = [np.zeros((o, i, 3, 3), dtype=dtype) for i, o in zip(widths, outs)]
    biases = [np.zeros(o, dtype=dtype) for o in outs]
    return Subnet(weights, biases, slope)


def subnet_init(in_ch: int, out_ch: int, hidden: int, rng: np.random.Generator,
                slope: float = DEFAULT_SLOPE, dtype=DEFAULT_DTYPE) -> Subnet:
    """He-initialized hidden layers, zero final layer (subnet starts as zero map)."""
    net = subnet_zero(in_ch, out_ch, hidden, slope, dtype)
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    for layer in range(N_SUBNET_LAYERS - 1):
        fan_in = net.weights[layer].shape[1] * 9
        std = gain / math.sqrt(fan_in)
        net.weights[layer] = (rng.normal(0.0, std, size=net.weights[layer].shape)
                              .astype(dtype))
    return net


def _subnet_cnhw(net: Subnet, x: np.ndarray) -> np.ndarray:
    y = x
    for layer in range(N_SUBNET_LAYERS):
        y = conv_cnhw(y, net.weights[layer], net.biases[layer])
        if layer < N_SUBNET_LAYERS - 1:
            y = leaky_relu(y, net.slope)
    return y


def subnet_apply(net: Subnet, x: np.ndarray) -> np.ndarray:
    """Run the five layers; spatial dims preserved, channels in->out."""
    if x.ndim != 4:
        raise ShapeError(f"subnet input must be rank-4, got shape {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ShapeError(
            f"subnet expects {net.in_channels} input channels, got {x.shape[1]}"
        )
    y = from_cnhw(_subnet_cnhw(net, to_cnhw(x)))
    require_finite(y, "subnet output")
    return y


def _subnet_forward_cached(net: Subnet, x: np.ndarray):
    """Like _subnet_cnhw but keeps per-layer inputs and pre-activations."""
    cache = []
    y = x
    for layer in range(N_SUBNET_LAYERS):
        inp = y
        y = conv_cnhw(inp, net.weights[layer], net.biases[layer])
        if layer < N_SUBNET_LAYERS - 1:
            cache.append((inp, y))
            y = leaky_relu(y, net.slope)
        else:
            cache.append((inp, None))
    return y, cache


def _subnet_backward(net: Subnet, cache, grad_y: np.ndarray, grads: dict,
                     prefix: str) -> np.ndarray:
    """Backprop grad_y through the subnet; accumulates weight grads, returns grad_x."""
    g = grad_y
    for layer in range(N_SUBNET_LAYERS - 1, -1, -1):
        inp, pre = cache[layer]
        if pre is not None:
            g = g * leaky_relu_grad(pre, net.slope)
        g, gw, gb = conv_cnhw_vjp(inp, net.weights[layer], g)
        grads[f"{prefix}.w{layer}"] += gw
        grads[f"{prefix}.b{layer}"] += gb
    return g


@dataclass
class Coupling:
    """Enhanced affine coupling over D channels split at d (first half 0:d)."""

    split: int  # d
    r: Subnet  # (D - d) -> d
    s: Subnet  # d -> (D - d)
    t: Subnet  # d -> (D - d)
    s_clamp: float = DEFAULT_S_CLAMP

    @property
    def channels(self) -> int:
        return self.split + self.r.in_channels


def _check_channels(expected: int, x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 input, got shape {x.shape}")
    if x.shape[1] != expected:
        raise ShapeError(f"{name}: expected {expected} channels, got {x.shape[1]}")


def _coupling_fwd_cnhw(layer: Coupling, m: np.ndarray) -> np.ndarray:
    d = layer.split
    m1, m2 = m[:d], m[d:]
    n1 = m1 + _subnet_cnhw(layer.r, m2)
    sc = soft_clamp(_subnet_cnhw(layer.s, n1), layer.s_clamp)
    n2 = m2 * np.exp(sc) + _subnet_cnhw(layer.t, n1)
    out = np.concatenate([n1, n2], axis=0)
    require_finite(out, "coupling forward output (check s_clamp)")
    return out


def _coupling_inv_cnhw(layer: Coupling, n: np.ndarray) -> np.ndarray:
    d = layer.split
    n1, n2 = n[:d], n[d:]
    sc = soft_clamp(_subnet_cnhw(layer.s, n1), layer.s_clamp)
    m2 = (n2 - _subnet_cnhw(layer.t, n1)) * np.exp(-sc)
    m1 = n1 - _subnet_cnhw(layer.r, m2)
    out = np.concatenate([m1, m2], axis=0)
    require_finite(out, "coupling inverse output (check s_clamp)")
    return out


def coupling_forward(layer: Coupling, m: np.ndarray) -> np.ndarray:
    """n1 = m1 + r(m2); n2 = m2 * exp(sc(n1)) + t(n1)."""
    _check_channels(layer.channels, m, "coupling_forward")
    return from_cnhw(_coupling_fwd_cnhw(layer, to_cnhw(m)))


def coupling_inverse(layer: Coupling, n: np.ndarray) -> np.ndarray:
    """m2 = (n2 - t(n1)) * exp(-sc(n1)); m1 = n1 - r(m2)."""
    _check_channels(layer.channels, n, "coupling_inverse")
    return from_cnhw(_coupling_inv_cnhw(layer, to_cnhw(n)))


def _coupling_forward_cached(layer: Coupling, m: np.ndarray):
    d = layer.split
    m1, m2 = m[:d], m[d:]
    r_out, r_cache = _subnet_forward_cached(layer.r, m2)
    n1 = m1 + r_out
    sraw, s_cache = _subnet_forward_cached(layer.s, n1)
    sc = soft_clamp(sraw, layer.s_clamp)
    exp_sc = np.exp(sc)
    t_out, t_cache = _subnet_forward_cached(layer.t, n1)
    n2 = m2 * exp_sc + t_out
    cache = {"m2": m2, "sraw": sraw, "exp_sc": exp_sc,
             "r": r_cache, "s": s_cache, "t": t_cache}
    return np.concatenate([n1, n2], axis=0), cache


def _coupling_backward_forward(layer: Coupling, cache, grad_n: np.ndarray,
                               grads: dict, prefix: str) -> np.ndarray:
    d = layer.split
    gn1, gn2 = grad_n[:d], grad_n[d:]
    exp_sc = cache["exp_sc"]

    grad_m2 = gn2 * exp_sc
    grad_sraw = (gn2 * cache["m2"] * exp_sc) * soft_clamp_grad(cache["sraw"], layer.s_clamp)

    g_n1 = gn1 + _subnet_backward(layer.s, cache["s"], grad_sraw, grads, f"{prefix}.s")
    g_n1 += _subnet_backward(layer.t, cache["t"], gn2, grads, f"{prefix}.t")

    grad_m1 = g_n1
    grad_m2 = grad_m2 + _subnet_backward(layer.r, cache["r"], g_n1, grads, f"{prefix}.r")
    return np.concatenate([grad_m1, grad_m2], axis=0)


def _coupling_inverse_cached(layer: Coupling, n: np.ndarray):
    d = layer.split
    n1, n2 = n[:d], n[d:]
    sraw, s_cache = _subnet_forward_cached(layer.s, n1)
    sc = soft_clamp(sraw, layer.s_clamp)
    exp_neg = np.exp(-sc)
    t_out, t_cache = _subnet_forward_cached(layer.t, n1)
    m2 = (n2 - t_out) * exp_neg
    r_out, r_cache = _subnet_forward_cached(layer.r, m2)
    m1 = n1 - r_out
    cache = {"m2": m2, "sraw": sraw, "exp_neg": exp_neg,
             "r": r_cache, "s": s_cache, "t": t_cache}
    return np.concatenate([m1, m2], axis=0), cache


def _coupling_backward_inverse(layer: Coupling, cache, grad_m: np.ndarray,
                               grads: dict, prefix: str) -> np.ndarray:
    d = layer.split
    gm1, gm2 = grad_m[:d], grad_m[d:]

    # m1 = n1 - r(m2): the r-path feeds additional gradient into m2
    g_m2 = gm2 + _subnet_backward(layer.r, cache["r"], -gm1, grads, f"{prefix}.r")

    # m2 = (n2 - t(n1)) * exp(-sc(n1))
    g_n2 = g_m2 * cache["exp_neg"]
    grad_sraw = -(g_m2 * cache["m2"]) * soft_clamp_grad(cache["sraw"], layer.s_clamp)

    g_n1 = gm1 + _subnet_backward(layer.t, cache["t"], -g_n2, grads, f"{prefix}.t")
    g_n1 += _subnet_backward(layer.s, cache["s"], grad_sraw, grads, f"{prefix}.s")
    return np.concatenate([g_n1, g_n2], axis=0)


def _mixing_cnhw(matrix: np.ndarray, x: np.ndarray) -> np.ndarray:
    c, n, h, w = x.shape
    return (matrix @ x.reshape(c, n * h * w)).reshape(c, n, h, w)


def mixing_forward(matrix: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multiply every pixel's channel vector by the mixing matrix."""
    _check_channels(matrix.shape[0], x, "mixing_forward")
    return from_cnhw(_mixing_cnhw(matrix, to_cnhw(x)))


def mixing_inverse(matrix: np.ndarray, y: np.ndarray) -> np.ndarray:
    return mixing_forward(mat_inverse(matrix), y)


@dataclass
class Block:
    """One invertible stage: channel mixing followed by a coupling layer."""

    mixing: np.ndarray  # (C, C)
    coupling: Coupling

    @property
    def channels(self) -> int:
        return self.mixing.shape[0]


@dataclass
class FlowModel:
    """Stack of invertible blocks sharing one even channel count."""

    blocks: list
    channels: int
    hidden: int = DEFAULT_HIDDEN
    s_clamp: float = DEFAULT_S_CLAMP
    slope: float = DEFAULT_SLOPE
    plan: Optional[object] = None  # AugmentationPlan used for training, if any
    provenance: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def dtype(self):
        return self.blocks[0].mixing.dtype


def build_model(channels: int, n_blocks: int, hidden: int = DEFAULT_HIDDEN,
                s_clamp: float = DEFAULT_S_CLAMP, slope: float = DEFAULT_SLOPE,
                dtype=DEFAULT_DTYPE) -> FlowModel:
    """Allocate a model with identity mixings and all-zero subnets."""
    if channels % 2 != 0 or channels < 2:
        raise ShapeError(f"channel count must be even and >= 2, got {channels}")
    if n_blocks < 1:
        raise ShapeError(f"need at least one block, got {n_blocks}")
    d = channels // 2
    blocks = []
    for _ in range(n_blocks):
        coupling = Coupling(
            split=d,
            r=subnet_zero(channels - d, d, hidden, slope, dtype),
            s=subnet_zero(d, channels - d, hidden, slope, dtype),
            t=subnet_zero(d, channels - d, hidden, slope, dtype),
            s_clamp=s_clamp,
        )
        blocks.append(Block(np.eye(channels, dtype=dtype), coupling))
    return FlowModel(blocks, channels, hidden, s_clamp, slope)


def init_model(channels: int, n_blocks: int, hidden: int = DEFAULT_HIDDEN,
               rng: np.random.Generator | int = 0, s_clamp: float = DEFAULT_S_CLAMP,
               slope: float = DEFAULT_SLOPE, dtype=DEFAULT_DTYPE) -> FlowModel:
    """Fresh model: random orthogonal mixings, subnets with zero final layers.

    Every coupling therefore starts as the identity map, so the whole model
    initially applies only the mixing matrices. Deterministic given the seed.
    """
    if isinstance(rng, int):
        rng = make_rng(rng)
    model = build_model(channels, n_blocks, hidden, s_clamp, slope, dtype)
    d = channels // 2
    for block in model.blocks:
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        block.mixing = q.astype(dtype)
        block.coupling.r = subnet_init(channels - d, d, hidden, rng, slope, dtype)
        block.coupling.s = subnet_init(d, channels - d, hidden, rng, slope, dtype)
        block.coupling.t = subnet_init(d, channels - d, hidden, rng, slope, dtype)
    return model


def _model_fwd_cnhw(model: FlowModel, x: np.ndarray) -> np.ndarray:
    for block in model.blocks:
        x = _coupling_fwd_cnhw(block.coupling, _mixing_cnhw(block.mixing, x))
    return x


def _model_inv_cnhw(model: FlowModel, y: np.ndarray) -> np.ndarray:
    for i in range(model.n_blocks - 1, -1, -1):
        block = model.blocks[i]
        inv = mat_inverse(block.mixing, context=f"block{i}.mixing")
        y = _mixing_cnhw(inv, _coupling_inv_cnhw(block.coupling, y))
    return y


def model_forward(model: FlowModel, x: np.ndarray) -> np.ndarray:
    """Apply every block in order (mixing, then coupling)."""
    _check_channels(model.channels, x, "model_forward")
    return from_cnhw(_model_fwd_cnhw(model, to_cnhw(x)))


def model_inverse(model: FlowModel, y: np.ndarray) -> np.ndarray:
    """Apply block inverses in reverse order (coupling, then mixing)."""
    _check_channels(model.channels, y, "model_inverse")
    return from_cnhw(_model_inv_cnhw(model, to_cnhw(y)))


def _model_forward_cached(model: FlowModel, x: np.ndarray):
    caches = []
    for block in model.blocks:
        mixed = _mixing_cnhw(block.mixing, x)
        out, ccache = _coupling_forward_cached(block.coupling, mixed)
        caches.append({"x_in": x, "coupling": ccache})
        x = out
    return x, caches


def _model_backward_forward(model: FlowModel, caches, grad_out: np.ndarray,
                            grads: dict) -> np.ndarray:
    g = grad_out
    for i in range(model.n_blocks - 1, -1, -1):
        block, cache = model.blocks[i], caches[i]
        g = _coupling_backward_forward(block.coupling, cache["coupling"], g,
                                       grads, f"block{i}")
        x_in = cache["x_in"]
        c = x_in.shape[0]
        g2 = g.reshape(c, -1)
        grads[f"block{i}.mixing"] += g2 @ x_in.reshape(c, -1).T
        g = (block.mixing.T @ g2).reshape(x_in.shape)
    return g


def _model_inverse_cached(model: FlowModel, y: np.ndarray):
    caches = [None] * model.n_blocks
    for i in range(model.n_blocks - 1, -1, -1):
        block = model.blocks[i]
        mid, ccache = _coupling_inverse_cached(block.coupling, y)
        inv = mat_inverse(block.mixing, context=f"block{i}.mixing")
        y = _mixing_cnhw(inv, mid)
        caches[i] = {"coupling": ccache, "mid": mid, "inv": inv}
    return y, caches


def _model_backward_inverse(model: FlowModel, caches, grad_out: np.ndarray,
                            grads: dict) -> np.ndarray:
    """Backprop through the inverse pass, including d(W^-1)/dW = -W^-1 dW W^-1."""
    g = grad_out
    for i in range(model.n_blocks):
        block, cache = model.blocks[i], caches[i]
        inv, mid = cache["inv"], cache["mid"]
        c = mid.shape[0]
        g2 = g.reshape(c, -1)
        grad_inv = g2 @ mid.reshape(c, -1).T
        grads[f"block{i}.mixing"] += -(inv.T @ grad_inv @ inv.T)
        g = (inv.T @ g2).reshape(mid.shape)
        g = _coupling_backward_inverse(block.coupling, cache["coupling"], g,
                                       grads, f"block{i}")
    return g


def named_parameters(model: FlowModel) -> list:
    """Canonical (name, array) list; order is stable across runs and builds."""
    params = []
    for i, block in enumerate(model.blocks):
        params.append((f"block{i}.mixing", block.mixing))
        for net_name in ("r", "s", "t"):
            net = getattr(block.coupling, net_name)
            for layer in range(N_SUBNET_LAYERS):
                params.append((f"block{i}.{net_name}.w{layer}", net.weights[layer]))
                params.append((f"block{i}.{net_name}.b{layer}", net.biases[layer]))
    return params


def set_parameter(model: FlowModel, name: str, value: np.ndarray) -> None:
    """Assign one named parameter (used by checkpoint loading)."""
    parts = name.split(".")
    block = model.blocks[int(parts[0].removeprefix("block"))]
    if parts[1] == "mixing":
        if value.shape != block.mixing.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {block.mixing.shape}")
        block.mixing = value
        return
    net = getattr(block.coupling, parts[1])
    layer = int(parts[2][1:])
    target = net.weights if parts[2][0] == "w" else net.biases
    if value.shape != target[layer].shape:
        raise ShapeError(f"{name}: shape {value.shape} != {target[layer].shape}")
    target[layer] = value


def zero_gradients(model: FlowModel) -> dict:
    """Gradient accumulator with one zero array per learnable parameter."""
    return {name: np.zeros_like(arr) for name, arr in named_parameters(model)}


def model_astype(model: FlowModel, dtype) -> FlowModel:
    """Deep copy with every parameter cast to ``dtype`` (e.g. float64 checks)."""
    clone = build_model(model.channels, model.n_blocks, model.hidden,
                        model.s_clamp, model.slope, dtype)
    clone.plan = model.plan
    clone.provenance = dict(model.provenance)
    for name, arr in named_parameters(model):
        set_parameter(clone, name, arr.astype(dtype))
    return clone
