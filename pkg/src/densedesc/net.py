"""Compact fully-convolutional descriptor network with hand-rolled gradients.

The network maps an (H, W, 3) image to an (H, W, D) descriptor image.
Layers are 3x3 zero-padded convolutions (stride 1 or 2), ReLU, and bilinear
upsampling; the architecture invariant is that strides and upsample factors
cancel so output spatial dims equal input spatial dims.

Everything is numpy float64 and written to be exactly differentiable:
backward() returns the true reverse-mode gradients of forward(), verified
against central finite differences in the test suite.  Convolutions are
evaluated as im2col matrix products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteGradientError, ShapeError

KERNEL = 3  # all convolutions are 3x3, zero padding 1


# --- architecture ------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    stride: int = 1

    def to_json(self):
        return {"kind": "conv", "in_channels": self.in_channels,
                "out_channels": self.out_channels, "stride": self.stride}


@dataclass(frozen=True)
class Relu:
    def to_json(self):
        return {"kind": "relu"}


@dataclass(frozen=True)
class Upsample:
    factor: int

    def to_json(self):
        return {"kind": "upsample", "factor": self.factor}


@dataclass(frozen=True)
class NetArchitecture:
    layers: tuple
    descriptor_dim: int

    def __post_init__(self):
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        ch = 3
        scale = 1.0
        for layer in self.layers:
            if isinstance(layer, Conv):
                if layer.in_channels != ch:
                    raise ValueError(f"conv expects {layer.in_channels} channels, "
                                     f"gets {ch}")
                if layer.stride not in (1, 2):
                    raise ValueError("conv stride must be 1 or 2")
                ch = layer.out_channels
                scale /= layer.stride
            elif isinstance(layer, Upsample):
                scale *= layer.factor
        if ch != self.descriptor_dim:
            raise ValueError(f"final channel count {ch} != descriptor_dim "
                             f"{self.descriptor_dim}")
        if scale != 1.0:
            raise ValueError("strides and upsample factors do not cancel "
                             f"(net scale {scale})")

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            if isinstance(layer, Conv):
                s *= layer.stride
        return s

    def conv_layers(self) -> list[Conv]:
        return [l for l in self.layers if isinstance(l, Conv)]

    def check_input(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        s = self.total_stride
        if h % s or w % s:
            raise ShapeError(f"image dims {w}x{h} not divisible by net stride {s}")

    def to_json(self):
        return {"descriptor_dim": self.descriptor_dim,
                "layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> "NetArchitecture":
        layers = []
        for l in d["layers"]:
            if l["kind"] == "conv":
                layers.append(Conv(l["in_channels"], l["out_channels"], l["stride"]))
            elif l["kind"] == "relu":
                layers.append(Relu())
            elif l["kind"] == "upsample":
                layers.append(Upsample(l["factor"]))
            else:
                raise ValueError(f"unknown layer kind {l['kind']!r}")
        return cls(layers=tuple(layers), descriptor_dim=d["descriptor_dim"])


def default_architecture(descriptor_dim: int = 3) -> NetArchitecture:
    """Stride-4 conv stack with bilinear x4 upsampling back to full resolution."""
    return NetArchitecture(layers=(
        Conv(3, 16, stride=2), Relu(),
        Conv(16, 32, stride=2), Relu(),
        Conv(32, 32, stride=1), Relu(),
        Conv(32, descriptor_dim, stride=1),
        Upsample(4),
    ), descriptor_dim=descriptor_dim)


@dataclass
class NetParams:
    """One (weight, bias) pair per conv layer, in network order."""

    weights: list    # (3, 3, in_ch, out_ch) each
    biases: list     # (out_ch,) each

    def tensors(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


def init_params(arch: NetArchitecture, rng) -> NetParams:
    """He-scaled normal initialization: std = sqrt(2 / fan_in), zero biases."""
    weights, biases = [], []
    for conv in arch.conv_layers():
        fan_in = KERNEL * KERNEL * conv.in_channels
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(KERNEL, KERNEL, conv.in_channels,
                                                  conv.out_channels)))
        biases.append(np.zeros(conv.out_channels))
    return NetParams(weights, biases)


# --- layer math --------------------------------------------------------------

def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """(H, W, C) -> (Ho*Wo, 9C) patch matrix for a padded 3x3 convolution."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(0, 1))
    win = win[::stride, ::stride]                      # (Ho, Wo, C, 3, 3)
    win = win.transpose(0, 1, 3, 4, 2)                 # (Ho, Wo, 3, 3, C)
    ho, wo = win.shape[:2]
    return np.ascontiguousarray(win).reshape(ho * wo, -1), (ho, wo)


def _conv_forward(x, w, b, stride):
    patches, (ho, wo) = _im2col(x, stride)
    cout = w.shape[3]
    y = patches @ w.reshape(-1, cout) + b
    return y.reshape(ho, wo, cout), (patches, x.shape, stride, (ho, wo))


def _conv_backward(grad_y, w, cache):
    patches, x_shape, stride, (ho, wo) = cache
    cout = w.shape[3]
    g = grad_y.reshape(-1, cout)
    grad_w = (patches.T @ g).reshape(w.shape)
    grad_b = g.sum(axis=0)
    grad_patches = (g @ w.reshape(-1, cout).T).reshape(ho, wo, KERNEL, KERNEL,
                                                       x_shape[2])
    h, w_in, c = x_shape
    grad_pad = np.zeros((h + 2, w_in + 2, c))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            grad_pad[ky:ky + stride * ho:stride,
                     kx:kx + stride * wo:stride] += grad_patches[:, :, ky, kx]
    return grad_w, grad_b, grad_pad[1:-1, 1:-1]


def _linear_axis_coeffs(n_in: int, factor: int):
    """Half-pixel bilinear resampling coefficients for one axis."""
    out = np.arange(n_in * factor, dtype=np.float64)
    x = np.clip((out + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = x - i0
    return i0, i1, 1.0 - w1, w1


def _upsample_forward(x, factor):
    h, w = x.shape[:2]
    r0, r1, rw0, rw1 = _linear_axis_coeffs(h, factor)
    y = x[r0] * rw0[:, None, None] + x[r1] * rw1[:, None, None]
    c0, c1, cw0, cw1 = _linear_axis_coeffs(w, factor)
    y = y[:, c0] * cw0[None, :, None] + y[:, c1] * cw1[None, :, None]
    return y, (x.shape, (r0, r1, rw0, rw1), (c0, c1, cw0, cw1))


def _upsample_backward(grad_y, cache):
    x_shape, (r0, r1, rw0, rw1), (c0, c1, cw0, cw1) = cache
    h, w, c = x_shape
    mid = np.zeros((len(r0), w, c))
    np.add.at(mid, (slice(None), c0), grad_y * cw0[None, :, None])
    np.add.at(mid, (slice(None), c1), grad_y * cw1[None, :, None])
    grad_x = np.zeros(x_shape)
    np.add.at(grad_x, r0, mid * rw0[:, None, None])
    np.add.at(grad_x, r1, mid * rw1[:, None, None])
    return grad_x


# --- network forward / backward ----------------------------------------------

def forward(params: NetParams, arch: NetArchitecture, image: np.ndarray):
    """Run the network; returns (descriptor image, cache for backward)."""
    arch.check_input(image)
    x = np.asarray(image, dtype=np.float64)
    caches = []
    conv_idx = 0
    for layer in arch.layers:
        if isinstance(layer, Conv):
            x, c = _conv_forward(x, params.weights[conv_idx],
                                 params.biases[conv_idx], layer.stride)
            caches.append(("conv", conv_idx, c))
            conv_idx += 1
        elif isinstance(layer, Relu):
            mask = x > 0
            x = x * mask
            caches.append(("relu", None, mask))
        else:
            x, c = _upsample_forward(x, layer.factor)
            caches.append(("upsample", None, c))
    return x, caches


def backward(params: NetParams, arch: NetArchitecture, caches,
             grad_output: np.ndarray):
    """Exact reverse-mode gradients; returns (param gradients, grad wrt input)."""
    grads = NetParams([np.zeros_like(w) for w in params.weights],
                      [np.zeros_like(b) for b in params.biases])
    g = np.asarray(grad_output, dtype=np.float64)
    for kind, conv_idx, cache in reversed(caches):
        if kind == "conv":
            gw, gb, g = _conv_backward(g, params.weights[conv_idx], cache)
            grads.weights[conv_idx] += gw
            grads.biases[conv_idx] += gb
        elif kind == "relu":
            g = g * cache
        else:
            g = _upsample_backward(g, cache)
    return grads, g


# --- optimizer ----------------------------------------------------------------

def lr_schedule(step: int, base_lr: float = 1e-4, decay: float = 0.9,
                decay_every: int = 250) -> float:
    """Stepwise exponential decay: base_lr * decay^(step // decay_every)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return base_lr * decay ** (step // decay_every)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    base_lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 250

    @classmethod
    def init_like(cls, params: NetParams, **kwargs) -> "AdamState":
        return cls(m=[np.zeros_like(t) for t in params.tensors()],
                   v=[np.zeros_like(t) for t in params.tensors()], **kwargs)

    def current_lr(self) -> float:
        return lr_schedule(self.t, self.base_lr, self.lr_decay, self.lr_decay_every)


def adam_step(state: AdamState, params: NetParams, grads: NetParams) -> None:
    """In-place decoupled-weight-decay Adam update.

    Decay is applied directly to parameters (p -= lr * wd * p) before the
    bias-corrected moment update; the learning rate follows lr_schedule with
    state.t counting completed steps.
    """
    for g in grads.tensors():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("gradient contains NaN/Inf; step aborted")
    lr = state.current_lr()
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params.tensors(), grads.tensors())):
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.t = t
    if not params.all_finite():
        raise NonFiniteGradientError("parameters became non-finite after update")


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path_prefix, params: NetParams, arch: NetArchitecture,
                    state: AdamState | None = None) -> None:
    """Write <prefix>.json manifest + <prefix>.bin little-endian tensor blob."""
    prefix = str(path_prefix)
    tensors = []
    names = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tensors += [w, b]
        names += [f"w{i}", f"b{i}"]
    if state is not None:
        for i, m in enumerate(state.m):
            tensors.append(m)
            names.append(f"adam_m{i}")
        for i, v in enumerate(state.v):
            tensors.append(v)
            names.append(f"adam_v{i}")
    manifest = {
        "arch": arch.to_json(),
        "step": state.t if state is not None else 0,
        "optimizer": None if state is None else {
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "weight_decay": state.weight_decay, "base_lr": state.base_lr,
            "lr_decay": state.lr_decay, "lr_decay_every": state.lr_decay_every,
        },
        "dtype": "<f8",
        "tensors": [],
    }
    offset = 0
    for name, t in zip(names, tensors):
        manifest["tensors"].append({"name": name, "shape": list(t.shape),
                                    "offset": offset})
        offset += t.size * 8
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
    with open(prefix + ".bin", "wb") as f:
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path_prefix):
    """Load (params, arch, state); state is None for inference-only checkpoints."""
    prefix = str(path_prefix)
    with open(prefix + ".json") as f:
        manifest = json.load(f)
    blob = Path(prefix + ".bin").read_bytes()
    arrays = {}
    for meta in manifest["tensors"]:
        n = int(np.prod(meta["shape"]))
        arrays[meta["name"]] = np.frombuffer(
            blob, dtype="<f8", count=n, offset=meta["offset"]
        ).reshape(meta["shape"]).copy()
    arch = NetArchitecture.from_json(manifest["arch"])
    n_conv = len(arch.conv_layers())
    params = NetParams([arrays[f"w{i}"] for i in range(n_conv)],
                       [arrays[f"b{i}"] for i in range(n_conv)])
    state = None
    if manifest["optimizer"] is not None:
        opt = manifest["optimizer"]
        n_tensors = 2 * n_conv
        state = AdamState(
            m=[arrays[f"adam_m{i}"] for i in range(n_tensors)],
            v=[arrays[f"adam_v{i}"] for i in range(n_tensors)],
            t=manifest["step"], **opt)
    return params, arch, state
