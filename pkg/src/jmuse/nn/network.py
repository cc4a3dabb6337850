"""Residual U-shaped convolutional network used as the energy backbone.

The architecture is described by a flat layer list (see :class:`NetworkSpec`)
and interpreted by :func:`build`. Skip connections are handled with a small
stack: ``push`` saves the current activation, ``merge`` pops it and adds it.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class RejectedInputError(ValueError):
    """Input tensor does not fit the network (channels or spatial size)."""


class NumericError(FloatingPointError):
    """A layer produced NaN or Inf."""


LAYER_KINDS = ("conv", "down", "up", "relu", "push", "merge")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1

    @property
    def has_weight(self) -> bool:
        return self.kind in ("conv", "down", "up")

    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.kind == "up":
            # stored in conv2d orientation: (low-res channels, high-res channels, k, k)
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list of a U-shaped residual network.

    ``widths`` lists channel counts from the finest to the coarsest level;
    the number of levels is ``len(widths)``.
    """

    channels: int
    widths: tuple[int, ...] = (16, 32)
    layers: tuple[LayerSpec, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channel count must be positive")
        if not self.widths or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"channel widths must strictly increase, got {self.widths}")
        if not self.layers:
            object.__setattr__(self, "layers", _unet_layers(self.channels, self.widths))

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def factor(self) -> int:
        """Spatial dims must be divisible by this."""
        return 2 ** (self.levels - 1)

    def describe(self) -> dict:
        return {
            "architecture": "residual-unet",
            "channels": self.channels,
            "widths": list(self.widths),
            "layers": [
                [l.kind, l.in_channels, l.out_channels, l.kernel, l.stride] for l in self.layers
            ],
        }

    @classmethod
    def from_description(cls, desc: dict) -> NetworkSpec:
        layers = tuple(LayerSpec(*row) for row in desc["layers"])
        return cls(int(desc["channels"]), tuple(desc["widths"]), layers)


def _resblock(width: int) -> list[LayerSpec]:
    return [
        LayerSpec("push"),
        LayerSpec("conv", width, width, 3),
        LayerSpec("relu"),
        LayerSpec("conv", width, width, 3),
        LayerSpec("merge"),
    ]


def _unet_layers(channels: int, widths: tuple[int, ...]) -> tuple[LayerSpec, ...]:
    # DRUNet-style: linear head, residual blocks, strided 2x2 down / transposed
    # 2x2 up, and additive skips at every level including head -> tail.
    L = [LayerSpec("conv", channels, widths[0], 3), LayerSpec("push")]
    for lo, hi in zip(widths, widths[1:]):
        L += _resblock(lo) + [LayerSpec("down", lo, hi, 2, 2), LayerSpec("push")]
    L += _resblock(widths[-1])
    for lo, hi in reversed(list(zip(widths, widths[1:]))):
        L += [LayerSpec("merge"), LayerSpec("up", hi, lo, 2, 2)] + _resblock(lo)
    L += [LayerSpec("merge"), LayerSpec("conv", widths[0], channels, 3)]
    return tuple(L)


class ParamStore:
    """Named parameters in layer order, plus Adam moments."""

    def __init__(self, params: OrderedDict[str, np.ndarray] | None = None):
        self.params: OrderedDict[str, np.ndarray] = params if params is not None else OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def copy(self) -> ParamStore:
        out = ParamStore(OrderedDict((k, v.copy()) for k, v in self.params.items()))
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def astype(self, dtype) -> ParamStore:
        """Parameter copy in another precision (64-bit is used for gradient checks)."""
        return ParamStore(OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float32)


def param_name(index: int, layer: LayerSpec) -> str:
    return f"{index:02d}_{layer.kind}.weight"


def init_params(spec: NetworkSpec, seed: int = 0, zero_last: bool = True) -> ParamStore:
    """He-normal initialization; the output convolution starts at zero so phi(x) = 0."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    weighted = [(i, l) for i, l in enumerate(spec.layers) if l.has_weight]
    for n, (i, layer) in enumerate(weighted):
        shape = layer.weight_shape()
        fan_in = layer.in_channels * layer.kernel**2
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if zero_last and n == len(weighted) - 1:
            w = np.zeros(shape)
        params[param_name(i, layer)] = w.astype(np.float32)
    return ParamStore(params)


def build(spec: NetworkSpec, weights: dict[str, Tensor], x: Tensor, check: bool = True) -> Tensor:
    """Evaluate the network on a tensor, recording the graph when enabled."""
    _check_input(spec, x.shape)
    h = x
    stack: list[Tensor] = []
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "conv":
            h = ad.conv2d(h, weights[param_name(i, layer)], 1, layer.kernel // 2)
        elif kind == "down":
            h = ad.conv2d(h, weights[param_name(i, layer)], layer.stride, 0)
        elif kind == "up":
            hw = (h.shape[2] * layer.stride, h.shape[3] * layer.stride)
            h = ad.conv_transpose2d(h, weights[param_name(i, layer)], layer.stride, 0, hw)
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "push":
            stack.append(h)
        elif kind == "merge":
            h = ad.add(h, stack.pop())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if check and not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activation after layer {i} ({kind})")
    return h


def _check_input(spec: NetworkSpec, shape: tuple[int, ...]) -> None:
    if len(shape) != 4:
        raise RejectedInputError(f"expected (batch, channel, height, width), got {shape}")
    if shape[1] != spec.channels:
        raise RejectedInputError(f"expected {spec.channels} channels, got {shape[1]}")
    f = spec.factor
    if shape[2] % f or shape[3] % f:
        raise RejectedInputError(f"spatial dims {shape[2:]} not divisible by {f}")


def _weight_tensors(params: ParamStore, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def forward(spec: NetworkSpec, params: ParamStore, x: np.ndarray) -> np.ndarray:
    """phi(x) for a batch ``x`` of shape (N, C, H, W)."""
    x = np.asarray(x, dtype=params.dtype)
    with ad.no_grad():
        return build(spec, _weight_tensors(params, False), Tensor(x)).data


def vjp(
    spec: NetworkSpec, params: ParamStore, x: np.ndarray, cotangent: np.ndarray
) -> tuple[np.ndarray, OrderedDict[str, np.ndarray]]:
    """Gradients of ``<forward(x), cotangent>`` with respect to x and each parameter."""
    x = np.asarray(x, dtype=params.dtype)
    cotangent = np.asarray(cotangent, dtype=params.dtype)
    if cotangent.shape != x.shape:
        raise RejectedInputError(f"cotangent shape {cotangent.shape} != output shape {x.shape}")
    xt = Tensor(x, requires_grad=True)
    weights = _weight_tensors(params, True)
    out = build(spec, weights, xt)
    names = list(weights)
    grads = ad.grad(out, [xt] + [weights[n] for n in names], Tensor(cotangent))
    return grads[0].data, OrderedDict((n, g.data) for n, g in zip(names, grads[1:]))


# ---------------------------------------------------------------------------
# MEN1 checkpoints

MEN1_MAGIC = b"MEN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec: NetworkSpec, params: ParamStore, extra: dict | None = None) -> None:
    header = spec.describe()
    header["params"] = [[name, list(arr.shape)] for name, arr in params.items()]
    if extra:
        header["extra"] = extra
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.params.values()
    )
    blob = MEN1_MAGIC + struct.pack("<I", len(text)) + text + payload
    atomic_write(path, blob)


def load_checkpoint(path) -> tuple[NetworkSpec, ParamStore, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MEN1_MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    spec = NetworkSpec.from_description(header)
    offset = 8 + n
    params = OrderedDict()
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        chunk = blob[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError("truncated payload")
        params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError("trailing bytes after payload")
    return spec, ParamStore(params), header.get("extra", {})


def atomic_write(path, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
