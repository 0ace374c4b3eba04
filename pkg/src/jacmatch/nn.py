"""Layers, networks and the binary checkpoint format.

Networks are plain containers of numpy parameter arrays.  ``forward`` takes an
optional mapping from parameter name to :class:`Tensor` so the same network can
be evaluated with taped parameters (training), or with detached constants
(teacher, evaluation).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError


# layers -----------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind = "dense"

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def fans(self):
        return self.in_features, self.out_features

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"dense: expected input ({self.in_features},), got {shape}")
        return (self.out_features,)

    def apply(self, x, p):
        return ops.add(ops.matmul(x, ops.transpose(p["weight"])), p["bias"])

    def spec(self):
        return {"kind": "dense", "in": self.in_features, "out": self.out_features}


@dataclass(frozen=True)
class Conv2d:
    """3x3 kernels, stride 1, zero padding 1."""

    in_channels: int
    out_channels: int
    kind = "conv2d"

    def param_shapes(self):
        return {"weight": (self.out_channels, self.in_channels, 3, 3),
                "bias": (self.out_channels,)}

    def fans(self):
        return self.in_channels * 9, self.out_channels * 9

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"conv2d: expected ({self.in_channels}, H, W) input, got {shape}")
        return (self.out_channels,) + tuple(shape[1:])

    def apply(self, x, p):
        return ops.conv2d(x, p["weight"], p["bias"], padding=1)

    def spec(self):
        return {"kind": "conv2d", "in": self.in_channels, "out": self.out_channels}


@dataclass(frozen=True)
class _Parameterless:
    kind = ""

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return shape

    def spec(self):
        return {"kind": self.kind}


class ReLU(_Parameterless):
    kind = "relu"

    def apply(self, x, p):
        return ops.relu(x)


class Sigmoid(_Parameterless):
    kind = "sigmoid"

    def apply(self, x, p):
        return ops.sigmoid(x)


class MaxPool2d(_Parameterless):
    kind = "maxpool"

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"maxpool: expected (C, H>=2, W>=2) input, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def apply(self, x, p):
        return ops.maxpool2d(x)


class GlobalAvgPool(_Parameterless):
    kind = "gap"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"gap: expected (C, H, W) input, got {shape}")
        return (shape[0],)

    def apply(self, x, p):
        return ops.global_avg_pool(x)


class Flatten(_Parameterless):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def apply(self, x, p):
        return ops.reshape(x, (x.shape[0], -1))


@dataclass(frozen=True)
class Softmax(_Parameterless):
    temperature: float = 1.0
    kind = "softmax"

    def apply(self, x, p):
        return ops.softmax(x, axis=-1, temperature=self.temperature)

    def spec(self):
        return {"kind": "softmax", "temperature": self.temperature}


_PIECEWISE_LINEAR = {"dense", "conv2d", "relu", "maxpool", "gap", "flatten"}


def layer_from_spec(spec: dict):
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"])
    if kind == "conv2d":
        return Conv2d(spec["in"], spec["out"])
    if kind == "softmax":
        return Softmax(spec.get("temperature", 1.0))
    simple = {"relu": ReLU, "sigmoid": Sigmoid, "maxpool": MaxPool2d,
              "gap": GlobalAvgPool, "flatten": Flatten}
    if kind not in simple:
        raise ValueError(f"unknown layer kind {kind!r}")
    return simple[kind]()


# networks ---------------------------------------------------------------------

@dataclass
class Activations:
    logits: dict
    taps: dict


@dataclass(frozen=True)
class ActivationPattern:
    """ReLU sign bits and max-pool argmax indices for one input (or batch)."""

    relu_signs: tuple
    pool_indices: tuple

    def __eq__(self, other):
        if not isinstance(other, ActivationPattern):
            return NotImplemented
        return (
            len(self.relu_signs) == len(other.relu_signs)
            and len(self.pool_indices) == len(other.pool_indices)
            and all(np.array_equal(a, b) for a, b in zip(self.relu_signs, other.relu_signs))
            and all(np.array_equal(a, b) for a, b in zip(self.pool_indices, other.pool_indices))
        )

    def __hash__(self):
        return hash(tuple(a.tobytes() for a in self.relu_signs + self.pool_indices))


@dataclass
class Network:
    """Trunk of layers followed by one or two dense heads sharing the trunk."""

    input_shape: tuple
    trunk: list
    heads: dict
    feature_taps: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.feature_taps = tuple(self.feature_taps)
        if not self.heads or len(self.heads) > 2:
            raise ValueError("a network needs one or two heads")
        shapes = self.trunk_shapes()
        for name, head in self.heads.items():
            head.output_shape(shapes[-1] if shapes else self.input_shape)
        for t in self.feature_taps:
            if not 0 <= t < len(self.trunk) or len(shapes[t]) != 3:
                raise ValueError(f"feature tap {t} is not a spatial trunk position")

    # structure

    def trunk_shapes(self) -> list:
        shapes, shape = [], self.input_shape
        for layer in self.trunk:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def tap_shape(self, tap: int) -> tuple:
        return self.trunk_shapes()[tap]

    def param_specs(self) -> dict:
        specs = {}
        for i, layer in enumerate(self.trunk):
            for pname, shape in layer.param_shapes().items():
                specs[f"trunk.{i}.{pname}"] = shape
        for hname, head in self.heads.items():
            for pname, shape in head.param_shapes().items():
                specs[f"head.{hname}.{pname}"] = shape
        return specs

    @property
    def head_names(self) -> list:
        return list(self.heads)

    def n_outputs(self, head: Optional[str] = None) -> int:
        return self.heads[self._head(head)].out_features

    def init_params(self, seed: int) -> "Network":
        """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        params = {}
        layers = [(f"trunk.{i}", l) for i, l in enumerate(self.trunk)]
        layers += [(f"head.{h}", l) for h, l in self.heads.items()]
        for prefix, layer in layers:
            shapes = layer.param_shapes()
            if not shapes:
                continue
            fan_in, fan_out = layer.fans()
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{prefix}.weight"] = rng.uniform(-a, a, size=shapes["weight"])
            params[f"{prefix}.bias"] = np.zeros(shapes["bias"])
        self.params = params
        return self

    def copy(self) -> "Network":
        return Network(self.input_shape, list(self.trunk), dict(self.heads),
                       self.feature_taps, {k: v.copy() for k, v in self.params.items()})

    def load_params(self, tensors: dict, strict: bool = True) -> "Network":
        specs = self.param_specs()
        for name, shape in specs.items():
            if name not in tensors:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != expected {tuple(shape)}"
                )
            self.params[name] = value.copy()
        return self

    # evaluation

    def _head(self, head):
        if head is None:
            return next(iter(self.heads))
        if head not in self.heads:
            raise KeyError(f"unknown head {head!r}; network has {self.head_names}")
        return head

    def _tensors(self, params):
        if params is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return params

    def run(self, x, params=None, heads=None) -> Activations:
        """One pass returning the logits of the requested heads and every tap."""
        p = self._tensors(params)
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.shape == self.input_shape
        if single:
            x = ops.reshape(x, (1,) + self.input_shape)
        elif x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape} does not match network input {self.input_shape}")
        taps = {}
        h = x
        for i, layer in enumerate(self.trunk):
            h = layer.apply(h, _scoped(p, f"trunk.{i}", layer))
            if i in self.feature_taps:
                taps[i] = ops.reshape(h, h.shape[1:]) if single else h
        names = self.head_names if heads is None else [self._head(n) for n in heads]
        logits = {}
        for name in names:
            out = self.heads[name].apply(h, _scoped(p, f"head.{name}", self.heads[name]))
            logits[name] = ops.reshape(out, out.shape[1:]) if single else out
        return Activations(logits, taps)

    def features(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Trunk output (the input of every head), one row per sample."""
        X = np.asarray(X, dtype=np.float64)
        rows = []
        for i in range(0, len(X), batch_size):
            h = Tensor(X[i: i + batch_size])
            for j, layer in enumerate(self.trunk):
                h = layer.apply(h, _scoped(self._tensors(None), f"trunk.{j}", layer))
            rows.append(h.data.reshape(len(h.data), -1))
        return np.concatenate(rows) if rows else np.zeros((0, self.heads[self._head(None)].in_features))

    def forward(self, x, head: Optional[str] = None, params=None) -> Tensor:
        """Pre-softmax logits of ``head`` (the first head by default)."""
        name = self._head(head)
        return self.run(x, params=params, heads=[name]).logits[name]

    def bind(self, params=None, head: Optional[str] = None) -> Callable[[Tensor], Tensor]:
        name = self._head(head)
        return lambda x: self.forward(x, name, params)

    def predict_logits(self, X: np.ndarray, head: Optional[str] = None, batch_size: int = 512) -> np.ndarray:
        outs = [self.forward(Tensor(X[i: i + batch_size]), head).data
                for i in range(0, len(X), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.n_outputs(head)))

    # serialization of the architecture

    def to_spec(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "trunk": [l.spec() for l in self.trunk],
            "heads": {k: v.spec() for k, v in self.heads.items()},
            "feature_taps": list(self.feature_taps),
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "Network":
        return cls(
            tuple(spec["input_shape"]),
            [layer_from_spec(s) for s in spec["trunk"]],
            {k: layer_from_spec(v) for k, v in spec["heads"].items()},
            tuple(spec.get("feature_taps", ())),
        )


def _scoped(params, prefix, layer):
    names = layer.param_shapes()
    if not names:
        return None
    return {n: params[f"{prefix}.{n}"] for n in names}


# builders ---------------------------------------------------------------------

def vgg(blocks, input_shape, n_classes, heads=None) -> Network:
    """VGG-style trunk: each int is conv3x3+ReLU with that many channels,
    ``"M"`` is a 2x2 max pool; then global average pooling and dense heads.

    ``heads`` maps head names to output sizes; by default a single head
    ``"out"`` with ``n_classes`` outputs.  Taps are placed on every ReLU and
    max-pool output.
    """
    trunk, taps = [], []
    channels = input_shape[0]
    for b in blocks:
        if b == "M":
            trunk.append(MaxPool2d())
        else:
            trunk.append(Conv2d(channels, int(b)))
            trunk.append(ReLU())
            channels = int(b)
        if not isinstance(trunk[-1], Conv2d):
            taps.append(len(trunk) - 1)
    trunk.append(GlobalAvgPool())
    heads = heads or {"out": n_classes}
    return Network(tuple(input_shape), trunk,
                   {name: Dense(channels, k) for name, k in heads.items()}, tuple(taps))


def vgg_2t(input_shape, n_classes, width: int = 8, heads=None) -> Network:
    """Desk-scale teacher: [w - M - 2w - M - GAP - dense]."""
    return vgg([width, "M", 2 * width, "M"], input_shape, n_classes, heads)


def vgg_1s(input_shape, n_classes, width: int = 8, heads=None) -> Network:
    """Desk-scale student: [w - M - GAP - dense]."""
    return vgg([width, "M"], input_shape, n_classes, heads)


def mlp(sizes, activation: str = "relu", heads=None) -> Network:
    """Fully connected network; ``sizes`` = [D, hidden..., k]."""
    act = {"relu": ReLU, "sigmoid": Sigmoid}[activation]
    trunk = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        trunk += [Dense(a, b), act()]
    heads = heads or {"out": sizes[-1]}
    return Network((sizes[0],), trunk, {n: Dense(sizes[-2], k) for n, k in heads.items()})


ARCHITECTURES = {"vgg-2t": vgg_2t, "vgg-1s": vgg_1s}


def build(arch: str, input_shape, n_classes, width: int = 8, heads=None, hidden=None,
          activation: str = "relu") -> Network:
    if arch in ARCHITECTURES:
        return ARCHITECTURES[arch](tuple(input_shape), n_classes, width, heads)
    if arch == "mlp":
        dim = int(np.prod(input_shape))
        return mlp([dim] + list(hidden or [width]) + [n_classes], activation, heads)
    raise ValueError(f"unknown architecture {arch!r}")


# analysis ---------------------------------------------------------------------

def activation_pattern(net: Network, x, params=None) -> ActivationPattern:
    """Sign bits of every ReLU pre-activation (0 at exactly 0) and every
    max-pool argmax for input ``x``."""
    for layer in net.trunk:
        if layer.kind not in _PIECEWISE_LINEAR:
            raise ValueError(f"activation pattern undefined: trunk contains {layer.kind!r}")
    p = net._tensors(params)
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape == net.input_shape:
        h = ops.reshape(h, (1,) + net.input_shape)
    signs, pools = [], []
    for i, layer in enumerate(net.trunk):
        if layer.kind == "relu":
            signs.append((h.data > 0).astype(np.uint8))
        elif layer.kind == "maxpool":
            pools.append(ops.maxpool2d_indices(h))
        h = layer.apply(h, _scoped(p, f"trunk.{i}", layer))
    return ActivationPattern(tuple(signs), tuple(pools))


_CHANNELWISE = {"relu", "sigmoid", "maxpool", "gap"}


def permute_hidden(net: Network, layer_index: int, permutation) -> Network:
    """Permute the output units of trunk layer ``layer_index`` and the matching
    inputs of the next parameterized layer.  The function is unchanged."""
    perm = np.asarray(permutation)
    layer = net.trunk[layer_index]
    if layer.kind not in ("dense", "conv2d"):
        raise ValueError(f"trunk layer {layer_index} ({layer.kind}) has no hidden units")
    units = layer.out_features if layer.kind == "dense" else layer.out_channels
    if perm.shape != (units,) or not np.array_equal(np.sort(perm), np.arange(units)):
        raise ValueError(f"permutation must be a bijection over {units} units, got {perm.tolist()}")
    out = net.copy()
    prefix = f"trunk.{layer_index}"
    out.params[f"{prefix}.weight"] = net.params[f"{prefix}.weight"][perm]
    out.params[f"{prefix}.bias"] = net.params[f"{prefix}.bias"][perm]
    shapes = net.trunk_shapes()
    column_perm = perm
    for j in range(layer_index + 1, len(net.trunk)):
        nxt = net.trunk[j]
        if nxt.kind in ("dense", "conv2d"):
            name = f"trunk.{j}.weight"
            out.params[name] = net.params[name][:, column_perm]
            return out
        if nxt.kind == "flatten":
            spatial = int(np.prod(shapes[j - 1][1:]))
            column_perm = (column_perm[:, None] * spatial + np.arange(spatial)).reshape(-1)
        elif nxt.kind not in _CHANNELWISE:
            raise ValueError(f"cannot permute units through a {nxt.kind!r} layer")
    for h in net.heads:
        name = f"head.{h}.weight"
        out.params[name] = net.params[name][:, column_perm]
    return out


# checkpoints ------------------------------------------------------------------

MAGIC = b"JMCK"
VERSION = 1
_DTYPE_F64 = 1


def save_checkpoint(path, tensors: dict, metadata: Optional[dict] = None) -> None:
    """Versioned container: magic, version, JSON metadata, then named float64 tensors."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Return ``(tensors, metadata)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    metadata = json.loads(buf[off: off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off: off + nlen].decode("utf-8")
        off += nlen
        tag, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        if tag != _DTYPE_F64:
            raise ValueError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise ValueError(f"{path}: truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).copy()
        off += nbytes
    return tensors, metadata


def save_network(path, net: Network, extra: Optional[dict] = None, metadata: Optional[dict] = None) -> None:
    meta = dict(metadata or {})
    meta["network"] = net.to_spec()
    tensors = dict(net.params)
    for k, v in (extra or {}).items():
        tensors[k] = v
    save_checkpoint(path, tensors, meta)


def load_network(path) -> Network:
    tensors, meta = load_checkpoint(path)
    if "network" not in meta:
        raise ValueError(f"{path}: checkpoint carries no network description")
    net = Network.from_spec(meta["network"])
    return net.load_params(tensors)
