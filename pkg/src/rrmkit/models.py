"""Model construction with an explicit feature-extractor / head split.

A model is an architecture descriptor plus a named parameter set. The
feature extractor runs every layer (and the optional width adapter);
the head is a single affine map from the penultimate features to class
scores. Checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    DimensionError,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"RRMCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AffineSpec:
    in_dim: int
    out_dim: int
    kind: str = "affine"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    filters: int
    kernel: int
    stride: int = 1
    pad: int = 0
    kind: str = "conv"


@dataclass(frozen=True)
class ReluSpec:
    kind: str = "relu"


@dataclass(frozen=True)
class FlattenSpec:
    kind: str = "flatten"


@dataclass(frozen=True)
class AvgPoolSpec:
    size: int = 2
    kind: str = "avgpool"


LayerSpec = AffineSpec | ConvSpec | ReluSpec | FlattenSpec | AvgPoolSpec

_SPEC_KINDS = {
    "affine": AffineSpec,
    "conv": ConvSpec,
    "relu": ReluSpec,
    "flatten": FlattenSpec,
    "avgpool": AvgPoolSpec,
}


@dataclass(frozen=True)
class ArchDescriptor:
    """Layer stack, penultimate width, class count and optional adapter."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    penultimate_dim: int
    num_classes: int
    adapter_dim: int | None = None

    def validate(self) -> None:
        shape = self._propagate()
        if shape != (self.penultimate_dim,):
            raise ConfigurationError(
                f"extractor output {shape} does not match penultimate dimension {self.penultimate_dim}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")

    def _propagate(self) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            if isinstance(spec, AffineSpec):
                if shape != (spec.in_dim,):
                    raise ConfigurationError(f"layer {i} (affine) expects ({spec.in_dim},), got {shape}")
                shape = (spec.out_dim,)
            elif isinstance(spec, ConvSpec):
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise ConfigurationError(f"layer {i} (conv) expects {spec.in_channels} channels, got {shape}")
                c, h, w = shape
                if (h + 2 * spec.pad - spec.kernel) % spec.stride or (w + 2 * spec.pad - spec.kernel) % spec.stride:
                    raise ConfigurationError(f"layer {i} (conv) has non-integral output extent on input {shape}")
                shape = (
                    spec.filters,
                    (h + 2 * spec.pad - spec.kernel) // spec.stride + 1,
                    (w + 2 * spec.pad - spec.kernel) // spec.stride + 1,
                )
            elif isinstance(spec, AvgPoolSpec):
                if len(shape) != 3 or shape[1] % spec.size or shape[2] % spec.size:
                    raise ConfigurationError(f"layer {i} (avgpool) size {spec.size} does not divide {shape}")
                shape = (shape[0], shape[1] // spec.size, shape[2] // spec.size)
            elif isinstance(spec, FlattenSpec):
                shape = (int(np.prod(shape)),)
            elif isinstance(spec, ReluSpec):
                pass
            else:
                raise ConfigurationError(f"layer {i}: unknown spec {spec!r}")
        return shape

    @property
    def feature_dim(self) -> int:
        """Width of features() output: adapter width if present."""
        return self.adapter_dim if self.adapter_dim is not None else self.penultimate_dim

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [vars(s) | {"kind": s.kind} for s in self.layers],
            "penultimate_dim": self.penultimate_dim,
            "num_classes": self.num_classes,
            "adapter_dim": self.adapter_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            layers.append(_SPEC_KINDS[kind](**entry))
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(layers),
            penultimate_dim=d["penultimate_dim"],
            num_classes=d["num_classes"],
            adapter_dim=d.get("adapter_dim"),
        )


@dataclass
class PassCounters:
    forwards: int = 0
    backwards: int = 0


@dataclass
class Model:
    descriptor: ArchDescriptor
    params: dict[str, Tensor]
    frozen: bool = False
    method_tag: str = "untrained"
    seed: int = 0
    counters: dict[str, PassCounters] = field(default_factory=dict)
    _phase: str = "train"

    @contextlib.contextmanager
    def phase(self, name: str):
        """Attribute subsequent pass counts to the named phase."""
        prev = self._phase
        self._phase = name
        try:
            yield
        finally:
            self._phase = prev

    def _count(self, kind: str) -> None:
        c = self.counters.setdefault(self._phase, PassCounters())
        if kind == "fwd":
            c.forwards += 1
        else:
            c.backwards += 1

    def trainable_params(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """One pass: returns (features, logits), counted as a single forward."""
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        feats = self._extract(xt)
        out = T.affine(feats, self.params["head.W"], self.params["head.b"])
        self._count("fwd")
        return feats, out

    def features(self, x) -> Tensor:
        return self.forward(x)[0]

    def logits(self, x) -> Tensor:
        return self.forward(x)[1]

    def _extract(self, xt: Tensor) -> Tensor:
        d = self.descriptor
        expected = tuple(d.input_shape)
        if xt.shape[1:] != expected:
            raise DimensionError(f"input shape {xt.shape[1:]} does not match descriptor {expected}")
        n = xt.shape[0]
        h = xt
        for i, spec in enumerate(d.layers):
            if isinstance(spec, AffineSpec):
                h = T.affine(h, self.params[f"layer{i}.W"], self.params[f"layer{i}.b"])
            elif isinstance(spec, ConvSpec):
                h = T.conv2d(h, self.params[f"layer{i}.K"], stride=spec.stride, pad=spec.pad)
            elif isinstance(spec, ReluSpec):
                h = T.relu(h)
            elif isinstance(spec, AvgPoolSpec):
                h = T.avg_pool2d(h, spec.size)
            elif isinstance(spec, FlattenSpec):
                h = T.reshape(h, (n, -1))
        if d.adapter_dim is not None:
            h = T.affine(h, self.params["adapter.W"], self.params["adapter.b"])
        return h

    def backward(self, loss: Tensor) -> None:
        T.backward(loss)
        self._count("bwd")

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def total_counts(self) -> PassCounters:
        total = PassCounters()
        for c in self.counters.values():
            total.forwards += c.forwards
            total.backwards += c.backwards
        return total


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _init_params(desc: ArchDescriptor, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, spec in enumerate(desc.layers):
        if isinstance(spec, AffineSpec):
            params[f"layer{i}.W"] = Tensor(_kaiming_uniform(rng, (spec.in_dim, spec.out_dim), spec.in_dim))
            params[f"layer{i}.b"] = Tensor(np.zeros(spec.out_dim))
        elif isinstance(spec, ConvSpec):
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            shape = (spec.filters, spec.in_channels, spec.kernel, spec.kernel)
            params[f"layer{i}.K"] = Tensor(_kaiming_uniform(rng, shape, fan_in))
    if desc.adapter_dim is not None:
        params["adapter.W"] = Tensor(
            _kaiming_uniform(rng, (desc.penultimate_dim, desc.adapter_dim), desc.penultimate_dim)
        )
        params["adapter.b"] = Tensor(np.zeros(desc.adapter_dim))
    params["head.W"] = Tensor(_kaiming_uniform(rng, (desc.feature_dim, desc.num_classes), desc.feature_dim))
    params["head.b"] = Tensor(np.zeros(desc.num_classes))
    return params


def build_model(desc: ArchDescriptor, rng: np.random.Generator, seed: int = 0) -> Model:
    desc.validate()
    return Model(descriptor=desc, params=_init_params(desc, rng), frozen=False, seed=seed)


def attach_adapter(model: Model, target_dim: int, rng: np.random.Generator) -> Model:
    """Insert an affine width adapter after the penultimate layer.

    The head is rebuilt for the new width; features() now returns
    target_dim-wide output. Rejected when widths already agree.
    """
    if target_dim <= 0:
        raise ConfigurationError("adapter target dimension must be positive")
    current = model.descriptor.feature_dim
    if current == target_dim:
        raise ConfigurationError(
            f"feature width is already {target_dim}; attaching an adapter would be a no-op"
        )
    if model.descriptor.adapter_dim is not None:
        raise ConfigurationError("model already has an adapter attached")
    desc = replace(model.descriptor, adapter_dim=target_dim)
    params = {name: Tensor(t.data.copy()) for name, t in model.params.items()}
    params["adapter.W"] = Tensor(_kaiming_uniform(rng, (current, target_dim), current))
    params["adapter.b"] = Tensor(np.zeros(target_dim))
    params["head.W"] = Tensor(_kaiming_uniform(rng, (target_dim, desc.num_classes), target_dim))
    params["head.b"] = Tensor(np.zeros(desc.num_classes))
    return Model(descriptor=desc, params=params, frozen=model.frozen, method_tag=model.method_tag, seed=model.seed)


class TemperatureScaled:
    """View of a model whose logits are divided by a fixed temperature.

    Used to attack a distilled student through its training-time scaling.
    Shares parameters and pass counters with the base model.
    """

    def __init__(self, base: Model, temperature: float):
        if temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        self.base = base
        self.temperature = float(temperature)

    @property
    def descriptor(self) -> ArchDescriptor:
        return self.base.descriptor

    @property
    def frozen(self) -> bool:
        return self.base.frozen

    @property
    def params(self) -> dict[str, Tensor]:
        return self.base.params

    def phase(self, name: str):
        return self.base.phase(name)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        feats, out = self.base.forward(x)
        return feats, T.scale(out, 1.0 / self.temperature)

    def features(self, x) -> Tensor:
        return self.forward(x)[0]

    def logits(self, x) -> Tensor:
        return self.forward(x)[1]

    def backward(self, loss: Tensor) -> None:
        self.base.backward(loss)


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "descriptor": model.descriptor.to_dict(),
        "method": model.method_tag,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {raw[:8]!r}")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header at offset {len(raw)}")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {header.get('version')}")
    desc = ArchDescriptor.from_dict(header["descriptor"])
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        if len(raw) < off + nbytes:
            raise CheckpointTruncatedError(f"{path}: truncated payload at offset {len(raw)}")
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr)
        off += nbytes
    if off != len(raw):
        raise CheckpointTruncatedError(f"{path}: {len(raw) - off} trailing bytes after payload")
    model = Model(descriptor=desc, params=params, method_tag=header["method"], seed=header["seed"])
    expected = set(_init_params(desc, np.random.default_rng(0)))
    if set(params) != expected:
        raise CheckpointVersionError(f"{path}: parameter names do not match descriptor")
    for name, t in params.items():
        ref_shape = _param_shape(desc, name)
        if t.shape != ref_shape:
            raise CheckpointVersionError(f"{path}: shape of {name} is {t.shape}, expected {ref_shape}")
    return model


def _param_shape(desc: ArchDescriptor, name: str) -> tuple[int, ...]:
    ref = _init_params(desc, np.random.default_rng(0))
    return ref[name].shape


# ---------------------------------------------------------------------------
# small architecture zoo


def mlp_descriptor(input_dim: int, hidden: tuple[int, ...] = (64, 64), num_classes: int = 2) -> ArchDescriptor:
    """Fully connected net; the last hidden layer is the penultimate output."""
    if not hidden:
        raise ConfigurationError("mlp needs at least one hidden layer")
    layers: list[LayerSpec] = []
    prev = input_dim
    for width in hidden:
        layers.append(AffineSpec(prev, width))
        layers.append(ReluSpec())
        prev = width
    return ArchDescriptor(
        input_shape=(input_dim,),
        layers=tuple(layers),
        penultimate_dim=prev,
        num_classes=num_classes,
    )


def cnn2_descriptor(
    input_shape: tuple[int, int, int] = (3, 32, 32),
    channels: tuple[int, int] = (8, 16),
    penultimate_dim: int = 64,
    num_classes: int = 10,
) -> ArchDescriptor:
    """Two conv blocks with pooling, then a fully connected penultimate layer."""
    c, h, w = input_shape
    layers: list[LayerSpec] = [
        ConvSpec(c, channels[0], kernel=3, stride=1, pad=1),
        ReluSpec(),
        AvgPoolSpec(2),
        ConvSpec(channels[0], channels[1], kernel=3, stride=1, pad=1),
        ReluSpec(),
        AvgPoolSpec(2),
        FlattenSpec(),
        AffineSpec(channels[1] * (h // 4) * (w // 4), penultimate_dim),
        ReluSpec(),
    ]
    return ArchDescriptor(
        input_shape=input_shape,
        layers=tuple(layers),
        penultimate_dim=penultimate_dim,
        num_classes=num_classes,
    )


def cnn4_descriptor(
    input_shape: tuple[int, int, int] = (3, 32, 32),
    channels: tuple[int, int, int, int] = (8, 8, 16, 16),
    penultimate_dim: int = 128,
    num_classes: int = 10,
) -> ArchDescriptor:
    """Four conv layers with two pooling stages and a wider penultimate layer."""
    c, h, w = input_shape
    layers: list[LayerSpec] = [
        ConvSpec(c, channels[0], kernel=3, stride=1, pad=1),
        ReluSpec(),
        ConvSpec(channels[0], channels[1], kernel=3, stride=1, pad=1),
        ReluSpec(),
        AvgPoolSpec(2),
        ConvSpec(channels[1], channels[2], kernel=3, stride=1, pad=1),
        ReluSpec(),
        ConvSpec(channels[2], channels[3], kernel=3, stride=1, pad=1),
        ReluSpec(),
        AvgPoolSpec(2),
        FlattenSpec(),
        AffineSpec(channels[3] * (h // 4) * (w // 4), penultimate_dim),
        ReluSpec(),
    ]
    return ArchDescriptor(
        input_shape=input_shape,
        layers=tuple(layers),
        penultimate_dim=penultimate_dim,
        num_classes=num_classes,
    )
