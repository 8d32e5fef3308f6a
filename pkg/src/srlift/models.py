"""Complete lifting networks built from the layer zoo.

Single-frame networks have ``n_layers`` connected layers: an input layer
(2N -> width), interior layers wrapped pairwise in residual blocks, and an
affine output layer (width -> 3N). Temporal networks replace the connected
layers with dilated convolutions over a fixed receptive window.

Which layers are dense, grouped or split-and-recombine is decided by
:func:`layer_kinds` from the model kind.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .layers import (ConfigError, DenseLayer, GroupingScheme, Layer, RecombineOp, ResidualBlock,
                     SplitRecombineLayer, standard_grouping)
from .numerics import ShapeError, Tensor

KINDS = ("fc", "gp", "lf", "es", "sfs", "sr")
CHECKPOINT_MAGIC = b"SRLIFTCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TemporalConfig:
    """Dilated temporal convolution stack; dilations default to powers of the kernel size."""

    kernels: tuple[int, ...] = (3, 3, 3, 3, 3)
    dilations: tuple[int, ...] | None = None

    def __post_init__(self):
        kernels = tuple(int(k) for k in self.kernels)
        object.__setattr__(self, "kernels", kernels)
        if not kernels or any(k < 1 or k % 2 == 0 for k in kernels):
            raise ConfigError(f"temporal kernels must be odd and >= 1, got {kernels}")
        if self.dilations is None:
            dil, d = [], 1
            for k in kernels:
                dil.append(d)
                d *= k
            object.__setattr__(self, "dilations", tuple(dil))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != len(kernels) or any(d < 1 for d in self.dilations):
            raise ConfigError(f"need one dilation >= 1 per kernel, got {self.dilations}")

    @property
    def receptive_frames(self) -> int:
        return 1 + sum(d * (k - 1) for k, d in zip(self.kernels, self.dilations))

    @property
    def n_layers(self) -> int:
        return 2 * len(self.kernels)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sr"
    n_joints: int = 17
    n_layers: int = 8
    width: int = 1024
    groups: int | tuple[tuple[int, ...], ...] = 5
    context_dim: int | str = 1
    recombine: str = "mult"
    l_fuse: int | None = None
    l_split: int | None = None
    l_link: int | None = None
    shuffle_groups: int = 0
    shuffle_seed: int = 0
    temporal: TemporalConfig | None = None
    # the network regresses metres internally; outputs are reported in mm
    output_scale: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).lower())
        if isinstance(self.groups, (list, tuple)):
            object.__setattr__(self, "groups", tuple(tuple(int(j) for j in g) for g in self.groups))
        if isinstance(self.temporal, dict):
            object.__setattr__(self, "temporal", TemporalConfig(**self.temporal))
        self.validate()

    @property
    def depth(self) -> int:
        return self.temporal.n_layers if self.temporal is not None else self.n_layers

    def validate(self) -> None:
        errs = []
        L = self.depth
        if self.kind not in KINDS:
            errs.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_joints < 1:
            errs.append(f"n_joints must be >= 1, got {self.n_joints}")
        if self.width < 1:
            errs.append(f"width must be >= 1, got {self.width}")
        if self.temporal is None and self.n_layers != 0 and (self.n_layers < 2 or self.n_layers % 2):
            errs.append(f"n_layers must be 0 or an even number >= 2, got {self.n_layers}")
        if self.l_fuse is not None and not 0 <= self.l_fuse <= L:
            errs.append(f"l_fuse must satisfy 0 <= l_fuse <= {L}, got {self.l_fuse}")
        if self.l_split is not None and not 1 <= self.l_split <= L:
            errs.append(f"l_split must satisfy 1 <= l_split <= {L}, got {self.l_split}")
        if self.l_link is not None and not 1 <= self.l_link <= L - 2:
            errs.append(f"l_link must satisfy 1 <= l_link <= {L - 2}, got {self.l_link}")
        if self.output_scale <= 0:
            errs.append(f"output_scale must be > 0, got {self.output_scale}")
        if errs:
            raise ConfigError("; ".join(errs))
        scheme = self.base_grouping()
        if not 0 <= self.shuffle_groups <= scheme.n_groups:
            raise ConfigError(f"shuffle_groups must satisfy 0 <= shuffle_groups <= {scheme.n_groups}, "
                              f"got {self.shuffle_groups}")
        RecombineOp(self.recombine, self.context_dim)

    def base_grouping(self) -> GroupingScheme:
        if isinstance(self.groups, tuple):
            scheme = GroupingScheme(self.groups)
        else:
            scheme = standard_grouping(int(self.groups), self.n_joints)
        if scheme.n_joints != self.n_joints:
            raise ConfigError(f"grouping covers {scheme.n_joints} joints, n_joints is {self.n_joints}")
        return scheme

    def grouping(self) -> GroupingScheme:
        return self.base_grouping().shuffled(self.shuffle_groups, self.shuffle_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.groups, tuple):
            d["groups"] = [list(g) for g in self.groups]
        if self.temporal is not None:
            d["temporal"] = {"kernels": list(self.temporal.kernels),
                             "dilations": list(self.temporal.dilations)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("groups"), list):
            d["groups"] = tuple(tuple(g) for g in d["groups"])
        if isinstance(d.get("temporal"), dict):
            t = d["temporal"]
            d["temporal"] = TemporalConfig(tuple(t["kernels"]), tuple(t["dilations"]))
        return cls(**d)


def layer_kinds(config: ModelConfig) -> list[str]:
    """Per-layer structure, one of ``"fc"``, ``"group"`` or ``"sr"``.

    Layers are numbered from 1. LF keeps layers ``l <= l_fuse`` grouped, ES
    keeps layers ``l < l_split`` dense, SFS makes the middle ``l_link`` layers
    dense. SR puts split-and-recombine layers on every interior layer; the
    input and output layers stay grouped so each group reads its own joints
    and writes its own joints.
    """
    L = config.depth
    kind = config.kind
    if kind == "fc":
        return ["fc"] * L
    if kind == "gp":
        return ["group"] * L
    if kind == "lf":
        fuse = config.l_fuse if config.l_fuse is not None else L // 2
        return ["group" if l <= fuse else "fc" for l in range(1, L + 1)]
    if kind == "es":
        split = config.l_split if config.l_split is not None else L // 2 + 1
        return ["fc" if l < split else "group" for l in range(1, L + 1)]
    if kind == "sfs":
        link = config.l_link if config.l_link is not None else L - 2
        front = (L - link) // 2
        return ["fc" if front < l <= front + link else "group" for l in range(1, L + 1)]
    return ["group" if l in (1, L) else "sr" for l in range(1, L + 1)]


class Model:
    """An ordered stack of layers and residual blocks."""

    def __init__(self, config: ModelConfig, seed: int, grouping: GroupingScheme,
                 stages: list, kinds: list[str]):
        self.config = config
        self.seed = seed
        self.grouping = grouping
        self.stages = stages
        self.kinds = kinds
        self.normalization: dict | None = None

    @property
    def n_joints(self) -> int:
        return self.config.n_joints

    @property
    def receptive_frames(self) -> int:
        return self.config.temporal.receptive_frames if self.config.temporal else 1

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float64)

    def layers(self) -> list[Layer]:
        out = []
        for stage in self.stages:
            out.extend(stage.layers if isinstance(stage, ResidualBlock) else [stage])
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [item for i, layer in enumerate(self.layers()) for item in layer.named_parameters(f"layer{i + 1}")]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [item for i, layer in enumerate(self.layers()) for item in layer.named_buffers(f"layer{i + 1}")]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> "Model":
        """Cast all parameters and buffers in place."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for layer in self.layers():
            if layer.bn is not None:
                layer.bn.running_mean = layer.bn.running_mean.astype(dtype)
                layer.bn.running_var = layer.bn.running_var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x, training: bool = False) -> Tensor:
        return model_forward(self, x, training)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode prediction on a numpy batch, returns [batch, 3N] mm."""
        return model_forward(self, Tensor(np.asarray(x, dtype=self.dtype)), training=False).data

    def forward_sequence(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Predict every frame of a [T, 2N] sequence, edge-padding half a window at each end."""
        if self.config.temporal is None:
            return self.predict(x)
        x = np.asarray(x, dtype=self.dtype)
        pad = (self.receptive_frames - 1) // 2
        padded = np.concatenate([np.repeat(x[:1], pad, axis=0), x, np.repeat(x[-1:], pad, axis=0)])
        windows = np.lib.stride_tricks.sliding_window_view(padded, self.receptive_frames, axis=0)
        windows = np.moveaxis(windows, -1, 1)  # [T, R, 2N]
        outs = [self.predict(windows[i:i + chunk]) for i in range(0, len(windows), chunk)]
        return np.concatenate(outs)


def _channel_groups(kinds: list[str], index: int, scheme: GroupingScheme, config: ModelConfig,
                    side: str) -> list[np.ndarray]:
    L = len(kinds)
    if side == "in" and index == 0:
        return scheme.joint_channels(2)
    if side == "out" and index == L - 1:
        return scheme.joint_channels(3)
    return scheme.block_channels(config.width)


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> Model:
    """Build and initialise a model; parameters are a pure function of (config, seed)."""
    scheme = config.grouping()
    kinds = layer_kinds(config)
    L = len(kinds)
    rng = np.random.default_rng(seed)
    N, W = config.n_joints, config.width
    temporal = config.temporal
    recombine = RecombineOp(config.recombine, config.context_dim if scheme.n_groups > 1 else 0)

    def conv_shape(i: int) -> tuple[int, int]:
        if temporal is None:
            return 1, 1
        # layer 0 is the expanding conv, then (dilated conv, pointwise conv) pairs
        if i == 0:
            return temporal.kernels[0], temporal.dilations[0]
        if i < L - 1 and i % 2 == 1:
            b = (i + 1) // 2
            return temporal.kernels[b], temporal.dilations[b]
        return 1, 1

    layers: list[Layer] = []
    for i, kind in enumerate(kinds):
        d_in = 2 * N if i == 0 else W
        d_out = 3 * N if i == L - 1 else W
        interior = i < L - 1
        kernel, dilation = conv_shape(i)
        if kind == "fc":
            layer = DenseLayer(d_in, d_out, interior=interior, kernel=kernel, dilation=dilation,
                               rng=rng, dtype=dtype)
        else:
            layer = SplitRecombineLayer(_channel_groups(kinds, i, scheme, config, "in"),
                                        _channel_groups(kinds, i, scheme, config, "out"),
                                        recombine if kind == "sr" else None, interior=interior,
                                        kernel=kernel, dilation=dilation, rng=rng, dtype=dtype)
        layers.append(layer)

    stages: list = []
    if L:
        stages.append(layers[0])
        for i in range(1, L - 1, 2):
            stages.append(ResidualBlock(layers[i:i + 2]))
        stages.append(layers[-1])
    return Model(config, seed, scheme, stages, kinds)


def model_forward(model: Model, x, training: bool = False) -> Tensor:
    """Map normalized 2D inputs [batch, 2N] (or [batch, T, 2N]) to 3D poses [batch, 3N] in mm."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    if not model.stages:
        raise ShapeError("model has no layers")
    N = model.n_joints
    if x.shape[-1] != 2 * N:
        raise ShapeError(f"expected input width {2 * N} (2 x {N} joints), got shape {x.shape}")
    if model.config.temporal is not None:
        R = model.receptive_frames
        if x.ndim != 3 or x.shape[1] != R:
            raise ShapeError(f"temporal model needs input [batch, {R}, {2 * N}], got {x.shape}")
    elif x.ndim != 2:
        raise ShapeError(f"expected input [batch, {2 * N}], got {x.shape}")
    out = x
    for stage in model.stages:
        out = stage(out, training)
    if out.ndim == 3:
        out = nx.reshape(out, (out.shape[0], out.shape[2]))
    if model.config.output_scale != 1.0:
        out = nx.mul(out, np.asarray(model.config.output_scale, dtype=out.dtype))
    return out


def count_params(model: Model) -> int:
    """Learnable weights, biases, context maps and batch-norm scale/shift."""
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then each tensor of the manifest as contiguous little-endian float32.

def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    entries = [(n, p.data) for n, p in model.named_parameters()] + model.named_buffers()
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in entries]
    header = {"format_version": CHECKPOINT_VERSION, "tool_version": __version__,
              "config": model.config.to_dict(), "seed": model.seed,
              "normalization": model.normalization, "tensors": manifest, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header.get('format_version')!r}")
    return header


def load_checkpoint(path, dtype=np.float64) -> Model:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    model = build_model(ModelConfig.from_dict(header["config"]), header["seed"], dtype=dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        if name in params:
            params[name].data = arr.astype(dtype)
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise ValueError(f"checkpoint tensor {name!r} does not belong to the model")
    if offset != len(payload):
        raise ValueError("checkpoint payload size does not match its manifest")
    model.normalization = header.get("normalization")
    return model
