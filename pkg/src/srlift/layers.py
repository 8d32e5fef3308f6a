"""Connected and temporal-convolution layers with optional channel grouping.

A layer maps features of width ``d_in`` to ``d_out``. Channels are partitioned
into groups (one per body region); a group layer only connects each input
group to its own output group, and a split-and-recombine (SR) layer
additionally feeds every group an ``H``-dimensional linear summary of all the
other groups' channels.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class ConfigError(ValueError):
    """An architecture configuration violates one of its invariants."""


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupingScheme:
    """Partition of joint indices into local groups."""

    joint_groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(int(j) for j in g) for g in self.joint_groups)
        object.__setattr__(self, "joint_groups", groups)
        flat = [j for g in groups for j in g]
        if any(len(g) == 0 for g in groups):
            raise ConfigError("every joint group must be non-empty")
        if sorted(flat) != list(range(len(flat))):
            raise ConfigError(f"joint groups must be disjoint and cover 0..N-1, got {groups}")

    @property
    def n_joints(self) -> int:
        return sum(len(g) for g in self.joint_groups)

    @property
    def n_groups(self) -> int:
        return len(self.joint_groups)

    def channel_alloc(self, width: int) -> list[int]:
        """Per-group channel counts for a layer of ``width`` channels.

        Each group gets ``round(width * n_g / N)``; the rounding remainder goes
        to the largest group (first one on ties).
        """
        n = self.n_joints
        sizes = [len(g) for g in self.joint_groups]
        alloc = [int(math.floor(width * s / n + 0.5)) for s in sizes]
        alloc[sizes.index(max(sizes))] += width - sum(alloc)
        if min(alloc) < 1:
            raise ConfigError(f"width {width} too small for {self.n_groups} groups: allocation {alloc}")
        return alloc

    def joint_channels(self, dims: int) -> list[np.ndarray]:
        """Channel indices of each group in a joint-major vector with ``dims`` values per joint."""
        return [np.array([j * dims + k for j in g for k in range(dims)], dtype=np.intp)
                for g in self.joint_groups]

    def block_channels(self, width: int) -> list[np.ndarray]:
        """Contiguous channel blocks of each group for a hidden layer of ``width``."""
        edges = np.concatenate([[0], np.cumsum(self.channel_alloc(width))])
        return [np.arange(edges[g], edges[g + 1], dtype=np.intp) for g in range(self.n_groups)]

    def shuffled(self, n_shuffled: int, seed: int) -> "GroupingScheme":
        """Randomly reassign joints among ``n_shuffled`` groups, keeping group sizes."""
        if not 0 <= n_shuffled <= self.n_groups:
            raise ConfigError(f"shuffle_groups must lie in [0, {self.n_groups}], got {n_shuffled}")
        if n_shuffled < 2:
            return self
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(self.n_groups, size=n_shuffled, replace=False).tolist())
        pool = [j for g in chosen for j in self.joint_groups[g]]
        pool = [pool[i] for i in rng.permutation(len(pool))]
        groups = [list(g) for g in self.joint_groups]
        pos = 0
        for g in chosen:
            k = len(groups[g])
            groups[g] = sorted(pool[pos:pos + k])
            pos += k
        return GroupingScheme(tuple(tuple(g) for g in groups))


# 17-joint layout: 0 pelvis, 1-3 right leg, 4-6 left leg, 7 spine, 8 thorax,
# 9 neck, 10 head, 11-13 left arm, 14-16 right arm.
STANDARD_GROUPS_17 = {
    1: (tuple(range(17)),),
    2: ((0, 1, 2, 3, 4, 5, 6), (7, 8, 9, 10, 11, 12, 13, 14, 15, 16)),
    3: ((0, 1, 2, 3, 4, 5, 6), (7, 8, 9, 10), (11, 12, 13, 14, 15, 16)),
    5: ((0, 7, 8, 9, 10), (11, 12, 13), (14, 15, 16), (4, 5, 6), (1, 2, 3)),
    6: ((0, 7, 8), (9, 10), (11, 12, 13), (14, 15, 16), (4, 5, 6), (1, 2, 3)),
    8: ((0, 7), (8, 9, 10), (11, 12), (13,), (14, 15), (16,), (4, 5, 6), (1, 2, 3)),
    17: tuple((j,) for j in range(17)),
}


def standard_grouping(n_groups: int, n_joints: int = 17) -> GroupingScheme:
    if n_groups == 1:
        return GroupingScheme((tuple(range(n_joints)),))
    if n_groups == n_joints:
        return GroupingScheme(tuple((j,) for j in range(n_joints)))
    if n_joints != 17 or n_groups not in STANDARD_GROUPS_17:
        raise ConfigError(f"no standard {n_groups}-group partition for {n_joints} joints; "
                          f"pass explicit joint groups")
    return GroupingScheme(STANDARD_GROUPS_17[n_groups])


# ---------------------------------------------------------------------------
# recombination
# ---------------------------------------------------------------------------

_PERCENT = re.compile(r"^(\d+(?:\.\d+)?)%$")


@dataclass(frozen=True)
class RecombineOp:
    """How a group's features are joined with its context summary.

    ``context_dim`` (H) is an int, ``"full"`` (all non-local channels),
    ``"group"`` (the group's own width) or a percentage of the group width
    such as ``"25%"``.
    """

    kind: str = "mult"
    context_dim: int | str = 1

    def __post_init__(self):
        kind = {"multiply": "mult", "concatenate": "concat", "cat": "concat"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in ("concat", "mult", "add"):
            raise ConfigError(f"recombine must be concat, mult or add; got {self.kind!r}")
        h = self.context_dim
        if isinstance(h, str) and h.lstrip("-").isdigit():
            h = int(h)
            object.__setattr__(self, "context_dim", h)
        if isinstance(h, (int, np.integer)):
            if h < 0:
                raise ConfigError(f"context_dim must be >= 0, got {h}")
        elif h not in ("full", "group") and not _PERCENT.match(str(h)):
            raise ConfigError(f"context_dim must be an int, 'full', 'group' or 'P%'; got {h!r}")

    def resolve(self, group_width: int, total_width: int) -> int:
        """Context width for a group of ``group_width`` channels out of ``total_width``."""
        h = self.context_dim
        if h == "full":
            h = total_width - group_width
        elif h == "group":
            h = group_width
        elif isinstance(h, str):
            h = max(1, int(math.floor(float(_PERCENT.match(h).group(1)) / 100.0 * group_width + 0.5)))
        h = int(h)
        if h > 0 and total_width == group_width:
            h = 0
        if self.kind == "mult" and h not in (0, 1, group_width):
            raise ConfigError(f"mult recombination needs H in {{0, 1, {group_width}}} for a "
                              f"{group_width}-channel group, got {h}")
        return h


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / ((1.0 + nx.LEAKY_SLOPE ** 2) * max(fan_in, 1)))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _gate_init(rng: np.random.Generator, shape, dtype) -> Tensor:
    """Non-negative context map with mean weight 2.5/fan_in.

    Post-activation features average roughly 0.4, so the multiplicative gate
    starts near 1 (open) instead of a random sign that stalls early training.
    """
    fan_in = max(shape[1], 1)
    return Tensor(rng.uniform(0.0, 5.0 / fan_in, size=shape).astype(dtype), requires_grad=True)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class BatchNorm:
    def __init__(self, width: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = _zeros(width, dtype)
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nx.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean), (f"{prefix}.running_var", self.running_var)]


def _select(f: Tensor, idx: np.ndarray) -> Tensor:
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        if idx[0] == 0 and idx.size == f.shape[-1]:
            return f
        return f[..., int(idx[0]):int(idx[0]) + idx.size]
    return nx.take(f, idx, axis=-1)


def _affine(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, dilation: int) -> Tensor:
    if x.ndim == 3:
        return nx.temporal_conv(x, weight, bias, kernel=kernel, dilation=dilation)
    if kernel != 1:
        raise ShapeError(f"kernel {kernel} needs a [batch, T, C] input, got {x.shape}")
    return nx.linear(x, weight, bias)


class Layer:
    """Common wrapper: affine part, then batch-norm and leaky rectifier when interior."""

    kernel = 1
    dilation = 1
    d_in: int
    d_out: int
    bn: BatchNorm | None

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel - 1)

    def __call__(self, f: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def _finish(self, pre: Tensor, training: bool) -> Tensor:
        if self.bn is None:
            return pre
        return nx.leaky_relu(self.bn(pre, training))

    def named_buffers(self, prefix: str):
        return self.bn.named_buffers(f"{prefix}.bn") if self.bn is not None else []


class DenseLayer(Layer):
    """Fully-connected layer (or dense temporal convolution when ``kernel > 1``)."""

    def __init__(self, d_in: int, d_out: int, *, interior: bool = True, kernel: int = 1,
                 dilation: int = 1, rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.kernel, self.dilation = kernel, dilation
        self.weight = _uniform(rng, (d_out, kernel * d_in), kernel * d_in, dtype)
        self.bias = _zeros(d_out, dtype)
        self.bn = BatchNorm(d_out, dtype) if interior else None

    def __call__(self, f: Tensor, training: bool = False) -> Tensor:
        return fc_layer_forward(self, f, training)

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]
        if self.bn is not None:
            out += self.bn.named_parameters(f"{prefix}.bn")
        return out


class SplitRecombineLayer(Layer):
    """Group layer with optional low-dimensional global context per group.

    ``in_groups``/``out_groups`` are channel index sets partitioning the input
    and output widths. With ``recombine=None`` (or a resolved H of 0) this is
    a plain group connected layer.
    """

    def __init__(self, in_groups: Sequence[np.ndarray], out_groups: Sequence[np.ndarray],
                 recombine: RecombineOp | None = None, *, interior: bool = True, kernel: int = 1,
                 dilation: int = 1, rng: np.random.Generator | None = None, dtype=np.float64):
        if len(in_groups) != len(out_groups):
            raise ConfigError(f"{len(in_groups)} input groups but {len(out_groups)} output groups")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_groups = [np.asarray(g, dtype=np.intp) for g in in_groups]
        self.out_groups = [np.asarray(g, dtype=np.intp) for g in out_groups]
        self.d_in = sum(g.size for g in self.in_groups)
        self.d_out = sum(g.size for g in self.out_groups)
        for name, groups, width in (("input", self.in_groups, self.d_in), ("output", self.out_groups, self.d_out)):
            if sorted(np.concatenate(groups).tolist()) != list(range(width)):
                raise ConfigError(f"{name} channel groups must partition 0..{width - 1}")
        self.recombine = recombine
        self.kernel, self.dilation = kernel, dilation

        everything = np.arange(self.d_in, dtype=np.intp)
        self.rest = [np.setdiff1d(everything, g) for g in self.in_groups]
        self.context_dims = [recombine.resolve(g.size, self.d_in) if recombine is not None else 0
                             for g in self.in_groups]
        self.weight, self.bias, self.context, self.expand = [], [], [], []
        for g, (gi, go) in enumerate(zip(self.in_groups, self.out_groups)):
            h = self.context_dims[g]
            width_in = gi.size + (h if recombine is not None and recombine.kind == "concat" else 0)
            self.weight.append(_uniform(rng, (go.size, kernel * width_in), kernel * width_in, dtype))
            if h > 0 and recombine.kind == "mult":
                self.context.append(_gate_init(rng, (h, self.rest[g].size), dtype))
            elif h > 0:
                self.context.append(_uniform(rng, (h, self.rest[g].size), self.rest[g].size, dtype))
            else:
                self.context.append(None)
            if h > 0 and recombine.kind == "add" and h != gi.size:
                self.expand.append(_uniform(rng, (gi.size, h), h, dtype))
            else:
                self.expand.append(None)
            self.bias.append(_zeros(go.size, dtype))

        order = np.concatenate(self.out_groups)
        self._out_perm = None if np.array_equal(order, np.arange(self.d_out)) else np.argsort(order)
        self.bn = BatchNorm(self.d_out, dtype) if interior else None

    @property
    def n_groups(self) -> int:
        return len(self.in_groups)

    @property
    def has_context(self) -> bool:
        return any(h > 0 for h in self.context_dims)

    def __call__(self, f: Tensor, training: bool = False) -> Tensor:
        if self.has_context:
            if f.ndim == 3:
                return sr_temporal_conv_forward(self, f, training)
            return sr_layer_forward(self, f, training)
        return group_layer_forward(self, f, training)

    def named_parameters(self, prefix: str):
        out = []
        for g in range(self.n_groups):
            out.append((f"{prefix}.weight.{g}", self.weight[g]))
            out.append((f"{prefix}.bias.{g}", self.bias[g]))
            if self.context[g] is not None:
                out.append((f"{prefix}.context.{g}", self.context[g]))
            if self.expand[g] is not None:
                out.append((f"{prefix}.expand.{g}", self.expand[g]))
        if self.bn is not None:
            out += self.bn.named_parameters(f"{prefix}.bn")
        return out

    def _assemble(self, parts: list[Tensor]) -> Tensor:
        out = parts[0] if len(parts) == 1 else nx.concat(parts, axis=-1)
        if self._out_perm is not None:
            out = nx.take(out, self._out_perm, axis=-1)
        return out


class ResidualBlock:
    """``f + block(f)``; for temporal stacks ``f`` is center-cropped to the block output length."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        if self.layers[0].d_in != self.layers[-1].d_out:
            raise ConfigError(f"residual block maps {self.layers[0].d_in} -> {self.layers[-1].d_out}; "
                              f"widths must match")

    @property
    def span(self) -> int:
        return sum(layer.span for layer in self.layers)

    def __call__(self, f: Tensor, training: bool = False) -> Tensor:
        return residual_block_forward(self, f, training)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _check_width(layer: Layer, f: Tensor) -> None:
    if f.shape[-1] != layer.d_in:
        raise ShapeError(f"layer expects {layer.d_in} input channels, got input of shape {f.shape}")


def fc_layer_forward(layer: DenseLayer, f: Tensor, training: bool = False) -> Tensor:
    _check_width(layer, f)
    return layer._finish(_affine(f, layer.weight, layer.bias, layer.kernel, layer.dilation), training)


def group_layer_forward(layer: SplitRecombineLayer, f: Tensor, training: bool = False) -> Tensor:
    _check_width(layer, f)
    parts = [_affine(_select(f, layer.in_groups[g]), layer.weight[g], layer.bias[g],
                     layer.kernel, layer.dilation)
             for g in range(layer.n_groups)]
    return layer._finish(layer._assemble(parts), training)


def map_global_context(layer: SplitRecombineLayer, f: Tensor, g: int) -> Tensor:
    """H-dimensional linear summary of every channel outside group ``g`` (per frame)."""
    if not 0 <= g < layer.n_groups:
        raise IndexError(f"group {g} out of range for {layer.n_groups} groups")
    if layer.context[g] is None:
        raise ConfigError(f"group {g} has no context map (H = 0)")
    return nx.linear(_select(f, layer.rest[g]), layer.context[g])


def _recombine(layer: SplitRecombineLayer, local: Tensor, f: Tensor, g: int) -> Tensor:
    if layer.context[g] is None:
        return local
    ctx = map_global_context(layer, f, g)
    kind = layer.recombine.kind
    if kind == "concat":
        return nx.concat([local, ctx], axis=-1)
    if kind == "mult":
        return nx.mul(local, ctx)
    if layer.expand[g] is not None:
        ctx = nx.linear(ctx, layer.expand[g])
    return nx.add(local, ctx)


def sr_layer_forward(layer: SplitRecombineLayer, f: Tensor, training: bool = False) -> Tensor:
    _check_width(layer, f)
    if f.ndim != 2:
        raise ShapeError(f"sr_layer_forward expects [batch, channels], got {f.shape}")
    parts = []
    for g in range(layer.n_groups):
        x = _recombine(layer, _select(f, layer.in_groups[g]), f, g)
        parts.append(nx.linear(x, layer.weight[g], layer.bias[g]))
    return layer._finish(layer._assemble(parts), training)


def sr_temporal_conv_forward(layer: SplitRecombineLayer, f: Tensor, training: bool = False) -> Tensor:
    """SR convolution over [batch, T, channels]; valid padding in time.

    The context summary is computed frame by frame, recombined with the
    group's own channels, and the result is convolved with the group kernel.
    """
    _check_width(layer, f)
    if f.ndim != 3:
        raise ShapeError(f"sr_temporal_conv_forward expects [batch, T, channels], got {f.shape}")
    if f.shape[1] < layer.span + 1:
        raise ShapeError(f"sequence of {f.shape[1]} frames is too short: kernel {layer.kernel} with "
                         f"dilation {layer.dilation} needs at least {layer.span + 1}")
    parts = []
    for g in range(layer.n_groups):
        x = _recombine(layer, _select(f, layer.in_groups[g]), f, g)
        parts.append(nx.temporal_conv(x, layer.weight[g], layer.bias[g], layer.kernel, layer.dilation))
    return layer._finish(layer._assemble(parts), training)


def residual_block_forward(block: ResidualBlock, f: Tensor, training: bool = False) -> Tensor:
    out = f
    for layer in block.layers:
        out = layer(out, training)
    if out.shape[-1] != f.shape[-1]:
        raise ShapeError(f"residual branch width {out.shape[-1]} != input width {f.shape[-1]}")
    if f.ndim == 3 and out.shape[1] != f.shape[1]:
        pad = (f.shape[1] - out.shape[1]) // 2
        f = f[:, pad:pad + out.shape[1]]
    return nx.add(f, out)
