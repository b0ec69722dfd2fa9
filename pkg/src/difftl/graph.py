"""Ordered layer graphs for convolutional backbones.

A :class:`LayerGraph` is a flat, 1-indexed list of :class:`LayerNode` records
plus block ranges and a classifier head description. Everything here is pure
Python so truncation points, parameter counts and MAC counts can be computed
from a serialized graph without any deep-learning framework installed.

Counting convention: convolutions and linear layers are counted exactly
(one MAC per multiply-accumulate); norm, activation and pooling layers are
counted at one MAC-equivalent per output element.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

KINDS = ("conv", "norm", "activation", "pool", "linear")
GRAPH_FORMAT_VERSION = 1


class GraphError(ValueError):
    """Raised for structurally invalid graphs or missing metadata."""


class InvalidCutoffError(GraphError):
    """Raised when a cutoff falls outside the graph or inside a span."""


def _span(value) -> tuple[int, int] | None:
    if value is None:
        return None
    start, end = (int(v) for v in value)
    if start > end:
        raise GraphError(f"span ({start}, {end}) is reversed")
    return (start, end)


def _dims(value) -> tuple[int, ...] | None:
    if value is None:
        return None
    return tuple(int(v) for v in value)


@dataclass(frozen=True)
class LayerNode:
    """One layer ``f_i`` of a backbone.

    ``skip_span`` marks the residual unit a node belongs to. ``fused_span``
    marks a run of layers that is kept atomic for truncation purposes
    (e.g. a conv-norm-activation-pool stem); neither may be cut through.
    """

    index: int
    kind: str
    out_channels: int
    in_channels: int | None = None
    spatial_dims: tuple[int, ...] | None = None
    kernel: tuple[int, ...] | None = None
    groups: int = 1
    bias: bool = False
    affine: bool = True
    skip_span: tuple[int, int] | None = None
    fused_span: tuple[int, int] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "spatial_dims", _dims(self.spatial_dims))
        object.__setattr__(self, "kernel", _dims(self.kernel))
        object.__setattr__(self, "skip_span", _span(self.skip_span))
        object.__setattr__(self, "fused_span", _span(self.fused_span))
        label = self.label
        if self.kind not in KINDS:
            raise GraphError(f"{label}: unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.out_channels < 1:
            raise GraphError(f"{label}: out_channels must be >= 1")
        if self.spatial_dims is not None and any(d < 1 for d in self.spatial_dims):
            raise GraphError(f"{label}: spatial dims {self.spatial_dims} must be >= 1")
        if self.kind in ("conv", "linear") and self.in_channels is None:
            raise GraphError(f"{label}: {self.kind} layer needs in_channels")
        if self.kind == "conv":
            if self.kernel is None:
                raise GraphError(f"{label}: conv layer needs a kernel")
            if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
                raise GraphError(
                    f"{label}: groups={self.groups} must divide in={self.in_channels} "
                    f"and out={self.out_channels}"
                )

    @property
    def label(self) -> str:
        return f"layer {self.index}" + (f" ({self.name})" if self.name else "")

    @property
    def params(self) -> int:
        if self.kind == "conv":
            w = self.out_channels * (self.in_channels // self.groups) * math.prod(self.kernel)
            return w + (self.out_channels if self.bias else 0)
        if self.kind == "linear":
            return self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)
        if self.kind == "norm":
            return 2 * self.out_channels if self.affine else 0
        return 0

    @property
    def macs(self) -> int:
        if self.spatial_dims is None:
            raise GraphError(f"{self.label}: missing spatial metadata, cannot count MACs")
        positions = math.prod(self.spatial_dims)
        if self.kind == "conv":
            per_output = (self.in_channels // self.groups) * math.prod(self.kernel)
            return positions * self.out_channels * per_output
        if self.kind == "linear":
            return positions * self.in_channels * self.out_channels
        return positions * self.out_channels

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "spatial_dims": list(self.spatial_dims) if self.spatial_dims is not None else None,
            "kernel": list(self.kernel) if self.kernel is not None else None,
            "groups": self.groups,
            "bias": self.bias,
            "affine": self.affine,
            "skip_span": list(self.skip_span) if self.skip_span else None,
            "fused_span": list(self.fused_span) if self.fused_span else None,
        }


@dataclass(frozen=True)
class HeadSpec:
    """New prediction head ``h_t``: optional global pooling, optional hidden layer, linear output."""

    num_outputs: int = 2
    pooled: bool = True
    hidden: int | None = None

    def __post_init__(self) -> None:
        if self.num_outputs < 2:
            raise GraphError("a classification head needs num_outputs >= 2")
        if self.hidden is not None and self.hidden < 1:
            raise GraphError("hidden width must be >= 1")

    def in_features(self, channels: int, spatial_dims: Sequence[int] | None) -> int:
        if self.pooled:
            return channels
        if spatial_dims is None:
            raise GraphError("a non-pooled head needs the spatial dims of its input")
        return channels * math.prod(spatial_dims)

    def params(self, channels: int, spatial_dims: Sequence[int] | None = None) -> int:
        fin = self.in_features(channels, spatial_dims)
        if self.hidden is None:
            return fin * self.num_outputs + self.num_outputs
        return fin * self.hidden + self.hidden + self.hidden * self.num_outputs + self.num_outputs

    def macs(self, channels: int, spatial_dims: Sequence[int] | None) -> int:
        fin = self.in_features(channels, spatial_dims)
        pool = channels if self.pooled else 0
        if self.hidden is None:
            return pool + fin * self.num_outputs
        return pool + fin * self.hidden + self.hidden + self.hidden * self.num_outputs

    def to_dict(self) -> dict:
        return {"num_outputs": self.num_outputs, "pooled": self.pooled, "hidden": self.hidden}


@dataclass(frozen=True)
class TruncationPoint:
    """Cutoff ``k``: keep layers ``1..k``."""

    layer_index: int
    block_boundary: bool
    out_channels: int
    spatial_dims: tuple[int, ...] | None = None
    ordinal: int = 0  # 1-based position among all valid points of the graph
    block: str = ""

    @property
    def tag(self) -> str:
        return f"k{self.layer_index}"

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "block_boundary": self.block_boundary,
            "out_channels": self.out_channels,
            "spatial_dims": list(self.spatial_dims) if self.spatial_dims is not None else None,
            "ordinal": self.ordinal,
            "block": self.block,
        }


@dataclass(frozen=True)
class LayerGraph:
    layers: tuple[LayerNode, ...]
    blocks: tuple[tuple[str, int, int], ...]
    head: HeadSpec = field(default_factory=HeadSpec)
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "blocks", tuple((str(n), int(s), int(e)) for n, s, e in self.blocks)
        )
        object.__setattr__(self, "input_shape", _dims(self.input_shape))
        L = len(self.layers)
        if L == 0:
            raise GraphError("graph has no layers")
        for expected, node in enumerate(self.layers, start=1):
            if node.index != expected:
                raise GraphError(f"layer indices must be contiguous 1..L; found {node.index} at {expected}")
        cursor = 1
        for name, start, end in self.blocks:
            if start != cursor or end < start:
                raise GraphError(f"block {name!r} ({start}..{end}) breaks the partition of 1..{L}")
            cursor = end + 1
        if cursor != L + 1:
            raise GraphError(f"blocks cover 1..{cursor - 1}, expected 1..{L}")
        for node in self.layers:
            for span in (node.skip_span, node.fused_span):
                if span and not (1 <= span[0] <= node.index <= span[1] <= L):
                    raise GraphError(f"{node.label}: span {span} does not contain the node")

    def __len__(self) -> int:
        return len(self.layers)

    def node(self, index: int) -> LayerNode:
        return self.layers[index - 1]

    @property
    def spans(self) -> list[tuple[int, int]]:
        seen = []
        for node in self.layers:
            for span in (node.skip_span, node.fused_span):
                if span and span not in seen:
                    seen.append(span)
        return seen

    @property
    def block_ends(self) -> dict[int, str]:
        return {end: name for name, _, end in self.blocks}

    def block_of(self, index: int) -> str:
        for name, start, end in self.blocks:
            if start <= index <= end:
                return name
        raise GraphError(f"layer {index} is outside every block")

    def splitting_span(self, k: int) -> tuple[int, int] | None:
        """The first span that cutting after layer ``k`` would sever, if any."""
        for start, end in self.spans:
            if start <= k < end:
                return (start, end)
        return None

    def point(self, k: int | TruncationPoint) -> TruncationPoint:
        """Validate cutoff ``k`` and describe it."""
        if isinstance(k, TruncationPoint):
            k = k.layer_index
        if not 1 <= k <= len(self.layers):
            raise InvalidCutoffError(f"cutoff {k} outside [1, {len(self.layers)}]")
        span = self.splitting_span(k)
        if span is not None:
            raise InvalidCutoffError(
                f"cutoff {k} falls inside span {span} (layers {span[0]}..{span[1]} form a unit)"
            )
        points = enumerate_truncation_points(self)
        return next(p for p in points if p.layer_index == k)

    def to_dict(self) -> dict:
        return {
            "format": "difftl-layer-graph",
            "version": GRAPH_FORMAT_VERSION,
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "head": self.head.to_dict(),
            "blocks": [{"name": n, "start": s, "end": e} for n, s, e in self.blocks],
            "layers": [node.to_dict() for node in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerGraph":
        if data.get("format") != "difftl-layer-graph":
            raise GraphError("not a layer graph document")
        if data.get("version") != GRAPH_FORMAT_VERSION:
            raise GraphError(f"unsupported graph version {data.get('version')}")
        layers = tuple(LayerNode(**rec) for rec in data["layers"])
        blocks = tuple((b["name"], b["start"], b["end"]) for b in data["blocks"])
        return cls(layers, blocks, HeadSpec(**data["head"]), data.get("input_shape"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "LayerGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enumerate_truncation_points(graph: LayerGraph) -> list[TruncationPoint]:
    """All cutoffs that do not sever a skip or fused span, ascending."""
    ends = graph.block_ends
    points = []
    for node in graph.layers:
        k = node.index
        if graph.splitting_span(k) is not None:
            continue
        points.append(
            TruncationPoint(
                layer_index=k,
                block_boundary=k in ends,
                out_channels=node.out_channels,
                spatial_dims=node.spatial_dims,
                ordinal=len(points) + 1,
                block=graph.block_of(k),
            )
        )
    return points


def block_boundaries(graph: LayerGraph) -> list[TruncationPoint]:
    return [p for p in enumerate_truncation_points(graph) if p.block_boundary]


def _prefix(graph: LayerGraph, cutoff) -> tuple[TruncationPoint, Iterable[LayerNode]]:
    point = graph.point(cutoff)
    return point, graph.layers[: point.layer_index]


def count_params(graph: LayerGraph, cutoff=None, head: HeadSpec | None = None) -> int:
    """Learnable parameters of layers ``1..k`` plus the head (``k`` defaults to ``L``)."""
    point, nodes = _prefix(graph, len(graph) if cutoff is None else cutoff)
    head = graph.head if head is None else head
    return sum(n.params for n in nodes) + head.params(point.out_channels, point.spatial_dims)


def count_macs(graph: LayerGraph, cutoff=None, head: HeadSpec | None = None) -> int:
    """Multiply-accumulates for one forward pass of layers ``1..k`` plus the head."""
    if graph.input_shape is None:
        raise GraphError("graph has no input_shape; MACs are undefined")
    point, nodes = _prefix(graph, len(graph) if cutoff is None else cutoff)
    head = graph.head if head is None else head
    return sum(n.macs for n in nodes) + head.macs(point.out_channels, point.spatial_dims)


def complexity_table(graph: LayerGraph, head: HeadSpec | None = None) -> list[dict]:
    """One row per truncation point with cumulative params (M) and MACs (G)."""
    rows = []
    for p in enumerate_truncation_points(graph):
        row = p.to_dict()
        row["params_m"] = count_params(graph, p, head) / 1e6
        row["macs_g"] = count_macs(graph, p, head) / 1e9 if graph.input_shape else None
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'#':>3} {'k':>5} {'block':<8} {'bnd':<3} {'C':>5} {'HxW':>9} {'Params(M)':>10} {'MACs(G)':>9}"]
    for r in rows:
        hw = "x".join(str(d) for d in r["spatial_dims"]) if r["spatial_dims"] else "-"
        macs = f"{r['macs_g']:.3f}" if r["macs_g"] is not None else "-"
        lines.append(
            f"{r['ordinal']:>3} {r['layer_index']:>5} {r['block']:<8} {'*' if r['block_boundary'] else '':<3} "
            f"{r['out_channels']:>5} {hw:>9} {r['params_m']:>10.3f} {macs:>9}"
        )
    return "\n".join(lines)
