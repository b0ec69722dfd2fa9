"""Backbones as ordered chains of truncatable units, and the graph adapter.

A *unit* is the smallest piece of a backbone that may be kept or dropped as a
whole: a residual block, a fused stem, or a single plain layer. Unit ends are
exactly the valid truncation points of the reflected :class:`LayerGraph`.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch
from torch import nn
from torchvision.models import resnet as tv_resnet

from .graph import GraphError, HeadSpec, LayerGraph, LayerNode, TruncationPoint

_CONV = (nn.Conv1d, nn.Conv2d, nn.Conv3d)
_NORM = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, nn.GroupNorm, nn.InstanceNorm2d, nn.LayerNorm)
_ACT = (
    nn.ReLU, nn.ReLU6, nn.LeakyReLU, nn.GELU, nn.SiLU, nn.Sigmoid, nn.Tanh,
    nn.Hardswish, nn.ELU, nn.Mish,
)
_POOL = (
    nn.MaxPool1d, nn.MaxPool2d, nn.MaxPool3d, nn.AvgPool1d, nn.AvgPool2d, nn.AvgPool3d,
    nn.AdaptiveAvgPool1d, nn.AdaptiveAvgPool2d, nn.AdaptiveAvgPool3d, nn.AdaptiveMaxPool2d,
)
_IGNORED = (nn.Identity, nn.Dropout, nn.Dropout2d, nn.Flatten)


def is_residual(module: nn.Module) -> bool:
    return isinstance(module, (tv_resnet.BasicBlock, tv_resnet.Bottleneck)) or bool(
        getattr(module, "residual", False)
    )


def _node_fields(module: nn.Module, out: torch.Tensor) -> dict | None:
    spatial = tuple(out.shape[2:])
    if isinstance(module, _CONV):
        return dict(
            kind="conv", in_channels=module.in_channels, out_channels=module.out_channels,
            spatial_dims=spatial, kernel=tuple(module.kernel_size), groups=module.groups,
            bias=module.bias is not None,
        )
    if isinstance(module, nn.Linear):
        return dict(
            kind="linear", in_channels=module.in_features, out_channels=module.out_features,
            spatial_dims=tuple(out.shape[1:-1]), bias=module.bias is not None,
        )
    if isinstance(module, _NORM):
        if isinstance(module, nn.GroupNorm):
            channels, affine = module.num_channels, module.affine
        elif isinstance(module, nn.LayerNorm):
            raise GraphError("LayerNorm inside a convolutional backbone is not supported")
        else:
            channels, affine = module.num_features, module.affine
        return dict(kind="norm", out_channels=channels, spatial_dims=spatial, affine=affine)
    if isinstance(module, _ACT):
        return dict(kind="activation", out_channels=out.shape[1], spatial_dims=spatial)
    if isinstance(module, _POOL):
        return dict(kind="pool", out_channels=out.shape[1], spatial_dims=spatial)
    if isinstance(module, _IGNORED) or not any(True for _ in module.parameters(recurse=False)):
        return None
    raise GraphError(f"cannot reflect parametric module of type {type(module).__name__}")


def reflect_units(
    units: Sequence[tuple[str, str, nn.Module]],
    input_shape: Sequence[int],
    head: HeadSpec | None = None,
) -> tuple[LayerGraph, list[int]]:
    """Trace ``units`` on a zero input and build their layer graph.

    Returns the graph and the last layer index of every unit.
    """
    records: list[dict] = []
    seen_parametric: set[int] = set()
    hooks = []

    def make_hook(qualname: str):
        def hook(module, inputs, output):
            fields = _node_fields(module, output)
            if fields is None:
                return
            if any(True for _ in module.parameters(recurse=False)):
                if id(module) in seen_parametric:
                    raise GraphError(f"{qualname}: shared parametric modules are not supported")
                seen_parametric.add(id(module))
            records.append(dict(name=qualname, **fields))
        return hook

    for unit_name, _, module in units:
        for sub_name, sub in module.named_modules():
            if next(sub.children(), None) is None:
                qual = f"{unit_name}.{sub_name}" if sub_name else unit_name
                hooks.append(sub.register_forward_hook(make_hook(qual)))

    nodes: list[LayerNode] = []
    unit_ends: list[int] = []
    blocks: list[list] = []
    was_training = [m.training for _, _, m in units]
    try:
        x = torch.zeros(1, *input_shape)
        with torch.no_grad():
            for (unit_name, block_name, module) in units:
                module.eval()
                start = len(records)
                x = module(x)
                unit_records = records[start:]
                if not unit_records:
                    raise GraphError(f"unit {unit_name!r} has no countable layers")
                first = len(nodes) + 1
                last = len(nodes) + len(unit_records)
                span = (first, last) if last > first else None
                residual = is_residual(module)
                for offset, rec in enumerate(unit_records):
                    nodes.append(
                        LayerNode(
                            index=first + offset,
                            skip_span=span if residual else None,
                            fused_span=None if residual else span,
                            **rec,
                        )
                    )
                unit_ends.append(last)
                if blocks and blocks[-1][0] == block_name:
                    blocks[-1][2] = last
                else:
                    blocks.append([block_name, first, last])
    finally:
        for h in hooks:
            h.remove()
        for (_, _, m), mode in zip(units, was_training):
            m.train(mode)
    graph = LayerGraph(tuple(nodes), tuple(tuple(b) for b in blocks), head or HeadSpec(), tuple(input_shape))
    return graph, unit_ends


class UnitChain(nn.Module):
    """Sequential container of named units grouped into named blocks."""

    def __init__(self, units: Sequence[tuple[str, str, nn.Module]], input_shape: Sequence[int]):
        super().__init__()
        self.units = nn.ModuleList([m for _, _, m in units])
        self.unit_names = [n for n, _, _ in units]
        self.unit_blocks = [b for _, b, _ in units]
        self.input_shape = tuple(int(d) for d in input_shape)

    def named_units(self) -> list[tuple[str, str, nn.Module]]:
        return list(zip(self.unit_names, self.unit_blocks, self.units))

    def reflect(self, head: HeadSpec | None = None, input_shape=None) -> tuple[LayerGraph, list[int]]:
        return reflect_units(self.named_units(), input_shape or self.input_shape, head)

    def graph(self, head: HeadSpec | None = None, input_shape=None) -> LayerGraph:
        return self.reflect(head, input_shape)[0]

    def unit_index(self, point: TruncationPoint | int) -> int:
        """0-based index of the unit whose last layer is the cutoff."""
        k = point.layer_index if isinstance(point, TruncationPoint) else int(point)
        _, ends = self.reflect()
        if k not in ends:
            raise GraphError(f"cutoff {k} is not a unit boundary of this chain")
        return ends.index(k)

    def run_units(self, x: torch.Tensor, upto: int | None = None) -> torch.Tensor:
        """Forward through units ``0..upto`` (inclusive); all units when ``upto`` is None."""
        for i, unit in enumerate(self.units):
            x = unit(x)
            if upto is not None and i == upto:
                break
        return x

    def feature_maps(self, x: torch.Tensor, indices: Sequence[int]) -> dict[int, torch.Tensor]:
        wanted = set(indices)
        if wanted and max(wanted) >= len(self.units):
            raise GraphError(f"unit {max(wanted)} beyond chain depth {len(self.units)}")
        maps = {}
        for i, unit in enumerate(self.units):
            x = unit(x)
            if i in wanted:
                maps[i] = x
            if len(maps) == len(wanted):
                break
        return maps


class Backbone(UnitChain):
    """A pretrained feature extractor ``f_L ∘ … ∘ f_1`` without its source head."""

    def __init__(self, name: str, units, input_shape, spec: dict | None = None):
        super().__init__(units, input_shape)
        self.name = name
        self.spec = dict(spec or {"name": name})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run_units(x)

    def save(self, path: str | Path) -> None:
        torch.save({"spec": self.spec, "state_dict": self.state_dict()}, path)


# --- constructors ---------------------------------------------------------

_TV_RESNETS = {
    "resnet18": (tv_resnet.resnet18, tv_resnet.ResNet18_Weights),
    "resnet34": (tv_resnet.resnet34, tv_resnet.ResNet34_Weights),
    "resnet50": (tv_resnet.resnet50, tv_resnet.ResNet50_Weights),
    "resnet101": (tv_resnet.resnet101, tv_resnet.ResNet101_Weights),
}


def resnet_units(model: tv_resnet.ResNet) -> list[tuple[str, str, nn.Module]]:
    stem = nn.Sequential(model.conv1, model.bn1, model.relu, model.maxpool)
    units = [("stem", "stem", stem)]
    for b in range(1, 5):
        layer = getattr(model, f"layer{b}")
        for j, block in enumerate(layer):
            units.append((f"layer{b}.{j}", f"block{b}", block))
    return units


def torchvision_resnet(name: str = "resnet50", weights: str | None = None, image_size: int = 224) -> Backbone:
    """Wrap a torchvision ResNet; ``weights='imagenet'`` downloads the default weights."""
    if name not in _TV_RESNETS:
        raise ValueError(f"unknown torchvision resnet {name!r}; choose from {sorted(_TV_RESNETS)}")
    ctor, wenum = _TV_RESNETS[name]
    model = ctor(weights=wenum.DEFAULT if weights == "imagenet" else None)
    spec = {"name": name, "image_size": image_size}
    return Backbone(name, resnet_units(model), (3, image_size, image_size), spec)


def mini_resnet(
    widths: Sequence[int] = (16, 32, 64, 128),
    depths: Sequence[int] = (2, 2, 2, 2),
    image_size: int = 32,
    in_channels: int = 3,
) -> Backbone:
    """Small four-block ResNet (BasicBlock units) for desk-scale experiments."""
    if len(widths) != len(depths):
        raise ValueError("widths and depths must have equal length")
    stem = nn.Sequential(
        nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
        nn.BatchNorm2d(widths[0]),
        nn.ReLU(inplace=True),
    )
    units = [("stem", "stem", stem)]
    inplanes = widths[0]
    for b, (width, depth) in enumerate(zip(widths, depths), start=1):
        for j in range(depth):
            stride = 2 if (j == 0 and b > 1) else 1
            downsample = None
            if stride != 1 or inplanes != width:
                downsample = nn.Sequential(
                    nn.Conv2d(inplanes, width, 1, stride=stride, bias=False), nn.BatchNorm2d(width)
                )
            units.append((f"layer{b}.{j}", f"block{b}", tv_resnet.BasicBlock(inplanes, width, stride, downsample)))
            inplanes = width
    spec = {
        "name": "mini_resnet", "widths": list(widths), "depths": list(depths),
        "image_size": image_size, "in_channels": in_channels,
    }
    return Backbone("mini_resnet", units, (in_channels, image_size, image_size), spec)


def plain_convnet(
    channels: Sequence[int] = (3, 4, 8, 16),
    kernel: int = 3,
    image_size: int = 8,
    bias: bool = False,
    blocks: Sequence[int] | None = None,
) -> Backbone:
    """Toy net of bare convolutions, one unit per conv, size-preserving padding.

    ``blocks`` gives how many consecutive convs form each block (default: one block).
    """
    n = len(channels) - 1
    blocks = list(blocks or [n])
    if sum(blocks) != n:
        raise ValueError("block sizes must add up to the number of convs")
    block_names = [f"block{b + 1}" for b, size in enumerate(blocks) for _ in range(size)]
    units = [
        (f"conv{i + 1}", block_names[i], nn.Conv2d(channels[i], channels[i + 1], kernel, padding=kernel // 2, bias=bias))
        for i in range(n)
    ]
    spec = {"name": "plain_convnet", "channels": list(channels), "kernel": kernel,
            "image_size": image_size, "bias": bias, "blocks": blocks}
    return Backbone("plain_convnet", units, (channels[0], image_size, image_size), spec)


def build_backbone(spec: dict | str) -> Backbone:
    spec = {"name": spec} if isinstance(spec, str) else dict(spec)
    name = spec.pop("name")
    if name in _TV_RESNETS:
        return torchvision_resnet(name, **spec)
    if name == "mini_resnet":
        return mini_resnet(**spec)
    if name == "plain_convnet":
        return plain_convnet(**spec)
    raise ValueError(f"unknown backbone {name!r}")


def load_backbone(path: str | Path) -> Backbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    backbone = build_backbone(payload["spec"])
    backbone.load_state_dict(payload["state_dict"])
    return backbone
