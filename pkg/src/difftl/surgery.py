"""Model surgery for the four transfer strategies.

* FTL: whole backbone, new head, everything finetuned at the base LR.
* TTL: keep units up to the cutoff, new head, everything finetuned.
* LWFT: whole backbone, finetune only the top ``k`` layers (head at the base
  LR, the other ``k - 1`` at a tenth of it), freeze the rest. Residual units
  count as single layers.
* TF: keep units up to the cutoff (finetuned), rebuild every unit above it
  with halved channel counts and fresh weights.

Builders take a :class:`~difftl.zoo.Backbone` (modules plus reflected graph)
and a :class:`StrategyConfig`; they never mutate the backbone.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .graph import GraphError, HeadSpec, InvalidCutoffError, count_params
from .zoo import Backbone, UnitChain, build_backbone, is_residual

STRATEGIES = ("FTL", "TTL", "LWFT", "TF")
LWFT_LOWER_TIER = 0.1
INIT_SCHEME = "conv: kaiming_normal(fan_in, relu); linear: torch default (fan_in uniform); norm: weight=1, bias=0"


class SurgeryError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    """Which strategy to build and its cutoff.

    ``cutoff`` is a graph layer index for TTL and TF. For LWFT it counts
    trainable layers from the top (the head is layer ``N``).
    """

    kind: str = "FTL"
    cutoff: int | None = None
    base_lr: float = 1e-4
    pooling: bool = True
    head: HeadSpec = field(default_factory=HeadSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in STRATEGIES:
            raise SurgeryError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not self.base_lr > 0:
            raise SurgeryError("base_lr must be positive")
        if kind != "FTL" and self.cutoff is None:
            raise SurgeryError(f"{kind} needs a cutoff")
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", HeadSpec(**self.head))
        if self.head.pooled != self.pooling:
            object.__setattr__(self, "head", replace(self.head, pooled=self.pooling))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.to_dict()
        return d


@dataclass(frozen=True)
class FreezePlan:
    """Per-layer training plan: ``(name, lr)`` with ``lr=None`` meaning frozen."""

    entries: tuple[tuple[str, float | None], ...]

    def __post_init__(self) -> None:
        entries = tuple((str(n), None if lr is None else float(lr)) for n, lr in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise SurgeryError("freeze plan lists a layer twice")
        if any(lr is not None and not lr > 0 for _, lr in entries):
            raise SurgeryError("trainable learning rates must be positive")
        if not any(lr is not None for _, lr in entries):
            raise SurgeryError("freeze plan has no trainable layer")

    def __iter__(self):
        return iter(self.entries)

    def lr(self, name: str) -> float | None:
        return dict(self.entries)[name]

    @property
    def frozen(self) -> list[str]:
        return [n for n, lr in self.entries if lr is None]

    @property
    def trainable(self) -> list[str]:
        return [n for n, lr in self.entries if lr is not None]

    def to_json(self) -> str:
        return json.dumps([{"layer": n, "lr": lr, "frozen": lr is None} for n, lr in self.entries], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FreezePlan":
        return cls(tuple((e["layer"], e["lr"]) for e in json.loads(text)))

    def check_covers(self, model: "TLModel") -> None:
        expected = list(model.unit_names) + ["head"]
        if [n for n, _ in self.entries] != expected:
            raise SurgeryError("freeze plan does not cover the model's layers exactly once, in order")


def init_fresh(module: nn.Module, seed: int) -> nn.Module:
    """Reproducible fan-in-scaled initialization of every layer in ``module``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                m.reset_parameters()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, nn.GroupNorm)):
                if getattr(m, "affine", False):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
                if getattr(m, "track_running_stats", False):
                    m.reset_running_stats()
    return module


class Head(nn.Module):
    def __init__(self, in_channels: int, spec: HeadSpec, spatial_dims: Sequence[int] | None = None):
        super().__init__()
        self.spec = spec
        self.pool = nn.AdaptiveAvgPool2d(1) if spec.pooled else nn.Identity()
        self.flatten = nn.Flatten()
        fin = spec.in_features(in_channels, spatial_dims)
        if spec.hidden is None:
            self.mlp = nn.Linear(fin, spec.num_outputs)
        else:
            self.mlp = nn.Sequential(
                nn.Linear(fin, spec.hidden), nn.ReLU(inplace=True), nn.Linear(spec.hidden, spec.num_outputs)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.flatten(self.pool(x)))


class TLModel(UnitChain):
    """Backbone units (possibly truncated or coarsened) followed by a new head."""

    def __init__(self, units, input_shape, head_spec: HeadSpec, strategy: StrategyConfig | None = None,
                 backbone_spec: dict | None = None):
        super().__init__(units, input_shape)
        graph, _ = self.reflect()
        last = graph.node(len(graph))
        self.head_spec = head_spec
        self.head = Head(last.out_channels, head_spec, last.spatial_dims)
        self.strategy = strategy
        self.backbone_spec = dict(backbone_spec or {})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.run_units(x))

    def graph(self, head: HeadSpec | None = None, input_shape=None):
        return super().graph(head or self.head_spec, input_shape)

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def layer_modules(self) -> list[tuple[str, nn.Module]]:
        return list(zip(self.unit_names, self.units)) + [("head", self.head)]


def _units_upto(backbone: Backbone, cutoff) -> tuple[int, list]:
    try:
        point = backbone.graph().point(cutoff)
    except InvalidCutoffError as err:
        raise SurgeryError(str(err)) from err
    u = backbone.unit_index(point)
    return u, [(n, b, copy.deepcopy(m)) for n, b, m in backbone.named_units()[: u + 1]]


def _uniform_plan(model: TLModel, lr: float) -> FreezePlan:
    return FreezePlan(tuple((name, lr) for name, _ in model.layer_modules()))


def _finish(units, backbone: Backbone, cfg: StrategyConfig) -> TLModel:
    model = TLModel(units, backbone.input_shape, cfg.head, cfg, backbone.spec)
    init_fresh(model.head, cfg.seed)
    return model


def build_ftl(backbone: Backbone, cfg: StrategyConfig) -> tuple[TLModel, FreezePlan]:
    if cfg.kind != "FTL":
        raise SurgeryError(f"build_ftl got a {cfg.kind} config")
    units = [(n, b, copy.deepcopy(m)) for n, b, m in backbone.named_units()]
    model = _finish(units, backbone, cfg)
    return model, _uniform_plan(model, cfg.base_lr)


def build_ttl(backbone: Backbone, cfg: StrategyConfig) -> tuple[TLModel, FreezePlan]:
    if cfg.kind != "TTL":
        raise SurgeryError(f"build_ttl got a {cfg.kind} config")
    _, units = _units_upto(backbone, cfg.cutoff)
    model = _finish(units, backbone, cfg)
    return model, _uniform_plan(model, cfg.base_lr)


def build_lwft(backbone: Backbone, cfg: StrategyConfig) -> tuple[TLModel, FreezePlan]:
    if cfg.kind != "LWFT":
        raise SurgeryError(f"build_lwft got a {cfg.kind} config")
    units = [(n, b, copy.deepcopy(m)) for n, b, m in backbone.named_units()]
    n_layers = len(units) + 1
    k = int(cfg.cutoff)
    if not 1 <= k <= n_layers:
        raise SurgeryError(f"LWFT depth k={k} outside [1, {n_layers}]")
    model = _finish(units, backbone, cfg)
    names = [name for name, _ in model.layer_modules()]
    entries = []
    for pos, name in enumerate(names):
        from_top = n_layers - pos  # head is 1
        if from_top == 1:
            entries.append((name, cfg.base_lr))
        elif from_top <= k:
            entries.append((name, cfg.base_lr * LWFT_LOWER_TIER))
        else:
            entries.append((name, None))
    return model, FreezePlan(tuple(entries))


def lwft_depth(backbone: Backbone, cutoff) -> int:
    """LWFT top-layer count that freezes everything up to and including ``cutoff``."""
    point = backbone.graph().point(cutoff)
    return len(backbone.units) - backbone.unit_index(point)


# --- TransFusion coarsening -------------------------------------------------

def _input_consumers(unit: nn.Module, x: torch.Tensor) -> set[str]:
    """Names of layers inside ``unit`` that read the unit's input tensor directly."""
    hits: set[str] = set()
    hooks = []
    for name, m in unit.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            hooks.append(m.register_forward_pre_hook(
                lambda mod, inp, name=name: hits.add(name) if inp[0] is x else None))
    try:
        was = unit.training
        unit.eval()
        with torch.no_grad():
            unit(x)
        unit.train(was)
    finally:
        for h in hooks:
            h.remove()
    return hits


def _half(c: int) -> int:
    return max(1, c // 2)


def _set_child(root: nn.Module, dotted: str, new: nn.Module) -> None:
    parent_name, _, leaf = dotted.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, leaf, new)


def _halved_layer(m: nn.Module, keep_in: bool, where: str) -> nn.Module | None:
    """Fresh copy of a parametric layer with halved widths, or None for other modules."""
    if isinstance(m, nn.Conv2d):
        cin = m.in_channels if keep_in else _half(m.in_channels)
        cout = _half(m.out_channels)
        if cin % m.groups or cout % m.groups:
            raise SurgeryError(f"{where}: halving to {cin}->{cout} channels breaks groups={m.groups} divisibility")
        return nn.Conv2d(cin, cout, m.kernel_size, m.stride, m.padding, m.dilation,
                         m.groups, m.bias is not None, m.padding_mode)
    if isinstance(m, nn.Linear):
        fin = m.in_features if keep_in else _half(m.in_features)
        return nn.Linear(fin, _half(m.out_features), m.bias is not None)
    if isinstance(m, nn.BatchNorm2d):
        return nn.BatchNorm2d(_half(m.num_features), m.eps, m.momentum, m.affine, m.track_running_stats)
    if isinstance(m, nn.GroupNorm):
        c = _half(m.num_channels)
        if c % m.num_groups:
            raise SurgeryError(f"{where}: halving to {c} channels breaks GroupNorm({m.num_groups})")
        return nn.GroupNorm(m.num_groups, c, m.eps, m.affine)
    return None


def halve_unit(unit: nn.Module, x: torch.Tensor, input_halved: bool, label: str) -> nn.Module:
    """Copy of ``unit`` with every channel count halved (floor, min 1) and fresh layers.

    Layers reading the unit input keep their input width when the input is
    not itself halved; an identity skip gets a 1x1 projection in that case so
    the residual sum stays shape-valid.
    """
    consumers = _input_consumers(unit, x)
    new = copy.deepcopy(unit)
    for name, m in list(new.named_modules()):
        where = f"{label}.{name}" if name else label
        layer = _halved_layer(m, name in consumers and not input_halved, where)
        if layer is None:
            continue
        if not name:  # the unit is itself a single layer
            return layer
        _set_child(new, name, layer)
    if is_residual(new) and not input_halved:
        if not hasattr(new, "downsample"):
            raise SurgeryError(f"{label}: residual unit without a 'downsample' slot cannot be coarsened")
        if new.downsample is None:
            cin = x.shape[1]
            cout = _last_conv_width(new)
            new.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))
    return new


def _last_conv_width(unit: nn.Module) -> int:
    """Output channels of the residual branch, i.e. of its last conv."""
    convs = [m for name, m in unit.named_modules() if isinstance(m, nn.Conv2d) and "downsample" not in name]
    return convs[-1].out_channels


def build_tf(backbone: Backbone, cfg: StrategyConfig) -> tuple[TLModel, FreezePlan]:
    if cfg.kind != "TF":
        raise SurgeryError(f"build_tf got a {cfg.kind} config")
    u, kept = _units_upto(backbone, cfg.cutoff)
    units = list(kept)
    x = torch.zeros(1, *backbone.input_shape)
    with torch.no_grad():
        for i, (name, block, module) in enumerate(backbone.named_units()):
            was = module.training
            module.eval()
            if i > u:
                halved = halve_unit(module, x, input_halved=i > u + 1, label=name)
                units.append((name, block, init_fresh(halved, cfg.seed + i)))
            x = module(x)
            module.train(was)
    model = _finish(units, backbone, cfg)
    return model, _uniform_plan(model, cfg.base_lr)


_BUILDERS = {"FTL": build_ftl, "TTL": build_ttl, "LWFT": build_lwft, "TF": build_tf}


def build_model(backbone: Backbone, cfg: StrategyConfig) -> tuple[TLModel, FreezePlan]:
    return _BUILDERS[cfg.kind](backbone, cfg)


def expected_params(backbone: Backbone, cfg: StrategyConfig) -> int:
    """Parameter count predicted from the graph alone (FTL, TTL and LWFT)."""
    graph = backbone.graph()
    if cfg.kind == "TTL":
        return count_params(graph, cfg.cutoff, cfg.head)
    if cfg.kind in ("FTL", "LWFT"):
        return count_params(graph, None, cfg.head)
    raise SurgeryError("TF parameter counts come from the rebuilt model's own graph")


# --- persistence --------------------------------------------------------------

def save_model(model: TLModel, plan: FreezePlan, path: str | Path) -> None:
    """Checkpoint via ``torch.save`` plus a ``<name>.plan.json`` sidecar."""
    path = Path(path)
    torch.save({
        "backbone_spec": model.backbone_spec,
        "strategy": model.strategy.to_dict() if model.strategy else None,
        "state_dict": model.state_dict(),
    }, path)
    path.with_suffix(".plan.json").write_text(plan.to_json())


def load_model(path: str | Path) -> tuple[TLModel, FreezePlan]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = StrategyConfig(**payload["strategy"])
    model, _ = build_model(build_backbone(payload["backbone_spec"]), cfg)
    model.load_state_dict(payload["state_dict"])
    plan = FreezePlan.from_json(path.with_suffix(".plan.json").read_text())
    return model, plan
