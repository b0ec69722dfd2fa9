"""Finetuning protocol: splits, image loading, augmentation, plateau schedule, model selection."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow
from torch import nn
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import v2 as T
from torchvision.transforms.v2 import functional as TF

from .actv import write_actv
from .metrics import MetricError, auprc, auroc
from .surgery import INIT_SCHEME, FreezePlan, TLModel, save_model
from .svcca import ActivationMatrix, feature_rows

log = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.64, 0.16, 0.20)
MIN_PER_CLASS = 5


class TrainingError(RuntimeError):
    pass


# --- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class DataSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    stratified: bool = True

    def __post_init__(self) -> None:
        parts = [set(self.train), set(self.val), set(self.test)]
        if sum(map(len, parts)) != len(set().union(*parts)):
            raise ValueError("split parts overlap")
        n = sum(map(len, parts))
        if set().union(*parts) != set(range(n)):
            raise ValueError("split parts do not cover 0..n-1")

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _fractions(fractions: Sequence[float]) -> list[Fraction]:
    fr = [Fraction(f).limit_denominator(10**6) for f in fractions]
    total = sum(fr)
    return [f / total for f in fr]


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` by the largest-remainder method (ties to the earlier part)."""
    quotas = [total * f for f in _fractions(fractions)]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _round_table(counts: Sequence[int], totals: Sequence[int], fractions: list[Fraction]) -> np.ndarray:
    """Class x part counts, each cell the floor or ceiling of its exact quota.

    Row sums equal class sizes and column sums equal ``totals``; such a
    rounding always exists and is found as an integral max flow.
    """
    quota = [[n * f for f in fractions] for n in counts]
    base = np.array([[math.floor(q) for q in row] for row in quota], dtype=np.int64)
    n_cls, n_parts = base.shape
    src, sink = 0, 1 + n_cls + n_parts
    cap = np.zeros((sink + 1, sink + 1), dtype=np.int32)
    for c in range(n_cls):
        cap[src, 1 + c] = counts[c] - base[c].sum()
        for j in range(n_parts):
            cap[1 + c, 1 + n_cls + j] = int(quota[c][j] != base[c, j])
    for j in range(n_parts):
        cap[1 + n_cls + j, sink] = totals[j] - base[:, j].sum()
    flow = maximum_flow(csr_matrix(cap), src, sink).flow.toarray()
    if flow[src].sum() != cap[src].sum():
        raise ValueError("no consistent stratified rounding exists")
    return base + flow[1:1 + n_cls, 1 + n_cls:sink]


def make_split(labels: Sequence, seed: int = 0, fractions: Sequence[float] = SPLIT_FRACTIONS) -> DataSplit:
    """Stratified train/val/test split, deterministic per seed.

    Part sizes follow largest-remainder rounding of the whole dataset; every
    class gets the floor or ceiling of its exact share in every part.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    small = [str(c) for c, n in zip(classes, counts) if n < MIN_PER_CLASS]
    if small:
        raise ValueError(f"classes with fewer than {MIN_PER_CLASS} examples: {', '.join(small)}")
    totals = largest_remainder(len(labels), fractions)
    alloc = _round_table([int(n) for n in counts], totals, _fractions(fractions))
    rng = np.random.default_rng(seed)
    out: list[list[int]] = [[] for _ in totals]
    for c, cls in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        bounds = np.r_[0, np.cumsum(alloc[c])]
        for j in range(len(totals)):
            out[j].extend(int(i) for i in idx[bounds[j]:bounds[j + 1]])
    train, val, test = (tuple(sorted(p)) for p in out)
    return DataSplit(train, val, test, seed, True)


# --- data -----------------------------------------------------------------------

def read_manifest(path: str | Path) -> list[tuple[Path, int]]:
    """CSV with header ``path,label``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs 'path' and 'label' columns")
        for row in reader:
            p = Path(row["path"])
            rows.append((p if p.is_absolute() else path.parent / p, int(row["label"])))
    if not rows:
        raise ValueError(f"{path}: empty manifest")
    return rows


def load_image(path: str | Path, image_size: int, channels: int = 3) -> torch.Tensor:
    """Center-crop to a square, resize, and scale to [0, 1] as (C, H, W) float."""
    with Image.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        side = min(img.size)
        img = TF.center_crop(img, [side, side])
        img = img.resize((image_size, image_size), Image.BILINEAR)
        return TF.to_dtype(TF.to_image(img), torch.float32, scale=True)


def load_images(manifest: Sequence[tuple[Path, int]], image_size: int, channels: int = 3
                ) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.stack([load_image(p, image_size, channels) for p, _ in manifest])
    y = torch.tensor([lab for _, lab in manifest], dtype=torch.long)
    return x, y


def augmentation(image_size: int, crop_padding: int, rotation: float) -> T.Compose:
    return T.Compose([
        T.RandomCrop(image_size, padding=crop_padding, padding_mode="reflect"),
        T.RandomRotation(rotation),
    ])


class TensorImages(Dataset):
    """In-memory image tensors with an optional per-sample transform."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, transform=None):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = labels
        self.transform = transform

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        x = self.images[i]
        if self.transform is not None:
            x = self.transform(x)
        return x, self.labels[i]


@dataclass
class SplitData:
    train: TensorImages
    val: TensorImages
    test: TensorImages
    split: DataSplit | None = None


def split_datasets(images: torch.Tensor, labels: torch.Tensor, split: DataSplit, train_transform=None) -> SplitData:
    def part(idx, tf):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TensorImages(images[idx], labels[idx], tf)

    return SplitData(part(split.train, train_transform), part(split.val, None), part(split.test, None), split)


# --- optimisation ----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 64
    optimizer: str = "adam"
    weight_decay: float = 0.0
    patience: int = 5
    plateau_threshold: float = 1e-4
    lr_factor: float = 0.5
    min_lr: float = 1e-7
    max_epochs: int = 200
    rotation: float = 10.0
    crop_padding: int = 4
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def apply_plan(model: TLModel, plan: FreezePlan) -> list[dict]:
    """Set requires_grad per plan and return optimizer parameter groups."""
    plan.check_covers(model)
    groups = []
    for name, module in model.layer_modules():
        lr = plan.lr(name)
        for p in module.parameters():
            p.requires_grad_(lr is not None)
        params = list(module.parameters())
        if lr is not None and params:
            groups.append({"params": params, "lr": lr, "name": name})
    if not groups:
        raise TrainingError("no trainable parameters under this freeze plan")
    return groups


def make_optimizer(model: TLModel, plan: FreezePlan, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = apply_plan(model, plan)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(groups, lr=groups[0]["lr"], weight_decay=cfg.weight_decay)


def set_train_mode(model: TLModel, plan: FreezePlan) -> None:
    """Train mode everywhere except frozen layers, whose norm statistics stay fixed."""
    model.train()
    for name, module in model.layer_modules():
        if plan.lr(name) is None:
            module.eval()


@torch.no_grad()
def predict_scores(model: nn.Module, data: Dataset, batch_size: int = 256, device: str = "cpu"
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probability for every example, with labels."""
    model.eval()
    scores, labels = [], []
    for x, y in DataLoader(data, batch_size=batch_size, shuffle=False):
        logits = model(x.to(device))
        scores.append(torch.softmax(logits.double(), dim=1)[:, 1].cpu().numpy())
        labels.append(y.numpy())
    return np.concatenate(scores), np.concatenate(labels)


def score_dataset(model, data, batch_size=256, device="cpu") -> dict:
    s, y = predict_scores(model, data, batch_size, device)
    out = {"auprc": auprc(s, y)}
    try:
        out["auroc"] = auroc(s, y)
    except MetricError:
        out["auroc"] = None
    return out


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_val_auprc: float = -1.0
    best_epoch: int = 0
    best_checkpoint: str | None = None
    plateau_count: int = 0


@dataclass
class ExperimentRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auprc: float | None = None
    test: dict = field(default_factory=dict)
    params: int | None = None
    macs: int | None = None
    checkpoint: str | None = None
    stop_reason: str = ""
    aborted: bool = False
    init_scheme: str = INIT_SCHEME
    extra: dict = field(default_factory=dict)

    @property
    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e) + "\n")
        (out / "record.json").write_text(json.dumps(self.to_dict(), indent=1, default=str))

    @classmethod
    def load(cls, out_dir: str | Path) -> "ExperimentRecord":
        return cls(**json.loads((Path(out_dir) / "record.json").read_text()))


def _seed_everything(seed: int, deterministic: bool) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def finetune(model: TLModel, plan: FreezePlan, data: SplitData, cfg: TrainConfig | None = None,
             out_dir: str | Path | None = None, record_config: dict | None = None) -> ExperimentRecord:
    """Train ``model`` in place under ``plan``; on return it holds the best-validation weights."""
    cfg = cfg or TrainConfig()
    gen = _seed_everything(cfg.seed, cfg.deterministic)
    device = cfg.device
    model.to(device)
    optimizer = make_optimizer(model, plan, cfg)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="max", factor=cfg.lr_factor, patience=cfg.patience - 1,
        threshold=cfg.plateau_threshold, threshold_mode="abs", eps=0.0,
    )
    loader = DataLoader(data.train, batch_size=cfg.batch_size, shuffle=True, generator=gen, num_workers=0)
    loss_fn = nn.CrossEntropyLoss()
    record = ExperimentRecord(
        config={"train": asdict(cfg), "plan": json.loads(plan.to_json()), **(record_config or {})},
        params=sum(p.numel() for p in model.parameters()),
    )
    state = TrainState(lr=max(g["lr"] for g in optimizer.param_groups))
    best_state = copy.deepcopy(model.state_dict())
    ckpt = Path(out_dir) / "best.ckpt" if out_dir else None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        lr_now = max(g["lr"] for g in optimizer.param_groups)
        set_train_mode(model, plan)
        total, seen = 0.0, 0
        for x, y in loader:
            x, y = x.to(device), y.to(device)
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                record.aborted = True
                record.stop_reason = f"non-finite loss at epoch {epoch}"
                break
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(y)
            seen += len(y)
        if record.aborted:
            log.warning(record.stop_reason)
            break
        val = score_dataset(model, data.val, device=device)
        entry = {"epoch": epoch, "lr": lr_now, "train_loss": total / max(seen, 1),
                 "val_auprc": val["auprc"], "val_auroc": val["auroc"]}
        record.epochs.append(entry)
        if val["auprc"] > state.best_val_auprc:
            state.best_val_auprc = val["auprc"]
            state.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt is not None:
                save_model(model, plan, ckpt)
                state.best_checkpoint = str(ckpt)
        scheduler.step(val["auprc"])
        state.plateau_count = scheduler.num_bad_epochs
        state.lr = max(g["lr"] for g in optimizer.param_groups)
        if state.lr < cfg.min_lr:
            record.stop_reason = f"lr {state.lr:.3g} below {cfg.min_lr:g}"
            break
    else:
        record.stop_reason = f"epoch cap {cfg.max_epochs}"

    model.load_state_dict(best_state)
    record.best_epoch = state.best_epoch
    record.best_val_auprc = state.best_val_auprc if state.best_epoch else None
    record.checkpoint = state.best_checkpoint
    if not record.aborted and len(data.test):
        record.test = score_dataset(model, data.test, device=device)
    if out_dir:
        record.save(out_dir)
    return record


# --- activations -----------------------------------------------------------------

def _batches(data, batch_size: int) -> Iterable[torch.Tensor]:
    if isinstance(data, torch.Tensor):
        yield from data.split(batch_size)
        return
    if isinstance(data, Dataset):
        data = DataLoader(data, batch_size=batch_size, shuffle=False)
    for batch in data:
        yield batch[0] if isinstance(batch, (tuple, list)) else batch


@torch.no_grad()
def collect_feature_maps(model, unit_indices: Sequence[int], data, batch_size: int = 128
                         ) -> dict[int, torch.Tensor]:
    """Outputs of the given units (0-based) for every probe image, in data order."""
    wanted = sorted(set(int(i) for i in unit_indices))
    if wanted and (wanted[0] < 0 or wanted[-1] >= len(model.units)):
        raise TrainingError(f"unit index outside the model's {len(model.units)} units")
    was = model.training
    model.eval()
    chunks: dict[int, list[torch.Tensor]] = {i: [] for i in wanted}
    try:
        for x in _batches(data, batch_size):
            for i, fmap in model.feature_maps(x, wanted).items():
                chunks[i].append(fmap.cpu())
    finally:
        model.train(was)
    return {i: torch.cat(c) for i, c in chunks.items()}


def extract_activations(model, cutoffs: Sequence, data, out_dir: str | Path | None = None,
                        batch_size: int = 128) -> list[ActivationMatrix]:
    """One (image x position) by channel matrix per cutoff; optionally dumped as ``.actv`` files."""
    graph = model.graph()
    points = []
    for c in cutoffs:
        k = c.layer_index if hasattr(c, "layer_index") else int(c)
        if k > len(graph):
            raise TrainingError(f"cutoff {k} beyond model depth {len(graph)}")
        points.append(graph.point(k))
    index = [model.unit_index(p) for p in points]
    maps = collect_feature_maps(model, index, data, batch_size)
    mats = [ActivationMatrix(feature_rows(maps[i]), p.tag) for p, i in zip(points, index)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m in mats:
            write_actv(out / f"{m.layer_tag}.actv", m.data)
    return mats
