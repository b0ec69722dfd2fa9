"""Desk-scale synthetic classification tasks and a synthetic pretraining source.

* ``texture``: oriented band-limited noise; the class is the orientation
  (horizontal vs vertical), visible in any small patch.
* ``shape``: three identical Gaussian blobs on a line; the class is the line's
  direction (horizontal vs vertical). Blobs sit further apart than the
  receptive field of the first block, so no local patch reveals the class.

The pretraining source classifies blob lines by angle. The shape target can
reuse its deep features; the texture target only needs generic low-level ones.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .zoo import Backbone, build_backbone, load_backbone

log = logging.getLogger(__name__)

KINDS = ("texture", "shape")
BLOB_SIGMA = 1.5
BLOB_COUNT = 3
EDGE_MARGIN = 4


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "texture"
    image_size: int = 40
    samples_per_class: int = 400
    noise: float = 0.1
    seed: int = 0
    spacing: int = 14  # blob spacing in pixels (shape task)
    frequency: float = 0.25  # cycles per pixel (texture task)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic task {self.kind!r}; expected one of {KINDS}")
        if self.samples_per_class < 5:
            raise ValueError("samples_per_class must be at least 5")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.kind == "shape":
            need = (BLOB_COUNT - 1) * self.spacing + 2 * EDGE_MARGIN + 1
            if self.image_size < need:
                raise ValueError(
                    f"image_size {self.image_size} too small for {BLOB_COUNT} blobs spaced "
                    f"{self.spacing}px apart (needs >= {need})"
                )
        elif self.image_size < 8 or not 0 < self.frequency <= 0.5:
            raise ValueError("texture task needs image_size >= 8 and 0 < frequency <= 0.5")

    def to_dict(self) -> dict:
        return asdict(self)


def oriented_noise(rng: np.random.Generator, size: int, angle: float, frequency: float,
                   bandwidth: float = 0.06, spread: float = np.deg2rad(15)) -> np.ndarray:
    """Noise whose spectrum is concentrated around ``frequency`` along ``angle`` (radians)."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    theta = np.arctan2(fy, fx)
    dtheta = np.angle(np.exp(2j * (theta - angle))) / 2  # orientation is modulo pi
    mask = np.exp(-((radius - frequency) ** 2) / (2 * bandwidth ** 2)) * np.exp(-(dtheta ** 2) / (2 * spread ** 2))
    field = np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * mask).real
    field = (field - field.mean()) / (field.std() + 1e-12)
    return 0.5 + 0.15 * field


def blob_line(rng: np.random.Generator, size: int, direction: tuple[float, float], spacing: float) -> np.ndarray:
    """Three identical blobs along ``direction`` (unit (dy, dx)), centred at a random valid spot."""
    dy, dx = direction
    half = (BLOB_COUNT - 1) / 2 * spacing
    lo = EDGE_MARGIN + half * np.array([abs(dy), abs(dx)])
    hi = size - 1 - lo
    cy, cx = rng.uniform(lo, hi)
    yy, xx = np.mgrid[:size, :size]
    img = np.full((size, size), 0.2)
    for t in np.linspace(-half, half, BLOB_COUNT):
        img += 0.7 * np.exp(-((yy - cy - t * dy) ** 2 + (xx - cx - t * dx) ** 2) / (2 * BLOB_SIGMA ** 2))
    return img


_HORIZONTAL, _VERTICAL = (0.0, 1.0), (1.0, 0.0)


def _render(rng, kind: str, cls: int, spec: SyntheticTaskSpec) -> np.ndarray:
    size = spec.image_size
    if kind == "texture":
        img = oriented_noise(rng, size, (0.0, np.pi / 2)[cls], spec.frequency)
    else:
        img = blob_line(rng, size, (_HORIZONTAL, _VERTICAL)[cls], spec.spacing)
    img = img + spec.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def generate_arrays(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """(images uint8 (N, H, W), labels (N,)), classes interleaved, reproducible per seed."""
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    n = spec.samples_per_class
    labels = np.tile([0, 1], n)
    images = np.stack([_to_uint8(_render(rng, spec.kind, int(c), spec)) for c in labels])
    return images, labels


def generate_synthetic(spec: SyntheticTaskSpec, out_dir: str | Path) -> Path:
    """Write PNG images, ``manifest.csv`` (path,label) and ``spec.json``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, labels = generate_arrays(spec)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for i, (img, lab) in enumerate(zip(images, labels)):
            rel = f"images/{spec.kind}_{i:05d}.png"
            Image.fromarray(img, mode="L").save(out / rel, optimize=False)
            writer.writerow([rel, int(lab)])
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return manifest


def as_tensors(images: np.ndarray, labels: np.ndarray, channels: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(images).float().div_(255).unsqueeze(1)
    if channels != 1:
        x = x.expand(-1, channels, -1, -1).contiguous()
    return x, torch.from_numpy(np.asarray(labels)).long()


def task_tensors(spec: SyntheticTaskSpec, channels: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """In-memory equivalent of ``generate_synthetic`` followed by loading the PNGs."""
    return as_tensors(*generate_arrays(spec), channels=channels)


# --- synthetic pretraining source -----------------------------------------------------

SOURCE_LINE_ANGLES = (0.0, 45.0, 90.0, 135.0)


def source_tensors(image_size: int, samples_per_class: int, seed: int, noise: float = 0.1,
                   spacing: int = 14, channels: int = 3,
                   angles: tuple[float, ...] = SOURCE_LINE_ANGLES) -> tuple[torch.Tensor, torch.Tensor]:
    """Source task: blob lines at each of ``angles`` (degrees), one class per angle."""
    SyntheticTaskSpec("shape", image_size, samples_per_class, noise, seed, spacing)  # validates geometry
    rng = np.random.default_rng([seed, 99])
    dirs = [(np.sin(np.deg2rad(a)), np.cos(np.deg2rad(a))) for a in angles]
    imgs, labels = [], []
    for _ in range(samples_per_class):
        for c, d in enumerate(dirs):
            img = blob_line(rng, image_size, d, spacing) + noise * rng.standard_normal((image_size, image_size))
            imgs.append(_to_uint8(np.clip(img, 0.0, 1.0)))
            labels.append(c)
    return as_tensors(np.stack(imgs), np.array(labels), channels)


@dataclass(frozen=True)
class PretrainSpec:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    image_size: int = 40
    samples_per_class: int = 150
    epochs: int = 12
    lr: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    angles: tuple[float, ...] = SOURCE_LINE_ANGLES

    def key(self) -> str:
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def pretrain_backbone(spec: PretrainSpec = PretrainSpec(), cache_dir: str | Path | None = None) -> Backbone:
    """mini_resnet trained on the four-class synthetic source; cached on disk by spec hash."""
    path = Path(cache_dir) / f"source_{spec.key()}.pt" if cache_dir else None
    if path is not None and path.exists():
        return load_backbone(path)
    torch.manual_seed(spec.seed)
    backbone = build_backbone({"name": "mini_resnet", "widths": list(spec.widths),
                               "depths": list(spec.depths), "image_size": spec.image_size})
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(spec.widths[-1], len(spec.angles)))
    model = nn.Sequential(backbone, head)
    x, y = source_tensors(spec.image_size, spec.samples_per_class, spec.seed, angles=spec.angles)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    gen = torch.Generator().manual_seed(spec.seed)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(spec.epochs):
        model.train()
        perm = torch.randperm(len(y), generator=gen)
        total = 0.0
        for i in range(0, len(y), spec.batch_size):
            idx = perm[i:i + spec.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.info("source epoch %d loss %.4f", epoch + 1, total / len(y))
    model.eval()
    with torch.no_grad():
        acc = float((model(x).argmax(1) == y).float().mean())
    log.info("source train accuracy %.3f", acc)
    backbone.source_accuracy = acc
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        backbone.save(path)
    return backbone
