"""Image datasets: a deterministic synthetic generator plus CIFAR-10 and manifest loaders."""

from __future__ import annotations

import csv
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ImageData:
    x: torch.Tensor  # (N, C, H, W) float in [0, 1]
    y: torch.Tensor  # (N,) int64
    attr: torch.Tensor | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "ImageData":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        attr = self.attr[idx] if self.attr is not None else None
        return ImageData(self.x[idx], self.y[idx], attr, self.num_classes)


def _smooth_field(gen: torch.Generator, n: int, channels: int, size: int, grid: int):
    coarse = torch.rand(n, channels, grid, grid, generator=gen)
    return F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)


def synthetic_images(n: int, num_classes: int = 10, size: int = 16, channels: int = 3,
                     seed: int = 0, signal: float = 1.0, noise: float = 0.5,
                     grid: int = 4, palettes: int = 0, palette_strength: float = 0.35,
                     attribute: str = "palette") -> ImageData:
    """Smooth class-conditional images.

    Each class has a fixed low-frequency prototype; each example mixes it with its own
    smooth random field (``noise`` controls how much must be memorised rather than
    learned). With ``palettes > 0`` every example also gets an attribute: under
    ``attribute="palette"`` it selects a colour cast added to the image, so the
    attribute is visible in the pixels; under ``"independent"`` it is drawn at random
    and never rendered.
    """
    gen = torch.Generator().manual_seed(seed)
    # prototypes depend only on the class alphabet, not on the sample seed
    proto_gen = torch.Generator().manual_seed(10_007 * num_classes + size)
    protos = _smooth_field(proto_gen, num_classes, channels, size, grid)
    y = torch.randint(0, num_classes, (n,), generator=gen)
    fields = _smooth_field(gen, n, channels, size, grid)
    x = 0.5 + signal * (protos[y] - 0.5) + noise * (fields - 0.5)
    attr = None
    if palettes:
        attr = torch.randint(0, palettes, (n,), generator=gen)
        if attribute == "palette":
            casts = (torch.rand(palettes, channels, generator=proto_gen) - 0.5) * 2
            x = x + palette_strength * casts[attr][:, :, None, None]
        elif attribute != "independent":
            raise ValueError(f"unknown attribute mode {attribute!r}")
    return ImageData(x.clamp(0, 1), y, attr, num_classes)


def load_cifar10(root: str | Path, train: bool = True) -> ImageData:
    """Read the python-pickle CIFAR-10 layout (``data_batch_1..5`` / ``test_batch``)."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        with open(root / name, "rb") as fh:
            batch = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch["labels"], dtype=np.int64))
    x = torch.from_numpy(np.concatenate(xs)).float() / 255.0
    return ImageData(x, torch.from_numpy(np.concatenate(ys)), None, 10)


def load_manifest(root: str | Path, attribute: str | None = None,
                  manifest: str = "manifest.csv") -> ImageData:
    """PNG files listed in a CSV with columns ``filename,label[,<attribute>...]``.

    This is also the ingestion path for face datasets with attribute columns.
    """
    from PIL import Image

    root = Path(root)
    xs, ys, attrs = [], [], []
    with open(root / manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            img = np.asarray(Image.open(root / row["filename"]).convert("RGB"), np.float32)
            xs.append(img.transpose(2, 0, 1) / 255.0)
            ys.append(int(row["label"]))
            if attribute is not None:
                attrs.append(int(row[attribute]))
    if not xs:
        raise ValueError(f"empty manifest in {root}")
    attr = torch.tensor(attrs) if attribute is not None else None
    return ImageData(torch.from_numpy(np.stack(xs)), torch.tensor(ys), attr)
