"""Data ingestion, imbalance control, and the synthetic ordinal-grading
generator used for CPU-scale experiments.

The synthetic task carries an ordinal signal: the number of bright blob
structures in an image grows monotonically with the grade, so mean
absolute grade error is a meaningful metric, as in disease grading.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image

from .errors import IngestionError, InputError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# The only policies that exist; by design there is no color transformation.
AUGMENT_POLICIES = ("train", "eval")
CROP_PADDING = 4
FLIP_PROBABILITY = 0.5


@dataclass(frozen=True)
class GradingDataset:
    """Immutable list of (image tensor 3xHxW, grade label) pairs."""

    samples: tuple[tuple[torch.Tensor, int], ...]
    num_classes: int
    name: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for _, label in self.samples:
            if not 0 <= label < self.num_classes:
                raise InputError(f"label {label} out of range for C={self.num_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> tuple[int, ...]:
        counts = [0] * self.num_classes
        for _, label in self.samples:
            counts[label] += 1
        return tuple(counts)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for image, label in self.samples:
            h.update(label.to_bytes(4, "little"))
            h.update(image.numpy().tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ImbalanceProfile:
    per_class_counts: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_class_counts", tuple(self.per_class_counts))
        if any(c < 1 for c in self.per_class_counts):
            raise InputError("profile counts must all be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(self.ratios))
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise InputError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise InputError("ratios must sum to 1")


def load_image_folder(root) -> GradingDataset:
    """Load `root/<class_name>/<file>.png|jpg` with lexicographic ordering."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class subdirectories under {root}")
    samples = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            f for f in class_dir.iterdir()
            if f.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise IngestionError(f"class directory is empty: {class_dir.name}")
        for path in files:
            try:
                with Image.open(path) as img:
                    rgb = img.convert("RGB")
                    tensor = torch.frombuffer(
                        bytearray(rgb.tobytes()), dtype=torch.uint8
                    ).reshape(rgb.height, rgb.width, 3)
            except Exception as exc:
                raise IngestionError(f"cannot decode image {path}: {exc}") from exc
            image = tensor.permute(2, 0, 1).float() / 255.0
            samples.append((image, label))
    return GradingDataset(tuple(samples), num_classes=len(class_dirs), name=root.name)


def subsample_to_profile(ds: GradingDataset, profile: ImbalanceProfile) -> GradingDataset:
    """Per-class random sampling without replacement to exact counts."""
    if len(profile.per_class_counts) != ds.num_classes:
        raise InputError("profile class count does not match dataset")
    by_class = [[] for _ in range(ds.num_classes)]
    for idx, (_, label) in enumerate(ds.samples):
        by_class[label].append(idx)
    gen = torch.Generator().manual_seed(profile.seed)
    keep = []
    for label, want in enumerate(profile.per_class_counts):
        pool = by_class[label]
        if want > len(pool):
            raise InputError(
                f"class {label}: requested {want} samples but only "
                f"{len(pool)} available"
            )
        order = torch.randperm(len(pool), generator=gen).tolist()
        keep.extend(pool[i] for i in order[:want])
    keep.sort()
    return GradingDataset(
        tuple(ds.samples[i] for i in keep), ds.num_classes,
        name=f"{ds.name}/subsampled",
    )


def _cut_points(n: int, ratios: tuple[float, float, float]) -> tuple[int, int]:
    first = round(n * ratios[0])
    second = round(n * (ratios[0] + ratios[1]))
    return first, second


def split(ds: GradingDataset, cfg: SplitConfig
          ) -> tuple[GradingDataset, GradingDataset, GradingDataset]:
    """Deterministic (train, val, test) partition, stratified by default."""
    if len(ds) < 10:
        raise InputError(f"dataset too small to split: {len(ds)} samples")
    gen = torch.Generator().manual_seed(cfg.seed)
    buckets: tuple[list[int], list[int], list[int]] = ([], [], [])
    if cfg.stratified:
        by_class = [[] for _ in range(ds.num_classes)]
        for idx, (_, label) in enumerate(ds.samples):
            by_class[label].append(idx)
        groups = [g for g in by_class if g]
    else:
        groups = [list(range(len(ds)))]
    for group in groups:
        order = torch.randperm(len(group), generator=gen).tolist()
        shuffled = [group[i] for i in order]
        first, second = _cut_points(len(group), cfg.ratios)
        buckets[0].extend(shuffled[:first])
        buckets[1].extend(shuffled[first:second])
        buckets[2].extend(shuffled[second:])
    parts = []
    for part_name, indices in zip(("train", "val", "test"), buckets):
        indices = sorted(indices)
        parts.append(GradingDataset(
            tuple(ds.samples[i] for i in indices), ds.num_classes,
            name=f"{ds.name}/{part_name}",
        ))
    return tuple(parts)


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def random_crop_with_padding(image: torch.Tensor, padding: int,
                             generator: torch.Generator) -> torch.Tensor:
    height, width = image.shape[-2:]
    padded = torch.zeros(
        image.shape[0], height + 2 * padding, width + 2 * padding,
        dtype=image.dtype,
    )
    padded[:, padding:padding + height, padding:padding + width] = image
    top = int(torch.randint(0, 2 * padding + 1, (1,), generator=generator))
    left = int(torch.randint(0, 2 * padding + 1, (1,), generator=generator))
    return padded[:, top:top + height, left:left + width]


def augment(sample: tuple[torch.Tensor, int], policy: str,
            generator: torch.Generator | None = None) -> tuple[torch.Tensor, int]:
    """Apply the named augmentation policy to one sample.

    "train" = zero-pad 4, random crop back to size, horizontal flip with
    p=0.5; "eval" = identity. There is deliberately no color
    transformation in the policy space.
    """
    if policy not in AUGMENT_POLICIES:
        raise InputError(f"unknown augmentation policy: {policy!r}")
    image, label = sample
    if policy == "eval":
        return image, label
    if generator is None:
        generator = torch.Generator()
    image = random_crop_with_padding(image, CROP_PADDING, generator)
    if torch.rand((), generator=generator) < FLIP_PROBABILITY:
        image = hflip(image)
    return image, label


def _blob_image(height: int, width: int, n_blobs: int, noise_level: float,
                generator: torch.Generator) -> torch.Tensor:
    ys = torch.arange(height, dtype=torch.float32).view(-1, 1)
    xs = torch.arange(width, dtype=torch.float32).view(1, -1)
    canvas = torch.zeros(height, width)
    margin = 3
    min_dist_sq = 5.0**2  # keep blobs separated so total mass tracks the count
    centers: list[tuple[float, float]] = []
    tries = 0
    while len(centers) < n_blobs:
        cy = float(margin + torch.rand((), generator=generator) * (height - 2 * margin))
        cx = float(margin + torch.rand((), generator=generator) * (width - 2 * margin))
        tries += 1
        if tries <= 200 and any(
            (cy - py) ** 2 + (cx - px) ** 2 < min_dist_sq for py, px in centers
        ):
            continue  # after 200 tries accept overlap (tiny canvases)
        centers.append((cy, cx))
    for cy, cx in centers:
        sigma = 1.3 + 0.4 * torch.rand((), generator=generator)
        canvas += torch.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
    # slightly different channel gains keep the image genuinely 3-channel
    image = torch.stack([canvas, 0.9 * canvas, 0.8 * canvas])
    if noise_level > 0:
        image = image + noise_level * torch.randn(image.shape, generator=generator)
    return image


def synth_grading_dataset(num_classes: int, counts, resolution=(32, 32),
                          noise_level: float = 0.3, seed: int = 0,
                          name: str = "synthetic") -> GradingDataset:
    """Generate an ordinal blob-counting dataset with exact class counts.

    Grade g images contain 2*(g+1) blobs plus Gaussian pixel noise, so the
    grade-correlated signal (blob count / bright area) increases
    monotonically with the grade and gets harder to read as noise_level
    grows.
    """
    if num_classes < 2:
        raise InputError("need at least 2 classes")
    counts = tuple(int(c) for c in counts)
    if len(counts) != num_classes:
        raise InputError("counts must have one entry per class")
    height, width = resolution
    gen = torch.Generator().manual_seed(seed)
    samples = []
    for grade, count in enumerate(counts):
        n_blobs = 2 * (grade + 1)
        for _ in range(count):
            samples.append((_blob_image(height, width, n_blobs, noise_level, gen), grade))
    return GradingDataset(tuple(samples), num_classes, name=name)


def channel_stats(ds: GradingDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and std over every pixel of the dataset."""
    stacked = torch.stack([img for img, _ in ds.samples])
    mean = stacked.mean(dim=(0, 2, 3))
    std = stacked.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return mean, std


def normalize(ds: GradingDataset, mean: torch.Tensor, std: torch.Tensor) -> GradingDataset:
    view = (-1, 1, 1)
    samples = tuple(
        ((img - mean.view(view)) / std.view(view), label) for img, label in ds.samples
    )
    return GradingDataset(samples, ds.num_classes, name=f"{ds.name}/normalized")


def write_manifest(ds: GradingDataset, path, seed: int | None = None) -> None:
    """Emit a structured manifest (name, counts, seed, checksum)."""
    manifest = {
        "name": ds.name,
        "num_classes": ds.num_classes,
        "class_counts": list(ds.class_counts),
        "n": len(ds),
        "seed": seed,
        "checksum": ds.checksum(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
