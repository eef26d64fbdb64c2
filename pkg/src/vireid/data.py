"""Dataset ingestion, augmentation, batch sampling, and synthetic data.

Real datasets enter only through a CSV manifest (``path,identity,modality,
camera``); nothing in here scrapes dataset-specific directory layouts. The
synthetic generator produces a dual-modality identity dataset small enough to
train and evaluate on a CPU in minutes.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, ValidationError

MODALITIES = ("visible", "infrared")
MANIFEST_HEADER = ["path", "identity", "modality", "camera"]


@dataclass
class Sample:
    """One identity-labeled, modality-tagged, camera-tagged image record."""

    identity: int
    modality: str
    camera: int
    path: str | None = None
    image: np.ndarray | None = None  # (H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        if self.identity < 0:
            raise ValidationError(f"identity must be >= 0, got {self.identity}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


@dataclass
class Manifest:
    """Loaded manifest: samples with densely re-indexed identities plus the
    original-to-dense id mapping."""

    samples: list
    id_map: dict

    @property
    def num_identities(self) -> int:
        return len(self.id_map)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def load_manifest(path, check_files: bool = False) -> Manifest:
    """Read a manifest CSV; identities are re-indexed densely 0..N-1 in
    sorted original order and the mapping is recorded."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: line 1: header must be {','.join(MANIFEST_HEADER)!r}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            img_path, ident, modality, camera = (f.strip() for f in row)
            try:
                ident = int(ident)
                camera = int(camera)
            except ValueError:
                raise ManifestError(
                    f"{path}: line {lineno}: identity and camera must be integers") from None
            if ident < 0:
                raise ManifestError(f"{path}: line {lineno}: identity must be >= 0")
            if modality not in MODALITIES:
                raise ManifestError(
                    f"{path}: line {lineno}: modality must be one of {MODALITIES}, got {modality!r}")
            rows.append((img_path, ident, modality, camera))
    id_map = {orig: dense for dense, orig in enumerate(sorted({r[1] for r in rows}))}
    base = path.parent
    samples = []
    for img_path, ident, modality, camera in rows:
        resolved = img_path if Path(img_path).is_absolute() else str(base / img_path)
        samples.append(Sample(identity=id_map[ident], modality=modality, camera=camera,
                              path=resolved))
    if check_files:
        missing = [s.path for s in samples if not Path(s.path).exists()]
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} manifest entries point to missing files, first: {missing[0]}")
    return Manifest(samples=samples, id_map=id_map)


def write_manifest(samples, path) -> None:
    """Write samples to a manifest CSV, one row per sample in order."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            if s.path is None:
                raise ValidationError("cannot write a manifest row for an in-memory sample")
            writer.writerow([s.path, s.identity, s.modality, s.camera])


# ---- augmentation -----------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    target_size: tuple = (288, 144)  # (H, W)
    flip_prob: float = 0.5
    pad_pixels: int = 10
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def validate(self):
        h, w = self.target_size
        if h <= 0 or w <= 0:
            raise ValidationError(f"target_size must be positive, got {self.target_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.pad_pixels < 0:
            raise ValidationError(f"pad_pixels must be >= 0, got {self.pad_pixels}")
        if any(s <= 0 for s in self.std):
            raise ValidationError("std entries must be positive")


def load_image(sample: Sample) -> np.ndarray:
    """Decode a sample to (H, W, 3) float32 in [0, 1]. Single-channel
    sources are replicated to three channels."""
    if sample.image is not None:
        arr = np.asarray(sample.image)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        arr = arr.astype(np.float32, copy=False)
    else:
        try:
            with Image.open(sample.path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except FileNotFoundError:
            raise
        except OSError as exc:
            raise OSError(f"cannot decode image {sample.path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValidationError(f"image must be (H, W, 3), got shape {arr.shape}")
    return arr


def resize_image(img: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of a float (H, W, 3) image to (H, W) = size."""
    h, w = size
    if img.shape[:2] == (h, w):
        return img
    chans = [np.asarray(Image.fromarray(img[:, :, c], mode="F").resize((w, h), Image.BILINEAR))
             for c in range(3)]
    return np.stack(chans, axis=-1).astype(np.float32)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def normalize_image(img: np.ndarray, config: AugmentationConfig) -> np.ndarray:
    mean = np.asarray(config.mean, dtype=np.float32)
    std = np.asarray(config.std, dtype=np.float32)
    return ((img - mean) / std).astype(np.float32)


def augment(sample: Sample, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Training transform: resize, random horizontal flip, zero-pad, random
    crop back to target size, per-channel normalize."""
    config.validate()
    img = resize_image(load_image(sample), config.target_size)
    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        img = horizontal_flip(img)
    pad = config.pad_pixels
    if pad > 0:
        img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="constant")
        y0, x0 = rng.integers(0, 2 * pad + 1, size=2)
        h, w = config.target_size
        img = img[y0:y0 + h, x0:x0 + w]
    return normalize_image(img, config)


def eval_transform(sample: Sample, config: AugmentationConfig) -> np.ndarray:
    """Deterministic inference transform: resize and normalize only."""
    return normalize_image(resize_image(load_image(sample), config.target_size), config)


def sample_rng(*entropy) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


# ---- identity-balanced cross-modal batches ----------------------------


@dataclass
class SampledBatch:
    """Index batch: P identities x K visible + K infrared sample indices."""

    visible_indices: list
    infrared_indices: list
    identities: list


class CrossModalPKSampler:
    """Yields batches of P identities with K visible and K infrared instances
    each, so every batch is exactly half visible and half infrared.

    One epoch is one pass over the identities in seeded shuffled order;
    identities with fewer than K images in a modality are resampled with
    replacement.
    """

    def __init__(self, samples, num_ids_per_batch: int, instances_per_modality: int,
                 seed: int = 0, batch_size: int | None = None):
        if num_ids_per_batch <= 0 or instances_per_modality <= 0:
            raise ValidationError("P and K must be positive")
        if batch_size is not None and batch_size != 2 * num_ids_per_batch * instances_per_modality:
            raise ValidationError(
                f"batch_size {batch_size} != 2*P*K = {2 * num_ids_per_batch * instances_per_modality}")
        if seed < 0:
            raise ValidationError("sampler seed must be >= 0")
        self.samples = list(samples)
        self.P = num_ids_per_batch
        self.K = instances_per_modality
        self.seed = seed
        self._pool = {}
        for idx, s in enumerate(self.samples):
            self._pool.setdefault((s.identity, s.modality), []).append(idx)
        self.identities = sorted({s.identity for s in self.samples})
        missing = [(i, m) for i in self.identities for m in MODALITIES
                   if (i, m) not in self._pool]
        if missing:
            raise ValidationError(f"identities missing a modality entirely: {missing}")

    @property
    def batch_size(self) -> int:
        return 2 * self.P * self.K

    def batches_per_epoch(self) -> int:
        return -(-len(self.identities) // self.P)

    def _draw(self, pool, rng) -> list:
        if len(pool) >= self.K:
            picked = rng.choice(len(pool), size=self.K, replace=False)
        else:
            picked = rng.integers(0, len(pool), size=self.K)
        return [pool[int(i)] for i in picked]

    def batches(self, epoch: int) -> list:
        """Deterministic batch list for the given epoch.

        A trailing group smaller than P is refilled with the epoch's leading
        identities so every batch keeps P identities (and the triplet terms
        always see negatives); every identity still appears at least once.
        """
        rng = sample_rng(self.seed, int(epoch))
        order = [self.identities[int(i)] for i in rng.permutation(len(self.identities))]
        out = []
        for lo in range(0, len(order), self.P):
            group = order[lo:lo + self.P]
            if len(group) < self.P:
                refill = [i for i in order if i not in group]
                group = group + refill[:self.P - len(group)]
            vis, ir = [], []
            for ident in group:
                vis.extend(self._draw(self._pool[(ident, "visible")], rng))
                ir.extend(self._draw(self._pool[(ident, "infrared")], rng))
            out.append(SampledBatch(visible_indices=vis, infrared_indices=ir, identities=group))
        return out


# ---- synthetic dual-modality dataset -----------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic desk-scale dataset: per identity a structured intensity
    pattern, rendered through an identity-specific color palette for the
    visible modality and a fixed nonlinear grayscale transform for the
    infrared modality, with per-image jitter and noise."""

    num_identities: int = 10
    images_per_identity: int = 20  # per modality
    image_size: tuple = (32, 16)   # (H, W)
    noise_std: float = 0.06
    seed: int = 0
    split: str = "train"
    pattern_grid: tuple = (8, 4)
    jitter: int = 2
    visible_cameras: tuple = (1, 2, 4, 5)
    infrared_cameras: tuple = (3, 6)

    def validate(self):
        if self.num_identities <= 0 or self.images_per_identity <= 0:
            raise ValidationError("synthetic counts must be positive")
        h, w = self.image_size
        gh, gw = self.pattern_grid
        if h <= 0 or w <= 0 or gh <= 0 or gw <= 0:
            raise ValidationError("sizes must be positive")
        if h % gh or w % gw:
            raise ValidationError(
                f"image_size {self.image_size} must be divisible by pattern_grid {self.pattern_grid}")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if len(self.visible_cameras) < 2 or len(self.infrared_cameras) < 2:
            raise ValidationError("need at least two cameras per modality")
        if self.jitter < 0:
            raise ValidationError("jitter must be >= 0")


def _infrared_response(pattern: np.ndarray) -> np.ndarray:
    """Fixed nonlinear grayscale transform shared by all identities."""
    return pattern ** 2


def _identity_params(spec: SyntheticSpec, identity: int):
    rng = sample_rng(spec.seed, 1, identity)
    gh, gw = spec.pattern_grid
    prototype = rng.uniform(0.0, 1.0, (gh, gw))
    palette = rng.uniform(0.0, 1.0, (2, 3))  # low/high anchor colors
    return prototype, palette


def _upsample(pattern: np.ndarray, size: tuple) -> np.ndarray:
    h, w = size
    gh, gw = pattern.shape
    return np.kron(pattern, np.ones((h // gh, w // gw)))


def _render(pattern: np.ndarray, palette: np.ndarray, modality: str) -> np.ndarray:
    if modality == "visible":
        lo, hi = palette
        return lo + pattern[..., None] * (hi - lo)
    gray = _infrared_response(pattern)
    return np.repeat(gray[..., None], 3, axis=-1)


def clean_renderings(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noise- and jitter-free renderings of every identity prototype,
    returned as (visible, infrared) arrays of shape (N, H, W, 3)."""
    spec.validate()
    vis, ir = [], []
    for i in range(spec.num_identities):
        prototype, palette = _identity_params(spec, i)
        base = _upsample(prototype, spec.image_size)
        vis.append(_render(base, palette, "visible"))
        ir.append(_render(base, palette, "infrared"))
    return (np.stack(vis).astype(np.float32), np.stack(ir).astype(np.float32))


def synthesize_dataset(spec: SyntheticSpec) -> list:
    """Generate the in-memory sample list; a pure function of the spec."""
    spec.validate()
    split_code = zlib.crc32(spec.split.encode("utf-8"))
    cameras = {"visible": spec.visible_cameras, "infrared": spec.infrared_cameras}
    samples = []
    for i in range(spec.num_identities):
        prototype, palette = _identity_params(spec, i)
        base = _upsample(prototype, spec.image_size)
        for mod_code, modality in enumerate(MODALITIES):
            for j in range(spec.images_per_identity):
                rng = sample_rng(spec.seed, 2, split_code, i, mod_code, j)
                shift = rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0)
                pattern = np.roll(base, tuple(shift), axis=(0, 1))
                img = _render(pattern, palette, modality)
                img = img + rng.normal(0.0, spec.noise_std, img.shape)
                cams = cameras[modality]
                samples.append(Sample(
                    identity=i, modality=modality, camera=cams[j % len(cams)],
                    image=np.clip(img, 0.0, 1.0).astype(np.float32)))
    return samples


def save_synthetic_dataset(samples, out_dir) -> Path:
    """Write samples as PNG files plus a manifest CSV; returns the manifest
    path. File contents are a pure function of the sample data."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    counters = {}
    for s in samples:
        if s.image is None:
            raise ValidationError("sample has no in-memory image to save")
        key = (s.identity, s.modality)
        seq = counters.get(key, 0)
        counters[key] = seq + 1
        name = f"id{s.identity:04d}_{s.modality}_{seq:04d}.png"
        arr = np.clip(np.asarray(s.image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(images_dir / name)
        rows.append(Sample(identity=s.identity, modality=s.modality, camera=s.camera,
                           path=str(Path("images") / name)))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(rows, manifest_path)
    return manifest_path
