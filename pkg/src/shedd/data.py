"""Synthetic two-modality benchmark generation, dataset (de)serialization,
label-budget splits, and the three-stream batch sampler.

The generator draws one latent prototype per class and renders it into each
modality through a fixed random bank of smooth spatial fields, adds a
class-dependent radial frequency pattern (invariant under flips and
right-angle rotations, so strong augmentation never destroys the class
signal), then per-sample nuisance: random channel offsets, a correlated
low-frequency field, and i.i.d. pixel noise. The two modalities are never
paired: every sample exists in exactly one of them."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import CorruptDatasetError, DataError, ManifestError

MANIFEST_FIELDS = {"modality", "channels", "height", "width", "num_classes",
                   "num_samples", "value_range", "data_file", "labels_file",
                   "checksum"}

# sub-seed stream tags: (master_seed, tag) feeds a PCG64 SeedSequence
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_AUGMENT = 2


def derived_rng(master_seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one of the documented sub-seed streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, stream))))


@dataclass
class DatasetManifest:
    modality: str
    channels: int
    height: int
    width: int
    num_classes: int
    num_samples: int
    value_range: list
    data_file: str
    labels_file: str
    checksum: str = ""

    def to_dict(self):
        return {k: getattr(self, k) for k in MANIFEST_FIELDS}


@dataclass
class Dataset:
    """In-memory dataset: images [N,c,h,w] float32, labels [N] int32."""
    images: np.ndarray
    labels: np.ndarray
    manifest: DatasetManifest

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return self.manifest.num_classes


@dataclass
class SplitSpec:
    labels_per_class: int
    seed: int = 0


@dataclass
class SyntheticBenchConfig:
    num_classes: int = 6
    latent_dim: int = 16
    source_channels: int = 8
    target_channels: int = 2
    image_size: int = 32
    source_samples: int = 1440
    target_samples: int = 1200
    render_scale: float = 1.0
    pattern_scale: float = 1.0
    nuisance_source: float = 1.0
    nuisance_target: float = 1.0
    noise: float = 0.25
    label_noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise DataError("benchmark needs at least 2 classes")
        for name in ("latent_dim", "source_channels", "target_channels",
                     "image_size", "source_samples", "target_samples"):
            if getattr(self, name) < 1:
                raise DataError(f"benchmark field '{name}' must be positive")
        if not 0.0 <= self.label_noise < 1.0:
            raise DataError("label_noise must lie in [0,1)")


def _smooth_field_bank(rng, count, channels, size, waves=6, max_freq=3.0):
    """count x channels smooth random fields as mixtures of low-frequency
    plane waves, each [channels,size,size] slice normalized to unit RMS."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    yy = yy / size
    xx = xx / size
    fields = np.zeros((count, channels, size, size))
    for i in range(count):
        for c in range(channels):
            fx = rng.uniform(-max_freq, max_freq, waves)
            fy = rng.uniform(-max_freq, max_freq, waves)
            ph = rng.uniform(0, 2 * np.pi, waves)
            amp = rng.uniform(0.5, 1.0, waves)
            acc = np.zeros((size, size))
            for w in range(waves):
                acc += amp[w] * np.cos(2 * np.pi * (fx[w] * xx + fy[w] * yy) + ph[w])
            rms = np.sqrt((acc ** 2).mean())
            fields[i, c] = acc / max(rms, 1e-9)
    return fields


def _radial_patterns(rng, num_classes, channels, size):
    """Class-dependent radial frequency patterns; exactly invariant under
    flips and 90-degree rotations about the image center."""
    center = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    r = np.sqrt((yy - center) ** 2 + (xx - center) ** 2) / size
    weights = rng.uniform(0.5, 1.5, channels)
    patterns = np.zeros((num_classes, channels, size, size))
    for c in range(num_classes):
        freq = 1.0 + 0.75 * c
        phase = rng.uniform(0, 2 * np.pi)
        ring = np.cos(2 * np.pi * freq * r + phase)
        patterns[c] = weights[:, None, None] * ring[None, :, :]
    return patterns


def _render_modality(rng, cfg: SyntheticBenchConfig, prototypes, channels,
                     num_samples, nuisance, modality):
    size = cfg.image_size
    c_count = cfg.num_classes
    bank = _smooth_field_bank(rng, cfg.latent_dim, channels, size)
    patterns = _radial_patterns(rng, c_count, channels, size)

    # class base images: linear rendering of the prototype + radial pattern
    base = np.einsum("kl,lchw->kchw", prototypes, bank) / np.sqrt(cfg.latent_dim)
    base = cfg.render_scale * base + cfg.pattern_scale * patterns

    labels = np.arange(num_samples) % c_count
    labels = labels[rng.permutation(num_samples)]

    if nuisance > 0:
        # the nuisance bundle includes per-sample dihedral orientation scatter
        # of the class rendering (the radial pattern part is orientation-
        # invariant by construction, the rendered prototype part is not)
        variants = np.empty((c_count, 8) + base.shape[1:], dtype=base.dtype)
        for k in range(4):
            rot = np.rot90(base, k=k, axes=(2, 3))
            variants[:, k] = rot
            variants[:, 4 + k] = rot[:, :, :, ::-1]
        orientations = rng.integers(0, 8, num_samples)
        images = variants[labels, orientations].copy()
    else:
        images = base[labels].copy()

    if nuisance > 0:
        offsets = rng.normal(0.0, nuisance * 0.5, (num_samples, channels))
        images += offsets[:, :, None, None]
        # one correlated low-frequency field per sample, shared across channels
        yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
        waves = 4
        fx = rng.uniform(-2.0, 2.0, (num_samples, waves))
        fy = rng.uniform(-2.0, 2.0, (num_samples, waves))
        ph = rng.uniform(0, 2 * np.pi, (num_samples, waves))
        amp = rng.normal(0.0, nuisance / np.sqrt(waves), (num_samples, waves))
        phase = (fx[:, :, None, None] * xx[None, None] +
                 fy[:, :, None, None] * yy[None, None]) * 2 * np.pi + ph[:, :, None, None]
        corr = (amp[:, :, None, None] * np.cos(phase)).sum(axis=1)
        images += corr[:, None, :, :]

    if cfg.noise > 0:
        images += rng.normal(0.0, cfg.noise, images.shape)

    if cfg.label_noise > 0:
        flip = rng.random(num_samples) < cfg.label_noise
        labels = labels.copy()
        labels[flip] = rng.integers(0, c_count, int(flip.sum()))

    # normalize the whole modality to [0,1]
    lo, hi = images.min(), images.max()
    span = max(hi - lo, 1e-9)
    images = (images - lo) / span

    manifest = DatasetManifest(
        modality=modality, channels=channels, height=size, width=size,
        num_classes=c_count, num_samples=num_samples, value_range=[0.0, 1.0],
        data_file=f"{modality}_images.bin", labels_file=f"{modality}_labels.bin")
    return Dataset(images=images.astype(np.float32),
                   labels=labels.astype(np.int32), manifest=manifest)


def generate_synthetic_benchmark(cfg: SyntheticBenchConfig):
    """Returns (source Dataset, target Dataset), deterministic per cfg.seed."""
    cfg.validate()
    rng = derived_rng(cfg.seed, STREAM_DATA)
    prototypes = rng.normal(0.0, 1.0, (cfg.num_classes, cfg.latent_dim))
    source = _render_modality(rng, cfg, prototypes, cfg.source_channels,
                              cfg.source_samples, cfg.nuisance_source, "source")
    target = _render_modality(rng, cfg, prototypes, cfg.target_channels,
                              cfg.target_samples, cfg.nuisance_target, "target")
    return source, target


# ---------------------------------------------------------------------------
# on-disk format: little-endian float32 images, little-endian int32 labels,
# JSON manifest

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(dataset: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    man = dataset.manifest
    data_path = os.path.join(out_dir, man.data_file)
    with open(data_path, "wb") as f:
        f.write(dataset.images.astype("<f4").tobytes())
    with open(os.path.join(out_dir, man.labels_file), "wb") as f:
        f.write(dataset.labels.astype("<i4").tobytes())
    man.checksum = _sha256(data_path)
    manifest_path = os.path.join(out_dir, f"{man.modality}_manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(man.to_dict(), f, indent=1, sort_keys=True)
    return manifest_path


def load_dataset(manifest_path) -> Dataset:
    with open(manifest_path) as f:
        raw = json.load(f)
    unknown = set(raw) - MANIFEST_FIELDS
    if unknown:
        raise ManifestError(f"unknown manifest field(s): {sorted(unknown)}")
    missing = MANIFEST_FIELDS - set(raw)
    if missing:
        raise ManifestError(f"manifest missing field(s): {sorted(missing)}")
    man = DatasetManifest(**raw)
    base = os.path.dirname(manifest_path)

    data_path = os.path.join(base, man.data_file)
    labels_path = os.path.join(base, man.labels_file)
    expected = man.num_samples * man.channels * man.height * man.width * 4
    actual = os.path.getsize(data_path)
    if actual != expected:
        raise CorruptDatasetError(
            f"payload {man.data_file} holds {actual} bytes, manifest implies {expected}")
    if man.checksum and _sha256(data_path) != man.checksum:
        raise CorruptDatasetError(f"checksum mismatch for {man.data_file}")

    images = np.fromfile(data_path, dtype="<f4").reshape(
        man.num_samples, man.channels, man.height, man.width)
    labels = np.fromfile(labels_path, dtype="<i4")
    if labels.shape[0] != man.num_samples:
        raise CorruptDatasetError(
            f"labels {man.labels_file}: {labels.shape[0]} entries, expected {man.num_samples}")
    if labels.size and (labels.min() < 0 or labels.max() >= man.num_classes):
        raise ManifestError("labels outside [0, num_classes)")

    lo, hi = man.value_range
    d_lo, d_hi = float(images.min()), float(images.max())
    if d_lo < lo - 1e-6 or d_hi > hi + 1e-6:
        # normalize into the declared range
        span = max(d_hi - d_lo, 1e-9)
        images = (images - d_lo) / span * (hi - lo) + lo
    return Dataset(images=images.astype(np.float32), labels=labels, manifest=man)


# ---------------------------------------------------------------------------
# splits and batch sampling

def make_splits(dataset: Dataset, spec: SplitSpec):
    """Class-balanced labelled subset of size labels_per_class * C; the rest
    is the unlabelled pool (which doubles as the test set). Returns sorted
    index arrays (labelled, unlabelled)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, STREAM_DATA))))
    labelled = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < spec.labels_per_class:
            raise DataError(
                f"class {c} has {members.size} samples, needs >= {spec.labels_per_class}")
        chosen = rng.choice(members, size=spec.labels_per_class, replace=False)
        labelled.append(chosen)
    labelled = np.sort(np.concatenate(labelled))
    mask = np.ones(len(dataset), dtype=bool)
    mask[labelled] = False
    unlabelled = np.flatnonzero(mask)
    return labelled, unlabelled


def batch_iterator(source: Dataset, target_labelled, target_unlabelled,
                   batch_size: int, rng: np.random.Generator):
    """One epoch of aligned batch triples.

    The source set is shuffled once and consumed sequentially (incomplete
    final batch dropped); for every source batch, equally-sized labelled and
    unlabelled target batches are drawn uniformly with replacement.
    target_labelled / target_unlabelled are (images, labels) / images arrays.

    Yields (x_s, y_s, x_t, y_t, x_u)."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n_source = source.images.shape[0]
    if n_source == 0 or target_labelled[0].shape[0] == 0 or target_unlabelled.shape[0] == 0:
        raise DataError("batch_iterator needs non-empty datasets")
    order = rng.permutation(n_source)
    t_images, t_labels = target_labelled
    n_t = t_images.shape[0]
    n_u = target_unlabelled.shape[0]
    for start in range(0, n_source - batch_size + 1, batch_size):
        idx_s = order[start:start + batch_size]
        idx_t = rng.integers(0, n_t, batch_size)
        idx_u = rng.integers(0, n_u, batch_size)
        yield (source.images[idx_s], source.labels[idx_s],
               t_images[idx_t], t_labels[idx_t],
               target_unlabelled[idx_u])


def iterations_per_epoch(n_source: int, batch_size: int) -> int:
    return n_source // batch_size
