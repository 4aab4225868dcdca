"""The dual-encoder disentanglement network: one convolutional encoder per
modality emitting an embedding split into invariant and specific halves, a
shared task classifier on the invariant half, and a shared binary domain
classifier on the specific half. Inference uses only the target encoder and
the task classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import GeometryError, ManifestError, ShapeError

SOURCE, TARGET = 0, 1  # domain class indices


@dataclass
class EmbeddingPair:
    """The two halves of an encoder output: invariant carries class-relevant
    modality-agnostic content, specific carries modality/domain content."""
    invariant: T.Tensor
    specific: T.Tensor


class Encoder:
    """Stack of ConvBlocks, global average pooling, and a linear projection
    to an even embed_dim (two halves of embed_dim/2 each).

    Inputs are mapped from the dataset's declared value range onto [-1,1] and
    the pooled features get a fixed gain, so the classifier heads operate on
    O(1) embeddings from the first step. Both are compile-time constants, not
    learned statistics."""

    def __init__(self, in_channels, image_size, embed_dim, rng,
                 channels=(16, 32, 64), kernel=3, modality="target",
                 input_range=(0.0, 1.0), feature_gain=16.0, stem_pool=1):
        if embed_dim % 2:
            raise ShapeError(f"embed_dim must be even, got {embed_dim}")
        self.in_channels = in_channels
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.modality = modality
        self.input_range = (float(input_range[0]), float(input_range[1]))
        self.feature_gain = float(feature_gain)
        self.stem_pool = int(stem_pool)
        self.blocks = []
        c_prev, extent = in_channels, image_size
        if self.stem_pool > 1:
            if extent % self.stem_pool:
                raise ShapeError(f"image extent {extent} not divisible by stem pool")
            extent //= self.stem_pool
        for c_out in channels:
            self.blocks.append(nn.ConvBlock(c_prev, c_out, rng, kernel=kernel,
                                            stride=1, padding=kernel // 2, pool=2))
            c_prev = c_out
            if extent % 2:
                raise ShapeError(f"image extent {extent} not poolable; "
                                 f"pick a size divisible by 2^{len(channels)}")
            extent //= 2
        self.project = nn.Linear(c_prev, embed_dim, rng)

    @property
    def half_dim(self):
        return self.embed_dim // 2

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or \
                x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise GeometryError(
                f"{self.modality} encoder expects [b,{self.in_channels},"
                f"{self.image_size},{self.image_size}], got {x.shape}")
        lo, hi = self.input_range
        mid, halfspan = (lo + hi) / 2.0, max((hi - lo) / 2.0, 1e-9)
        out = T.scale(T.shift(x, -mid), 1.0 / halfspan)
        if self.stem_pool > 1:
            out = T.avg_pool2d(out, self.stem_pool)
        for block in self.blocks:
            out = block(out)
        b, c, h, w = out.shape
        pooled = T.tmean(T.reshape(out, (b, c, h * w)), axis=2)
        return self.project(T.scale(pooled, self.feature_gain))

    def named_parameters(self, prefix=""):
        params = []
        for i, block in enumerate(self.blocks):
            params += block.named_parameters(prefix + f"block{i}.")
        params += self.project.named_parameters(prefix + "project.")
        return params


def split_embedding(z: T.Tensor, half_dim: int) -> EmbeddingPair:
    """First half invariant, second half specific, by fixed convention."""
    return EmbeddingPair(invariant=T.slice_cols(z, 0, half_dim),
                         specific=T.slice_cols(z, half_dim, 2 * half_dim))


class TaskClassifier:
    """Single linear layer followed by softmax over the class set."""

    def __init__(self, half_dim, num_classes, rng):
        self.linear = nn.Linear(half_dim, num_classes, rng)
        self.num_classes = num_classes

    def __call__(self, z_invariant: T.Tensor) -> T.Tensor:
        return T.softmax(self.linear(z_invariant), axis=1)

    def named_parameters(self, prefix=""):
        return self.linear.named_parameters(prefix)


class DomainClassifier:
    """Single linear layer followed by softmax over {source, target}."""

    def __init__(self, half_dim, rng):
        self.linear = nn.Linear(half_dim, 2, rng)

    def __call__(self, z_specific: T.Tensor) -> T.Tensor:
        return T.softmax(self.linear(z_specific), axis=1)

    def named_parameters(self, prefix=""):
        return self.linear.named_parameters(prefix)


class SheddModel:
    """Full training-time network. source_encoder and domain_head may be None
    when the model was loaded from an inference-variant checkpoint."""

    def __init__(self, source_encoder, target_encoder, task_head, domain_head):
        self.source_encoder = source_encoder
        self.target_encoder = target_encoder
        self.task_head = task_head
        self.domain_head = domain_head

    @classmethod
    def build(cls, source_geometry, target_geometry, num_classes, embed_dim,
              rng, channels=(16, 32, 64), kernel=3,
              source_range=(0.0, 1.0), target_range=(0.0, 1.0),
              feature_gain=16.0, stem_pool=1):
        """Geometries are (channels, image_size) pairs."""
        c_s, h_s = source_geometry
        c_t, h_t = target_geometry
        src = Encoder(c_s, h_s, embed_dim, rng, channels=channels, kernel=kernel,
                      modality="source", input_range=source_range,
                      feature_gain=feature_gain, stem_pool=stem_pool)
        tgt = Encoder(c_t, h_t, embed_dim, rng, channels=channels, kernel=kernel,
                      modality="target", input_range=target_range,
                      feature_gain=feature_gain, stem_pool=stem_pool)
        task = TaskClassifier(embed_dim // 2, num_classes, rng)
        domain = DomainClassifier(embed_dim // 2, rng)
        return cls(src, tgt, task, domain)

    @property
    def half_dim(self):
        return self.target_encoder.half_dim

    def encode_source(self, x) -> EmbeddingPair:
        if self.source_encoder is None:
            raise ManifestError("model has no source encoder (inference variant)")
        return split_embedding(self.source_encoder(x), self.half_dim)

    def encode_target(self, x) -> EmbeddingPair:
        return split_embedding(self.target_encoder(x), self.half_dim)

    def classify(self, z_invariant) -> T.Tensor:
        return self.task_head(z_invariant)

    def classify_domain(self, z_specific) -> T.Tensor:
        if self.domain_head is None:
            raise ManifestError("model has no domain classifier (inference variant)")
        return self.domain_head(z_specific)

    def infer(self, x) -> np.ndarray:
        """Predicted class indices for target-modality inputs. Touches only
        the target encoder and the task head."""
        with T.no_grad():
            pair = self.encode_target(x)
            probs = self.task_head(pair.invariant)
        return probs.data.argmax(axis=1)

    def named_parameters(self):
        params = []
        if self.source_encoder is not None:
            params += self.source_encoder.named_parameters("encoder_source.")
        params += self.target_encoder.named_parameters("encoder_target.")
        params += self.task_head.named_parameters("task_head.")
        if self.domain_head is not None:
            params += self.domain_head.named_parameters("domain_head.")
        return params

    def inference_parameter_names(self):
        names = [n for n, _ in self.target_encoder.named_parameters("encoder_target.")]
        names += [n for n, _ in self.task_head.named_parameters("task_head.")]
        return names

    def load_arrays(self, arrays, strict=True):
        """Copy checkpoint arrays into matching parameters by name."""
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name in arrays:
                arr = arrays[name].astype(p.data.dtype)
                if arr.shape != p.data.shape:
                    raise ManifestError(f"shape mismatch for '{name}': "
                                        f"{arr.shape} vs {p.data.shape}")
                p.data = arr
            elif strict:
                raise ManifestError(f"checkpoint missing parameter '{name}'")

    def architecture(self):
        """Geometry summary persisted in checkpoints so loading can rebuild."""
        arch = {
            "num_classes": self.task_head.num_classes,
            "embed_dim": self.target_encoder.embed_dim,
            "channels": [b.kernel.shape[0] for b in self.target_encoder.blocks],
            "kernel": self.target_encoder.blocks[0].kernel.shape[2],
            "feature_gain": self.target_encoder.feature_gain,
            "stem_pool": self.target_encoder.stem_pool,
            "target_geometry": [self.target_encoder.in_channels,
                                self.target_encoder.image_size],
            "target_range": list(self.target_encoder.input_range),
        }
        if self.source_encoder is not None:
            arch["source_geometry"] = [self.source_encoder.in_channels,
                                       self.source_encoder.image_size]
            arch["source_range"] = list(self.source_encoder.input_range)
        return arch


def save_model_checkpoint(path, model: SheddModel, ema_shadow=None, inference_only=False):
    """Write a checkpoint. The full variant stores raw weights plus EMA
    shadows; the inference variant keeps only the target encoder and task
    head, with EMA values (when given) baked in as the live weights."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    extra = {"architecture": model.architecture()}
    if inference_only:
        keep = set(model.inference_parameter_names())
        arrays = {n: a for n, a in arrays.items() if n in keep}
        if ema_shadow is not None:
            arrays = {n: ema_shadow[n] for n in arrays}
        extra["architecture"].pop("source_geometry", None)
        nn.save_checkpoint(path, arrays, extra=extra)
    else:
        nn.save_checkpoint(path, arrays, ema_arrays=ema_shadow, extra=extra)


def model_from_checkpoint(path):
    """Rebuild a model from a checkpoint directory. If EMA shadows are present
    they become the live weights (evaluation uses the averaged parameters).
    Inference-variant checkpoints yield a model without source encoder or
    domain head."""
    params, ema, extra = nn.load_checkpoint(path)
    arch = extra.get("architecture")
    if arch is None:
        raise ManifestError("checkpoint lacks an architecture record")
    weights = dict(params)
    if ema:
        weights.update(ema)

    rng = np.random.Generator(np.random.PCG64(0))
    has_source = any(n.startswith("encoder_source.") for n in weights)
    has_domain = any(n.startswith("domain_head.") for n in weights)
    gain = arch.get("feature_gain", 16.0)
    stem = arch.get("stem_pool", 1)
    tgt = Encoder(arch["target_geometry"][0], arch["target_geometry"][1],
                  arch["embed_dim"], rng, channels=tuple(arch["channels"]),
                  kernel=arch["kernel"], modality="target",
                  input_range=tuple(arch.get("target_range", (0.0, 1.0))),
                  feature_gain=gain, stem_pool=stem)
    src = None
    if has_source:
        src = Encoder(arch["source_geometry"][0], arch["source_geometry"][1],
                      arch["embed_dim"], rng, channels=tuple(arch["channels"]),
                      kernel=arch["kernel"], modality="source",
                      input_range=tuple(arch.get("source_range", (0.0, 1.0))),
                      feature_gain=gain, stem_pool=stem)
    task = TaskClassifier(arch["embed_dim"] // 2, arch["num_classes"], rng)
    domain = DomainClassifier(arch["embed_dim"] // 2, rng) if has_domain else None
    model = SheddModel(src, tgt, task, domain)
    model.load_arrays(weights, strict=True)
    return model
