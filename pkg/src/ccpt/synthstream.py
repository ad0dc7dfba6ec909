"""Synthetic paired image/text streams, one Gaussian class mixture per modality.

Each modality draws class latents on a sphere, pushes them through fixed
random affine+tanh maps into an "image" space and a "text" space, and adds
observation noise. Every emitted value sits on the float32 grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABEL_STRIDE = 1000
MEAN_RADIUS = 3.0
MAX_RESAMPLES = 1000
DATASET_MAGIC = b"CCSYN1"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    n_classes: int
    latent_dim: int = 8
    image_dim: int = 32
    text_dim: int = 24
    noise_sigma: float = 0.3
    generator_seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.latent_dim, self.image_dim, self.text_dim) <= 0:
            raise ValueError("modality dimensions must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def label_offset(self) -> int:
        return self.modality_id * LABEL_STRIDE


DEFAULT_MODALITIES = {
    1: ModalitySpec(1, 8, generator_seed=101),
    2: ModalitySpec(2, 6, generator_seed=202),
    3: ModalitySpec(3, 5, generator_seed=303),
}


@dataclass(frozen=True)
class ModalityGenerator:
    spec: ModalitySpec
    class_means: np.ndarray
    img_map: np.ndarray
    img_shift: np.ndarray
    txt_map: np.ndarray
    txt_shift: np.ndarray

    def image_of(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.img_map + self.img_shift)

    def text_of(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.txt_map + self.txt_shift)

    @property
    def labels(self) -> np.ndarray:
        return self.spec.label_offset + np.arange(self.spec.n_classes)


@dataclass
class PairBatch:
    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray
    modality: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _min_pairwise_distance(x: np.ndarray) -> float:
    if len(x) < 2:
        return np.inf
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    return float(d[np.triu_indices(len(x), 1)].min())


def build_modality(spec: ModalitySpec) -> ModalityGenerator:
    rng = np.random.default_rng([spec.generator_seed, spec.modality_id])
    need = 4.0 * spec.noise_sigma
    for _ in range(MAX_RESAMPLES):
        raw = rng.standard_normal((spec.n_classes, spec.latent_dim))
        means = MEAN_RADIUS * raw / np.linalg.norm(raw, axis=1, keepdims=True)
        if _min_pairwise_distance(means) >= need:
            break
    else:
        raise GenerationError(
            f"could not separate {spec.n_classes} class means by {need} "
            f"after {MAX_RESAMPLES} draws")
    scale = 1.0 / np.sqrt(spec.latent_dim)
    img_map = rng.standard_normal((spec.latent_dim, spec.image_dim)) * scale
    img_shift = rng.standard_normal(spec.image_dim) * 0.5
    txt_map = rng.standard_normal((spec.latent_dim, spec.text_dim)) * scale
    txt_shift = rng.standard_normal(spec.text_dim) * 0.5
    return ModalityGenerator(spec, means, img_map, img_shift, txt_map, txt_shift)


def sample_pairs(gen: ModalityGenerator, n: int, rng: np.random.Generator) -> PairBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = gen.spec
    cls = rng.integers(0, spec.n_classes, size=n)
    z = gen.class_means[cls] + spec.noise_sigma * rng.standard_normal((n, spec.latent_dim))
    obs = spec.noise_sigma / 2.0
    images = gen.image_of(z) + obs * rng.standard_normal((n, spec.image_dim))
    texts = gen.text_of(z) + obs * rng.standard_normal((n, spec.text_dim))
    return PairBatch(_f32(images), _f32(texts), spec.label_offset + cls,
                     np.full(n, spec.modality_id))


def class_prompt_vectors(gen: ModalityGenerator) -> np.ndarray:
    """Noiseless text observation of each class mean, used as zero-shot prompts."""
    return _f32(gen.text_of(gen.class_means))


# ------------------------------------------------------------ dataset file

def write_dataset(path, batch: PairBatch) -> None:
    n, d_img = batch.images.shape
    d_txt = batch.texts.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<3I", n, d_img, d_txt))
        fh.write(batch.images.astype("<f4").tobytes())
        fh.write(batch.texts.astype("<f4").tobytes())
        fh.write(batch.labels.astype("<u4").tobytes())


def read_dataset(path) -> PairBatch:
    raw = Path(path).read_bytes()
    if raw[:6] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    n, d_img, d_txt = struct.unpack_from("<3I", raw, 6)
    off = 18
    images = np.frombuffer(raw, "<f4", n * d_img, off).reshape(n, d_img)
    off += 4 * n * d_img
    texts = np.frombuffer(raw, "<f4", n * d_txt, off).reshape(n, d_txt)
    off += 4 * n * d_txt
    labels = np.frombuffer(raw, "<u4", n, off)
    if off + 4 * n != len(raw):
        raise ValueError(f"{path}: unexpected file length")
    modality = labels.astype(np.int64) // LABEL_STRIDE
    return PairBatch(images.astype(np.float64), texts.astype(np.float64),
                     labels.astype(np.int64), modality)
