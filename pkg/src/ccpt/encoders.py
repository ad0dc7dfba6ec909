"""Two-tower image/text encoders and frozen teacher snapshots."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ParameterError, ShapeError, Tensor, add_rowvec, as_tensor, exp, matmul, tanh

INIT_TEMPERATURE = 0.07
LOG_TEMP_MIN, LOG_TEMP_MAX = -5.0, 5.0

PARAM_NAMES = (
    "img_w1", "img_b1", "img_w2", "img_b2",
    "txt_w1", "txt_b1", "txt_w2", "txt_b2",
    "log_temperature",
)


@dataclass
class EncoderParams:
    img_w1: Tensor
    img_b1: Tensor
    img_w2: Tensor
    img_b2: Tensor
    txt_w1: Tensor
    txt_b1: Tensor
    txt_w2: Tensor
    txt_b2: Tensor
    log_temperature: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def named(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @property
    def d_img(self) -> int:
        return self.img_w1.shape[0]

    @property
    def d_txt(self) -> int:
        return self.txt_w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.img_w2.shape[1]

    def clamp_temperature(self) -> None:
        np.clip(self.log_temperature.data, LOG_TEMP_MIN, LOG_TEMP_MAX,
                out=self.log_temperature.data)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "EncoderParams":
        return cls(**{n: Tensor(np.array(arrays[n], dtype=np.float64), requires_grad)
                      for n in PARAM_NAMES})


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoders(d_img: int, d_txt: int, hidden: int, embed_dim: int, seed: int,
                  learn_temperature: bool = True) -> EncoderParams:
    """Fan-in scaled uniform weights, zero biases, temperature 0.07.

    Values are rounded to float32 so a 32-bit checkpoint stores them exactly.
    """
    if min(d_img, d_txt, hidden, embed_dim) <= 0:
        raise ParameterError("encoder dimensions must be positive")
    rng = np.random.default_rng(seed)

    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    arrays = {
        "img_w1": f32(_uniform(rng, d_img, hidden)),
        "img_b1": np.zeros(hidden),
        "img_w2": f32(_uniform(rng, hidden, embed_dim)),
        "img_b2": np.zeros(embed_dim),
        "txt_w1": f32(_uniform(rng, d_txt, hidden)),
        "txt_b1": np.zeros(hidden),
        "txt_w2": f32(_uniform(rng, hidden, embed_dim)),
        "txt_b2": np.zeros(embed_dim),
        "log_temperature": f32(np.asarray(math.log(INIT_TEMPERATURE))),
    }
    params = EncoderParams.from_arrays(arrays)
    params.log_temperature.requires_grad = learn_temperature
    return params


def _tower(x, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, name: str) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ShapeError(f"{name}: expected batch of width {w1.shape[0]}, got {x.shape}")
    h = tanh(add_rowvec(matmul(x, w1), b1))
    return add_rowvec(matmul(h, w2), b2)


def encode_images(params: EncoderParams, batch) -> Tensor:
    """Unnormalized image embeddings, one row per input row."""
    return _tower(batch, params.img_w1, params.img_b1, params.img_w2, params.img_b2, "encode_images")


def encode_texts(params: EncoderParams, batch) -> Tensor:
    return _tower(batch, params.txt_w1, params.txt_b1, params.txt_w2, params.txt_b2, "encode_texts")


def temperature(params: EncoderParams) -> Tensor:
    return exp(params.log_temperature)


@dataclass(frozen=True)
class TeacherSnapshot:
    """Read-only copy of encoder weights taken at the end of a stage."""

    params: EncoderParams
    stage_index: int

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.named().items()}


def _frozen_copy(params: EncoderParams) -> EncoderParams:
    copy = EncoderParams.from_arrays({n: t.data for n, t in params.named().items()},
                                     requires_grad=False)
    for t in copy.tensors():
        t.data.setflags(write=False)
    return copy


def snapshot_teacher(params: EncoderParams | TeacherSnapshot, stage: int) -> TeacherSnapshot:
    if isinstance(params, TeacherSnapshot):
        params = params.params
    return TeacherSnapshot(_frozen_copy(params), int(stage))
