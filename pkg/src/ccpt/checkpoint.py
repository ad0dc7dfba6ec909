"""Binary checkpoints.

Layout::

    b"CCKPT1"  u32 format_version  u32 header_len  header (UTF-8 JSON)  payload

The header lists every tensor as {name, dtype, shape, offset} with offsets
relative to the payload start; ``dtype`` is ``f32`` for float blocks and
``u64`` for RNG state words. Everything is little-endian. Training keeps all
persisted state on the float32 grid, so the 32-bit payload is lossless.
"""

from __future__ import annotations

import json
import struct
import warnings
from collections import deque
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_text
from .diffcore import OptimizerState
from .encoders import PARAM_NAMES, EncoderParams, TeacherSnapshot, snapshot_teacher
from .evaluation import MetricsRecord
from .pipeline import TrainState
from .rehearsal import BufferEntry, RehearsalBuffer
from .synthstream import LABEL_STRIDE, PairBatch

MAGIC = b"CCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u64": np.dtype("<u8")}
_MASK64 = (1 << 64) - 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointCorruptError(ValueError):
    pass


def rng_to_words(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointFormatError("only PCG64 generators can be saved")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s >> 64, s & _MASK64, inc >> 64, inc & _MASK64,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def rng_from_words(words) -> np.random.Generator:
    w = [int(x) for x in words]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng


def _check_f32(name: str, a: np.ndarray) -> None:
    if not np.array_equal(a.astype(np.float32).astype(np.float64), a):
        warnings.warn(f"checkpoint: {name} is not float32-exact; resume will not be bit-identical")


def save_checkpoint(state: TrainState, path) -> None:
    blocks: list[tuple[str, str, np.ndarray]] = []

    def f32(name, a):
        a = np.asarray(a, dtype=np.float64)
        _check_f32(name, a)
        blocks.append((name, "f32", a))

    for name, t in state.params.named().items():
        f32(f"params.{name}", t.data)
    for name, m, v in zip(PARAM_NAMES, state.opt.first_moment, state.opt.second_moment):
        f32(f"opt.m.{name}", m)
        f32(f"opt.v.{name}", v)
    if state.teacher is not None:
        for name, a in state.teacher.arrays().items():
            f32(f"teacher.{name}", a)
    if len(state.buffer):
        img, txt, _ = state.buffer.arrays()
        f32("buffer.images", img)
        f32("buffer.texts", txt)
    pool = state.pool_batch()
    if len(pool):
        f32("pool.images", pool.images)
        f32("pool.texts", pool.texts)
        f32("pool.labels", pool.labels)
    for name in ("data_rng", "mix_rng", "er_rng"):
        blocks.append((f"rng.{name}", "u64", rng_to_words(getattr(state, name))))

    tensors, payload, offset = [], [], 0
    for name, kind, a in blocks:
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        tensors.append({"name": name, "dtype": kind, "shape": list(np.shape(a)), "offset": offset})
        payload.append(raw)
        offset += len(raw)

    cfg = state.config
    header = {
        "config": cfg.canonical_text(),
        "config_hash": cfg.config_hash(),
        "output_dir": cfg.output_dir,
        "stage": state.stage,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
        "n_seen": state.n_seen,
        "opt": {"step_count": state.opt.step_count, "learning_rate": state.opt.learning_rate,
                "warmup_steps": state.opt.warmup_steps, "weight_decay": state.opt.weight_decay},
        "teacher_stage": None if state.teacher is None else state.teacher.stage_index,
        "buffer": {"capacity": state.buffer.capacity, "modalities": state.buffer.modalities,
                   "entry_modality": [e.modality for e in state.buffer.entries],
                   "entry_rank": [e.rank for e in state.buffer.entries]},
        "loss_trace": state.loss_trace,
        "records": [r.to_dict() for r in state.records],
        "tensors": tensors,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, arrays) without building a state."""
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:6] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, head_len = struct.unpack_from("<II", raw, 6)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    start = 14 + head_len
    if start > len(raw):
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(raw[14:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    if len(raw) - start != header["payload_bytes"]:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(raw) - start} bytes, header says {header['payload_bytes']}")
    arrays = {}
    for t in header["tensors"]:
        dt = _DTYPES[t["dtype"]]
        count = int(np.prod(t["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dt, count, start + t["offset"]).reshape(t["shape"])
        arrays[t["name"]] = a.astype(np.float64) if t["dtype"] == "f32" else a.copy()
    return header, arrays


def load_checkpoint(path, expected: RunConfig | None = None) -> TrainState:
    header, arrays = read_checkpoint(path)
    config = config_from_text(header["config"]).replace(output_dir=header["output_dir"])
    if expected is not None and expected.config_hash() != header["config_hash"]:
        warnings.warn(f"{path}: config hash differs from the supplied config; "
                      "continuing with the checkpoint's config")

    params = EncoderParams.from_arrays({n: arrays[f"params.{n}"] for n in PARAM_NAMES})
    params.log_temperature.requires_grad = config.learn_temperature
    o = header["opt"]
    opt = OptimizerState([arrays[f"opt.m.{n}"].copy() for n in PARAM_NAMES],
                         [arrays[f"opt.v.{n}"].copy() for n in PARAM_NAMES],
                         o["step_count"], o["learning_rate"], o["warmup_steps"], o["weight_decay"])

    teacher = None
    if header["teacher_stage"] is not None:
        tp = EncoderParams.from_arrays({n: arrays[f"teacher.{n}"] for n in PARAM_NAMES})
        teacher = snapshot_teacher(tp, header["teacher_stage"])

    b = header["buffer"]
    buffer = RehearsalBuffer(b["capacity"], modalities=list(b["modalities"]))
    if b["entry_modality"]:
        imgs, txts = arrays["buffer.images"], arrays["buffer.texts"]
        buffer.entries = [BufferEntry(imgs[i], txts[i], int(m), float(r))
                          for i, (m, r) in enumerate(zip(b["entry_modality"], b["entry_rank"]))]

    pool = deque()
    if "pool.images" in arrays:
        labels = arrays["pool.labels"].astype(np.int64)
        pool.append(PairBatch(arrays["pool.images"], arrays["pool.texts"], labels,
                              labels // LABEL_STRIDE))

    return TrainState(
        config=config,
        params=params,
        opt=opt,
        buffer=buffer,
        data_rng=rng_from_words(arrays["rng.data_rng"]),
        mix_rng=rng_from_words(arrays["rng.mix_rng"]),
        er_rng=rng_from_words(arrays["rng.er_rng"]),
        teacher=teacher,
        stage=header["stage"],
        step_in_stage=header["step_in_stage"],
        global_step=header["global_step"],
        n_seen=header["n_seen"],
        pool=pool,
        loss_trace=list(header["loss_trace"]),
        records=[MetricsRecord(**r) for r in header["records"]],
    )
