"""Stage orchestration: training loop, strategies, stage-end bookkeeping."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import clip_loss, similarity_matrix
from .config import ConfigError, RunConfig
from .diffcore import OptimizerState, backward, optimizer_step
from .distill import DistillConfig, odid_loss, row_correction, teacher_similarity, total_loss
from .encoders import (
    EncoderParams,
    TeacherSnapshot,
    encode_images,
    encode_texts,
    init_encoders,
    snapshot_teacher,
    temperature,
)
from .evaluation import MetricsRecord, forgetting_rate, linear_probe_eval, zero_shot_eval
from .rehearsal import (
    BufferEntry,
    RehearsalBuffer,
    build_mof_exemplars,
    build_stage_exemplars,
    rebalance_buffer,
    reservoir_offer,
    sample_mixed_batch,
)
from .synthstream import ModalityGenerator, PairBatch, build_modality, sample_pairs

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"

# Independent RNG streams, keyed off the run seed.
DATA_STREAM, MIX_STREAM, ER_STREAM, SELECT_STREAM, EVAL_STREAM = 1, 2, 3, 4, 5


def derived_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


@dataclass
class TrainState:
    config: RunConfig
    params: EncoderParams
    opt: OptimizerState
    buffer: RehearsalBuffer
    data_rng: np.random.Generator
    mix_rng: np.random.Generator
    er_rng: np.random.Generator
    teacher: TeacherSnapshot | None = None
    stage: int = 0
    step_in_stage: int = 0
    global_step: int = 0
    n_seen: int = 0
    pool: deque = field(default_factory=deque)
    loss_trace: list[float] = field(default_factory=list)
    records: list[MetricsRecord] = field(default_factory=list)
    generators: dict[int, ModalityGenerator] = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.stage >= len(self.config.stages)

    def generator(self, stage: int) -> ModalityGenerator:
        spec = self.config.stages[stage]
        if spec.modality_id not in self.generators:
            self.generators[spec.modality_id] = build_modality(spec)
        return self.generators[spec.modality_id]

    def pool_batch(self) -> PairBatch:
        """The last ``pool_size`` current-stage pairs, oldest first."""
        if not self.pool:
            return PairBatch(np.empty((0, 0)), np.empty((0, 0)), np.empty(0, int), np.empty(0, int))
        size = self.config.pool_size
        cat = PairBatch(np.vstack([b.images for b in self.pool]),
                        np.vstack([b.texts for b in self.pool]),
                        np.concatenate([b.labels for b in self.pool]),
                        np.concatenate([b.modality for b in self.pool]))
        return PairBatch(cat.images[-size:], cat.texts[-size:], cat.labels[-size:], cat.modality[-size:])

    def push_pool(self, batch: PairBatch) -> None:
        self.pool.append(batch)
        total = sum(len(b) for b in self.pool)
        while total - len(self.pool[0]) >= self.config.pool_size:
            total -= len(self.pool.popleft())


def init_state(config: RunConfig) -> TrainState:
    """Seeded random initialization stands in for text-encoder pre-training."""
    first = config.stages[0]
    params = init_encoders(first.image_dim, first.text_dim, config.hidden_dim,
                           config.embed_dim, config.seed, config.learn_temperature)
    opt = OptimizerState.for_params(params.tensors(), config.learning_rate,
                                    config.warmup_steps, config.weight_decay)
    return TrainState(
        config=config,
        params=params,
        opt=opt,
        buffer=RehearsalBuffer(config.buffer_capacity),
        data_rng=np.random.default_rng([config.seed, DATA_STREAM]),
        mix_rng=np.random.default_rng([config.seed, MIX_STREAM]),
        er_rng=np.random.default_rng([config.seed, ER_STREAM]),
    )


def compute_loss(state: TrainState, images: np.ndarray, texts: np.ndarray):
    """Contrastive loss, plus weighted distillation when the strategy calls for it."""
    cfg = state.config
    params = state.params
    sim = similarity_matrix(encode_images(params, images), encode_texts(params, texts))
    loss = clip_loss(sim, temperature(params))
    if cfg.uses_distill and state.stage > 0:
        if state.teacher is None:
            raise ConfigError(f"strategy {cfg.strategy} needs a teacher at stage {state.stage + 1}")
        s_prev = teacher_similarity(state.teacher, images, texts)
        odid = odid_loss(sim, row_correction(s_prev, sim), cfg.distill_temperature)
        loss = total_loss(loss, odid, DistillConfig(cfg.lambda_weight, cfg.distill_temperature))
    return loss


def train_step(state: TrainState) -> float:
    cfg = state.config
    gen = state.generator(state.stage)
    batch = sample_mixed_batch(
        state.buffer,
        lambda n: sample_pairs(gen, n, state.data_rng),
        cfg.batch_size, cfg.replay_fraction, state.mix_rng)
    cur = batch.current
    state.push_pool(cur)
    if cfg.strategy == "er":
        items = [BufferEntry(cur.images[i], cur.texts[i], int(cur.modality[i]), float(state.n_seen + i))
                 for i in range(len(cur))]
        reservoir_offer(state.buffer, items, state.n_seen, state.er_rng)
        state.n_seen += len(cur)

    loss = compute_loss(state, batch.images, batch.texts)
    tensors = state.params.tensors()
    for t in tensors:
        t.zero_grad()
    backward(loss)
    optimizer_step(tensors, [t.grad for t in tensors], state.opt, snap_float32=True)
    state.params.clamp_temperature()
    value = loss.item()
    state.loss_trace.append(value)
    state.step_in_stage += 1
    state.global_step += 1
    return value


def finish_stage(state: TrainState) -> list[MetricsRecord]:
    """Snapshot the teacher, refresh the buffer, evaluate every seen modality."""
    cfg = state.config
    t = state.stage
    spec = cfg.stages[t]
    state.teacher = snapshot_teacher(state.params, t + 1)

    if cfg.strategy in ("retcop", "rehearsal_only", "mof"):
        mods = state.buffer.modalities + [spec.modality_id]
        quota = state.buffer.quotas(mods)[spec.modality_id]
        pool = state.pool_batch()
        if cfg.strategy == "mof":
            new = build_mof_exemplars(pool, state.params, quota)
        else:
            new = build_stage_exemplars(pool, state.params, quota, cfg.n_clusters,
                                        derived_seed(cfg.seed, SELECT_STREAM, t))
        rebalance_buffer(state.buffer, new, spec.modality_id)

    records = evaluate_seen(state)
    state.records.extend(records)
    state.stage += 1
    state.step_in_stage = 0
    state.pool.clear()
    return records


def evaluate_seen(state: TrainState) -> list[MetricsRecord]:
    cfg = state.config
    t = state.stage
    out = []
    for s in range(t + 1):
        mid = cfg.stages[s].modality_id
        gen = state.generator(s)
        for k, setting in enumerate(("zeroshot", "linprobe")):
            seed = derived_seed(cfg.seed, EVAL_STREAM, mid, t, k)
            if setting == "zeroshot":
                acc, auc = zero_shot_eval(state.params, gen, cfg.n_test, seed)
            else:
                acc, auc = linear_probe_eval(state.params, gen, cfg.n_probe_train, cfg.n_test, seed)
            forgetting = None
            if s < t:
                learned = next(r for r in state.records
                               if r.modality == mid and r.setting == setting and r.stage == s + 1)
                forgetting = forgetting_rate(learned.acc, acc)
            out.append(MetricsRecord(cfg.run_id, cfg.strategy, t + 1, mid, setting,
                                     acc, auc, forgetting, state.global_step))
    return out


def run_stage(state: TrainState, max_global_step: int | None = None,
              on_step=None) -> TrainState:
    """Train the current stage to its end (or until ``max_global_step``)."""
    cfg = state.config
    if cfg.uses_distill and state.stage > 0 and state.teacher is None:
        raise ConfigError(f"strategy {cfg.strategy} needs a teacher snapshot at stage {state.stage + 1}")
    while state.step_in_stage < cfg.steps_per_stage:
        if max_global_step is not None and state.global_step >= max_global_step:
            return state
        train_step(state)
        if on_step is not None:
            on_step(state)
    records = finish_stage(state)
    if on_step is not None:
        on_step(state, records)
    return state


def append_metrics(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def run_pipeline(config: RunConfig, state: TrainState | None = None,
                 max_global_step: int | None = None, write: bool = True) -> TrainState:
    """Run (or continue) every stage, writing metrics and checkpoints.

    With ``max_global_step`` training pauses once that many optimizer steps
    have run, leaving a resumable state.
    """
    from .checkpoint import save_checkpoint

    if state is None:
        state = init_state(config)
    out = Path(config.output_dir)
    metrics_path = out / METRICS_FILE
    if write:
        out.mkdir(parents=True, exist_ok=True)
        # rewrite from the state so a resumed run never duplicates records
        metrics_path.write_text("")
        append_metrics(metrics_path, state.records)

    def on_step(st, records=None):
        if not write:
            return
        if records:
            append_metrics(metrics_path, records)
        every = config.checkpoint_every
        if records is None and every and st.global_step % every == 0:
            save_checkpoint(st, out / f"step{st.global_step:07d}.ckpt")

    while not state.done:
        run_stage(state, max_global_step, on_step)
        if max_global_step is not None and state.global_step >= max_global_step:
            break
    if write:
        save_checkpoint(state, out / ("final.ckpt" if state.done else "paused.ckpt"))
    return state
