import json
import subprocess
import sys
import warnings

import numpy as np
import pytest

from ccpt.checkpoint import (
    CheckpointCorruptError,
    CheckpointFormatError,
    load_checkpoint,
    read_checkpoint,
    rng_from_words,
    rng_to_words,
    save_checkpoint,
)
from ccpt.config import ConfigError, RunConfig, config_from_text, load_config
from ccpt.distill import teacher_similarity
from ccpt.pipeline import METRICS_FILE, compute_loss, init_state, run_pipeline, run_stage
from ccpt.synthstream import DEFAULT_MODALITIES, ModalitySpec

SMALL = dict(steps_per_stage=20, batch_size=8, buffer_capacity=16, n_clusters=4,
             hidden_dim=16, embed_dim=8, pool_size=64, n_test=100, n_probe_train=100,
             learning_rate=3e-3, warmup_steps=5)


def small(strategy="retcop", **kw):
    return RunConfig(strategy=strategy, **{**SMALL, **kw})


# --------------------------------------------------------------------- config

def test_config_parsing_and_errors(tmp_path):
    cfg = config_from_text("strategy = er\nsteps_per_stage = 5\nstages = 1,3\n# comment\n")
    assert cfg.strategy == "er" and cfg.steps_per_stage == 5
    assert [s.modality_id for s in cfg.stages] == [1, 3]
    inline = config_from_text("stages = modality_id:7,n_classes:3,generator_seed:5")
    assert inline.stages == (ModalitySpec(7, 3, generator_seed=5),)
    (tmp_path / "m.spec").write_text("modality_id = 9\nn_classes = 4\n")
    (tmp_path / "run.cfg").write_text("stages = 1,m.spec\n")
    assert load_config(tmp_path / "run.cfg").stages[1].modality_id == 9
    for bad in ("colour = red", "strategy = icarl", "batch_size = many",
                "replay_fraction = 1.0", "stages = 1,1", "stages = 42",
                "steps_per_stage = 3\nsteps_per_stage = 4"):
        with pytest.raises(ConfigError):
            config_from_text(bad)


def test_config_hash_ignores_output_dir():
    a, b = small(output_dir="x"), small(output_dir="y")
    assert a.config_hash() == b.config_hash() and a.run_id == b.run_id
    assert a.run_id.startswith("retcop-")
    assert config_from_text(a.canonical_text()).config_hash() == a.config_hash()
    assert small(seed=1).config_hash() != a.config_hash()


# ------------------------------------------------------------------- pipeline

def test_seqft_never_fills_the_buffer():
    st = run_pipeline(small("seqft", stages=tuple(DEFAULT_MODALITIES.values())[:2]), write=False)
    assert len(st.buffer) == 0 and st.done


def test_stage_one_has_no_distillation_term():
    a = run_pipeline(small("retcop", stages=(DEFAULT_MODALITIES[1],)), write=False)
    b = run_pipeline(small("rehearsal_only", stages=(DEFAULT_MODALITIES[1],)), write=False)
    assert a.loss_trace == b.loss_trace


def test_missing_teacher_is_a_config_error():
    st = init_state(small("odid_only"))
    st.stage = 1
    with pytest.raises(ConfigError):
        run_stage(st)
    with pytest.raises(ConfigError):
        compute_loss(st, np.ones((2, 32)), np.ones((2, 24)))


def test_buffer_split_evenly_across_stages():
    st = run_pipeline(small("retcop"), write=False)
    assert st.buffer.counts() == {1: 6, 2: 5, 3: 5}
    mof = run_pipeline(small("mof"), write=False)
    assert mof.buffer.counts() == {1: 6, 2: 5, 3: 5}
    er = run_pipeline(small("er"), write=False)
    assert len(er.buffer) == 16


def test_records_cover_every_seen_modality(tmp_path):
    st = run_pipeline(small(output_dir=str(tmp_path)))
    rows = [json.loads(line) for line in (tmp_path / METRICS_FILE).read_text().splitlines()]
    assert len(rows) == 2 * (1 + 2 + 3) == len(st.records)
    m1 = [r for r in rows if r["modality"] == 1 and r["setting"] == "zeroshot"]
    assert [r["stage"] for r in m1] == [1, 2, 3]
    assert m1[0]["forgetting"] is None
    assert m1[2]["forgetting"] == pytest.approx(m1[0]["acc"] - m1[2]["acc"], abs=1e-15)
    assert (tmp_path / "final.ckpt").exists()


def test_identical_runs_give_identical_logs(tmp_path):
    for name in ("a", "b"):
        run_pipeline(small("er", output_dir=str(tmp_path / name)))
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()


@pytest.mark.parametrize("strategy,pause", [("retcop", 7), ("retcop", 33), ("er", 27), ("mof", 45)])
def test_resume_mid_stage_is_bit_exact(tmp_path, strategy, pause):
    cfg = small(strategy, output_dir=str(tmp_path / "full"))
    full = run_pipeline(cfg)
    part = run_pipeline(cfg.replace(output_dir=str(tmp_path / "part")), max_global_step=pause)
    assert not part.done
    resumed = load_checkpoint(tmp_path / "part" / "paused.ckpt", expected=cfg)
    run_pipeline(resumed.config, resumed)
    assert resumed.loss_trace == full.loss_trace
    for a, b in zip(resumed.params.tensors(), full.params.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert ((tmp_path / "part" / METRICS_FILE).read_bytes()
            == (tmp_path / "full" / METRICS_FILE).read_bytes())


def test_periodic_checkpoints(tmp_path):
    run_pipeline(small(output_dir=str(tmp_path), checkpoint_every=25))
    names = sorted(p.name for p in tmp_path.glob("step*.ckpt"))
    assert names == ["step0000025.ckpt", "step0000050.ckpt"]


# --------------------------------------------------------- strategy lattice

def _trace(strategy, **kw):
    return run_pipeline(small(strategy, steps_per_stage=17, **kw), max_global_step=50,
                        write=False).loss_trace


def test_strategy_lattice_over_fifty_steps():
    retcop_no_distill = _trace("retcop", lambda_weight=0.0)
    assert len(retcop_no_distill) == 50
    assert retcop_no_distill == _trace("rehearsal_only")
    assert _trace("retcop", replay_fraction=0.0) == _trace("odid_only")
    assert _trace("retcop", lambda_weight=0.0, replay_fraction=0.0) == _trace("seqft")
    assert _trace("retcop") != retcop_no_distill


# ----------------------------------------------------------------- checkpoint

def test_rng_word_roundtrip():
    rng = np.random.default_rng(123)
    rng.random(5)
    clone = rng_from_words(rng_to_words(rng))
    assert rng.random(4).tolist() == clone.random(4).tolist()


def _checkpoint(tmp_path):
    st = run_pipeline(small(output_dir=str(tmp_path)), max_global_step=25)
    return st, tmp_path / "paused.ckpt"


def test_checkpoint_layout_and_errors(tmp_path):
    st, path = _checkpoint(tmp_path)
    raw = path.read_bytes()
    assert raw[:6] == b"CCKPT1"
    header, arrays = read_checkpoint(path)
    assert header["global_step"] == 25 and header["teacher_stage"] == 1
    assert arrays["params.img_w1"].shape == (32, 16)

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXKPT1" + raw[6:])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(bad)
    bad.write_bytes(raw[:6] + (99).to_bytes(4, "little") + raw[10:])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointCorruptError):
        read_checkpoint(bad)
    bad.write_bytes(raw[:30])
    with pytest.raises(CheckpointCorruptError):
        read_checkpoint(bad)


def test_hash_mismatch_warns(tmp_path):
    st, path = _checkpoint(tmp_path)
    with pytest.warns(UserWarning, match="hash"):
        load_checkpoint(path, expected=st.config.replace(seed=99))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, expected=st.config)


def test_save_load_save_is_byte_identical(tmp_path):
    _, path = _checkpoint(tmp_path)
    again = tmp_path / "again.ckpt"
    save_checkpoint(load_checkpoint(path), again)
    assert again.read_bytes() == path.read_bytes()


_TEACHER_PROBE = """
import sys, numpy as np
from ccpt.checkpoint import load_checkpoint
from ccpt.distill import teacher_similarity
st = load_checkpoint(sys.argv[1])
rng = np.random.default_rng(5)
sim = teacher_similarity(st.teacher, rng.standard_normal((6, 32)), rng.standard_normal((6, 24)))
sys.stdout.write(sim.data.tobytes().hex())
"""


def test_teacher_similarity_survives_checkpoint_and_restart(tmp_path):
    st, path = _checkpoint(tmp_path)
    rng = np.random.default_rng(5)
    here = teacher_similarity(st.teacher, rng.standard_normal((6, 32)), rng.standard_normal((6, 24)))
    out = subprocess.run([sys.executable, "-c", _TEACHER_PROBE, str(path)],
                         capture_output=True, text=True, check=True).stdout
    assert out == here.data.tobytes().hex()
