"""Finite-difference checks for every tape operation and the composed loss."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .alignment import clip_loss, similarity_matrix
from .distill import DistillConfig, odid_loss, row_correction, teacher_similarity, total_loss
from .encoders import encode_images, encode_texts, init_encoders, snapshot_teacher, temperature

H = 1e-4
TOLERANCE = 1e-4


def _leaf(rng, *shape, positive=False):
    a = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
    return dc.Tensor(a, requires_grad=True)


def _weighted(out: dc.Tensor, w: np.ndarray) -> dc.Tensor:
    # random linear functional so every output entry matters
    return dc.sum_all(dc.mul(out, dc.Tensor(w)))


def op_cases(seed: int = 0) -> dict:
    """name -> (loss_fn, params) for each registered operation."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, fn, *params):
        out = fn()
        w = rng.standard_normal(out.shape)
        cases[name] = (lambda: _weighted(fn(), w), list(params))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    add_case("matmul", lambda: dc.matmul(a, b), a, b)
    x, y = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    add_case("add", lambda: dc.add(x, y), x, y)
    add_case("sub", lambda: dc.sub(x, y), x, y)
    add_case("mul", lambda: dc.mul(x, y), x, y)
    add_case("transpose", lambda: dc.transpose(x), x)
    bias = _leaf(rng, 4)
    add_case("add_rowvec", lambda: dc.add_rowvec(x, bias), x, bias)
    add_case("scalar_mul", lambda: dc.scalar_mul(x, -1.7), x)
    s = dc.Tensor(np.asarray(1.3), requires_grad=True)
    add_case("scale", lambda: dc.scale(x, s), x, s)
    add_case("divide_by", lambda: dc.divide_by(x, s), x, s)
    add_case("tanh", lambda: dc.tanh(x), x)
    r = dc.Tensor(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)), requires_grad=True)
    add_case("relu", lambda: dc.relu(r), r)
    add_case("exp", lambda: dc.exp(x), x)
    p = _leaf(rng, 3, 4, positive=True)
    add_case("log", lambda: dc.log(p), p)
    add_case("sum", lambda: dc.sum_all(x), x)
    add_case("mean", lambda: dc.mean_all(x), x)
    sq = _leaf(rng, 4, 4)
    add_case("trace", lambda: dc.trace(sq), sq)
    z = _leaf(rng, 5, 8)
    add_case("l2_normalize_rows", lambda: dc.l2_normalize_rows(z), z)
    add_case("row_softmax", lambda: dc.row_softmax(z, 0.7), z)
    add_case("row_log_softmax", lambda: dc.row_log_softmax(z), z)
    return cases


def loss_cases(seed: int = 0, n: int = 4) -> dict:
    """Composed losses: InfoNCE, distillation, and the full training objective."""
    rng = np.random.default_rng(seed)
    cases = {}

    img, txt = _leaf(rng, n, 6), _leaf(rng, n, 6)
    log_tau = dc.Tensor(np.asarray(np.log(0.5)), requires_grad=True)
    cases["clip_loss"] = (
        lambda: clip_loss(similarity_matrix(img, txt), dc.exp(log_tau)), [img, txt, log_tau])

    s_teacher = np.tanh(rng.standard_normal((n, n)))
    cases["odid_loss"] = (
        lambda: odid_loss(similarity_matrix(img, txt),
                          row_correction(s_teacher, similarity_matrix(img, txt)), 0.5),
        [img, txt])

    params = init_encoders(5, 4, 6, 3, seed=seed + 1)
    for t in params.tensors():
        t.data += 0.1 * rng.standard_normal(t.data.shape)
    teacher = snapshot_teacher(init_encoders(5, 4, 6, 3, seed=seed + 2), 1)
    images, texts = rng.standard_normal((n, 5)), rng.standard_normal((n, 4))
    cfg = DistillConfig(lambda_weight=0.8, distill_temperature=0.5)

    def full():
        sim = similarity_matrix(encode_images(params, images), encode_texts(params, texts))
        clip = clip_loss(sim, temperature(params))
        odid = odid_loss(sim, row_correction(teacher_similarity(teacher, images, texts), sim),
                         cfg.distill_temperature)
        return total_loss(clip, odid, cfg)

    cases["full_objective"] = (full, params.tensors())
    return cases


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    results = {}
    for name, (fn, params) in {**op_cases(seed), **loss_cases(seed)}.items():
        results[name] = dc.grad_check(fn, params, H)
    return results
