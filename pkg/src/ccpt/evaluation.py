"""Zero-shot and linear-probe evaluation, macro one-vs-rest AUC, forgetting."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .diffcore import softmax_array
from .encoders import EncoderParams, encode_images, encode_texts
from .synthstream import ModalityGenerator, class_prompt_vectors, sample_pairs

log = logging.getLogger(__name__)

SETTINGS = ("zeroshot", "linprobe")


class MetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    run_id: str
    strategy: str
    stage: int
    modality: int
    setting: str
    acc: float
    auc: float
    forgetting: float | None
    step: int

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise MetricError(f"unknown setting {self.setting!r}")
        if not (0.0 <= self.acc <= 1.0 and 0.0 <= self.auc <= 1.0):
            raise MetricError(f"acc/auc out of [0, 1]: {self.acc}, {self.auc}")

    def to_dict(self) -> dict:
        return asdict(self)


def macro_ovr_auc(scores, labels) -> float:
    """Macro one-vs-rest AUC with midrank ties.

    Column c of ``scores`` scores class c; ``labels`` hold column indices.
    Classes with no positives or no negatives are skipped with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, n_classes = scores.shape
    if len(labels) != n:
        raise MetricError("scores and labels differ in length")
    aucs = []
    for c in range(n_classes):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            log.warning("AUC undefined for class %d (positives=%d); excluded", c, n_pos)
            continue
        ranks = rankdata(scores[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    if not aucs:
        raise MetricError("AUC undefined for every class")
    return float(np.mean(aucs))


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return 1.0 - np.count_nonzero(pred != labels) / len(labels)


def _normalized(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def zero_shot_scores(params: EncoderParams, images: np.ndarray, prompts: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities to class prompts and their per-sample softmax."""
    img = _normalized(encode_images(params, images).data)
    txt = _normalized(encode_texts(params, prompts).data)
    sims = img @ txt.T
    tau = float(np.exp(params.log_temperature.data))
    return sims, softmax_array(sims / tau)


def zero_shot_eval(params: EncoderParams, gen: ModalityGenerator, n_test: int, seed
                   ) -> tuple[float, float]:
    if n_test < gen.spec.n_classes:
        raise MetricError("n_test must be at least the number of classes")
    test = sample_pairs(gen, n_test, np.random.default_rng(seed))
    y = test.labels - gen.spec.label_offset
    sims, probs = zero_shot_scores(params, test.images, class_prompt_vectors(gen))
    return accuracy(np.argmax(sims, axis=1), y), macro_ovr_auc(probs, y)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int, iters: int = 500,
                     lr: float = 0.5, l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(iters):
        p = softmax_array(x @ w + b)
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b


def probe_proba(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return softmax_array(x @ w + b)


def linear_probe_eval(params: EncoderParams, gen: ModalityGenerator, n_train: int,
                      n_test: int, seed) -> tuple[float, float]:
    c = gen.spec.n_classes
    if n_train < 10 * c:
        raise MetricError("n_train must be at least 10 x n_classes")
    rng = np.random.default_rng(seed)
    train = sample_pairs(gen, n_train, rng)
    test = sample_pairs(gen, n_test, rng)
    x_tr = _normalized(encode_images(params, train.images).data)
    x_te = _normalized(encode_images(params, test.images).data)
    w, b = fit_linear_probe(x_tr, train.labels - gen.spec.label_offset, c)
    probs = probe_proba(w, b, x_te)
    y = test.labels - gen.spec.label_offset
    return accuracy(np.argmax(probs, axis=1), y), macro_ovr_auc(probs, y)


def forgetting_rate(at_learning: float, now: float, percent: bool = False) -> float:
    """Metric when the modality was learned minus the metric now."""
    hi = 100.0 if percent else 1.0
    for v in (at_learning, now):
        if not 0.0 <= v <= hi:
            raise MetricError(f"{v} outside [0, {hi}]; check units")
    return at_learning - now


def render_delta(delta: float, digits: int = 1) -> str:
    """Table-style delta: forgetting shows as a down arrow, gains as an up arrow."""
    mag = round(abs(delta), digits)
    if mag == 0:
        return f"{0:.{digits}f}"
    return f"{'↓' if delta > 0 else '↑'}{mag:.{digits}f}"
