"""Exemplar selection and the fixed-size rehearsal buffer.

Includes the similarity-weighted joint embedding, seeded k-means, nearest-to-
centroid selection, even per-modality quotas with rank-based eviction, and the
two baseline samplers (reservoir for ER, herding for iCaRL).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError, ParameterError, ShapeError
from .encoders import EncoderParams, encode_images, encode_texts
from .synthstream import PairBatch

log = logging.getLogger(__name__)


# ----------------------------------------------------------- joint embedding

def joint_embeddings(images_norm: np.ndarray, texts_norm: np.ndarray, sim) -> np.ndarray:
    """J_i = s_i * I_i + (1 - s_i) * T_i with s_i = clip(S_ii, 0, 1).

    ``sim`` is either the full N x N similarity matrix or its diagonal.
    """
    images_norm = np.asarray(images_norm, dtype=np.float64)
    texts_norm = np.asarray(texts_norm, dtype=np.float64)
    sim = np.asarray(getattr(sim, "data", sim), dtype=np.float64)
    if images_norm.shape != texts_norm.shape or images_norm.ndim != 2:
        raise ShapeError(f"joint_embeddings: {images_norm.shape} vs {texts_norm.shape}")
    diag = np.diagonal(sim) if sim.ndim == 2 else sim
    if diag.shape != (len(images_norm),):
        raise ShapeError("similarity does not match the batch size")
    s = np.clip(diag, 0.0, 1.0)[:, None]
    return s * images_norm + (1.0 - s) * texts_norm


# -------------------------------------------------------------------- kmeans

@dataclass
class ClusterResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns the chosen point indices."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a centre
            rest = [i for i in range(n) if i not in chosen]
            idx = rest[0]
        else:
            cdf = np.cumsum(closest / total)
            idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            idx = min(idx, n - 1)
            while closest[idx] == 0.0:
                idx = (idx + 1) % n
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return np.asarray(chosen)


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int = 100,
          tol: float = 1e-8) -> ClusterResult:
    """Lloyd iterations from given centroids.

    Ties go to the lowest centroid index. An emptied cluster is moved onto the
    point farthest from its current centroid, which can only lower inertia.
    """
    centroids = np.array(centroids, dtype=np.float64)
    k = len(centroids)
    labels = np.argmin(_sq_dists(points, centroids), axis=1)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(points)), labels].sum()))
        own = d[np.arange(len(points)), labels]
        new = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                new[c] = points[far]
                own[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            final = np.argmin(_sq_dists(points, centroids), axis=1)
            if np.array_equal(final, labels):
                break
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(points)), labels].sum())
    return ClusterResult(centroids, labels, inertia, it, history)


def kmeans(points, k: int, seed, max_iters: int = 100, tol: float = 1e-8) -> ClusterResult:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ParameterError(f"need 1 <= K <= N, got K={k}, N={n}")
    rng = np.random.default_rng(seed)
    init = kmeans_pp_init(points, k, rng)
    return lloyd(points, points[init], max_iters, tol)


def select_representatives(clusters: ClusterResult, points, per_cluster: int
                           ) -> list[tuple[int, float]]:
    """Per cluster, the ``per_cluster`` members nearest its centroid.

    Returns (index, distance) pairs grouped by cluster, nearest first, ties by
    lowest index. Clusters smaller than ``per_cluster`` give all their members.
    """
    if per_cluster < 1:
        raise ParameterError("per_cluster must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    out = []
    for c in range(clusters.k):
        members = np.flatnonzero(clusters.assignments == c)
        if len(members) == 0:
            continue
        dist = np.sqrt(((points[members] - clusters.centroids[c]) ** 2).sum(1))
        order = np.lexsort((members, dist))[:per_cluster]
        out.extend((int(members[o]), float(dist[o])) for o in order)
    return out


# ------------------------------------------------------------------ baselines

def mof_select(features, quota: int) -> list[int]:
    """Herding: greedily keep the running mean of picks close to the full mean."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if quota > n or quota < 0:
        raise ParameterError(f"quota {quota} out of range for {n} points")
    mu = x.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    picked = []
    for k in range(quota):
        cand = (running + x) / (k + 1)
        err = np.sqrt(((mu - cand) ** 2).sum(1))
        err[~available] = np.inf
        i = int(np.argmin(err))
        picked.append(i)
        available[i] = False
        running += x[i]
    return picked


# -------------------------------------------------------------------- buffer

@dataclass
class BufferEntry:
    image: np.ndarray
    text: np.ndarray
    modality: int
    rank: float


@dataclass
class RehearsalBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    modalities: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError("buffer capacity must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict[int, int]:
        out = {m: 0 for m in self.modalities}
        for e in self.entries:
            out[e.modality] = out.get(e.modality, 0) + 1
        return out

    def quotas(self, modalities=None) -> dict[int, int]:
        """Even split of capacity; earlier modalities take the remainder first."""
        mods = list(self.modalities if modalities is None else modalities)
        if not mods:
            return {}
        base, extra = divmod(self.capacity, len(mods))
        return {m: base + (1 if i < extra else 0) for i, m in enumerate(mods)}

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.stack([e.image for e in self.entries]),
                np.stack([e.text for e in self.entries]),
                np.array([e.modality for e in self.entries]))


def rebalance_buffer(buffer: RehearsalBuffer, new_exemplars: list[BufferEntry],
                     modality: int) -> RehearsalBuffer:
    """Add a new modality's exemplars and shrink every modality to its quota.

    Within a modality the entries with the largest rank leave first.
    """
    if modality not in buffer.modalities:
        buffer.modalities.append(modality)
    quotas = buffer.quotas()
    grouped: dict[int, list[BufferEntry]] = {m: [] for m in buffer.modalities}
    for e in buffer.entries:
        if e.modality != modality:
            grouped.setdefault(e.modality, []).append(e)
    grouped[modality] = [e for e in buffer.entries if e.modality == modality] + list(new_exemplars)
    kept = []
    for m in buffer.modalities:
        group = grouped.get(m, [])
        order = sorted(range(len(group)), key=lambda i: (group[i].rank, i))
        kept.extend(group[i] for i in order[:quotas[m]])
    buffer.entries = kept
    return buffer


def reservoir_update(buffer: RehearsalBuffer, item: BufferEntry, n_seen: int,
                     rng: np.random.Generator) -> RehearsalBuffer:
    """Classic reservoir step for the ``n_seen``-th stream item (1-based)."""
    return reservoir_offer(buffer, [item], n_seen - 1, rng)


def reservoir_offer(buffer: RehearsalBuffer, items: list[BufferEntry], n_seen_before: int,
                    rng: np.random.Generator) -> RehearsalBuffer:
    """Reservoir-sample a run of items; one uniform draw per item."""
    if not items:
        return buffer
    draws = rng.random(len(items))
    cap = buffer.capacity
    for k, item in enumerate(items):
        n = n_seen_before + k + 1
        if item.modality not in buffer.modalities:
            buffer.modalities.append(item.modality)
        if len(buffer.entries) < cap:
            buffer.entries.append(item)
            continue
        slot = int(draws[k] * n)
        if slot < cap:
            buffer.entries[slot] = item
    return buffer


# ---------------------------------------------------------------- exemplars

def encode_normalized(params: EncoderParams, images: np.ndarray, texts: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    i = encode_images(params, images).data
    t = encode_texts(params, texts).data
    return (i / np.linalg.norm(i, axis=1, keepdims=True),
            t / np.linalg.norm(t, axis=1, keepdims=True))


def build_stage_exemplars(pool: PairBatch, params: EncoderParams, quota: int, k: int,
                          seed) -> list[BufferEntry]:
    """Pick ``quota`` representative pairs from the stage's pool.

    Joint embeddings are clustered into ``k`` groups; ceil(quota / k) nearest
    members per cluster are taken and the union is cut to ``quota`` by rank.
    """
    n = len(pool)
    if n == 0:
        raise ContractError("empty exemplar pool")
    quota = min(quota, n)
    k = max(1, min(k, quota))
    i_norm, t_norm = encode_normalized(params, pool.images, pool.texts)
    diag = np.sum(i_norm * t_norm, axis=1)
    joint = joint_embeddings(i_norm, t_norm, diag)
    clusters = kmeans(joint, k, seed)
    picks = select_representatives(clusters, joint, math.ceil(quota / k))
    picks.sort(key=lambda p: (p[1], p[0]))
    return [BufferEntry(pool.images[i], pool.texts[i], int(pool.modality[i]), r)
            for i, r in picks[:quota]]


def build_mof_exemplars(pool: PairBatch, params: EncoderParams, quota: int) -> list[BufferEntry]:
    """Herding on normalized image features; rank is the pick order."""
    quota = min(quota, len(pool))
    i_norm, _ = encode_normalized(params, pool.images, pool.texts)
    picks = mof_select(i_norm, quota)
    return [BufferEntry(pool.images[i], pool.texts[i], int(pool.modality[i]), float(r))
            for r, i in enumerate(picks)]


# -------------------------------------------------------------- mixed batch

@dataclass
class MixedBatch:
    images: np.ndarray
    texts: np.ndarray
    modality: np.ndarray
    replayed: np.ndarray
    current: PairBatch


def replay_count(batch_size: int, replay_fraction: float) -> int:
    return int(math.floor(replay_fraction * batch_size + 0.5))


def sample_mixed_batch(buffer: RehearsalBuffer, draw_current, batch_size: int,
                       replay_fraction: float, rng: np.random.Generator) -> MixedBatch:
    """round(rho * N) replayed pairs (with replacement) plus fresh current pairs.

    ``draw_current(n)`` returns a PairBatch of n new current-stage pairs.
    """
    if not 0.0 <= replay_fraction < 1.0:
        raise ParameterError("replay_fraction must lie in [0, 1)")
    n_replay = replay_count(batch_size, replay_fraction)
    if n_replay and len(buffer) == 0:
        log.debug("replay requested but buffer is empty; using current data only")
        n_replay = 0
    cur = draw_current(batch_size - n_replay)
    images, texts, mods = cur.images, cur.texts, cur.modality
    if n_replay:
        idx = rng.integers(0, len(buffer), size=n_replay)
        picked = [buffer.entries[i] for i in idx]
        images = np.vstack([images, np.stack([e.image for e in picked])])
        texts = np.vstack([texts, np.stack([e.text for e in picked])])
        mods = np.concatenate([mods, [e.modality for e in picked]])
    replayed = np.arange(batch_size) >= batch_size - n_replay
    perm = rng.permutation(batch_size)
    return MixedBatch(images[perm], texts[perm], np.asarray(mods)[perm], replayed[perm], cur)
