"""Prototypical CRF head: prototypes, distance emissions, CRF likelihood and decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


class EmptyClassError(ValueError):
    pass


@dataclass
class PrototypeSet:
    centroids: Tensor  # [K, D], rows in global label order
    counts: np.ndarray  # support utterances per class


def compute_prototypes(support_reprs, labels: Sequence[int], n_classes: int) -> PrototypeSet:
    """Per-class mean of ``[N, D]`` support representations.

    Computed as a constant averaging matrix times the representations, so
    gradients reach every contributing vector.
    """
    reprs = nc.as_tensor(support_reprs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != reprs.shape[0]:
        raise ValueError("one label per support representation is required")
    onehot = np.zeros((n_classes, len(labels)))
    onehot[labels, np.arange(len(labels))] = 1.0
    counts = onehot.sum(axis=1)
    if np.any(counts == 0):
        missing = [int(k) for k in np.flatnonzero(counts == 0)]
        raise EmptyClassError(f"classes {missing} have no support utterances")
    return PrototypeSet(nc.matmul(onehot / counts[:, None], reprs), counts.astype(np.int64))


@dataclass
class EmissionMatrix:
    scores: Tensor  # [L, K]
    mask: np.ndarray  # [L], True on real positions

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def distance_scores(query_reprs, centroids) -> Tensor:
    """Negative squared euclidean distance, ``[L, K]``."""
    q = nc.as_tensor(query_reprs)
    c = nc.as_tensor(centroids)
    if q.shape[-1] != c.shape[-1]:
        raise ValueError(f"representation dims differ: {q.shape} vs {c.shape}")
    diff = q.reshape(q.shape[0], 1, q.shape[1]) - c.reshape(1, *c.shape)
    return -nc.tsum(nc.square(diff), axis=2)


def emissions(query_reprs, protos: PrototypeSet, mask: np.ndarray | None = None) -> EmissionMatrix:
    scores = distance_scores(query_reprs, protos.centroids)
    m = np.ones(scores.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return EmissionMatrix(scores, m)


class CrfParams:
    """Transition scores over K labels plus START (index K) and STOP (index K+1).

    Stored as one (K+2)x(K+2) parameter; entries into START and out of STOP
    are never read, :meth:`full_matrix` shows them as -inf.
    """

    def __init__(self, n_labels: int, rng: np.random.Generator | None = None, scale: float = 0.1):
        self.n_labels = n_labels
        size = n_labels + 2
        init = np.zeros((size, size)) if rng is None else rng.uniform(-scale, scale, size=(size, size))
        self.transitions = Parameter(init, name="transitions")

    @property
    def start(self) -> int:
        return self.n_labels

    @property
    def stop(self) -> int:
        return self.n_labels + 1

    def parameters(self) -> list[Parameter]:
        return [self.transitions]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        return [(prefix + "transitions", self.transitions)]

    def full_matrix(self) -> np.ndarray:
        t = self.transitions.data.copy()
        t[:, self.start] = -np.inf
        t[self.stop, :] = -np.inf
        return t

    @classmethod
    def from_arrays(cls, pairwise, start, stop) -> "CrfParams":
        pairwise = np.asarray(pairwise, dtype=float)
        k = pairwise.shape[0]
        crf = cls(k)
        crf.transitions.data[:k, :k] = pairwise
        crf.transitions.data[k, :k] = start
        crf.transitions.data[:k, k + 1] = stop
        return crf

    def parts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.n_labels
        t = self.transitions.data
        return t[:k, :k], t[self.start, :k], t[:k, self.stop]


def _real_rows(em: EmissionMatrix) -> int:
    n = em.n_real
    if n and not em.mask[:n].all():
        raise ValueError("masked positions must form a tail")
    return n


def crf_log_likelihood(em: EmissionMatrix, crf: CrfParams, gold: Sequence[int]) -> Tensor:
    """log p(gold | emissions) under the linear-chain CRF, over unmasked rows."""
    n = _real_rows(em)
    gold = np.asarray(gold, dtype=np.int64)
    k = crf.n_labels
    if len(gold) != n:
        raise ValueError(f"gold has {len(gold)} labels for {n} unmasked positions")
    if n == 0:
        return Tensor(0.0)
    if np.any(gold < 0) or np.any(gold >= k):
        raise ValueError(f"gold labels must lie in [0, {k})")
    trans = crf.transitions
    scores = em.scores[:n]
    pair = trans[:k, :k]
    alpha = trans[crf.start, :k] + scores[0]
    for t in range(1, n):
        alpha = nc.logsumexp(alpha.reshape(k, 1) + pair, axis=0) + scores[t]
    log_z = nc.logsumexp(alpha + trans[:k, crf.stop], axis=0)
    prev = np.concatenate([[crf.start], gold])
    nxt = np.concatenate([gold, [crf.stop]])
    gold_score = nc.tsum(scores[np.arange(n), gold]) + nc.tsum(trans[prev, nxt])
    return gold_score - log_z


def crf_nll_batch(scores: Tensor, mask: np.ndarray, gold: np.ndarray, crf: CrfParams) -> Tensor:
    """Summed negative log-likelihood of B tail-padded sequences.

    ``scores`` is ``[B, L, K]``; ``gold`` is ``[B, L]`` (ignored where masked).
    Every sequence needs at least one real position.
    """
    b, l_max, k = scores.shape
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ValueError("every sequence needs a real position")
    trans = crf.transitions
    pair = trans[:k, :k].reshape(1, k, k)
    alpha = scores[:, 0, :] + trans[crf.start, :k]
    for t in range(1, l_max):
        step = nc.logsumexp(alpha.reshape(b, k, 1) + pair, axis=1) + scores[:, t, :]
        m = mask[:, t]
        if m.all():
            alpha = step
        else:
            keep = m[:, None].astype(float)
            alpha = step * keep + alpha * (1.0 - keep)
    log_z = nc.logsumexp(alpha + trans[:k, crf.stop], axis=1)

    bi, ti = np.nonzero(mask)
    yi = gold[bi, ti]
    emit = nc.tsum(scores[bi, ti, yi])
    prev, nxt = [], []
    for row in range(b):
        y = gold[row, : lengths[row]]
        prev.append(np.concatenate([[crf.start], y]))
        nxt.append(np.concatenate([y, [crf.stop]]))
    trans_score = nc.tsum(trans[np.concatenate(prev), np.concatenate(nxt)])
    return nc.tsum(log_z) - emit - trans_score


def path_score(em_scores: np.ndarray, crf: CrfParams, path: Sequence[int]) -> float:
    pair, start, stop = crf.parts()
    path = list(path)
    s = start[path[0]] + stop[path[-1]]
    s += sum(em_scores[t, y] for t, y in enumerate(path))
    s += sum(pair[a, b] for a, b in zip(path[:-1], path[1:]))
    return float(s)


def viterbi_decode(em: EmissionMatrix, crf: CrfParams) -> list[int]:
    """Best label path over the unmasked rows; ties go to the lower index."""
    n = _real_rows(em)
    if n == 0:
        raise ValueError("viterbi needs at least one unmasked row")
    scores = em.scores.data[:n] if isinstance(em.scores, Tensor) else np.asarray(em.scores)[:n]
    pair, start, stop = crf.parts()
    delta = start + scores[0]
    back = np.zeros((n, len(start)), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + pair  # [prev, next]
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(len(start))] + scores[t]
    best = int(np.argmax(delta + stop))
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    return path[::-1]


def predict_nocrf(em: EmissionMatrix) -> list[int]:
    """Nearest prototype per unmasked row (argmax of negative distance)."""
    n = _real_rows(em)
    scores = em.scores.data if isinstance(em.scores, Tensor) else np.asarray(em.scores)
    return [int(k) for k in np.argmax(scores[:n], axis=1)]


def softmax_nll_batch(scores: Tensor, gold: np.ndarray) -> Tensor:
    """Summed per-utterance cross-entropy of softmax over emission rows, ``scores`` [N, K]."""
    rows = np.arange(scores.shape[0])
    return nc.tsum(nc.logsumexp(scores, axis=1)) - nc.tsum(scores[rows, gold])


def episode_loss(model, episode, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Mean over query conversations of the sequence negative log-likelihood.

    CRF variants use the chain likelihood; the others sum per-utterance
    softmax cross-entropy over each conversation.  Prototypes are rebuilt
    from the episode's support set inside the same graph.
    """
    support = episode.support_conversations()
    query = episode.query_conversations()
    scores, gold, spans, _ = model.episode_scores(support, query, training=training, rng=rng)
    n_conv = len(spans)
    if model.crf is None:
        return softmax_nll_batch(scores, gold) / float(n_conv)
    l_max = max(n for _, n in spans)
    n_q, k = scores.shape
    index = np.full((n_conv, l_max), n_q, dtype=np.int64)
    for row, (off, n) in enumerate(spans):
        index[row, :n] = np.arange(off, off + n)
    mask = index < n_q
    padded = nc.concat([scores, Tensor(np.zeros((1, k)))], axis=0)[index]
    gold_padded = np.concatenate([gold, [0]])[index]
    return crf_nll_batch(padded, mask, gold_padded, model.crf) / float(n_conv)
