"""N-way K-shot Q-query episode sampling over whole conversations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Conversation, Corpus


class InfeasibleEpisodeError(RuntimeError):
    """The corpus cannot supply enough disjoint conversations for a label."""

    def __init__(self, label: str, needed: int, available: int):
        self.label = label
        self.needed = needed
        self.available = available
        super().__init__(
            f"cannot sample episode: label {label!r} needs {needed} conversations, "
            f"only {available} unused ones contain it"
        )


@dataclass(frozen=True)
class EpisodeSpec:
    n_ways: int = 7
    n_shots: int = 5
    n_queries: int = 10
    max_len: int = 35

    def __post_init__(self):
        for name in ("n_ways", "n_shots", "n_queries", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class Episode:
    support: dict[str, list[Conversation]]
    query: dict[str, list[Conversation]]

    def support_conversations(self) -> list[Conversation]:
        return [c for convs in self.support.values() for c in convs]

    def query_conversations(self) -> list[Conversation]:
        return [c for convs in self.query.values() for c in convs]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for role, groups in (("support", self.support), ("query", self.query)):
                for label, convs in groups.items():
                    for conv in convs:
                        rec = {"role": role, "target_label": label, **conv.to_json()}
                        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class EpisodeSampler:
    """Draws episodes from one corpus with its own seeded generator."""

    def __init__(self, corpus: Corpus, spec: EpisodeSpec, rng: np.random.Generator | int | None = None):
        self.corpus = corpus
        self.spec = spec
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        # Episodes span the full label set so label indices stay global.
        if spec.n_ways != len(corpus.label_set):
            raise ValueError(f"n_ways={spec.n_ways} must equal the {len(corpus.label_set)} corpus labels")
        self.labels = list(corpus.label_set)
        self.pools = label_pools(corpus, self.labels, spec.max_len)

    def check_feasible(self) -> None:
        need = self.spec.n_shots + self.spec.n_queries
        for lab in self.labels:
            if len(self.pools[lab]) < need:
                raise InfeasibleEpisodeError(lab, need, len(self.pools[lab]))

    def sample(self) -> Episode:
        return sample_episode(self.corpus, self.spec, self.rng, _pools=self.pools, _labels=self.labels)

    def __iter__(self):
        while True:
            yield self.sample()


def label_pools(corpus: Corpus, labels: list[str], max_len: int) -> dict[str, np.ndarray]:
    """Indices of conversations whose first ``max_len`` messages contain each label."""
    present = [{m.label for m in c.messages[:max_len]} for c in corpus.conversations]
    return {lab: np.array([i for i, p in enumerate(present) if lab in p], dtype=np.int64) for lab in labels}


def sample_episode(corpus: Corpus, spec: EpisodeSpec, rng: np.random.Generator,
                   _pools: dict | None = None, _labels: list | None = None) -> Episode:
    """Sample one episode.

    Classes are visited in a shuffled order; for each, ``n_shots + n_queries``
    conversations containing the label are drawn uniformly without
    replacement from those not yet used by the episode.
    """
    labels = _labels if _labels is not None else list(corpus.label_set)
    pools = _pools if _pools is not None else label_pools(corpus, labels, spec.max_len)
    need = spec.n_shots + spec.n_queries
    used = np.zeros(len(corpus.conversations), dtype=bool)
    support: dict[str, list[Conversation]] = {}
    query: dict[str, list[Conversation]] = {}
    for li in rng.permutation(len(labels)):
        lab = labels[li]
        pool = pools[lab]
        free = pool[~used[pool]]
        if len(free) < need:
            raise InfeasibleEpisodeError(lab, need, len(free))
        picked = rng.choice(free, size=need, replace=False)
        used[picked] = True
        support[lab] = [corpus.conversations[i] for i in picked[: spec.n_shots]]
        query[lab] = [corpus.conversations[i] for i in picked[spec.n_shots:]]
    order = {lab: i for i, lab in enumerate(labels)}
    return Episode(
        support=dict(sorted(support.items(), key=lambda kv: order[kv[0]])),
        query=dict(sorted(query.items(), key=lambda kv: order[kv[0]])),
    )
