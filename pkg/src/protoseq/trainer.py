"""Episodic training with early stopping, and the evaluation metrics."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import Corpus, EmbeddingMatrix
from .episodes import Episode, EpisodeSampler, EpisodeSpec
from .model import ModelConfig, ProtoSeqModel
from .protocrf import episode_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class F1Result:
    per_class: dict
    micro: float
    weighted: float
    empty: bool = False  # no position survived the exclusion


def _check_lengths(pred, gold) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"pred has {len(pred)} labels, gold has {len(gold)}")


def _prf(tp: float, n_pred: float, n_gold: float) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def confusion_matrix(pred: Sequence, gold: Sequence, labels: Sequence) -> np.ndarray:
    """Counts with gold labels on rows and predictions on columns."""
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    if len(gold):
        np.add.at(cm, (np.array([index[g] for g in gold]), np.array([index[p] for p in pred])), 1)
    return cm


def f1_scores(pred: Sequence, gold: Sequence, excluded: Sequence = (), labels: Sequence | None = None) -> F1Result:
    """Per-class P/R/F1 over all positions; micro and weighted F1 without excluded labels.

    Positions whose gold label is excluded are dropped before the micro and
    weighted scores; predicting an excluded label elsewhere counts as an error.
    Micro F1 is therefore the accuracy on the retained positions.
    """
    _check_lengths(pred, gold)
    pred, gold = list(pred), list(gold)
    labels = list(labels) if labels is not None else sorted(set(pred) | set(gold))
    excluded = set(excluded)
    cm = confusion_matrix(pred, gold, labels)
    per_class = {}
    for i, lab in enumerate(labels):
        p, r, f = _prf(cm[i, i], cm[:, i].sum(), cm[i, :].sum())
        per_class[lab] = ClassScores(p, r, f, int(cm[i, :].sum()))

    keep = np.array([lab not in excluded for lab in labels], dtype=bool)
    kept = cm[keep]  # rows with retained gold labels
    n_kept = int(kept.sum())
    if n_kept == 0:
        return F1Result(per_class, 0.0, 0.0, empty=True)
    kept_idx = np.flatnonzero(keep)
    correct = int(sum(cm[i, i] for i in kept_idx))
    micro = correct / n_kept
    weighted = 0.0
    for i in kept_idx:
        support = cm[i, :].sum()
        _, _, f = _prf(cm[i, i], kept[:, i].sum(), support)
        weighted += support * f
    return F1Result(per_class, micro, weighted / n_kept)


def mcc(pred: Sequence, gold: Sequence, labels: Sequence | None = None) -> float:
    """Multi-class Matthews correlation (Gorodkin); 0 when undefined."""
    _check_lengths(pred, gold)
    labels = list(labels) if labels is not None else sorted(set(pred) | set(gold))
    cm = confusion_matrix(list(pred), list(gold), labels).astype(float)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    cov_pt = c * s - p @ t
    cov_pp = s * s - p @ p
    cov_tt = s * s - t @ t
    if cov_pp == 0 or cov_tt == 0:
        return 0.0
    return float(cov_pt / np.sqrt(cov_pp * cov_tt))


@dataclass
class MetricsReport:
    labels: list
    excluded: list
    per_class: dict
    f1_micro: float
    f1_weighted: float
    mcc: float
    episode_f1_micro: list = field(default_factory=list)
    episode_f1_weighted: list = field(default_factory=list)
    episode_mcc: list = field(default_factory=list)
    n_positions: int = 0
    flags: list = field(default_factory=list)

    @staticmethod
    def _spread(values: list) -> dict:
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            return {"mean": 0.0, "std": 0.0, "variance": 0.0}
        return {"mean": float(arr.mean()), "std": float(arr.std()), "variance": float(arr.var())}

    @property
    def episodes(self) -> int:
        return len(self.episode_f1_micro)

    def summary(self) -> dict:
        return {
            "f1_micro": self._spread(self.episode_f1_micro),
            "f1_weighted": self._spread(self.episode_f1_weighted),
            "mcc": self._spread(self.episode_mcc),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): asdict(v) if isinstance(v, ClassScores) else v for k, v in self.per_class.items()}
        d["episodes"] = self.episodes
        d["episode_summary"] = self.summary()
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.pop("episodes", None)
        d.pop("episode_summary", None)
        d["per_class"] = {k: ClassScores(**v) for k, v in d["per_class"].items()}
        return cls(**d)

    def render(self) -> str:
        s = self.summary()
        lines = [
            f"{'':<16}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}",
        ]
        for lab, sc in self.per_class.items():
            mark = " *" if lab in self.excluded else ""
            lines.append(f"{str(lab) + mark:<16}{sc.precision:>10.4f}{sc.recall:>10.4f}{sc.f1:>10.4f}{sc.support:>10d}")
        lines.append("")
        lines.append(f"{'metric':<16}{'pooled':>10}{'ep. mean':>10}{'ep. std':>10}")
        for key, val in (("f1_weighted", self.f1_weighted), ("mcc", self.mcc), ("f1_micro", self.f1_micro)):
            lines.append(f"{key:<16}{val:>10.4f}{s[key]['mean']:>10.4f}{s[key]['std']:>10.4f}")
        lines.append(f"episodes: {self.episodes}   positions: {self.n_positions}")
        if self.excluded:
            lines.append(f"excluded from F1: {', '.join(map(str, self.excluded))} (marked *)")
        for flag in self.flags:
            lines.append(f"flag: {flag}")
        return "\n".join(lines)


def score_predictions(pairs: Sequence[tuple[Sequence, Sequence]], labels: Sequence, excluded: Sequence,
                      episode_pairs: Sequence[Sequence[tuple]] | None = None) -> MetricsReport:
    """Build a report from (gold, pred) pairs, optionally grouped per episode."""
    gold = [g for gs, _ in pairs for g in gs]
    pred = [p for _, ps in pairs for p in ps]
    f1 = f1_scores(pred, gold, excluded, labels)
    report = MetricsReport(
        labels=list(labels), excluded=list(excluded), per_class=f1.per_class,
        f1_micro=f1.micro, f1_weighted=f1.weighted, mcc=mcc(pred, gold, labels), n_positions=len(gold),
    )
    if f1.empty:
        report.flags.append("no positions outside the excluded labels; micro/weighted F1 reported as 0")
    for group in episode_pairs or [pairs]:
        g = [x for gs, _ in group for x in gs]
        p = [x for _, ps in group for x in ps]
        ef = f1_scores(p, g, excluded, labels)
        report.episode_f1_micro.append(ef.micro)
        report.episode_f1_weighted.append(ef.weighted)
        report.episode_mcc.append(mcc(p, g, labels))
    return report


# ---------------------------------------------------------------- evaluation


def _decode_episode(model: ProtoSeqModel, episode: Episode) -> list[tuple[list, list]]:
    labels = model.config.labels
    with nc.no_grad():
        out = model.predict_episode(episode)
    return [([labels[i] for i in g], [labels[i] for i in p]) for g, p in out]


def evaluate(model: ProtoSeqModel, corpus: Corpus, spec: EpisodeSpec, n_episodes: int,
             excluded_labels: Sequence[str] = (), seed: int | np.random.Generator = 0,
             threads: int = 1) -> MetricsReport:
    """Decode the query sets of ``n_episodes`` sampled episodes and score them.

    Headline scores pool counts over all episodes; per-episode scores give
    the spread.  Dropout is off and parameters are never touched.
    """
    sampler = EpisodeSampler(corpus, spec, seed)
    episodes = [sampler.sample() for _ in range(n_episodes)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_episode = list(pool.map(lambda ep: _decode_episode(model, ep), episodes))
    else:
        per_episode = [_decode_episode(model, ep) for ep in episodes]
    pairs = [pair for group in per_episode for pair in group]
    return score_predictions(pairs, model.config.labels, excluded_labels, per_episode)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    variant: str = "protoseq"
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    episodes_per_epoch: int = 100
    val_episodes: int = 100
    test_episodes: int = 1000
    max_epochs: int = 1000
    patience: int = 100
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    excluded: list[str] = field(default_factory=list)
    model: dict = field(default_factory=dict)  # ModelConfig overrides (emb_dim, hidden, ...)

    def __post_init__(self):
        if isinstance(self.episode, dict):
            self.episode = EpisodeSpec(**self.episode)
        self.betas = tuple(self.betas)
        for name in ("episodes_per_epoch", "val_episodes", "test_episodes", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def model_config(self, labels: Sequence[str]) -> ModelConfig:
        return ModelConfig(variant=self.variant, labels=list(labels), max_len=self.episode.max_len, **self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1_micro: float
    best: bool
    seconds: float = 0.0

    def line(self) -> str:
        flag = " *" if self.best else ""
        return f"epoch {self.epoch:4d}  loss {self.train_loss:.6f}  val_f1_micro {self.val_f1_micro:.4f}{flag}"


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = -1.0
    stopped_early: bool = False

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(asdict(rec)) + "\n")


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "train", "dropout", "val", "test")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def train(config: TrainConfig, splits: dict[str, Corpus], embeddings: EmbeddingMatrix,
          on_epoch=None) -> tuple[ProtoSeqModel, History]:
    """Episodic training; restores the weights of the best validation epoch."""
    train_corpus, val_corpus = splits["train"], splits["val"]
    for name, corpus in splits.items():
        EpisodeSampler(corpus, config.episode, 0).check_feasible()
    streams = seed_streams(config.seed)
    init_seed = int(streams["init"].integers(2**31))
    model = ProtoSeqModel(config.model_config(train_corpus.label_set), embeddings, seed=init_seed)
    params = model.parameters()
    sampler = EpisodeSampler(train_corpus, config.episode, streams["train"])
    val_seed_rng = streams["val"]
    history = History()
    best_state = model.state_dict()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(config.episodes_per_epoch):
            episode = sampler.sample()
            with nc.Tape() as tape:
                loss = episode_loss(model, episode, rng=streams["dropout"], training=True)
            losses.append(loss.item())
            if params:
                nc.backward(loss, tape)
                nc.adam_step(params, config.lr, config.betas, config.eps)
            tape.clear()
        val = evaluate(model, val_corpus, config.episode, config.val_episodes, config.excluded,
                       seed=int(val_seed_rng.integers(2**31)))
        improved = val.f1_micro > history.best_val
        if improved:
            history.best_val, history.best_epoch = val.f1_micro, epoch
            best_state = model.state_dict()
        rec = EpochRecord(epoch, float(np.mean(losses)), val.f1_micro, improved, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if epoch - history.best_epoch >= config.patience:
            history.stopped_early = epoch < config.max_epochs
            break
    model.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------- correlation analysis


@dataclass
class CorrelationResult:
    emotions: list[str]
    levels: list[int]
    r: np.ndarray  # [emotions, levels]
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"emotions": self.emotions, "levels": self.levels, "r": self.r.tolist(), "flags": self.flags}


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson r, or None when either variable has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx @ dx) * (dy @ dy))
    if denom == 0:
        return None
    return float((dx @ dy) / denom)


def emotion_satisfaction_correlation(corpus: Corpus, speaker: str | None = None,
                                     levels: Sequence[int] = range(-3, 4),
                                     emotions: Sequence[str] | None = None,
                                     key: str = "satisfaction") -> CorrelationResult:
    """Pearson r between "emotion present in a (speaker's) message" and "satisfaction == level".

    Both variables are binary per-conversation indicators; conversations
    without a satisfaction value are skipped.
    """
    convs = [c for c in corpus if c.meta.get(key) is not None]
    for c in convs:
        v = c.meta[key]
        if not isinstance(v, int) or not -3 <= v <= 3:
            raise ValueError(f"conversation {c.id!r}: satisfaction must be an integer in [-3, 3], got {v!r}")
    emotions = list(emotions) if emotions is not None else list(corpus.label_set)
    levels = list(levels)
    sat = np.array([c.meta[key] for c in convs])
    r = np.zeros((len(emotions), len(levels)))
    flags = []
    for i, emo in enumerate(emotions):
        present = [float(any(m.label == emo and (speaker is None or m.speaker == speaker) for m in c.messages))
                   for c in convs]
        for j, lev in enumerate(levels):
            val = pearson(present, (sat == lev).astype(float))
            if val is None:
                flags.append(f"zero variance for ({emo}, {lev}); r set to 0")
                val = 0.0
            r[i, j] = val
    return CorrelationResult(emotions, levels, r, flags)
