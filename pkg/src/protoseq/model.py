"""Variant wiring: utterance encoder -> optional context encoder -> optional MLP -> prototype head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import Conversation, EmbeddingMatrix, Vocab
from .encoders import MLP, BiLSTM, CNNEncoder, avg_batch
from .numcore import Parameter, Tensor
from .protocrf import CrfParams, viterbi_decode, predict_nocrf, EmissionMatrix, compute_prototypes, distance_scores

FORMAT_VERSION = 1

VARIANTS = {
    "proto": dict(utterance="avg", context=False, mlp=False, crf=False),
    "warmproto-crf": dict(utterance="bilstm", context=False, mlp=False, crf=True),
    "protoseq": dict(utterance="cnn", context=True, mlp=True, crf=True),
    "protoseq-cnn": dict(utterance="cnn", context=False, mlp=True, crf=True),
    "protoseq-avg": dict(utterance="avg", context=True, mlp=True, crf=True),
    "protoseq-nocrf": dict(utterance="cnn", context=True, mlp=True, crf=False),
}
RESERVED_VARIANTS = ("protoseq-tr",)


class UnknownVariantError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")


@dataclass
class ModelConfig:
    variant: str = "protoseq"
    labels: list[str] = field(default_factory=list)
    emb_dim: int = 300
    cnn_widths: tuple[int, ...] = (3, 4, 5)
    cnn_filters: int = 50
    hidden: int = 150
    mlp_hidden: int = 128
    proto_dim: int = 128
    dropout: float = 0.2
    max_len: int = 35

    def __post_init__(self):
        if self.variant in RESERVED_VARIANTS:
            raise NotImplementedError(f"variant {self.variant!r} is reserved but not implemented")
        if self.variant not in VARIANTS:
            raise UnknownVariantError(self.variant)
        self.cnn_widths = tuple(self.cnn_widths)

    @property
    def wiring(self) -> dict:
        return VARIANTS[self.variant]

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        return d


class ProtoSeqModel:
    """Encodes conversations into prototype-space vectors and decodes episodes."""

    def __init__(self, config: ModelConfig, embeddings: EmbeddingMatrix, seed: int = 0):
        if embeddings.dim != config.emb_dim:
            raise ValueError(f"embedding dim {embeddings.dim} != configured {config.emb_dim}")
        self.config = config
        self.embeddings = embeddings
        self.label_index = {lab: i for i, lab in enumerate(config.labels)}
        rng = np.random.default_rng(seed)
        wiring = config.wiring
        self.cnn = self.utt_lstm = self.context = self.mlp = self.crf = None
        if wiring["utterance"] == "cnn":
            self.cnn = CNNEncoder(config.emb_dim, rng, config.cnn_widths, config.cnn_filters)
            d = self.cnn.out_dim
        elif wiring["utterance"] == "bilstm":
            self.utt_lstm = BiLSTM(config.emb_dim, config.hidden, rng)
            d = self.utt_lstm.out_dim
        else:
            d = config.emb_dim
        if wiring["context"]:
            self.context = BiLSTM(d, config.hidden, rng)
            d = self.context.out_dim
        if wiring["mlp"]:
            self.mlp = MLP(d, rng, config.mlp_hidden, config.proto_dim, config.dropout)
            d = config.proto_dim
        self.repr_dim = d
        if wiring["crf"]:
            self.crf = CrfParams(config.n_labels, rng)
        self._id_cache: dict[tuple, np.ndarray] = {}

    # ---------------------------------------------------------------- parameters

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for name in ("cnn", "utt_lstm", "context", "mlp", "crf"):
            part = getattr(self, name)
            if part is not None:
                out.extend(part.named_parameters(name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data[...] = state[name]

    def checksum(self) -> float:
        return float(sum(np.sum(p.data * (i + 1)) for i, p in enumerate(self.parameters())))

    # ---------------------------------------------------------------- encoding

    def _token_ids(self, tokens: tuple) -> np.ndarray:
        ids = self._id_cache.get(tokens)
        if ids is None:
            ids = self._id_cache[tokens] = np.array(self.embeddings.vocab.encode(tokens), dtype=np.int64)
        return ids

    def utterance_vectors(self, messages: Sequence, training: bool = False,
                          rng: np.random.Generator | None = None) -> Tensor:
        ids = [self._token_ids(m.tokens) for m in messages]
        lengths = np.array([len(i) for i in ids])
        t_max = int(lengths.max())
        padded = np.zeros((len(ids), t_max), dtype=np.int64)
        for row, i in enumerate(ids):
            padded[row, : len(i)] = i
        embeds = self.embeddings.matrix[padded]
        kind = self.config.wiring["utterance"]
        if kind == "cnn":
            # cnn output is already max-pooled relu activations, hence non-negative
            return self.cnn(embeds, lengths)
        if kind == "bilstm":
            mask = np.arange(t_max)[None, :] < lengths[:, None]
            _, last_fwd, first_bwd = self.utt_lstm(Tensor(embeds), mask)
            return nc.concat([last_fwd, first_bwd], axis=1)
        return avg_batch(embeds, lengths)

    def encode(self, convs: Sequence[Conversation], training: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray, list[tuple[int, int]]]:
        """Representations of every kept message of ``convs``, flattened in order.

        Returns ``(reprs [U, D], gold label ids [U], (offset, length) per conversation)``.
        Conversations are trimmed to ``max_len`` messages.
        """
        max_len = self.config.max_len
        kept = [c.messages[:max_len] for c in convs]
        messages = [m for msgs in kept for m in msgs]
        gold = np.array([self.label_index[m.label] for m in messages], dtype=np.int64)
        spans, off = [], 0
        for msgs in kept:
            spans.append((off, len(msgs)))
            off += len(msgs)
        vecs = self.utterance_vectors(messages, training, rng)
        if self.context is not None:
            vecs = self._contextualize(vecs, spans)
        if self.mlp is not None:
            vecs = self.mlp(vecs, training=training, rng=rng)
        return vecs, gold, spans

    def _contextualize(self, vecs: Tensor, spans: list[tuple[int, int]]) -> Tensor:
        n_utt, d = vecs.shape
        l_max = max(n for _, n in spans)
        index = np.full((len(spans), l_max), n_utt, dtype=np.int64)  # n_utt points at a zero row
        for row, (off, n) in enumerate(spans):
            index[row, :n] = np.arange(off, off + n)
        mask = index < n_utt
        padded = nc.concat([vecs, Tensor(np.zeros((1, d)))], axis=0)[index]
        out, _, _ = self.context(padded, mask)
        flat = out.reshape(len(spans) * l_max, out.shape[2])
        return flat[np.flatnonzero(mask.reshape(-1))]

    # ---------------------------------------------------------------- episodes

    def episode_scores(self, support: Sequence[Conversation], query: Sequence[Conversation],
                       training: bool = False, rng: np.random.Generator | None = None):
        """Encode support + query jointly, build prototypes, return query emissions.

        Returns ``(scores [Uq, K], query gold [Uq], query spans, prototypes)``.
        """
        reprs, gold, spans = self.encode(list(support) + list(query), training, rng)
        n_sup = sum(n for _, n in spans[: len(support)])
        protos = compute_prototypes(reprs[:n_sup], gold[:n_sup], self.config.n_labels)
        scores = distance_scores(reprs[n_sup:], protos.centroids)
        q_spans = [(off - n_sup, n) for off, n in spans[len(support):]]
        return scores, gold[n_sup:], q_spans, protos

    def predict(self, support: Sequence[Conversation], query: Sequence[Conversation]) -> list[tuple[np.ndarray, np.ndarray]]:
        """Decode each query conversation; returns (gold, predicted) label-id arrays."""
        scores, gold, spans, _ = self.episode_scores(support, query, training=False)
        out = []
        for off, n in spans:
            em = EmissionMatrix(scores.data[off: off + n], np.ones(n, dtype=bool))
            pred = viterbi_decode(em, self.crf) if self.crf is not None else predict_nocrf(em)
            out.append((gold[off: off + n], np.asarray(pred, dtype=np.int64)))
        return out

    def predict_episode(self, episode) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.predict(episode.support_conversations(), episode.query_conversations())

    # ---------------------------------------------------------------- persistence

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "vocab": self.embeddings.vocab.itos,
            "params": {name: list(p.data.shape) for name, p in self.named_parameters()},
            "extra": extra or {},
        }
        arrays = {f"param/{name}": p.data for name, p in self.named_parameters()}
        arrays["embeddings"] = self.embeddings.matrix
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "ProtoSeqModel":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported model format version {meta.get('format_version')}")
            config = ModelConfig(**meta["config"])
            if expect is not None and expect.to_dict() != config.to_dict():
                raise ValueError("saved model config does not match the requested config")
            vocab = Vocab()
            for tok in meta["vocab"][2:]:
                vocab.add(tok)
            emb = EmbeddingMatrix(vocab, data["embeddings"].copy())
            model = cls(config, emb, seed=0)
            state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        model.load_state_dict(state)
        model.extra = meta.get("extra", {})
        return model
