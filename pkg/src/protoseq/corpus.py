"""Conversation data model, jsonl ingestion, tokenization and embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMPTY_TOKEN = "<empty>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

DEFAULT_MAX_LEN = 35  # DailyDialog-style corpora
CHAT_MAX_LEN = 18  # live-chat corpora

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")
_MESSAGE_FIELDS = {"speaker", "text", "tokens", "label"}
_CONV_FIELDS = {"id", "messages", "meta"}


class CorpusFormatError(ValueError):
    """A corpus file line could not be parsed into a conversation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into alphanumeric runs and single punctuation marks.

    >>> tokenize("Ok, you have to wait 30min")
    ['ok', ',', 'you', 'have', 'to', 'wait', '30min']
    """
    tokens = _TOKEN_RE.findall(text.lower())
    return tokens if tokens else [EMPTY_TOKEN]


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str
    tokens: tuple[str, ...]
    label: str

    @classmethod
    def build(cls, speaker: str, text: str, label: str, tokens: Sequence[str] | None = None) -> "Message":
        toks = tuple(tokens) if tokens else tuple(tokenize(text))
        return cls(speaker=speaker, text=text, tokens=toks, label=label)


@dataclass(frozen=True)
class Conversation:
    id: str
    messages: tuple[Message, ...]
    meta: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if not self.messages:
            raise ValueError(f"conversation {self.id!r} has no messages")

    def __len__(self) -> int:
        return len(self.messages)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.messages]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "messages": [
                {"speaker": m.speaker, "text": m.text, "tokens": list(m.tokens), "label": m.label}
                for m in self.messages
            ],
            "meta": dict(self.meta),
        }


@dataclass
class Corpus:
    conversations: list[Conversation]
    label_set: list[str]
    split: str = "train"
    ignored_fields: int = 0

    def __post_init__(self):
        self.label_index = {lab: i for i, lab in enumerate(self.label_set)}
        for conv in self.conversations:
            for m in conv.messages:
                if m.label not in self.label_index:
                    raise ValueError(f"label {m.label!r} of conversation {conv.id!r} not in label set")

    def __len__(self) -> int:
        return len(self.conversations)

    def __iter__(self):
        return iter(self.conversations)

    def label_ids(self, conv: Conversation) -> np.ndarray:
        return np.array([self.label_index[m.label] for m in conv.messages], dtype=np.int64)

    def label_counts(self) -> Counter:
        return Counter(m.label for c in self.conversations for m in c.messages)

    def majority_label(self) -> str:
        counts = self.label_counts()
        return max(self.label_set, key=lambda lab: (counts.get(lab, 0), -self.label_index[lab]))

    def with_label_set(self, label_set: Sequence[str]) -> "Corpus":
        return Corpus(list(self.conversations), list(label_set), self.split, self.ignored_fields)

    def n_messages(self) -> int:
        return sum(len(c) for c in self.conversations)


def _parse_conversation(obj, lineno: int) -> tuple[Conversation, int]:
    if not isinstance(obj, dict):
        raise CorpusFormatError("expected a JSON object", lineno)
    ignored = len(set(obj) - _CONV_FIELDS)
    if "id" not in obj or "messages" not in obj:
        raise CorpusFormatError("conversation needs 'id' and 'messages'", lineno)
    raw_msgs = obj["messages"]
    if not isinstance(raw_msgs, list) or not raw_msgs:
        raise CorpusFormatError("'messages' must be a non-empty list", lineno)
    messages = []
    for j, m in enumerate(raw_msgs):
        if not isinstance(m, dict):
            raise CorpusFormatError(f"message {j} is not an object", lineno)
        for key in ("label", "text"):
            if key not in m:
                raise CorpusFormatError(f"message {j} is missing {key!r}", lineno)
        ignored += len(set(m) - _MESSAGE_FIELDS)
        tokens = m.get("tokens")
        if tokens is not None and not (isinstance(tokens, list) and all(isinstance(t, str) for t in tokens)):
            raise CorpusFormatError(f"message {j} has malformed 'tokens'", lineno)
        messages.append(Message.build(str(m.get("speaker", "")), str(m["text"]), str(m["label"]), tokens))
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise CorpusFormatError("'meta' must be an object", lineno)
    return Conversation(str(obj["id"]), tuple(messages), dict(meta)), ignored


def read_conversations(path: str | Path) -> tuple[list[Conversation], int]:
    convs, ignored = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            conv, n = _parse_conversation(obj, lineno)
            convs.append(conv)
            ignored += n
    return convs, ignored


def load_corpus(path: str | Path, format: str = "jsonl", split: str = "train",
                label_set: Sequence[str] | None = None) -> Corpus:
    """Load a jsonl conversation file.

    The label set is the sorted set of labels seen, unless ``label_set`` is
    given (use that to share indices between splits).
    """
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format {format!r}")
    convs, ignored = read_conversations(path)
    if ignored:
        log.warning("%s: ignored %d unknown schema fields", path, ignored)
    labels = sorted({m.label for c in convs for m in c.messages}) if label_set is None else list(label_set)
    return Corpus(convs, labels, split=split, ignored_fields=ignored)


def load_splits(paths: dict[str, str | Path]) -> dict[str, Corpus]:
    """Load several splits with one shared, sorted label set."""
    raw = {split: read_conversations(p) for split, p in paths.items()}
    labels = sorted({m.label for convs, _ in raw.values() for c in convs for m in c.messages})
    return {split: Corpus(convs, labels, split=split, ignored_fields=ign) for split, (convs, ign) in raw.items()}


def write_corpus(corpus: Corpus | Iterable[Conversation], path: str | Path) -> None:
    convs = corpus.conversations if isinstance(corpus, Corpus) else corpus
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for conv in convs:
            fh.write(json.dumps(conv.to_json(), ensure_ascii=False) + "\n")


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- padding


@dataclass(frozen=True)
class PaddedConversation:
    conversation: Conversation
    messages: tuple[Message, ...]
    mask: np.ndarray  # True on real positions

    @property
    def length(self) -> int:
        return len(self.messages)

    @property
    def n_padding(self) -> int:
        return int((~self.mask).sum())


def pad_or_trim(conv: Conversation, max_len: int) -> PaddedConversation:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    kept = conv.messages[:max_len]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(kept)] = True
    return PaddedConversation(conv, kept, mask)


# ---------------------------------------------------------------- vocabulary / embeddings


class Vocab:
    """Token to row index; row 0 is padding and row 1 the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_INDEX)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    @classmethod
    def from_corpora(cls, corpora: Iterable[Corpus]) -> "Vocab":
        vocab = cls()
        for corpus in corpora:
            for conv in corpus:
                for m in conv.messages:
                    for t in m.tokens:
                        vocab.add(t)
        return vocab


@dataclass
class EmbeddingMatrix:
    vocab: Vocab
    matrix: np.ndarray
    found: int = 0
    skipped_lines: int = 0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_embeddings(vocab: Vocab, dim: int = 300, seed: int = 0) -> EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    matrix[PAD_INDEX] = 0.0
    return EmbeddingMatrix(vocab, matrix)


def load_embeddings(path: str | Path, vocab: Vocab, dim: int = 300, seed: int = 0) -> EmbeddingMatrix:
    """Read text word vectors (optional ``count dim`` header) for ``vocab``.

    Tokens absent from the file keep a uniform(-0.05, 0.05) row drawn from
    ``seed``; malformed lines are skipped and counted.
    """
    emb = random_embeddings(vocab, dim, seed)
    found = skipped = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                if int(parts[1]) != dim:
                    raise ValueError(f"{path}: embedding dim {parts[1]} != configured dim {dim}")
                continue
            if len(parts) != dim + 1:
                skipped += 1
                continue
            try:
                row = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            if not np.all(np.isfinite(row)):
                skipped += 1
                continue
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx == PAD_INDEX:
                continue
            emb.matrix[idx] = row
            found += 1
    if skipped:
        log.warning("%s: skipped %d unreadable lines", path, skipped)
    emb.found, emb.skipped_lines = found, skipped
    return emb


# ---------------------------------------------------------------- synthetic corpora


@dataclass
class SynthSpec:
    """Parameters of a Markov-chain conversation generator.

    ``mix`` is the probability that a token comes from the message label's own
    lexicon rather than the shared confuser lexicon; it may be a scalar or one
    value per label.
    """

    labels: list[str]
    transitions: list[list[float]]
    mix: float | list[float] = 1.0
    initial: list[float] | None = None
    lexicon_size: int = 20
    confuser_size: int = 20
    n_conversations: int = 100
    length_range: tuple[int, int] = (4, 10)
    tokens_range: tuple[int, int] = (3, 8)
    speakers: tuple[str, ...] = ("A", "B")
    id_prefix: str = "syn"
    split: str = "train"
    shared_lexicons: dict[str, list[str]] | None = None

    def validate(self) -> None:
        k = len(self.labels)
        t = np.asarray(self.transitions, dtype=float)
        if t.shape != (k, k):
            raise ValueError(f"transition matrix must be {k}x{k}, got {t.shape}")
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must be probability distributions")
        if self.initial is not None:
            init = np.asarray(self.initial, dtype=float)
            if init.shape != (k,) or np.any(init < 0) or not np.isclose(init.sum(), 1.0):
                raise ValueError("initial distribution must be a probability vector over labels")
        mix = np.broadcast_to(np.asarray(self.mix, dtype=float), (k,))
        if np.any(mix < 0) or np.any(mix > 1):
            raise ValueError("mix weights must lie in [0, 1]")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError("length_range must satisfy 1 <= min <= max")
        lo, hi = self.tokens_range
        if not 1 <= lo <= hi:
            raise ValueError("tokens_range must satisfy 1 <= min <= max")

    def lexicons(self) -> tuple[dict[str, list[str]], list[str]]:
        if self.shared_lexicons is not None:
            lex = {lab: list(self.shared_lexicons[lab]) for lab in self.labels}
        else:
            lex = {lab: [f"w{i}x{j}" for j in range(self.lexicon_size)] for i, lab in enumerate(self.labels)}
        confusers = [f"c{j}" for j in range(self.confuser_size)]
        return lex, confusers


def generate_synthetic(spec: SynthSpec, seed: int) -> Corpus:
    spec.validate()
    rng = np.random.default_rng(seed)
    k = len(spec.labels)
    trans = np.asarray(spec.transitions, dtype=float)
    init = np.full(k, 1.0 / k) if spec.initial is None else np.asarray(spec.initial, dtype=float)
    mix = np.broadcast_to(np.asarray(spec.mix, dtype=float), (k,))
    lex, confusers = spec.lexicons()
    convs = []
    for c in range(spec.n_conversations):
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        state = int(rng.choice(k, p=init))
        messages = []
        for j in range(length):
            if j > 0:
                state = int(rng.choice(k, p=trans[state]))
            label = spec.labels[state]
            n_tok = int(rng.integers(spec.tokens_range[0], spec.tokens_range[1] + 1))
            own = rng.random(n_tok) < mix[state]
            tokens = [
                lex[label][rng.integers(len(lex[label]))] if o else confusers[rng.integers(len(confusers))]
                for o in own
            ]
            speaker = spec.speakers[j % len(spec.speakers)]
            messages.append(Message(speaker, " ".join(tokens), tuple(tokens), label))
        convs.append(Conversation(f"{spec.id_prefix}-{c:05d}", tuple(messages), {}))
    return Corpus(convs, sorted(spec.labels), split=spec.split)
