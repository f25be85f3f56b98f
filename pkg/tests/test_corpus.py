import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseq.corpus import (
    Conversation,
    CorpusFormatError,
    Message,
    SynthSpec,
    Vocab,
    generate_synthetic,
    load_corpus,
    load_embeddings,
    load_splits,
    pad_or_trim,
    random_embeddings,
    tokenize,
    write_corpus,
)

from conftest import uniform_synth


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")
    return path


def _conv(cid, *labels):
    return {"id": cid, "messages": [{"speaker": "A", "text": f"hi {lab}", "label": lab} for lab in labels]}


@pytest.mark.parametrize("text,expected", [
    ("Ok, you have to wait 30min", ["ok", ",", "you", "have", "to", "wait", "30min"]),
    ("", ["<empty>"]),
    ("....even though", [".", ".", ".", ".", "even", "though"]),
    ("   ", ["<empty>"]),
    ("Héllo WORLD!", ["héllo", "world", "!"]),
])
def test_tokenize_examples(text, expected):
    assert tokenize(text) == expected


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_tokenize_idempotent_on_joined_output(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks or toks == ["<empty>"]


def test_load_minimal_file(tmp_path):
    p = _write_lines(tmp_path / "c.jsonl", [_conv("1", "b", "a"), _conv("2", "a")])
    corpus = load_corpus(p)
    assert len(corpus) == 2
    assert corpus.label_set == ["a", "b"]
    assert list(corpus.label_ids(corpus.conversations[0])) == [1, 0]


def test_missing_label_reports_line(tmp_path):
    bad = _conv("2", "a")
    del bad["messages"][0]["label"]
    p = _write_lines(tmp_path / "c.jsonl", [_conv("1", "a"), bad])
    with pytest.raises(CorpusFormatError) as info:
        load_corpus(p)
    assert info.value.line == 2 and "line 2" in str(info.value)


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(_conv("1", "a")) + "\n{not json\n")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(p)


def test_unknown_fields_ignored_and_counted(tmp_path):
    obj = _conv("1", "a")
    obj["extra"] = 1
    obj["messages"][0]["mood"] = "x"
    corpus = load_corpus(_write_lines(tmp_path / "c.jsonl", [obj]))
    assert corpus.ignored_fields == 2


def test_pretokenized_input_overrides_tokenizer(tmp_path):
    obj = {"id": "1", "messages": [{"speaker": "A", "text": "Ok, go", "tokens": ["OK", "go"], "label": "a"}]}
    corpus = load_corpus(_write_lines(tmp_path / "c.jsonl", [obj]))
    assert corpus.conversations[0].messages[0].tokens == ("OK", "go")


def test_splits_share_label_indices(tmp_path):
    tr = _write_lines(tmp_path / "tr.jsonl", [_conv("1", "b")])
    te = _write_lines(tmp_path / "te.jsonl", [_conv("2", "a", "c")])
    splits = load_splits({"train": tr, "test": te})
    assert splits["train"].label_set == splits["test"].label_set == ["a", "b", "c"]


def test_round_trip(tmp_path):
    corpus = uniform_synth(20, seed=3)
    corpus.conversations[0] = Conversation("x", corpus.conversations[0].messages, {"satisfaction": -2})
    write_corpus(corpus, tmp_path / "c.jsonl")
    back = load_corpus(tmp_path / "c.jsonl")
    assert back.conversations == corpus.conversations
    assert back.label_set == corpus.label_set


def test_majority_label():
    msgs = tuple(Message.build("A", "t", lab) for lab in ["b", "a", "b"])
    from protoseq.corpus import Corpus
    assert Corpus([Conversation("1", msgs)], ["a", "b"]).majority_label() == "b"


@pytest.mark.parametrize("length,max_len,real,pad", [(8, 35, 8, 27), (40, 35, 35, 0), (35, 35, 35, 0), (1, 1, 1, 0)])
def test_pad_or_trim(length, max_len, real, pad):
    conv = Conversation("c", tuple(Message.build("A", str(i), "a") for i in range(length)))
    view = pad_or_trim(conv, max_len)
    assert view.length == real and view.n_padding == pad
    assert int(view.mask.sum()) + view.n_padding == max_len
    assert [m.text for m in view.messages] == [str(i) for i in range(real)]


def _emb_file(path, rows, header=None):
    lines = [header] if header else []
    lines += [tok + " " + " ".join(f"{v:.6f}" for v in vec) for tok, vec in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_embeddings_passthrough_and_unknown(tmp_path):
    vec = np.linspace(-1, 1, 300)
    vocab = Vocab(["the", "zzz"])
    p = _emb_file(tmp_path / "e.txt", [("the", vec), ("other", -vec)], header="2 300")
    emb = load_embeddings(p, vocab, dim=300, seed=4)
    assert np.allclose(emb.matrix[vocab.index("the")], vec, atol=1e-6)
    unk = emb.matrix[vocab.index("zzz")]
    assert np.all(np.abs(unk) < 0.05)
    assert np.array_equal(unk, load_embeddings(p, vocab, dim=300, seed=4).matrix[vocab.index("zzz")])
    assert np.all(emb.matrix[0] == 0)
    assert emb.found == 1


def test_load_embeddings_header_dim_mismatch(tmp_path):
    p = _emb_file(tmp_path / "e.txt", [("the", np.zeros(200))], header="2 200")
    with pytest.raises(ValueError, match="200"):
        load_embeddings(p, Vocab(["the"]), dim=300)


def test_load_embeddings_skips_bad_lines(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("the 0.1 0.2 0.3\nbroken 0.1\nbad x y z\nok 1 2 3\n")
    emb = load_embeddings(p, Vocab(["the", "ok"]), dim=3)
    assert emb.skipped_lines == 2 and emb.found == 2


def test_random_embeddings_padding_row_zero():
    emb = random_embeddings(Vocab(["a", "b"]), 16, seed=1)
    assert np.all(emb.matrix[0] == 0) and emb.matrix.shape == (4, 16)


def test_synthetic_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        generate_synthetic(SynthSpec(labels=["a", "b"], transitions=[[0.5, 0.4], [0, 1]]), 0)


def test_synthetic_byte_identical(tmp_path):
    for name in ("x", "y"):
        write_corpus(uniform_synth(50, seed=11), tmp_path / f"{name}.jsonl")
    assert (tmp_path / "x.jsonl").read_bytes() == (tmp_path / "y.jsonl").read_bytes()
    write_corpus(uniform_synth(50, seed=12), tmp_path / "z.jsonl")
    assert (tmp_path / "x.jsonl").read_bytes() != (tmp_path / "z.jsonl").read_bytes()


def test_synthetic_separable_with_full_mix():
    corpus = uniform_synth(30, mix=1.0, seed=2)
    lex, _ = SynthSpec(labels=["a", "b", "c"], transitions=np.eye(3).tolist()).lexicons()
    for conv in corpus:
        for m in conv.messages:
            assert set(m.tokens) <= set(lex[m.label])


def test_synthetic_transition_frequencies_converge():
    t = np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25], [0.0, 0.2, 0.8]])
    spec = SynthSpec(labels=["a", "b", "c"], transitions=t.tolist(), n_conversations=2000,
                     length_range=(5, 10), tokens_range=(1, 1))
    corpus = generate_synthetic(spec, 5)
    counts = np.zeros((3, 3))
    for conv in corpus:
        ids = corpus.label_ids(conv)
        np.add.at(counts, (ids[:-1], ids[1:]), 1)
    assert counts.sum() >= 10_000
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert np.max(np.abs(freq - t)) < 0.05
