import math

import numpy as np
import pytest

from protoseq.corpus import SynthSpec, Vocab, generate_synthetic, random_embeddings

SMALL_MODEL = {"emb_dim": 8, "cnn_filters": 3, "hidden": 4, "mlp_hidden": 6, "proto_dim": 5}


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def uniform_synth(n=60, labels=("a", "b", "c"), mix=0.8, seed=0, split="train", **kw):
    k = len(labels)
    spec = SynthSpec(labels=list(labels), transitions=np.full((k, k), 1.0 / k).tolist(), mix=mix,
                     n_conversations=n, split=split, id_prefix=split, **kw)
    return generate_synthetic(spec, seed)


def oracle_f1(pred, gold, excluded, labels):
    """Direct definitions over explicit position lists."""
    def prf(p_list, g_list, lab):
        tp = sum(1 for p, g in zip(p_list, g_list) if p == lab and g == lab)
        n_pred = sum(1 for p in p_list if p == lab)
        n_gold = sum(1 for g in g_list if g == lab)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_gold if n_gold else 0.0
        return prec, rec, (2 * prec * rec / (prec + rec) if prec + rec else 0.0), n_gold

    per_class = {lab: prf(pred, gold, lab) for lab in labels}
    kept = [(p, g) for p, g in zip(pred, gold) if g not in excluded]
    if not kept:
        return per_class, 0.0, 0.0
    kp, kg = [p for p, _ in kept], [g for _, g in kept]
    micro = sum(p == g for p, g in kept) / len(kept)
    weighted = 0.0
    for lab in labels:
        if lab in excluded:
            continue
        _, _, f, n = prf(kp, kg, lab)
        weighted += n * f
    return per_class, micro, weighted / len(kept)


def oracle_mcc(pred, gold, labels):
    """MCC as the correlation of one-hot indicator matrices."""
    x = np.array([[float(p == lab) for lab in labels] for p in pred])
    y = np.array([[float(g == lab) for lab in labels] for g in gold])
    xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
    cov_xy, cov_xx, cov_yy = np.sum(xc * yc), np.sum(xc * xc), np.sum(yc * yc)
    if cov_xx == 0 or cov_yy == 0:
        return 0.0
    return cov_xy / math.sqrt(cov_xx * cov_yy)


@pytest.fixture
def small_corpus():
    return uniform_synth(60, length_range=(2, 5), tokens_range=(1, 7))


@pytest.fixture
def small_embeddings(small_corpus):
    return random_embeddings(Vocab.from_corpora([small_corpus]), SMALL_MODEL["emb_dim"], seed=0)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("] ")[1].split(".")[0])):
            terminalreporter.write_line(line)
