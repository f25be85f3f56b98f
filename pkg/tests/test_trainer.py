import math

import numpy as np
import pytest

from protoseq.corpus import Vocab, random_embeddings
from protoseq.episodes import EpisodeSpec
from protoseq.model import ModelConfig, ProtoSeqModel
from protoseq.trainer import (
    MetricsReport,
    TrainConfig,
    emotion_satisfaction_correlation,
    evaluate,
    f1_scores,
    mcc,
    pearson,
    score_predictions,
    train,
)

from conftest import SMALL_MODEL, oracle_f1, oracle_mcc, uniform_synth


# ---------------------------------------------------------------- metric examples


def test_f1_examples():
    gold, pred = list("aabb"), list("abbb")
    r = f1_scores(pred, gold)
    assert math.isclose(r.per_class["a"].f1, 2 / 3) and math.isclose(r.per_class["b"].f1, 4 / 5)
    assert math.isclose(r.micro, 0.75)
    ex = f1_scores(pred, gold, excluded=["a"])
    assert ex.micro == 1.0  # both b positions are right
    assert f1_scores(gold, gold).micro == 1.0
    with pytest.raises(ValueError):
        f1_scores(["a"], ["a", "b"])


def test_excluded_prediction_counts_as_error():
    r = f1_scores(["n", "b", "b"], ["b", "b", "n"], excluded=["n"])
    assert math.isclose(r.micro, 0.5)


def test_mcc_examples():
    assert abs(mcc(list("abbb"), list("aabb")) - 0.5774) <= 1e-4
    assert mcc(list("aabb"), list("aabb")) == 1.0
    assert mcc(list("aaaa"), list("aabb")) == 0.0
    with pytest.raises(ValueError):
        mcc(["a"], [])


def test_metrics_match_oracle_on_random_vectors():
    rng = np.random.default_rng(0)
    labels = list("abcde")
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(2, 6))
        gold = [labels[i] for i in rng.integers(k, size=n)]
        pred = [labels[i] for i in rng.integers(k, size=n)]
        excluded = [lab for lab in labels[:k] if rng.random() < 0.3]
        per_class, micro, weighted = oracle_f1(pred, gold, set(excluded), labels[:k])
        r = f1_scores(pred, gold, excluded, labels[:k])
        for lab, (p, rec, f, n_gold) in per_class.items():
            sc = r.per_class[lab]
            assert (sc.precision, sc.recall, sc.support) == (p, rec, n_gold)
            assert math.isclose(sc.f1, f, abs_tol=1e-12)
        assert math.isclose(r.micro, micro, abs_tol=1e-12)
        assert math.isclose(r.weighted, weighted, abs_tol=1e-12)
        assert math.isclose(mcc(pred, gold, labels[:k]), oracle_mcc(pred, gold, labels[:k]), abs_tol=1e-12)


def test_micro_equals_accuracy_without_exclusion():
    rng = np.random.default_rng(1)
    gold, pred = rng.integers(4, size=200), rng.integers(4, size=200)
    assert math.isclose(f1_scores(pred, gold).micro, np.mean(pred == gold))


def test_degenerate_all_excluded_is_flagged():
    report = score_predictions([(["n", "n"], ["n", "n"])], ["n", "b"], ["n"])
    assert report.f1_micro == 0.0 and report.flags


def test_report_perfect_and_round_trip(tmp_path):
    pairs = [(["a", "b"], ["a", "b"]), (["b", "b", "a"], ["b", "b", "a"])]
    report = score_predictions(pairs, ["a", "b"], [], [[pairs[0]], [pairs[1]]])
    assert report.f1_micro == report.f1_weighted == report.mcc == 1.0
    assert report.episodes == 2
    report.save(tmp_path / "r.json")
    back = MetricsReport.load(tmp_path / "r.json")
    assert back.to_dict() == report.to_dict()
    assert "f1_micro" in back.render()


def test_episode_spread_is_population_std():
    pairs = [(["a", "a"], ["a", "b"]), (["a", "a"], ["a", "a"])]
    report = score_predictions(pairs, ["a", "b"], [], [[pairs[0]], [pairs[1]]])
    assert report.episode_f1_micro == [0.5, 1.0]
    s = report.summary()["f1_micro"]
    assert math.isclose(s["std"], 0.25) and math.isclose(s["variance"], 0.0625)
    assert math.isclose(report.f1_micro, 0.75)


# ---------------------------------------------------------------- evaluation / training


def _model(variant, corpus, emb, seed=0):
    return ProtoSeqModel(ModelConfig(variant, labels=corpus.label_set, **SMALL_MODEL), emb, seed)


def test_evaluate_leaves_parameters_untouched(small_corpus, small_embeddings):
    model = _model("protoseq", small_corpus, small_embeddings)
    before = model.state_dict()
    report = evaluate(model, small_corpus, EpisodeSpec(3, 2, 2, 35), 5, seed=0)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert report.episodes == 5
    assert 0 <= report.f1_micro <= 1 and -1 <= report.mcc <= 1
    assert all(p.grad is None for p in model.parameters())


def test_evaluate_threads_match_serial(small_corpus, small_embeddings):
    model = _model("protoseq-cnn", small_corpus, small_embeddings)
    spec = EpisodeSpec(3, 2, 2, 35)
    a = evaluate(model, small_corpus, spec, 6, seed=3, threads=1)
    b = evaluate(model, small_corpus, spec, 6, seed=3, threads=3)
    assert a.to_dict() == b.to_dict()


def _tcfg(**kw):
    base = dict(variant="protoseq", episode=EpisodeSpec(3, 2, 2, 35), episodes_per_epoch=3, val_episodes=2,
                test_episodes=2, max_epochs=1, patience=1, seed=5, model=dict(SMALL_MODEL))
    base.update(kw)
    return TrainConfig(**base)


def _splits():
    return {s: uniform_synth(40, seed=i, split=s, length_range=(2, 5), tokens_range=(1, 7))
            for i, s in enumerate(("train", "val", "test"))}


def test_training_is_deterministic():
    splits = _splits()
    emb = random_embeddings(Vocab.from_corpora(splits.values()), SMALL_MODEL["emb_dim"], seed=0)
    _, h1 = train(_tcfg(max_epochs=2, patience=2), splits, emb)
    _, h2 = train(_tcfg(max_epochs=2, patience=2), splits, emb)
    assert abs(h1.epochs[0].train_loss - h2.epochs[0].train_loss) <= 1e-12
    assert [r.val_f1_micro for r in h1.epochs] == [r.val_f1_micro for r in h2.epochs]
    _, h3 = train(_tcfg(seed=6), splits, emb)
    assert h3.epochs[0].train_loss != h1.epochs[0].train_loss


def test_patience_stops_training():
    # proto has no parameters; only the resampled validation episodes move its score
    splits = _splits()
    emb = random_embeddings(Vocab.from_corpora(splits.values()), SMALL_MODEL["emb_dim"], seed=0)
    cfg = _tcfg(variant="proto", max_epochs=50, patience=3, model={"emb_dim": 8})
    _, hist = train(cfg, splits, emb)
    stop = len(hist.epochs)
    assert hist.stopped_early and stop < 50
    assert stop - hist.best_epoch == cfg.patience
    assert not any(r.best for r in hist.epochs[hist.best_epoch:])


def test_training_restores_best_weights():
    splits = _splits()
    emb = random_embeddings(Vocab.from_corpora(splits.values()), SMALL_MODEL["emb_dim"], seed=0)
    states = []
    model, hist = train(_tcfg(variant="protoseq-cnn", max_epochs=4, patience=4), splits, emb,
                        on_epoch=lambda rec: states.append(rec))
    assert len(states) == 4
    assert hist.best_val == max(r.val_f1_micro for r in hist.epochs)


def test_infeasible_split_fails_before_training():
    from protoseq.episodes import InfeasibleEpisodeError
    splits = _splits()
    splits["val"] = uniform_synth(2, seed=9, split="val")
    emb = random_embeddings(Vocab.from_corpora(splits.values()), SMALL_MODEL["emb_dim"], seed=0)
    with pytest.raises(InfeasibleEpisodeError):
        train(_tcfg(), splits, emb)


def test_train_config_validation():
    with pytest.raises(ValueError):
        _tcfg(patience=5, max_epochs=2)
    with pytest.raises(ValueError):
        _tcfg(val_episodes=0)


# ---------------------------------------------------------------- correlation


def test_pearson_examples():
    assert math.isclose(pearson([1, 0, 1, 0], [1, 0, 0, 0]), 0.5773502691896258, rel_tol=1e-12)
    assert math.isclose(pearson([1, 0, 1, 0], [1, 0, 1, 0]), 1.0)
    assert math.isclose(pearson([1, 0, 1, 0], [0, 1, 0, 1]), -1.0)
    assert pearson([1, 1, 1], [0, 1, 0]) is None


def test_emotion_satisfaction_correlation():
    from protoseq.corpus import Conversation, Corpus, Message

    def conv(i, labels, sat, speaker="V"):
        return Conversation(str(i), tuple(Message.build(speaker, "x", lab) for lab in labels), {"satisfaction": sat})

    corpus = Corpus([conv(0, ["joy"], 3), conv(1, ["anger"], -3), conv(2, ["joy", "anger"], 3),
                     conv(3, ["neutral"], 0)], ["anger", "joy", "neutral"])
    res = emotion_satisfaction_correlation(corpus, levels=[3, -3, 1])
    joy, lvl3 = res.emotions.index("joy"), res.levels.index(3)
    assert math.isclose(res.r[joy, lvl3], 1.0)
    assert res.r[0, 2] == 0.0 and res.flags  # nobody has level 1
    agent_only = emotion_satisfaction_correlation(corpus, speaker="A", levels=[3])
    assert np.all(agent_only.r == 0)
    bad = Corpus([conv(0, ["joy"], 7)], ["joy"])
    with pytest.raises(ValueError):
        emotion_satisfaction_correlation(bad)
