"""Command-line entry point: ``protoseq {train,eval,gradcheck,sample,synth,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import numcore as nc
from .corpus import (Corpus, SynthSpec, Vocab, file_checksum, generate_synthetic, load_embeddings, load_splits,
                     random_embeddings, write_corpus)
from .episodes import EpisodeSampler, EpisodeSpec, InfeasibleEpisodeError
from .model import VARIANTS, ProtoSeqModel, UnknownVariantError
from .protocrf import episode_loss
from .trainer import MetricsReport, TrainConfig, emotion_satisfaction_correlation, evaluate, train

log = logging.getLogger("protoseq")

COMMANDS = ("train", "eval", "gradcheck", "sample", "synth", "report")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field {field!r}: {message}")


@dataclasses.dataclass
class RunConfig:
    command: str
    variant: str = "protoseq"
    seed: int = 0
    train: str | None = None
    val: str | None = None
    test: str | None = None
    embeddings: str | None = None
    emb_dim: int = 300
    out: str = "runs/latest"
    model_path: str | None = None
    report_path: str | None = None
    threads: int = 1
    training: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: dict = dataclasses.field(default_factory=dict)
    gradcheck: dict = dataclasses.field(default_factory=dict)
    correlation: bool = False
    speaker: str | None = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", str(UnknownVariantError(self.variant)))
        needs = {
            "train": ("train", "val", "test"),
            "eval": ("model_path", "test"),
            "sample": ("train",),
            "report": ("report_path",) if not self.correlation else ("test",),
        }.get(self.command, ())
        for name in needs:
            if getattr(self, name) is None:
                raise ConfigError(name, f"required by the {self.command} command")
        for name in ("train", "val", "test", "embeddings", "model_path", "report_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(name, f"path {path} does not exist")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.emb_dim < 1:
            raise ConfigError("emb_dim", "must be >= 1")

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["training"] = self.training.to_dict()
        return d


# ---------------------------------------------------------------- config assembly


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
    common.add_argument("--train")
    common.add_argument("--val")
    common.add_argument("--test")
    common.add_argument("--embeddings")
    common.add_argument("--emb-dim", type=int, dest="emb_dim")
    common.add_argument("--out")
    common.add_argument("--episodes", type=int, help="evaluation episodes (test or gradcheck-free commands)")
    common.add_argument("--episodes-per-epoch", type=int, dest="episodes_per_epoch")
    common.add_argument("--val-episodes", type=int, dest="val_episodes")
    common.add_argument("--max-epochs", type=int, dest="max_epochs")
    common.add_argument("--patience", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--ways", type=int)
    common.add_argument("--shots", type=int)
    common.add_argument("--queries", type=int)
    common.add_argument("--max-len", type=int, dest="max_len")
    common.add_argument("--exclude", help="comma-separated labels left out of micro/weighted F1")
    common.add_argument("--threads", type=int)
    common.add_argument("--model", dest="model_path", help="saved model (eval)")
    common.add_argument("--report", dest="report_path", help="saved metrics report (report)")
    common.add_argument("--correlation", action="store_true", default=None,
                        help="report: emotion/satisfaction Pearson table for --test")
    common.add_argument("--speaker", help="report --correlation: only this speaker's messages")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="protoseq", description="Few-shot emotion sequence labeling.")
    parser.add_argument("--version", action="version", version=f"protoseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def _read_config_file(path: str) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return data


_TRAIN_FLAGS = ("episodes_per_epoch", "val_episodes", "max_epochs", "patience", "lr")
_EPISODE_FLAGS = {"ways": "n_ways", "shots": "n_shots", "queries": "n_queries", "max_len": "max_len"}


def resolve_config(args: argparse.Namespace, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    file_cfg = _read_config_file(args.config) if args.config else {}
    training = dict(file_cfg.pop("training", {}) or {})
    episode = dict(training.pop("episode", {}) or {})
    episode.update(file_cfg.pop("episode", {}) or {})
    flat = dict(file_cfg)

    for key in ("variant", "train", "val", "test", "embeddings", "emb_dim", "out", "threads",
                "model_path", "report_path", "correlation", "speaker"):
        val = getattr(args, key, None)
        if val is not None:
            flat[key] = val
    for key in _TRAIN_FLAGS:
        val = getattr(args, key)
        if val is not None:
            training[key] = val
    if args.episodes is not None:
        training["test_episodes"] = args.episodes
    for flag, key in _EPISODE_FLAGS.items():
        val = getattr(args, flag)
        if val is not None:
            episode[key] = val
    if args.exclude is not None:
        training["excluded"] = [x for x in args.exclude.split(",") if x]

    if args.seed is not None:
        seed = args.seed
    elif "seed" in flat:
        seed = flat.pop("seed")
    elif env.get("PROTOSEQ_SEED"):
        try:
            seed = int(env["PROTOSEQ_SEED"])
        except ValueError:
            raise ConfigError("seed", "PROTOSEQ_SEED must be an integer") from None
    else:
        seed = 0
    flat.pop("seed", None)

    variant = flat.get("variant", training.get("variant", "protoseq"))
    if variant not in VARIANTS:
        raise ConfigError("variant", str(UnknownVariantError(variant)))
    flat["variant"] = variant
    training["variant"] = variant
    training["seed"] = seed
    model_over = dict(training.pop("model", {}) or {})
    model_over["emb_dim"] = int(flat.get("emb_dim", model_over.get("emb_dim", 300)))
    flat["emb_dim"] = model_over["emb_dim"]
    try:
        spec = EpisodeSpec(**episode)
    except (TypeError, ValueError) as exc:
        raise ConfigError("episode", str(exc)) from None
    try:
        tcfg = TrainConfig(episode=spec, model=model_over, **training)
    except (TypeError, ValueError) as exc:
        raise ConfigError("training", str(exc)) from None
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(flat) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    cfg = RunConfig(command=args.command, seed=seed, training=tcfg, **flat)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers


def write_manifest(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    sums = {}
    for name in ("train", "val", "test", "embeddings", "model_path"):
        path = getattr(cfg, name)
        if path is not None:
            sums[name] = {"path": str(path), "sha256": file_checksum(path)}
    manifest = {
        "protoseq_version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "checksums": sums,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _embeddings_for(cfg: RunConfig, corpora: list[Corpus]):
    vocab = Vocab.from_corpora(corpora)
    if cfg.embeddings:
        return load_embeddings(cfg.embeddings, vocab, dim=cfg.emb_dim, seed=cfg.seed)
    log.warning("no --embeddings given: using random uniform(-0.05, 0.05) token vectors")
    return random_embeddings(vocab, cfg.emb_dim, cfg.seed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> int:
    splits = load_splits({"train": cfg.train, "val": cfg.val, "test": cfg.test})
    for split, corpus in splits.items():
        if corpus.ignored_fields:
            log.warning("%s: %d unknown schema fields ignored", split, corpus.ignored_fields)
    emb = _embeddings_for(cfg, list(splits.values()))
    out = _out_dir(cfg)
    tcfg = cfg.training
    with open(out / "history.log", "w", encoding="utf-8") as hist_fh:
        def on_epoch(rec):
            hist_fh.write(rec.line() + "\n")
            hist_fh.flush()
            print(rec.line(), flush=True)

        model, history = train(tcfg, splits, emb, on_epoch=on_epoch)
    history.write(out / "history.jsonl")
    model.save(out / "model.npz", extra={"best_epoch": history.best_epoch, "seed": cfg.seed})
    report = evaluate(model, splits["test"], tcfg.episode, tcfg.test_episodes, tcfg.excluded,
                      seed=cfg.seed, threads=cfg.threads)
    report.save(out / "report.json")
    write_manifest(cfg, out, {"best_epoch": history.best_epoch, "epochs_run": len(history.epochs)})
    print(report.render())
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model = ProtoSeqModel.load(cfg.model_path)
    from .corpus import load_corpus

    test = load_corpus(cfg.test, split="test", label_set=model.config.labels)
    spec = dataclasses.replace(cfg.training.episode, max_len=model.config.max_len)
    report = evaluate(model, test, spec, cfg.training.test_episodes, cfg.training.excluded,
                      seed=cfg.seed, threads=cfg.threads)
    out = _out_dir(cfg)
    report.save(out / "report.json")
    write_manifest(cfg, out)
    print(report.render())
    return 0


def gradcheck_episode(cfg: RunConfig):
    """A 3-way 2-shot 2-query episode (from --train if given, else synthetic)."""
    gc = {"ways": 3, "shots": 2, "queries": 2, "max_entries": 20, "conversations": 60, **cfg.gradcheck}
    spec = EpisodeSpec(gc["ways"], gc["shots"], gc["queries"], cfg.training.episode.max_len)
    if cfg.train:
        from .corpus import load_corpus

        corpus = load_corpus(cfg.train)
        spec = dataclasses.replace(spec, n_ways=len(corpus.label_set))
    else:
        labels = [f"l{i}" for i in range(spec.n_ways)]
        k = spec.n_ways
        corpus = generate_synthetic(
            SynthSpec(labels=labels, transitions=(np.full((k, k), 1.0 / k)).tolist(), mix=0.7,
                      n_conversations=gc["conversations"], length_range=(2, 5), tokens_range=(1, 7)),
            cfg.seed,
        )
    episode = EpisodeSampler(corpus, spec, cfg.seed).sample()
    return corpus, episode, gc


def cmd_gradcheck(cfg: RunConfig) -> int:
    corpus, episode, gc = gradcheck_episode(cfg)
    emb = _embeddings_for(cfg, [corpus])
    model = ProtoSeqModel(cfg.training.model_config(corpus.label_set), emb, seed=cfg.seed)
    report = nc.grad_check(lambda: episode_loss(model, episode, training=False), model.parameters(),
                           h=1e-5, tol=1e-4, max_entries=gc["max_entries"], rng=np.random.default_rng(cfg.seed))
    print(f"{cfg.variant}: {report}")
    if report.worst is not None:
        print(f"worst entry: {report.worst}")
    return 0 if report.ok else 1


def cmd_sample(cfg: RunConfig) -> int:
    from .corpus import load_corpus

    corpus = load_corpus(cfg.train)
    spec = cfg.training.episode
    if spec.n_ways != len(corpus.label_set):
        spec = dataclasses.replace(spec, n_ways=len(corpus.label_set))
    episode = EpisodeSampler(corpus, spec, cfg.seed).sample()
    out = _out_dir(cfg)
    episode.to_jsonl(out / "episode.jsonl")
    write_manifest(cfg, out)
    n_sup = len(episode.support_conversations())
    n_q = len(episode.query_conversations())
    print(f"wrote {out / 'episode.jsonl'}: {n_sup} support + {n_q} query conversations")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    opts = dict(cfg.synth)
    sizes = opts.pop("splits", {"train": 500, "val": 100, "test": 100})
    if "labels" not in opts:
        opts["labels"] = ["a", "b", "c"]
    k = len(opts["labels"])
    opts.setdefault("transitions", np.full((k, k), 1.0 / k).tolist())
    out = _out_dir(cfg)
    for i, (split, n) in enumerate(sizes.items()):
        spec = SynthSpec(**{**opts, "n_conversations": int(n), "split": split, "id_prefix": split})
        corpus = generate_synthetic(spec, cfg.seed + i)
        write_corpus(corpus, out / f"{split}.jsonl")
        print(f"wrote {out / (split + '.jsonl')}: {len(corpus)} conversations")
    write_manifest(cfg, out)
    return 0


def cmd_report(cfg: RunConfig) -> int:
    if cfg.correlation:
        from .corpus import load_corpus

        result = emotion_satisfaction_correlation(load_corpus(cfg.test), speaker=cfg.speaker)
        header = "".join(f"{lev:>8d}" for lev in result.levels)
        print(f"{'emotion':<20}{header}")
        for emo, row in zip(result.emotions, result.r):
            print(f"{emo:<20}" + "".join(f"{v:>8.4f}" for v in row))
        for flag in result.flags:
            print(f"flag: {flag}")
        return 0
    print(MetricsReport.load(cfg.report_path).render())
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sample": cmd_sample,
    "synth": cmd_synth,
    "report": cmd_report,
}


def run(command: str, config: RunConfig) -> int:
    config.command = command
    config.validate()
    return HANDLERS[command](config)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return run(args.command, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleEpisodeError, ValueError, OSError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
