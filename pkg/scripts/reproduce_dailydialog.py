"""Full-scale DailyDialog run (informational, not part of the test suite).

Converts the public DailyDialog release into the protoseq jsonl schema and
trains ProtoSeq and the Proto baseline with the default hyperparameters:
7-way 5-shot 10-query episodes, 35 messages per conversation,
"no_emotion" excluded from F1. Expect many CPU hours at these settings.

Usage:
    python scripts/reproduce_dailydialog.py DAILYDIALOG_DIR FASTTEXT_VEC OUT_DIR

DAILYDIALOG_DIR must contain train/, validation/ and test/, each with
dialogues_<split>.txt and dialogues_emotion_<split>.txt.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from protoseq import cli

EMOTIONS = ["no_emotion", "anger", "disgust", "fear", "happiness", "sadness", "surprise"]
SPLITS = {"train": "train", "val": "validation", "test": "test"}


def convert(src: Path, split: str, dest: Path) -> int:
    folder = src / split
    texts = (folder / f"dialogues_{split}.txt").read_text(encoding="utf-8").splitlines()
    emos = (folder / f"dialogues_emotion_{split}.txt").read_text(encoding="utf-8").splitlines()
    with open(dest, "w", encoding="utf-8") as fh:
        for i, (line, labels) in enumerate(zip(texts, emos)):
            utts = [u.strip() for u in line.split("__eou__") if u.strip()]
            ids = [int(x) for x in labels.split()]
            if len(utts) != len(ids):
                continue  # a handful of dialogues are misaligned in the release
            messages = [{"speaker": "AB"[j % 2], "text": u, "label": EMOTIONS[k]}
                        for j, (u, k) in enumerate(zip(utts, ids))]
            fh.write(json.dumps({"id": f"{split}-{i}", "messages": messages}) + "\n")
    return len(texts)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dailydialog")
    ap.add_argument("embeddings")
    ap.add_argument("out")
    ap.add_argument("--variants", default="protoseq,proto")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    for name, folder in SPLITS.items():
        convert(Path(args.dailydialog), folder, data / f"{name}.jsonl")

    for variant in args.variants.split(","):
        code = cli.main([
            "train", "--variant", variant, "--seed", str(args.seed),
            "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
            "--test", str(data / "test.jsonl"), "--embeddings", args.embeddings,
            "--ways", "7", "--shots", "5", "--queries", "10", "--max-len", "35",
            "--exclude", "no_emotion", "--threads", str(args.threads), "--out", str(out / variant),
        ])
        if code:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
