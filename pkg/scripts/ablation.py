"""Toy ablation: CRNN vs CMAM without and with one refinement pass.

Trains every arm on the same synthetic corpus for three seeds, keeps the
checkpoint with the best validation CER and reports test CER.  Results are
appended to results/ablation.json after each run, so an interrupted sweep
resumes where it stopped.

    python scripts/ablation.py [--epochs 12] [--profile tiny] [--out results/ablation.json]
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from cmam.config import TrainConfig
from cmam.synth import Dataset, generate, glyph_alphabet
from cmam.train import evaluate_model, restore, train

ARMS = {"crnn": dict(model="crnn"), "cmam_l0": dict(model="cmam", refinements=0),
        "cmam_l1": dict(model="cmam", refinements=1)}
SPLITS = {"train": (101, 2000), "valid": (102, 200), "test": (103, 200)}
VOCAB = 20


def corpus():
    names = [g.name for g in glyph_alphabet(VOCAB)]
    return {k: Dataset(generate(seed, VOCAB, n), names) for k, (seed, n) in SPLITS.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--patience", type=int, default=4)
    ap.add_argument("--profile", default="tiny")
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=list(ARMS))
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "ablation.json"))
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = corpus()
    protocol = {"vocab_size": VOCAB, **{f"{k}_lines": len(v.samples) for k, v in data.items()},
                "train_mean_length": float(np.mean([len(s.label) for s in data["train"].samples])),
                "profile": args.profile, "lr": args.lr, "batch_size": args.batch_size,
                "max_epochs": args.epochs, "patience": args.patience,
                "split_seeds": {k: s for k, (s, _) in SPLITS.items()}}
    results = json.loads(out.read_text()) if out.exists() else {"runs": []}
    if results.get("protocol", protocol) != protocol:
        sys.exit(f"{out} was produced under a different protocol; move it aside first")
    results["protocol"] = protocol
    done = {(r["arm"], r["seed"]) for r in results["runs"]}

    for seed in args.seeds:
        for arm in args.arms:
            if (arm, seed) in done:
                continue
            ckpt = out.parent / f"ablation_{arm}_s{seed}.ckpt"
            cfg = TrainConfig.for_profile(args.profile, lr=args.lr, batch_size=args.batch_size, seed=seed,
                                          max_epochs=args.epochs, patience=args.patience,
                                          checkpoint=str(ckpt), log=str(ckpt.with_suffix(".log")), **ARMS[arm])
            t0 = time.time()
            res = train(cfg, data["train"], data["valid"], sys.stdout)
            model, _, _ = restore(ckpt)
            rep, _ = evaluate_model(model, data["test"].samples)
            run = {"arm": arm, "seed": seed, "test_cer": rep.cer, "best_valid_cer": res.best_cer,
                   "best_epoch": res.best_epoch, "epochs": len(res.log_lines),
                   "seconds": round(time.time() - t0, 1)}
            print(json.dumps(run), flush=True)
            results["runs"].append(run)
            out.write_text(json.dumps(results, indent=2) + "\n")

    for arm in ARMS:
        cers = [r["test_cer"] for r in results["runs"] if r["arm"] == arm]
        if cers:
            print(f"{arm:8s} test CER {100 * np.mean(cers):6.2f} +- {100 * np.std(cers):.2f}  (n={len(cers)})")


if __name__ == "__main__":
    main()
