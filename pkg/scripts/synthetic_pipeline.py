"""End-to-end run of the command-line pipeline on the planted toy bundle.

    python3 scripts/synthetic_pipeline.py --work /tmp/finetag-demo
"""

import argparse
import json
import os

from finetag.cli import main as cli


def step(*argv):
    argv = [str(a) for a in argv]
    print("$ finetag", " ".join(argv))
    code = cli(argv)
    if code:
        raise SystemExit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="finetag-demo")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    w = args.work
    data = os.path.join(w, "data")
    step("synth", "--out", data, "--seed", args.seed)
    step("fit-projection", "--features", f"{data}/features.ftns", "--split", f"{data}/split.json",
         "--components", 4, "--per-image", 4, "--out", f"{w}/proj.ftpj")
    step("train", "--features", f"{data}/features.ftns", "--labels", f"{data}/labels.ftlm",
         "--split", f"{data}/split.json", "--projection", f"{w}/proj.ftpj",
         "--epochs", args.epochs, "--lr", 1e-3, "--out-dir", f"{w}/run")
    step("eval", "--checkpoint", f"{w}/run/model.ftmd", "--features", f"{data}/features.ftns",
         "--labels", f"{data}/labels.ftlm", "--split", f"{data}/split.json", "--out", f"{w}/eval")
    with open(os.path.join(w, "eval", "summary.json")) as fh:
        print(json.dumps(json.load(fh), indent=2))


if __name__ == "__main__":
    main()
