"""End-to-end toy run through the CLI: surrogates -> prepare -> train -> eval.

    python scripts/toy_train.py --work /tmp/ascnet_toy --epochs 20

Prints the aggregate metrics of the trained model next to the identity
(noisy) baseline.
"""
import argparse
import json
import subprocess
import sys
from pathlib import Path

from ascnet.cli import main as ascnet

HERE = Path(__file__).resolve().parent


def run(*argv):
    rc = ascnet([str(a) for a in argv])
    if rc:
        sys.exit(f"ascnet {argv[0]} failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="/tmp/ascnet_toy")
    ap.add_argument("--records", help="directory of WFDB records; surrogates are generated if omitted")
    ap.add_argument("--noise", default="awgn")
    ap.add_argument("--snr", default="5")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(args.work)
    records = args.records
    if records is None:
        subprocess.run([sys.executable, str(HERE / "make_surrogates.py"), "--out", str(work / "data")],
                       check=True, stdout=subprocess.DEVNULL)
        records = work / "data" / "records"
    run("prepare", "--records", records, "--noise-dir", work / "data" / "noise", "--noise", args.noise,
        "--snr", args.snr, "--split", "0.75,0.125,0.125", "--seed", args.seed, "--out", work / "prep")
    (work / "train.json").write_text(json.dumps({"max_epochs": args.epochs, "seed": args.seed}))
    for fam in sorted(p for p in (work / "prep").iterdir() if p.is_dir()):
        run("train", "--data", fam, "--train-config", work / "train.json", "--out", work / "runs" / fam.name)
        run("eval", "--checkpoint", work / "runs" / fam.name / "checkpoint.bin", "--data", fam,
            "--label", "ascnet", "--out", work / "eval" / fam.name)
        run("eval", "--stub", "noisy", "--data", fam, "--out", work / "eval_noisy" / fam.name)
    evals = sorted(str(p) for p in (work / "eval").iterdir()) + sorted(str(p) for p in (work / "eval_noisy").iterdir())
    run("report", "--eval", *evals, "--out", work / "report.csv")
    print(f"report: {work / 'report.csv'}")


if __name__ == "__main__":
    main()
