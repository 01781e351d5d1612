"""Write synthetic WFDB records and noise records for offline runs.

ECG surrogates go to <out>/records/<name>.{hea,dat}; noise surrogates go to
<out>/noise/{bw,em,ma}.{hea,dat} so `ascnet prepare --noise-dir` finds them.
Use these when the MIT-BIH and noise stress test files are not on disk.
"""
import argparse

import numpy as np

from ascnet.signals import derive_seed, synthetic_ecg
from ascnet.wfdb_io import write_record


def noise_surrogates(n: int, fs: float, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed("noise_surrogates", seed))
    t = np.arange(n) / fs
    # slow respiration-like drift
    bw = sum(a * np.sin(2 * np.pi * f * t + rng.uniform(0, 6))
             for a, f in ((0.4, 0.15), (0.2, 0.3), (0.1, 0.05)))
    # step-like electrode shifts smoothed over ~50 ms
    jumps = np.cumsum(rng.standard_normal(n) * (rng.uniform(size=n) < 2 / fs))
    em = np.convolve(jumps, np.ones(18) / 18, mode="same") + 0.05 * rng.standard_normal(n)
    # broadband bursts
    env = np.convolve(rng.uniform(size=n) < 1 / fs, np.ones(int(fs // 2)), mode="same")
    ma = 0.3 * rng.standard_normal(n) * (0.2 + env)
    return {"bw": bw, "em": em, "ma": ma}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-records", type=int, default=8)
    ap.add_argument("--seconds", type=float, default=90.0)
    ap.add_argument("--fs", type=float, default=360.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    n = int(args.seconds * args.fs)
    for i in range(args.n_records):
        sig = synthetic_ecg(n, args.fs, seed=args.seed * 1000 + i)
        print(write_record(f"{args.out}/records", f"{100 + i}", sig[None, :], args.fs))
    for kind, sig in noise_surrogates(max(n, 30 * int(args.fs)), args.fs, args.seed).items():
        print(write_record(f"{args.out}/noise", kind, sig[None, :], args.fs))


if __name__ == "__main__":
    main()
