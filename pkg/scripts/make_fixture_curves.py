"""Generate the bundled synthetic epidemic curves.

Daily infection estimates for six sites built from Gaussian waves on the
log-time axis, with seeded day-level noise and log-normal uncertainty bands.
The shapes loosely follow the 2020-2022 US waves (winter 2020-21, summer 2021,
winter 2021-22, summer 2022) with site-specific timing and size.

Usage: python3 scripts/make_fixture_curves.py [output.csv]
"""

import datetime as dt
import sys
from pathlib import Path

import numpy as np
import pandas as pd

START = dt.date(2020, 10, 1)
END = dt.date(2022, 9, 30)
SEED = 20210301

# (peak date, peak infections/day, width in days) per wave
WAVES = {
    "GA": [("2021-01-10", 60000, 28), ("2021-08-25", 75000, 22), ("2022-01-12", 140000, 16),
           ("2022-07-15", 30000, 30)],
    "NY": [("2021-01-05", 70000, 35), ("2021-09-10", 25000, 30), ("2021-12-28", 220000, 13),
           ("2022-05-10", 45000, 25)],
    "WA": [("2020-12-05", 18000, 30), ("2021-09-01", 22000, 26), ("2022-01-15", 60000, 15),
           ("2022-06-01", 20000, 28)],
    "PA": [("2020-12-12", 60000, 30), ("2021-04-10", 25000, 25), ("2021-09-20", 35000, 32),
           ("2022-01-08", 120000, 15)],
    "MO": [("2020-11-20", 40000, 28), ("2021-07-20", 30000, 24), ("2022-01-10", 80000, 14),
           ("2022-07-20", 15000, 30)],
    "OH": [("2020-12-01", 80000, 25), ("2021-10-01", 45000, 28), ("2022-01-06", 150000, 14),
           ("2022-07-25", 25000, 30)],
}
BASE = {"GA": 3000, "NY": 4000, "WA": 1200, "PA": 3500, "MO": 2000, "OH": 3500}


def make_curves(seed: int = SEED) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    days = pd.date_range(START, END, freq="D")
    t = np.arange(len(days), dtype=float)
    frames = []
    for site, waves in WAVES.items():
        mean = np.full(len(t), float(BASE[site]))
        for peak, height, width in waves:
            c = (pd.Timestamp(peak) - pd.Timestamp(START)).days
            mean += height * np.exp(-0.5 * ((t - c) / width) ** 2)
        noise = np.exp(np.convolve(rng.normal(0, 0.06, len(t)), np.ones(3) / 3, mode="same"))
        mean *= noise
        # wider bands in the tails, narrower near peaks
        rel = mean / mean.max()
        sd_log = 0.12 + 0.18 * (1 - rel) + rng.uniform(0, 0.02, len(t))
        lower = np.floor(mean * np.exp(-1.96 * sd_log) * 100) / 100
        upper = np.ceil(mean * np.exp(1.96 * sd_log) * 100) / 100
        mean = np.round(mean, 2)
        frames.append(pd.DataFrame({"site": site, "date": days.strftime("%Y-%m-%d"),
                                    "mean": mean, "lower": lower, "upper": upper}))
    return pd.concat(frames, ignore_index=True)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else \
        Path(__file__).resolve().parents[1] / "src" / "ctsurv" / "data" / "fixture_curves.csv"
    make_curves().to_csv(out, index=False, float_format="%.2f")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
