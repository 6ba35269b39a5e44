"""Regenerate the synthetic squeezing datasets shipped in ``sqzforge/data``.

Both sets are model curves with seeded 0.5 % multiplicative noise on the
linear noise power. They are labeled ``synthetic`` in their metadata and are
not measurements.

    python3 demos/make_bundled_data.py
"""
from pathlib import Path

import numpy as np

from sqzforge import opo
from sqzforge.kvconfig import atomic_write
from sqzforge.trace import write_table

DATA = Path(__file__).resolve().parents[1] / "src" / "sqzforge" / "data"
NOISE = 0.005


def noisy(rng, values):
    return values * (1.0 + NOISE * rng.standard_normal(len(values)))


def frequency_set(seed=5):
    rng = np.random.default_rng(seed)
    params = opo.SqueezerParams.from_ratio(eta=0.23, ratio=0.02, fs=310.0)
    f = np.linspace(5.0, 605.0, 21)
    n = opo.noise_power(params, f)
    meta = {"synthetic": "true", "eta": 0.23, "ratio": 0.02, "fs_mhz": 310.0,
            "noise_rel": NOISE, "seed": seed}
    return write_table(meta, ["frequency_mhz", "s_minus_db", "s_plus_db"],
                       [f, opo.to_db(noisy(rng, n.s_minus)), opo.to_db(noisy(rng, n.s_plus))])


def power_set(seed=7):
    rng = np.random.default_rng(seed)
    pp = np.linspace(2.0, 40.0, 20)
    sm, sp = [], []
    for p in pp:
        n = opo.noise_power(opo.SqueezerParams(eta=0.20, p_th=200.0, fs=310.0, pump_power=p), 5.0)
        sm.append(n.s_minus)
        sp.append(n.s_plus)
    meta = {"synthetic": "true", "eta": 0.20, "p_th_mw": 200.0, "fs_mhz": 310.0,
            "sideband_mhz": 5.0, "noise_rel": NOISE, "seed": seed}
    return write_table(meta, ["power_mw", "s_minus_db", "s_plus_db"],
                       [pp, opo.to_db(noisy(rng, np.array(sm))), opo.to_db(noisy(rng, np.array(sp)))])


if __name__ == "__main__":
    atomic_write(DATA / "squeezing_vs_frequency.csv", frequency_set())
    atomic_write(DATA / "squeezing_vs_power.csv", power_set())
    print(f"wrote synthetic datasets to {DATA}")
