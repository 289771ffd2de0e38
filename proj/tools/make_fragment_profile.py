#!/usr/bin/env python3
"""Writes the bundled day-fragment profile (data/fragment.csv).

A two-minute, 1 s resolution window around 10:00 with a high, slightly
rising PV output and light load. The cloud step at 10:00:15 and the ZIP
switch-on at 10:00:31 are events in the scenario config, not in this file.

Usage: make_fragment_profile.py [--out data/fragment.csv] [--seed 10]
"""

import argparse
import math
import random

START = 9 * 3600 + 59 * 60 + 30  # 09:59:30
STEPS = 121                      # through 10:01:30


def clock(seconds):
    return f"{seconds // 3600:02d}:{(seconds // 60) % 60:02d}:{seconds % 60:02d}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/fragment.csv")
    ap.add_argument("--seed", type=int, default=10)
    ap.add_argument("--pv", type=float, default=0.93, help="PV scale at the start")
    ap.add_argument("--load", type=float, default=0.40, help="load scale at the start")
    args = ap.parse_args()
    rng = random.Random(args.seed)
    with open(args.out, "w") as fh:
        fh.write("t,pv_scale,load_scale\n")
        for k in range(STEPS):
            pv = args.pv + 0.02 * k / STEPS + 0.006 * math.sin(2 * math.pi * k / 37.0) + rng.uniform(-0.003, 0.003)
            load = args.load + 0.015 * k / STEPS + rng.uniform(-0.002, 0.002)
            fh.write(f"{clock(START + k)},{pv:.5f},{load:.5f}\n")


if __name__ == "__main__":
    main()
