#!/usr/bin/env python3
"""Writes the bundled three-phase 33-bus case (data/ieee33_3ph.json).

The single-phase 33-bus feeder data are expanded to an unbalanced
three-phase network:

  * each branch gets a 3x3 impedance with the positive-sequence value on the
    diagonal and a mutual term of MUTUAL times it off the diagonal,
  * each bus load is split over A/B/C with a +/-UNBALANCE pattern,
  * every load draws its P and Q ZIP triples from a small seeded pool,
  * PV inverters sit at the listed node-phases (ratings are per phase).

Usage: make_ieee33_case.py [--out data/ieee33_3ph.json] [--s-kva 1000] [--seed 33] [--peak-ratio 0.9]
"""

import argparse
import json
import math
import random

BRANCHES = [
    (1, 2, 0.0922, 0.0470), (2, 3, 0.4930, 0.2511), (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941), (5, 6, 0.8190, 0.7070), (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351), (8, 9, 1.0300, 0.7400), (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650), (11, 12, 0.3744, 0.1238), (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129), (14, 15, 0.5910, 0.5260), (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210), (17, 18, 0.7320, 0.5740), (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554), (20, 21, 0.4095, 0.4784), (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083), (23, 24, 0.8980, 0.7091), (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034), (26, 27, 0.2842, 0.1447), (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006), (29, 30, 0.5075, 0.2585), (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619), (32, 33, 0.3410, 0.5302),
]

LOADS = {  # kW, kVAr (three-phase totals)
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20), 7: (200, 100),
    8: (200, 100), 9: (60, 20), 10: (60, 20), 11: (45, 30), 12: (60, 35), 13: (60, 35),
    14: (120, 80), 15: (60, 10), 16: (60, 20), 17: (60, 20), 18: (90, 40), 19: (90, 40),
    20: (90, 40), 21: (90, 40), 22: (90, 40), 23: (90, 50), 24: (420, 200), 25: (420, 200),
    26: (60, 25), 27: (60, 25), 28: (60, 20), 29: (120, 70), 30: (200, 600), 31: (150, 70),
    32: (210, 100), 33: (60, 40),
}

# Controllable PV inverters: (node, phases, per-phase kVA).
INVERTERS = [
    (12, "ABC", 200), (13, "ABC", 200), (21, "AC", 200), (25, "BC", 200),
    (6, "ABC", 100), (14, "BC", 100), (20, "AC", 100), (24, "AB", 100), (26, "AC", 100),
    (17, "B", 50), (18, "B", 50), (22, "C", 50),
]

# PV outside the control area, running local droop.
EXTERNAL_PV = [(29, "ABC", 100), (31, "AB", 100), (33, "C", 50)]

PCC = 4

ZIP_POOL_P = [
    (0.24, 0.30, 0.46), (0.40, 0.20, 0.40), (0.10, 0.45, 0.45),
    (0.55, 0.15, 0.30), (0.30, 0.40, 0.30), (0.65, 0.05, 0.30),
]
ZIP_POOL_Q = [
    (0.50, 0.20, 0.30), (0.70, 0.10, 0.20), (0.35, 0.25, 0.40),
    (0.60, 0.30, 0.10), (0.45, 0.05, 0.50), (0.80, 0.10, 0.10),
]

UNBALANCE = 0.10
MUTUAL = 0.30
PATTERNS = [(1.0, 0.0, -1.0), (0.0, -1.0, 1.0), (-1.0, 1.0, 0.0)]


def z_matrix(r, x):
    self_z = [r, x]
    mutual = [MUTUAL * r, MUTUAL * x]
    return [[self_z if i == j else mutual for j in range(3)] for i in range(3)]


def build(s_kva, seed, peak_ratio, v_slack):
    rng = random.Random(seed)
    case = {
        "name": "ieee33_3ph",
        "note": ("Reconstructed three-phase expansion of the 33-bus feeder: mutual coupling "
                 f"{MUTUAL} of self impedance, +/-{int(UNBALANCE * 100)}% phase load unbalance, "
                 f"ZIP triples drawn from a seeded pool (seed {seed}). Written by tools/make_ieee33_case.py."),
        "bases": {"v_kv": round(12.66 / math.sqrt(3.0), 6), "s_kva": s_kva, "v_slack_pu": v_slack},
        "slack": 1,
        "nodes": [{"id": n, "phases": "ABC"} for n in range(1, 34)],
        "branches": [{"from": f, "to": t, "z": z_matrix(r, x)} for f, t, r, x in BRANCHES],
        "loads": [],
        "inverters": [],
        "monitored": [],
        "zip_pool": {"p": ZIP_POOL_P, "q": ZIP_POOL_Q},
    }
    for node, (p_kw, q_kvar) in sorted(LOADS.items()):
        pattern = PATTERNS[node % 3]
        for k, phase in enumerate("ABC"):
            share = (1.0 + UNBALANCE * pattern[k]) / 3.0
            case["loads"].append({
                "node": node, "phase": phase,
                "s": [round(p_kw * share, 6), round(q_kvar * share, 6)],
                "zip_p": list(rng.choice(ZIP_POOL_P)),
                "zip_q": list(rng.choice(ZIP_POOL_Q)),
            })
    for node, phases, kva in INVERTERS:
        for phase in phases:
            case["inverters"].append({"node": node, "phase": phase, "s_rating": kva,
                                      "p_peak": round(peak_ratio * kva, 6), "controllable": True})
    for node, phases, kva in EXTERNAL_PV:
        for phase in phases:
            case["inverters"].append({"node": node, "phase": phase, "s_rating": kva,
                                      "p_peak": round(peak_ratio * kva, 6), "controllable": False})
    monitored = [(PCC, p) for p in "ABC"]
    monitored += [(n, p) for n, phases, _ in INVERTERS for p in phases]
    case["monitored"] = [f"{n}{p}" for n, p in sorted(set(monitored))]
    return case


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ieee33_3ph.json")
    ap.add_argument("--s-kva", type=float, default=1600.0, help="per-phase power base")
    ap.add_argument("--seed", type=int, default=33)
    ap.add_argument("--peak-ratio", type=float, default=0.9, help="PV array peak over inverter rating")
    ap.add_argument("--v-slack", type=float, default=1.02, help="substation voltage (p.u.)")
    args = ap.parse_args()
    case = build(args.s_kva, args.seed, args.peak_ratio, args.v_slack)
    with open(args.out, "w") as fh:
        json.dump(case, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
