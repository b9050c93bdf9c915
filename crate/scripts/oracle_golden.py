#!/usr/bin/env python3
"""Brute-force divergence values for an oracle instance file.

Written separately from the Rust library and evaluated in exact rational
arithmetic. Usage:

    python3 scripts/oracle_golden.py data/oracle/instance8.txt > data/oracle/instance8.golden.json
"""

import json
import sys
from fractions import Fraction

RHOS = [Fraction(1, 2), Fraction(1), Fraction(2)]


def parse(path):
    inst = {"scorer": 0, "hyps": []}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (p.strip() for p in line.split("=", 1))
            if key in ("n", "k", "scorer"):
                inst[key] = int(value)
            elif key in ("s1", "s2"):
                inst[key] = [int(v) for v in value.split()]
            elif key == "hypothesis":
                rows = [[Fraction(v) for v in row.split()] for row in value.split("|")]
                inst["hyps"].append(rows)
            else:
                raise ValueError(f"unknown key {key}")
    return inst


def label(row):
    best = 0
    for c in range(1, len(row)):
        if row[c] > row[best]:
            best = c
    return best


def margin(row, y):
    return (row[y] - max(v for c, v in enumerate(row) if c != y)) / 2


def ramp(x, rho):
    return min(Fraction(1), max(Fraction(0), 1 - x / rho))


def mean(values):
    values = list(values)
    return sum(values, Fraction(0)) / len(values)


def pairwise_divergence(hyps, s1, s2, loss):
    labels = [[label(r) for r in h] for h in hyps]
    best = Fraction(0)
    for a in labels:
        for b in labels:
            gap = mean(loss(a[i], b[i]) for i in s2) - mean(loss(a[i], b[i]) for i in s1)
            best = max(best, abs(gap))
    return best


def main():
    inst = parse(sys.argv[1])
    hyps, s1, s2, k = inst["hyps"], inst["s1"], inst["s2"], inst["k"]
    f_labels = [label(r) for r in hyps[inst["scorer"]]]

    zero_one = lambda a, b: Fraction(int(a != b))
    squared = lambda a, b: Fraction((a - b) ** 2, (k - 1) ** 2)

    zo_disc = max(
        mean(zero_one(f_labels[i], label(g[i])) for i in s2) - mean(zero_one(f_labels[i], label(g[i])) for i in s1)
        for g in hyps
    )
    margin_disc = []
    for rho in RHOS:
        values = [
            mean(ramp(margin(g[i], f_labels[i]), rho) for i in s2) - mean(ramp(margin(g[i], f_labels[i]), rho) for i in s1)
            for g in hyps
        ]
        best = max(values)
        margin_disc.append({"rho": float(rho), "value": float(best), "argmax": values.index(best)})

    out = {
        "hdeltah_divergence": float(pairwise_divergence(hyps, s1, s2, zero_one)),
        "discrepancy_divergence_squared": float(pairwise_divergence(hyps, s1, s2, squared)),
        "discrepancy_divergence_zero_one": float(pairwise_divergence(hyps, s1, s2, zero_one)),
        "zero_one_discrepancy": float(zo_disc),
        "margin_discrepancy": margin_disc,
    }
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
