"""Exhaustive threshold sweep used as the EER reference."""

from bisect import bisect_left
from fractions import Fraction


def brute_force_eer(targets, nontargets):
    nt, nn = len(targets), len(nontargets)
    tgt, non = sorted(targets), sorted(nontargets)
    thresholds = sorted(set(targets) | set(nontargets)) + [float("inf")]
    points = []
    for t in thresholds:
        rejected = bisect_left(tgt, t)  # targets scoring below t
        accepted = nn - bisect_left(non, t)  # nontargets at or above t
        points.append((Fraction(rejected, nt), Fraction(accepted, nn)))
    for k, (frr, far) in enumerate(points):
        if frr >= far:
            if frr == far or k == 0:
                return float(frr)
            frr0, far0 = points[k - 1]
            a = (far0 - frr0) / ((far0 - frr0) - (far - frr))
            return float(frr0 + a * (frr - frr0))
    raise AssertionError("FRR never reaches FAR")
