"""Group fairness metrics: Equality of Opportunity and Average Odds.

Rates are kept as exact fractions so planted differences come back exactly.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from speechcare.metrics import PredictionSet, predict_with_thresholds


@dataclass
class GroupRates:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def tpr(self) -> Fraction | None:
        return Fraction(self.tp, self.tp + self.fn) if self.tp + self.fn else None

    @property
    def fpr(self) -> Fraction | None:
        return Fraction(self.fp, self.fp + self.tn) if self.fp + self.tn else None


def group_rates(preds: PredictionSet, attribute: str, positive_class: int,
                thresholds: Sequence[float] | None = None) -> dict[str, GroupRates]:
    predicted = preds.predicted() if thresholds is None else predict_with_thresholds(preds.probabilities, thresholds)
    hit = predicted == positive_class
    actual = preds.labels == positive_class
    rates: dict[str, list[int]] = {}
    for g, h, a in zip(preds.groups, hit, actual):
        key = str(g.get(attribute, "unknown"))
        r = rates.setdefault(key, [0, 0, 0, 0])
        r[0 if (a and h) else 1 if a else 2 if h else 3] += 1
    return {k: GroupRates(*v) for k, v in sorted(rates.items())}


def equality_of_opportunity(preds: PredictionSet, attribute: str, positive_class: int,
                            thresholds: Sequence[float] | None = None) -> dict:
    """Per-group true-positive rate and the max-min gap across groups."""
    rates = group_rates(preds, attribute, positive_class, thresholds)
    tpr, excluded = {}, []
    for g, r in rates.items():
        if r.tpr is None:
            warnings.warn(f"group {attribute}={g} has no positives; excluded", stacklevel=2)
            excluded.append(g)
        else:
            tpr[g] = r.tpr
    gap = max(tpr.values()) - min(tpr.values()) if tpr else Fraction(0)
    return {"tpr": {g: float(v) for g, v in tpr.items()}, "gap": float(gap), "excluded": excluded}


def average_odds(preds: PredictionSet, attribute: str, positive_class: int,
                 thresholds: Sequence[float] | None = None) -> dict:
    """Half the summed |dTPR| + |dFPR| for every group pair; reports the max pair."""
    rates = group_rates(preds, attribute, positive_class, thresholds)
    usable, excluded = {}, []
    for g, r in rates.items():
        if r.tpr is None or r.fpr is None:
            warnings.warn(f"group {attribute}={g} lacks positives or negatives; excluded", stacklevel=2)
            excluded.append(g)
        else:
            usable[g] = r
    pairs = {}
    for a, b in itertools.combinations(sorted(usable), 2):
        ra, rb = usable[a], usable[b]
        pairs[f"{a}|{b}"] = (abs(ra.tpr - rb.tpr) + abs(ra.fpr - rb.fpr)) / 2
    worst = max(pairs.values()) if pairs else Fraction(0)
    return {
        "tpr": {g: float(r.tpr) for g, r in usable.items()},
        "fpr": {g: float(r.fpr) for g, r in usable.items()},
        "pairs": {k: float(v) for k, v in pairs.items()},
        "max": float(worst),
        "excluded": excluded,
    }


def audit(preds: PredictionSet, attributes: Sequence[str], positive_classes: Sequence[int]) -> dict:
    report = {}
    for attr in attributes:
        report[attr] = {}
        for c in positive_classes:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report[attr][str(c)] = {
                    "equality_of_opportunity": equality_of_opportunity(preds, attr, c),
                    "average_odds": average_odds(preds, attr, c),
                }
    return report


def compare_audits(before: dict, after: dict) -> dict:
    """Per attribute/class change in EOO gap and Average Odds (after - before)."""
    out = {}
    for attr, by_class in before.items():
        for c, rep in by_class.items():
            if attr in after and c in after[attr]:
                a = after[attr][c]
                out.setdefault(attr, {})[c] = {
                    "eoo_gap_before": rep["equality_of_opportunity"]["gap"],
                    "eoo_gap_after": a["equality_of_opportunity"]["gap"],
                    "eoo_gap_change": a["equality_of_opportunity"]["gap"] - rep["equality_of_opportunity"]["gap"],
                    "average_odds_before": rep["average_odds"]["max"],
                    "average_odds_after": a["average_odds"]["max"],
                }
    return out


def group_array(preds: PredictionSet, attribute: str) -> np.ndarray:
    return np.array([str(g.get(attribute, "unknown")) for g in preds.groups])
