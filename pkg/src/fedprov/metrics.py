"""Evaluation-side metrics: evasion / overfiltering rates and utility.

The rates are summed as exact fractions and converted to float once, so the
result does not depend on layer order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .lm import ModelParams, TokenSeq, cross_entropy


@dataclass(frozen=True)
class LayerFilterRecord:
    layer: str
    watermarking: frozenset
    filtered: frozenset


def records_for_round(layer_names: Sequence[str], filtered: Sequence[Iterable[int]],
                      watermarking: Iterable[int]) -> list[LayerFilterRecord]:
    wm = frozenset(watermarking)
    return [LayerFilterRecord(n, wm, frozenset(f)) for n, f in zip(layer_names, filtered)]


def evasion_rate(records: Sequence[LayerFilterRecord]) -> float:
    """Mean over layers of the fraction of watermarking clients that survive."""
    if not records:
        raise ValueError("no layer records")
    total = Fraction(0)
    for r in records:
        if not r.watermarking:
            raise ValueError(f"layer {r.layer} has no watermarking clients; ER is undefined")
        total += Fraction(len(r.watermarking - r.filtered), len(r.watermarking))
    return float(total / len(records))


def overfiltering_rate(records: Sequence[LayerFilterRecord]) -> float:
    """Mean over layers of the fraction of filtered clients that are clean.

    A layer that filtered nobody contributes 0 and still counts in the mean.
    """
    if not records:
        raise ValueError("no layer records")
    total = Fraction(0)
    for r in records:
        if r.filtered:
            total += Fraction(len(r.filtered - r.watermarking), len(r.filtered))
    return float(total / len(records))


def empty_filter_layers(records: Sequence[LayerFilterRecord]) -> int:
    return sum(1 for r in records if not r.filtered)


def utility_summary(model: ModelParams, eval_sets: Mapping[str, Sequence[TokenSeq]]) -> dict[str, float]:
    return {name: cross_entropy(model, data) for name, data in eval_sets.items()}
