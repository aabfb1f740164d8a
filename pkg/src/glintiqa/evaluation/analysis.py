"""Semantic distance vs. quality-score agreement between pristine pairs.

For every pair of pristine images that share a distortion grid, the semantic
distance of their embeddings is paired with the PLCC between their MOS
vectors across (type, level). Distances are binned at a fixed width and each
bin reports mean and standard deviation of PLCC.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import UndefinedCorrelationError
from ..saqt import semantic_distance
from .metrics import plcc

BIN_WIDTH = 0.07


def bin_index(distance: float, width: float = BIN_WIDTH) -> int:
    return int(math.floor(distance / width))


@dataclass
class DistanceBin:
    lo: float
    hi: float
    count: int
    mean_plcc: float
    std_plcc: float

    @property
    def center(self) -> float:
        return (self.lo + self.hi) / 2


@dataclass
class DistanceQualityTable:
    bins: list[DistanceBin]
    pairs: list[tuple[str, str, float, float]] = field(repr=False)
    skipped_incomplete: int = 0
    skipped_undefined: int = 0
    width: float = BIN_WIDTH

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "bin_center", "count", "mean_plcc", "std_plcc"])
            for b in self.bins:
                w.writerow([f"{b.lo:.4f}", f"{b.hi:.4f}", f"{b.center:.4f}", b.count,
                            repr(b.mean_plcc), repr(b.std_plcc)])

    def plot(self, path, title: str = "PLCC vs semantic distance") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        if self.pairs:
            ax.scatter([p[2] for p in self.pairs], [p[3] for p in self.pairs], s=4, c="0.75")
        ax.errorbar([b.center for b in self.bins], [b.mean_plcc for b in self.bins],
                    yerr=[b.std_plcc for b in self.bins], fmt="o-", capsize=3)
        ax.set_xlabel("semantic distance")
        ax.set_ylabel("PLCC of MOS vectors")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def analyze_distance_quality(
    embeddings: Mapping[str, np.ndarray],
    mos: Mapping[str, Mapping[tuple, float]],
    width: float = BIN_WIDTH,
) -> DistanceQualityTable:
    """``embeddings`` and ``mos`` are keyed by pristine id; ``mos[id]`` maps
    (type, level) to a score. Pairs whose grids differ are skipped and counted."""
    ids = sorted(set(embeddings) & set(mos))
    pairs = []
    incomplete = undefined = 0
    for a, b in itertools.combinations(ids, 2):
        if set(mos[a]) != set(mos[b]):
            incomplete += 1
            continue
        keys = sorted(mos[a])
        try:
            r = plcc([mos[a][k] for k in keys], [mos[b][k] for k in keys])
        except UndefinedCorrelationError:
            undefined += 1
            continue
        pairs.append((a, b, semantic_distance(embeddings[a], embeddings[b]), r))
    groups: dict[int, list[float]] = {}
    for _, _, d, r in pairs:
        groups.setdefault(bin_index(d, width), []).append(r)
    bins = []
    for k in sorted(groups):
        vals = np.array(groups[k])
        bins.append(DistanceBin(k * width, (k + 1) * width, len(vals), float(vals.mean()), float(vals.std())))
    return DistanceQualityTable(bins, pairs, incomplete, undefined, width)
