"""gMAD pair selection: the defender partitions the corpus into quality
levels; inside each level the attacker picks the pair it rates furthest apart."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import InputError

_MOD = "eval_harness"


@dataclass(frozen=True)
class GmadPair:
    low: str  # attacker's worst image in the level
    high: str  # attacker's best image in the level
    level: int  # 0 = lowest defender quality
    attacker_gap: float
    defender_gap: float


def defender_levels(scores: Mapping[str, float], n_levels: int) -> dict[str, int]:
    """Equal-frequency levels: rank r (by score, then id) maps to
    floor(r * n_levels / n)."""
    ids = sorted(scores)
    vals = np.array([scores[i] for i in ids], dtype=np.float64)
    order = np.lexsort((np.arange(len(ids)), vals))
    n = len(ids)
    return {ids[idx]: (rank * n_levels) // n for rank, idx in enumerate(order)}


def gmad_pairs(defender: Mapping[str, float], attacker: Mapping[str, float], n_levels: int = 6) -> list[GmadPair]:
    if set(defender) != set(attacker):
        raise InputError("defender and attacker must score the same images", module=_MOD)
    if len(defender) < 2 * n_levels:
        raise InputError(
            f"corpus of {len(defender)} images is too small for {n_levels} levels "
            f"(need at least {2 * n_levels})",
            module=_MOD,
        )
    levels = defender_levels(defender, n_levels)
    pairs = []
    for lv in range(n_levels):
        members = sorted(i for i, v in levels.items() if v == lv)
        att = np.array([attacker[i] for i in members], dtype=np.float64)
        # argmin/argmax return the first hit, i.e. the smallest id among ties
        lo, hi = members[int(np.argmin(att))], members[int(np.argmax(att))]
        dvals = [defender[i] for i in members]
        pairs.append(
            GmadPair(lo, hi, lv, float(attacker[hi] - attacker[lo]), float(max(dvals) - min(dvals)))
        )
    return pairs


def plot_gmad(defender, attacker, pairs, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = sorted(defender)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([defender[i] for i in ids], [attacker[i] for i in ids], s=8, c="0.6")
    for p in pairs:
        xs = [defender[p.low], defender[p.high]]
        ys = [attacker[p.low], attacker[p.high]]
        ax.plot(xs, ys, "o-", ms=5)
    ax.set_xlabel("defender score")
    ax.set_ylabel("attacker score")
    ax.set_title("gMAD pairs per defender level")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
