"""Split protocols, repeated train/test evaluation, cross-dataset evaluation
and the fusion-order ablation."""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..config import config_hash
from ..datasets import IQADataset, Sample
from ..errors import GlintError, ProtocolError
from .metrics import plcc, srocc

_MOD = "eval_harness"

Predictor = Callable[[Sequence[Sample]], Sequence[float]]
ModelFactory = Callable[[Sequence[Sample], int], Predictor]


@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    train_keys: frozenset = field(default=frozenset(), repr=False)
    test_keys: frozenset = field(default=frozenset(), repr=False)


def _split_key(s: Sample, by_content: bool) -> str:
    return s.content_id if by_content else s.id


def make_split(dataset: IQADataset, repeat_index: int, seed: int = 0, train_fraction: float = 0.8) -> SplitPlan:
    """8:2 split keyed by content id (synthetic sets) or image id (authentic
    sets). The test side gets floor(20%) of the keys."""
    by_content = dataset.synthetic
    keys = sorted({_split_key(s, by_content) for s in dataset.samples})
    n_test = math.floor(len(keys) * (1.0 - train_fraction) + 1e-9)
    if n_test < 1 or len(keys) - n_test < 1:
        unit = "content ids" if by_content else "images"
        raise ProtocolError(f"{len(keys)} {unit} are too few for an 8:2 split", module=_MOD)
    rng = np.random.default_rng([seed, repeat_index])
    perm = rng.permutation(len(keys))
    test_keys = frozenset(keys[i] for i in perm[:n_test])
    train_keys = frozenset(keys) - test_keys
    train_ids = tuple(s.id for s in dataset.samples if _split_key(s, by_content) in train_keys)
    test_ids = tuple(s.id for s in dataset.samples if _split_key(s, by_content) in test_keys)
    return SplitPlan(repeat_index, train_ids, test_ids, train_keys, test_keys)


def make_splits(dataset: IQADataset, n_repeats: int = 10, seed: int = 0) -> list[SplitPlan]:
    return [make_split(dataset, r, seed) for r in range(n_repeats)]


@dataclass
class EvalReport:
    protocol: str  # "single" or "cross"
    model: str
    rows: list[dict]
    source: str | None = None
    medians: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if not self.medians:
            self.medians = self.compute_medians()

    def compute_medians(self) -> dict:
        out = {}
        for tag in sorted({r["dataset"] for r in self.rows}):
            ok = [r for r in self.rows if r["dataset"] == tag and r.get("error") is None]
            if ok:
                out[tag] = {
                    "srocc": statistics.median(r["srocc"] for r in ok),
                    "plcc": statistics.median(r["plcc"] for r in ok),
                    "n_repeats": len(ok),
                }
            else:
                out[tag] = {"srocc": None, "plcc": None, "n_repeats": 0}
        return out

    def medians_consistent(self) -> bool:
        return self.compute_medians() == self.medians

    @property
    def errors(self) -> list[dict]:
        return [r for r in self.rows if r.get("error") is not None]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "model": self.model,
            "source": self.source,
            "config_hash": self.config_hash,
            "rows": self.rows,
            "medians": self.medians,
        }

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        jpath, cpath = stem.with_suffix(".json"), stem.with_suffix(".csv")
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        cols = ["dataset", "repeat", "srocc", "plcc", "n_train", "n_test", "error"]
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", self.config_hash] + [""] * (len(cols) - 2))
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r.get(c) if r.get(c) is not None else "" for c in cols])
        return jpath, cpath


def _score(pred, truth) -> tuple[float, float]:
    return srocc(pred, truth), plcc(pred, truth)


def run_protocol(
    model_factory: ModelFactory,
    dataset: IQADataset,
    n_repeats: int = 10,
    seed: int = 0,
    model_tag: str = "model",
    extra_config: Mapping | None = None,
) -> EvalReport:
    """For each repeat: split, build a predictor from the training side with a
    repeat-specific seed, score the test side. Failures (e.g. a constant
    predictor) are recorded on the repeat instead of aborting the run."""
    splits = make_splits(dataset, n_repeats, seed)
    by_id = {s.id: s for s in dataset.samples}
    rows = []
    for plan in splits:
        repeat_seed = int(np.random.SeedSequence([seed, plan.repeat_index]).generate_state(1)[0] % (2**31))
        train = [by_id[i] for i in plan.train_ids]
        test = [by_id[i] for i in plan.test_ids]
        row = {"dataset": dataset.tag, "repeat": plan.repeat_index, "n_train": len(train),
               "n_test": len(test), "srocc": None, "plcc": None, "error": None}
        try:
            predictor = model_factory(train, repeat_seed)
            row["srocc"], row["plcc"] = _score(predictor(test), [s.label for s in test])
        except GlintError as exc:
            row["error"] = f"{exc.code}: {exc}"
        rows.append(row)
    chash = config_hash({"dataset": dataset.tag, "n_repeats": n_repeats, "seed": seed,
                         "model": model_tag, **(extra_config or {})})
    return EvalReport("single", model_tag, rows, config_hash=chash)


def cross_eval(
    predictors: Sequence[Predictor],
    source_tag: str,
    targets: Sequence[IQADataset],
    model_tag: str = "model",
) -> EvalReport:
    """Evaluate predictors trained on the full ``source_tag`` dataset (one per
    training re-run) on each unseen target; medians are taken over re-runs."""
    for t in targets:
        if t.tag == source_tag:
            raise ProtocolError(f"target {t.tag!r} is the training source", module=_MOD)
    rows = []
    for run, predictor in enumerate(predictors):
        for t in targets:
            row = {"dataset": t.tag, "repeat": run, "n_train": None, "n_test": len(t),
                   "srocc": None, "plcc": None, "error": None}
            try:
                row["srocc"], row["plcc"] = _score(predictor(t.samples), [s.label for s in t.samples])
            except GlintError as exc:
                row["error"] = f"{exc.code}: {exc}"
            rows.append(row)
    chash = config_hash({"source": source_tag, "targets": [t.tag for t in targets], "model": model_tag,
                         "runs": len(predictors)})
    return EvalReport("cross", model_tag, rows, source=source_tag, config_hash=chash)


# --------------------------------------------------------------------------- model factories


def oracle_factory(train, seed) -> Predictor:
    return lambda samples: [s.label for s in samples]


def trained_factory(model_cfg, train_cfg, n_patches: int | None = None) -> ModelFactory:
    """Train a fresh network per repeat and predict with patch averaging."""
    from dataclasses import replace

    from ..training import fit_model, predict

    def factory(train, seed):
        cfg = replace(train_cfg, seed=seed)
        model = fit_model(model_cfg, train, cfg)
        patches = n_patches or cfg.eval_patches
        return lambda samples: predict(model, samples, patches, seed=seed, crop_size=cfg.crop_size)

    return factory


def checkpoint_predictor(path, n_patches: int = 25, seed: int = 0) -> Predictor:
    from ..training import model_from_checkpoint, predict

    model = model_from_checkpoint(path)
    return lambda samples: predict(model, samples, n_patches, seed=seed)


# --------------------------------------------------------------------------- fusion-order ablation


def fusion_order_ablation(dataset: IQADataset, model_cfg, train_cfg, repeat_index: int = 0,
                          seed: int = 0) -> list[dict]:
    """Train both fusion orders on the same content split; one row per order."""
    from dataclasses import replace

    from ..model import FusionOrder
    from ..training import fit_model, predict

    plan = make_split(dataset, repeat_index, seed)
    train = dataset.subset(plan.train_ids)
    test = dataset.subset(plan.test_ids)
    rows = []
    for order in FusionOrder:
        cfg = replace(model_cfg, fusion_order=order)
        model = fit_model(cfg, train, train_cfg)
        p_train = predict(model, train, train_cfg.eval_patches, seed=train_cfg.seed, crop_size=train_cfg.crop_size)
        p_test = predict(model, test, train_cfg.eval_patches, seed=train_cfg.seed, crop_size=train_cfg.crop_size)
        ys_tr, ys_te = [s.label for s in train], [s.label for s in test]
        rows.append({
            "fusion_order": order.value,
            "train_srocc": srocc(p_train, ys_tr),
            "test_srocc": srocc(p_test, ys_te),
            "test_plcc": plcc(p_test, ys_te),
            "n_train": len(train),
            "n_test": len(test),
        })
    return rows


def write_ablation(rows: list[dict], stem) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["test_srocc"] for r in rows], 0.4, label="SROCC")
    ax.bar(x + 0.2, [r["test_plcc"] for r in rows], 0.4, label="PLCC")
    ax.set_xticks(x, [r["fusion_order"] for r in rows])
    ax.legend()
    fig.tight_layout()
    fig.savefig(stem.with_suffix(".png"))
    plt.close(fig)
