"""Semantic-aligned quality transfer.

Every unlabeled high-quality image is matched to its semantically nearest
labeled pristine image (cosine distance between penultimate-layer ResNet
features). Each synthetic degradation of the high-quality image inherits the
subjective score that the matched pristine received for the same distortion
family and level.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from torchvision.models import resnet

from . import distortions
from .backbones import IMAGENET_MEAN, IMAGENET_STD, cache_dir
from .config import config_hash
from .errors import DataError, GlintError, InitializationError, InputError, NumericError
from .images import load_image, save_png, to_tensor

log = logging.getLogger(__name__)
_MOD = "saqt_builder"

MOS_TARGET = (0.0, 9.0)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --------------------------------------------------------------------------- embeddings


@dataclass
class SemanticEmbedding:
    vector: np.ndarray
    source_id: str = ""
    extractor_tag: str = ""


class EmbeddingExtractor:
    """Global-pooled penultimate features of a ResNet classifier (2048-d for
    resnet50/101)."""

    def __init__(self, arch: str = "resnet101", weights: str = "random", seed: int = 0):
        if arch not in ("resnet50", "resnet101"):
            raise InitializationError(f"unsupported embedding network {arch!r}", module=_MOD)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = getattr(resnet, arch)(weights=None)
        if weights == "random":
            tag = f"{arch}:random(seed={seed})"
        elif weights == "imagenet":
            enum = {"resnet50": resnet.ResNet50_Weights, "resnet101": resnet.ResNet101_Weights}[arch]
            try:
                torch.hub.set_dir(str(cache_dir()))
                net.load_state_dict(enum.IMAGENET1K_V1.get_state_dict(progress=False))
            except Exception as exc:
                raise InitializationError(f"could not fetch {arch} weights: {exc}", module=_MOD)
            tag = f"{arch}:imagenet1k_v1"
        else:
            p = Path(weights)
            if not p.is_file():
                raise InitializationError(f"embedding weights not found: {p}", module=_MOD)
            net.load_state_dict(torch.load(p, map_location="cpu", weights_only=True))
            digest = hashlib.sha256(p.read_bytes()).hexdigest()[:12]
            tag = f"{arch}:file:{digest}"
        net.fc = nn.Identity()
        self.net = net.eval()
        self.tag = tag
        self.mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self.std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, img: np.ndarray, source_id: str = "") -> SemanticEmbedding:
        x = (to_tensor(img).unsqueeze(0) - self.mean) / self.std
        vec = self.net(x)[0].double().numpy()
        return SemanticEmbedding(vec, source_id, self.tag)


def _vec(e) -> np.ndarray:
    return np.asarray(e.vector if isinstance(e, SemanticEmbedding) else e, dtype=np.float64)


# --------------------------------------------------------------------------- distance & matching


def semantic_distance(a, b) -> float:
    """1 - cosine similarity, in [0, 2]."""
    x, y = _vec(a), _vec(b)
    nxx, nyy = x @ x, y @ y
    if nxx == 0.0 or nyy == 0.0:
        raise NumericError("semantic distance undefined for a zero-norm embedding", module=_MOD)
    if np.array_equal(x, y):
        return 0.0
    cos = (x @ y) / np.sqrt(nxx * nyy)
    return float(min(2.0, max(0.0, 1.0 - cos)))


def distance_matrix(queries: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    """All query-to-corpus semantic distances, shape (Q, P)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    c = np.atleast_2d(np.asarray(corpus, dtype=np.float64))
    nq = np.einsum("ij,ij->i", q, q)
    nc = np.einsum("ij,ij->i", c, c)
    if (nq == 0).any() or (nc == 0).any():
        raise NumericError("semantic distance undefined for a zero-norm embedding", module=_MOD)
    d = 1.0 - (q @ c.T) / np.sqrt(np.outer(nq, nc))
    # bitwise-identical embeddings are at distance 0 by definition
    for a, b in np.argwhere(np.abs(d) < 1e-9):
        if np.array_equal(q[a], c[b]):
            d[a, b] = 0.0
    return np.clip(d, 0.0, 2.0)


def match_pristine(query, corpus: Sequence) -> tuple[int, float]:
    """Index and distance of the nearest corpus embedding (lowest index on ties)."""
    if len(corpus) == 0:
        raise InputError("cannot match against an empty pristine corpus", module=_MOD)
    d = distance_matrix(_vec(query)[None], np.stack([_vec(c) for c in corpus]))[0]
    i = int(np.argmin(d))
    return i, float(d[i])


def match_all(queries: np.ndarray, corpus: np.ndarray, shard_size: int | None = None, workers: int = 1):
    """Exact nearest-pristine search for a batch of queries.

    With ``shard_size`` the corpus is scanned in shards (optionally on a
    thread pool) and the shard minima are reduced; the result is identical to
    the single-pass scan, including lowest-index tie-breaking.
    """
    corpus = np.atleast_2d(np.asarray(corpus, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if corpus.shape[0] == 0:
        raise InputError("cannot match against an empty pristine corpus", module=_MOD)
    if not shard_size or shard_size >= corpus.shape[0]:
        idx = distance_matrix(queries, corpus).argmin(axis=1)
        return idx, _exact(queries, corpus, idx)
    starts = list(range(0, corpus.shape[0], shard_size))

    def scan(start):
        d = distance_matrix(queries, corpus[start : start + shard_size])
        i = d.argmin(axis=1)
        return i + start, d[np.arange(len(i)), i]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(scan, starts))
    best_i, best_d = results[0]
    best_i, best_d = best_i.copy(), best_d.copy()
    for i, d in results[1:]:
        # strict < keeps the earlier (lower-index) shard on ties
        better = d < best_d
        best_i[better], best_d[better] = i[better], d[better]
    return best_i, _exact(queries, corpus, best_i)


def _exact(queries, corpus, idx) -> np.ndarray:
    # report distances through the scalar definition so every scan layout agrees bitwise
    return np.array([semantic_distance(q, corpus[i]) for q, i in zip(queries, idx)])


# --------------------------------------------------------------------------- labeled corpus


@dataclass
class PristineEntry:
    id: str
    image_path: str | None
    mos: dict  # (family, level) -> score in [0, 9]


@dataclass
class LabeledCorpus:
    entries: list[PristineEntry]
    rescale: dict = field(default_factory=lambda: {"source": list(MOS_TARGET), "target": list(MOS_TARGET)})

    def __post_init__(self):
        for e in self.entries:
            for key, v in e.mos.items():
                if not MOS_TARGET[0] <= v <= MOS_TARGET[1]:
                    raise DataError(f"MOS {v} of {e.id} at {key} outside [0, 9]", module=_MOD)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def mos_of(self, i: int, family: str, level: int) -> float:
        e = self.entries[i]
        try:
            return e.mos[(family, level)]
        except KeyError:
            raise DataError(
                f"pristine {e.id!r} has no MOS for ({family}, level {level})", module=_MOD
            ) from None

    @classmethod
    def from_scores(cls, rows: Iterable[tuple], mos_range: tuple[float, float] | None = None,
                    paths: dict | None = None) -> "LabeledCorpus":
        """Build from (pristine_id, family, level, raw_mos) rows, min-max
        rescaling raw scores onto [0, 9]."""
        rows = list(rows)
        if not rows:
            raise DataError("labeled corpus is empty", module=_MOD)
        raw = np.array([float(r[3]) for r in rows])
        lo, hi = mos_range if mos_range else (float(raw.min()), float(raw.max()))
        if hi <= lo:
            raise DataError(f"degenerate MOS range [{lo}, {hi}]", module=_MOD)
        scale = (MOS_TARGET[1] - MOS_TARGET[0]) / (hi - lo)
        entries: dict[str, PristineEntry] = {}
        for pid, fam, lvl, m in rows:
            pid = str(pid)
            e = entries.setdefault(pid, PristineEntry(pid, (paths or {}).get(pid), {}))
            e.mos[(str(fam), int(lvl))] = MOS_TARGET[0] + (float(m) - lo) * scale
        return cls(list(entries.values()), {"source": [lo, hi], "target": list(MOS_TARGET)})

    @classmethod
    def from_csv(cls, path, root=None, mos_range=None) -> "LabeledCorpus":
        """CSV with columns ``pristine_id,pristine_path,type,level,mos``."""
        path = Path(path)
        root = Path(root) if root else path.parent
        rows, paths = [], {}
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append((r["pristine_id"], r["type"], int(r["level"]), float(r["mos"])))
                if r.get("pristine_path"):
                    paths[r["pristine_id"]] = str(root / r["pristine_path"])
        return cls.from_scores(rows, mos_range, paths)

    @classmethod
    def from_kadid(cls, dmos_csv, root=None, mos_range=(1.0, 5.0)) -> "LabeledCorpus":
        """KADID-10k ``dmos.csv`` (dist_img,ref_img,dmos,var) with images named
        ``I<ref>_<type>_<level>.png``."""
        dmos_csv = Path(dmos_csv)
        root = Path(root) if root else dmos_csv.parent / "images"
        by_index = {v["index"]: k for k, v in distortions.load_table()["families"].items()}
        rows, paths = [], {}
        pat = re.compile(r"I(\d+)_(\d+)_(\d+)")
        with open(dmos_csv, newline="") as fh:
            for r in csv.DictReader(fh):
                m = pat.match(r["dist_img"])
                if not m:
                    raise DataError(f"unrecognised KADID image name {r['dist_img']!r}", module=_MOD)
                pid = r["ref_img"].rsplit(".", 1)[0]
                rows.append((pid, by_index[int(m.group(2))], int(m.group(3)), float(r["dmos"])))
                paths[pid] = str(root / r["ref_img"])
        return cls.from_scores(rows, mos_range, paths)


# --------------------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    header: dict
    records: list[dict]

    def canonical_lines(self) -> list[str]:
        dump = lambda o: json.dumps(o, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return [dump({"header": self.header})] + [dump(r) for r in self.records]

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.canonical_lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"empty manifest {path}", module=_MOD)
        header = json.loads(lines[0])["header"]
        return cls(header, [json.loads(l) for l in lines[1:] if l.strip()])


def record_seed(seed: int, hq_index: int, family: str) -> int:
    """Per-(image, family) seed; shared across levels so that stochastic
    families scale one noise field."""
    fam_idx = distortions.load_table()["families"][family]["index"]
    return int(np.random.SeedSequence([seed, hq_index, fam_idx]).generate_state(1)[0])


def transfer_labels(
    hq_id: str,
    hq_index: int,
    hq_image: np.ndarray,
    matched: int,
    distance: float,
    corpus: LabeledCorpus,
    specs: Sequence[distortions.DistortionSpec],
    out_dir: Path | None = None,
    seed: int = 0,
) -> list[dict]:
    """Degrade one high-quality image under every spec and copy the matched
    pristine's MOS for the same (family, level)."""
    # fail before doing any image work if the MOS table is incomplete
    labels = [corpus.mos_of(matched, s.family, s.level) for s in specs]
    records = []
    for spec, label in zip(specs, labels):
        rseed = record_seed(seed, hq_index, spec.family)
        spec = distortions.DistortionSpec(spec.family, spec.level, spec.params, rseed)
        rec = {
            "image_path": None,
            "source_high_quality_id": hq_id,
            "matched_pristine_id": corpus.entries[matched].id,
            "semantic_distance": distance,
            "type": spec.family,
            "level": spec.level,
            "label": label,
            "seed": rseed,
        }
        if out_dir is not None:
            deg = distortions.apply_distortion(hq_image, spec, hq_id)
            rel = Path("images") / hq_id / f"{spec.family}_l{spec.level}.png"
            save_png(deg.data, out_dir / rel)
            rec["image_path"] = rel.as_posix()
            if deg.codec is not None:
                ext = {"JPEG": ".jpg", "JPEG2000": ".jp2"}[deg.codec["codec"]]
                crel = rel.with_suffix(ext)
                (out_dir / crel).write_bytes(deg.compressed)
                rec["codec"] = deg.codec
                rec["compressed_path"] = crel.as_posix()
        records.append(rec)
    return records


@dataclass
class SAQTConfig:
    families: list[str]
    levels: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    seed: int = 0
    extractor_arch: str = "resnet101"
    extractor_weights: str = "random"
    shard_size: int | None = None
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "families": list(self.families),
            "levels": list(self.levels),
            "seed": self.seed,
            "extractor_arch": self.extractor_arch,
            "extractor_weights": self.extractor_weights,
        }


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}", module=_MOD)
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def build_dataset(
    hq_dir,
    corpus: LabeledCorpus,
    cfg: SAQTConfig,
    out_path,
    extractor: EmbeddingExtractor | None = None,
) -> tuple[DatasetManifest, dict]:
    """Embed, match, degrade and label. Writes the manifest (JSON lines) and a
    ``.summary.json`` with semantic-distance statistics next to it. Returns
    (manifest, summary)."""
    out_path = Path(out_path)
    out_dir = out_path.parent
    extractor = extractor or EmbeddingExtractor(cfg.extractor_arch, cfg.extractor_weights, cfg.seed)
    specs = distortions.enumerate_specs(cfg.families, cfg.levels, cfg.seed)
    errors = []

    pristine_vecs = []
    for e in corpus.entries:
        if not e.image_path:
            raise DataError(f"pristine {e.id!r} has no image path", module=_MOD)
        pristine_vecs.append(extractor(load_image(e.image_path), e.id).vector)
    pristine_mat = np.stack(pristine_vecs)

    hq_dir = Path(hq_dir)
    hq_items = []
    for p in list_images(hq_dir):
        hq_id = p.relative_to(hq_dir).with_suffix("").as_posix()
        try:
            img = load_image(p)
            vec = extractor(img, hq_id).vector
        except (OSError, ValueError, GlintError) as exc:
            log.warning("skipping %s: %s", p, exc)
            errors.append({"path": str(p), "error": str(exc)})
            continue
        hq_items.append((hq_id, img, vec))
    if not hq_items:
        raise InputError(f"no readable high-quality images in {hq_dir}", module=_MOD)

    idx, dist = match_all(np.stack([v for _, _, v in hq_items]), pristine_mat, cfg.shard_size, cfg.workers)
    records = []
    for j, ((hq_id, img, _), i_hat, d) in enumerate(zip(hq_items, idx, dist)):
        records += transfer_labels(hq_id, j, img, int(i_hat), float(d), corpus, specs, out_dir, cfg.seed)
    records.sort(key=lambda r: (r["source_high_quality_id"], r["type"], r["level"]))

    header = {
        "kind": "saqt-manifest",
        "config_hash": config_hash(cfg.to_dict()),
        "config": cfg.to_dict(),
        "extractor_tag": extractor.tag,
        "rescale": corpus.rescale,
        "distortion_table_version": distortions.table_version(),
        "n_records": len(records),
    }
    manifest = DatasetManifest(header, records)
    manifest.write(out_path)

    summary = distance_summary(dist)
    summary.update({"config_hash": header["config_hash"], "n_high_quality": len(hq_items), "errors": errors})
    summary_path = out_path.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return manifest, summary


def distance_summary(distances, bin_width: float = 0.01) -> dict:
    d = np.asarray(distances, dtype=np.float64)
    edges = np.arange(0.0, max(float(d.max()), 0.0) + 2 * bin_width, bin_width)
    counts, edges = np.histogram(d, bins=edges)
    return {
        "count": int(d.size),
        "mean": float(d.mean()),
        "std": float(d.std()),
        "histogram": {"edges": [round(e, 10) for e in edges.tolist()], "counts": counts.tolist()},
    }
