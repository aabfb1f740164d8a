"""Dataset adapters: a labels CSV (``image_path,label[,content_id,type,level]``)
or a SAQT manifest, both resolved against a root directory."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .images import load_image

_MOD = "eval_harness"


@dataclass
class Sample:
    id: str
    label: float
    content_id: str | None = None
    image_path: str | None = None
    type: str | None = None
    level: int | None = None
    image: np.ndarray | None = field(default=None, repr=False)

    def load(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise DataError(f"sample {self.id} has neither pixels nor a path", module=_MOD)
            self.image = load_image(self.image_path)
        return self.image


@dataclass
class IQADataset:
    tag: str
    samples: list[Sample]

    @property
    def synthetic(self) -> bool:
        """Synthetic sets carry a content (pristine) id per sample and are
        split by content; authentic ones are split by image."""
        return bool(self.samples) and all(s.content_id is not None for s in self.samples)

    def __len__(self):
        return len(self.samples)

    def subset(self, ids) -> list[Sample]:
        ids = set(ids)
        return [s for s in self.samples if s.id in ids]

    @classmethod
    def from_labels_csv(cls, path, root=None, tag: str | None = None) -> "IQADataset":
        path = Path(path)
        root = Path(root) if root else path.parent
        samples = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"image_path", "label"} - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path} lacks columns {sorted(missing)}", module=_MOD)
            for r in reader:
                samples.append(
                    Sample(
                        id=r["image_path"],
                        label=float(r["label"]),
                        content_id=r.get("content_id") or None,
                        image_path=str(root / r["image_path"]),
                        type=r.get("type") or None,
                        level=int(r["level"]) if r.get("level") else None,
                    )
                )
        if not samples:
            raise DataError(f"{path} has no rows", module=_MOD)
        return cls(tag or path.stem, samples)

    @classmethod
    def from_manifest(cls, path, tag: str | None = None) -> "IQADataset":
        from .saqt import DatasetManifest

        path = Path(path)
        man = DatasetManifest.read(path)
        samples = [
            Sample(
                id=r["image_path"],
                label=float(r["label"]),
                content_id=r["source_high_quality_id"],
                image_path=str(path.parent / r["image_path"]),
                type=r["type"],
                level=r["level"],
            )
            for r in man.records
        ]
        return cls(tag or path.stem, samples)
