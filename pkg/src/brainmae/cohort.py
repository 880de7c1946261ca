"""Cohort manifests and subject records.

A manifest is a JSON document listing subjects by reference (relative file
paths, not data), their train/val/test split, observed modalities and
labels. Splits follow the evaluation protocol: subjects whose observed set
is one of the five designated combinations are split 60/10/30
(diagnosis-stratified); every other combination goes 80/20 to train/val
only, so the test split contains designated combinations exclusively.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .modalities import canonical, combination_tag
from .volumes import load_atlas, load_volume, normalize_volume

MANIFEST_SCHEMA_VERSION = 1

DIAGNOSES = ("CN", "MCI", "AD")


@dataclass
class SubjectRecord:
    """One subject: observed modalities, per-modality volumes, labels."""

    subject_id: str
    observed: tuple[str, ...]
    volumes: dict[str, np.ndarray]
    diagnosis: Optional[str] = None
    mmse: Optional[float] = None
    age: Optional[float] = None

    def __post_init__(self):
        self.observed = canonical(self.observed)
        if not self.observed:
            raise DataError(f"subject {self.subject_id}: empty observed set")
        if set(self.volumes) != set(self.observed):
            raise DataError(
                f"subject {self.subject_id}: volume keys {sorted(self.volumes)} "
                f"!= observed {list(self.observed)}"
            )
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) > 1:
            raise DataError(f"subject {self.subject_id}: mixed volume shapes {shapes}")


@dataclass
class SubjectEntry:
    """Manifest row: paths and labels, no voxel data."""

    subject_id: str
    split: str
    observed: tuple[str, ...]
    files: dict[str, str]
    diagnosis: Optional[str] = None
    mmse: Optional[float] = None
    age: Optional[float] = None

    @property
    def combination(self) -> str:
        return combination_tag(self.observed)

    def to_json(self) -> dict:
        return {
            "id": self.subject_id,
            "split": self.split,
            "observed": list(self.observed),
            "combination": self.combination,
            "files": {m: self.files[m] for m in self.observed},
            "labels": {"diagnosis": self.diagnosis, "mmse": self.mmse, "age": self.age},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SubjectEntry":
        labels = obj.get("labels", {})
        return cls(
            subject_id=obj["id"],
            split=obj["split"],
            observed=canonical(obj["observed"]),
            files=dict(obj["files"]),
            diagnosis=labels.get("diagnosis"),
            mmse=labels.get("mmse"),
            age=labels.get("age"),
        )


@dataclass
class CohortManifest:
    subjects: list[SubjectEntry]
    volume_shape: tuple[int, int, int]
    atlas_file: str
    region_classes: list[str]
    root: Path = field(default_factory=Path)
    generator_config: Optional[dict] = None

    def split(self, name: str) -> list[SubjectEntry]:
        return [s for s in self.subjects if s.split == name]

    def validate(self) -> None:
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise DataError(f"duplicate subject id {s.subject_id}")
            seen.add(s.subject_id)
            if s.split not in ("train", "val", "test"):
                raise DataError(f"subject {s.subject_id}: bad split {s.split!r}")

    def save(self, path) -> None:
        doc = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "volume_shape": list(self.volume_shape),
            "atlas_file": self.atlas_file,
            "region_classes": self.region_classes,
            "generator_config": self.generator_config,
            "subjects": [s.to_json() for s in self.subjects],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CohortManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid manifest JSON: {e}") from e
        if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported manifest schema")
        manifest = cls(
            subjects=[SubjectEntry.from_json(s) for s in doc["subjects"]],
            volume_shape=tuple(doc["volume_shape"]),
            atlas_file=doc["atlas_file"],
            region_classes=list(doc["region_classes"]),
            root=path.parent,
            generator_config=doc.get("generator_config"),
        )
        manifest.validate()
        return manifest

    def load_subject(self, entry: SubjectEntry, normalize: bool = True) -> SubjectRecord:
        volumes = {}
        for m in entry.observed:
            v = load_volume(self.root / entry.files[m])
            volumes[m] = normalize_volume(v) if normalize else v
        return SubjectRecord(
            subject_id=entry.subject_id,
            observed=entry.observed,
            volumes=volumes,
            diagnosis=entry.diagnosis,
            mmse=entry.mmse,
            age=entry.age,
        )

    def load_atlas(self) -> np.ndarray:
        return load_atlas(self.root / self.atlas_file)
