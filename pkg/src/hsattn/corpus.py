"""Corpus manifests and the log-Mel feature cache.

A manifest is a CSV with header ``file,subject,split,label``. Relative file
paths resolve against the manifest's directory. Splits must be
subject-independent: a subject id may appear in one split only.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsattn.audio import FeatureConfig, Spectrogram, load_wav, log_mel, read_lmel
from hsattn.errors import HssError, IngestionError, InputError, ParseError

LABELS = ("normal", "mild", "mod_severe")
SPLITS = ("train", "dev", "test")
MANIFEST_HEADER = ("file", "subject", "split", "label")


@dataclass(frozen=True)
class Record:
    file: str  # as written in the manifest
    path: Path  # resolved
    subject: str
    split: str
    label: str

    @property
    def label_id(self) -> int:
        return LABELS.index(self.label)


@dataclass
class CorpusManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        owners: dict[str, str] = {}
        for r in self.records:
            if r.label not in LABELS:
                raise InputError(f"{r.file}: label {r.label!r} not in {LABELS}")
            if r.split not in SPLITS:
                raise InputError(f"{r.file}: split {r.split!r} not in {SPLITS}")
            seen = owners.setdefault(r.subject, r.split)
            if seen != r.split:
                raise InputError(f"subject {r.subject!r} appears in both {seen!r} and {r.split!r} splits")

    @classmethod
    def load(cls, path) -> CorpusManifest:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
        rows = list(csv.reader(text.splitlines()))
        if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
            raise ParseError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        root = path.parent
        records = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not any(c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            file, subject, split, label = (c.strip() for c in row)
            records.append(Record(file, (root / file), subject, split, label))
        return cls(records, root)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([r.file, r.subject, r.split, r.label])

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        counts = Counter(r.label for r in self.records if split is None or r.split == split)
        return {lab: counts.get(lab, 0) for lab in LABELS}


def feature_path(cache_dir, record: Record) -> Path:
    """Cache location of a record's spectrogram; unique per manifest path."""
    stem = record.file.replace("\\", "/").lstrip("/").replace("/", "__")
    return Path(cache_dir) / (Path(stem).with_suffix("").name + ".lmel")


def compute_features(record: Record, config: FeatureConfig | None = None) -> Spectrogram:
    try:
        clip = load_wav(record.path)
    except OSError as exc:
        raise IngestionError(f"cannot read audio {record.path}: {exc.strerror or exc}") from exc
    return log_mel(clip, config)


def load_features(record: Record, cache_dir=None, config: FeatureConfig | None = None) -> np.ndarray:
    """Spectrogram values from the cache, or computed from audio without one."""
    if cache_dir is None:
        return compute_features(record, config).values
    path = feature_path(cache_dir, record)
    if not path.exists():
        raise IngestionError(f"missing feature file {path} for {record.file}")
    try:
        return read_lmel(path).values
    except HssError:
        raise
    except OSError as exc:
        raise IngestionError(f"cannot read feature file {path}: {exc}") from exc
