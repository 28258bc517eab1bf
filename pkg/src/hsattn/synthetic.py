"""Synthetic three-class corpus of band-limited tones.

Each class owns a disjoint frequency band; a clip is a sum of a few
sinusoids drawn from that band under a slow amplitude envelope, plus a
little white noise. The classes are trivially separable in the log-Mel
domain, which makes the corpus suitable for overfitting and plumbing tests.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from hsattn.audio import write_wav
from hsattn.corpus import LABELS, SPLITS, CorpusManifest, Record

CLASS_BANDS = {"normal": (100.0, 250.0), "mild": (450.0, 700.0), "mod_severe": (1000.0, 1500.0)}


def synth_clip(label: str, duration: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = CLASS_BANDS[label]
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    x = np.zeros_like(t)
    for f in rng.uniform(lo, hi, size=3):
        x += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    beat = rng.uniform(0.8, 1.6)  # roughly a heartbeat rate in Hz
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * beat * t) ** 2
    x = x * envelope + 0.02 * rng.standard_normal(len(t))
    return 0.25 * x / np.abs(x).max()


def make_corpus(
    out_dir,
    per_class: Mapping[str, int] | int = 4,
    duration: float = 1.0,
    seed: int = 0,
    sample_rate: int = 4000,
) -> Path:
    """Write WAVs plus ``manifest.csv`` under ``out_dir``; returns the manifest path.

    ``per_class`` maps split name to clips per class (an int means train only).
    Every clip gets its own subject id, so splits are subject-independent.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    counts = {"train": per_class} if isinstance(per_class, int) else dict(per_class)
    rng = np.random.default_rng(seed)
    records = []
    for split in SPLITS:
        for label in LABELS:
            for i in range(counts.get(split, 0)):
                name = f"wav/{split}_{label}_{i:03d}.wav"
                write_wav(out / name, synth_clip(label, duration, sample_rate, rng), sample_rate)
                records.append(Record(name, out / name, f"{split}-{label}-{i}", split, label))
    manifest = CorpusManifest(records, out)
    path = out / "manifest.csv"
    manifest.save(path)
    return path
