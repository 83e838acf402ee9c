"""Residual site information: a linear site classifier on intensity histograms."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .volume import Volume

__all__ = ["ProbeResult", "RESULT_SCHEMA", "histogram_features", "probe_accuracy", "run_site_probe"]

N_BINS = 32
MIN_PER_SITE = 10

_ACCURACY = {"type": "number", "minimum": 0, "maximum": 1}
# JSON schema of the probe.json document written by the command line
RESULT_SCHEMA = {
    "type": "object",
    "required": ["version", "n_volumes", "seed", "raw_accuracy", "harmonized_accuracy", "chance", "folds", "raw_folds", "harmonized_folds"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "n_volumes": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "raw_accuracy": _ACCURACY,
        "harmonized_accuracy": {"anyOf": [_ACCURACY, {"type": "null"}]},
        "chance": _ACCURACY,
        "folds": {"type": "integer", "minimum": 2},
        "raw_folds": {"type": "array", "items": _ACCURACY},
        "harmonized_folds": {"type": "array", "items": _ACCURACY},
    },
}


def histogram_features(volumes: Sequence[Volume], bins: int = N_BINS) -> np.ndarray:
    """Normalized global histograms over [0, 1], one row per volume; identical for raw and harmonized inputs."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for v in volumes:
        x = np.clip(v.voxels if isinstance(v, Volume) else np.asarray(v), 0.0, 1.0)
        h, _ = np.histogram(x, bins=edges)
        rows.append(h / h.sum())
    return np.asarray(rows)


def probe_accuracy(features: np.ndarray, labels: Sequence[int], folds: int = 5, seed: int = 0) -> list[float]:
    """Per-fold accuracy of a multinomial logistic-regression probe under stratified k-fold CV."""
    y = np.asarray(labels)
    counts = Counter(y.tolist())
    if len(counts) < 2:
        raise ValueError("the probe needs at least two sites")
    if min(counts.values()) < folds:
        raise ValueError(f"every site needs at least {folds} volumes for {folds}-fold CV, got {dict(counts)}")
    # standardize with training-fold statistics only
    out = []
    for train, test in StratifiedKFold(folds, shuffle=True, random_state=seed).split(features, y):
        mu = features[train].mean(axis=0)
        sd = features[train].std(axis=0) + 1e-8
        clf = LogisticRegression(C=1.0, max_iter=2000)
        clf.fit((features[train] - mu) / sd, y[train])
        out.append(float((clf.predict((features[test] - mu) / sd) == y[test]).mean()))
    return out


@dataclass
class ProbeResult:
    raw_accuracy: float
    harmonized_accuracy: float | None
    chance: float
    folds: int
    raw_folds: list[float] = field(default_factory=list)
    harmonized_folds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def run_site_probe(volumes: Sequence[Volume], sites: Sequence[int], harmonized: Sequence[Volume] | None = None, folds: int = 5, seed: int = 0) -> ProbeResult:
    """Cross-validated site-probe accuracy on raw volumes and, optionally, their harmonized versions."""
    if len(volumes) != len(sites):
        raise ValueError(f"{len(volumes)} volumes but {len(sites)} site labels")
    counts = Counter(int(s) for s in sites)
    if len(counts) < 2:
        raise ValueError("the probe needs at least two sites")
    short = {s: c for s, c in counts.items() if c < MIN_PER_SITE}
    if short:
        raise ValueError(f"insufficient volumes per site (need {MIN_PER_SITE}): {short}")
    raw = probe_accuracy(histogram_features(volumes), sites, folds, seed)
    harm = None
    if harmonized is not None:
        if len(harmonized) != len(volumes):
            raise ValueError("one harmonized volume per raw volume is required")
        harm = probe_accuracy(histogram_features(harmonized), sites, folds, seed)
    return ProbeResult(
        raw_accuracy=float(np.mean(raw)),
        harmonized_accuracy=None if harm is None else float(np.mean(harm)),
        chance=1.0 / len(counts),
        folds=folds,
        raw_folds=raw,
        harmonized_folds=harm or [],
    )
