"""Evaluation: W1 between per-site mean-intensity distributions, luminance similarity, structural preservation."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .ssim import SsimParams, _kernels, _luminance_map, _filter, structure_term
from .tensor import Tensor
from .volume import Volume

__all__ = [
    "REPORT_VERSION",
    "SiteDistribution",
    "Summary",
    "EvalReport",
    "w1_distance",
    "site_mean_distributions",
    "pairwise_w1_matrix",
    "luminance_similarity_summary",
    "structural_preservation_summary",
    "cross_subject_structure",
    "emit_report",
]

REPORT_VERSION = 1
FOREGROUND_THRESHOLD = 0.05


def w1_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """1-Wasserstein distance between two empirical distributions.

    Equal sizes: mean absolute difference of the sorted samples.  Unequal
    sizes: the quantile functions are step functions with jumps at ``i/n``
    and ``j/m``; the integral of their absolute difference is summed exactly
    over the merged breakpoints (counted in units of ``1/(n m)``).
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("w1_distance needs non-empty samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("w1_distance needs finite samples")
    n, m = a.size, b.size
    if n == m:
        return math.fsum(np.abs(a - b).tolist()) / n
    marks = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    lo, hi = marks[:-1], marks[1:]
    diff = np.abs(a[lo // m] - b[lo // n])
    return math.fsum((diff * (hi - lo)).tolist()) / (n * m)


@dataclass
class SiteDistribution:
    site: int
    name: str
    samples: list[float]

    def __post_init__(self):
        if not self.samples or not all(math.isfinite(s) for s in self.samples):
            raise ValueError(f"site {self.name or self.site}: samples must be non-empty and finite")


@dataclass
class Summary:
    mean: float
    sd: float
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()), int(v.size))


def _volume_mean(v, mask: bool) -> float:
    x = v.voxels if isinstance(v, Volume) else np.asarray(v)
    x = x.astype(np.float64)
    if mask:
        fg = x[x > FOREGROUND_THRESHOLD]
        return float(fg.mean()) if fg.size else 0.0
    return float(x.mean())


def site_mean_distributions(volumes: Sequence[Volume], sites: Sequence[int], names: Sequence[str] | None = None, mask: bool = False) -> list[SiteDistribution]:
    """One mean intensity per volume, grouped by site index (ascending)."""
    if len(volumes) != len(sites):
        raise ValueError(f"{len(volumes)} volumes but {len(sites)} site entries")
    names = list(names) if names is not None else [str(s) for s in sites]
    groups: dict[int, list[float]] = {}
    labels: dict[int, str] = {}
    for v, s, nm in zip(volumes, sites, names):
        groups.setdefault(int(s), []).append(_volume_mean(v, mask))
        labels[int(s)] = nm
    return [SiteDistribution(s, labels[s], sorted(groups[s])) for s in sorted(groups)]


def pairwise_w1_matrix(dists: Sequence[SiteDistribution]) -> tuple[np.ndarray, Summary]:
    k = len(dists)
    if k < 2:
        raise ValueError("pairwise W1 needs at least two sites")
    mat = np.zeros((k, k))
    for i, j in combinations(range(k), 2):
        mat[i, j] = mat[j, i] = w1_distance(dists[i].samples, dists[j].samples)
    upper = mat[np.triu_indices(k, 1)]
    return mat, Summary.of(upper)


def _filtered_means(volumes: Sequence[Volume], params: SsimParams) -> np.ndarray:
    arr = np.stack([v.voxels if isinstance(v, Volume) else np.asarray(v) for v in volumes]).astype(np.float64)
    kernels = _kernels(params, arr.shape[1:])
    return _filter(Tensor(arr[:, None], _trusted=True), kernels).data[:, 0]


def luminance_similarity_summary(volumes: Sequence[Volume], params: SsimParams = SsimParams(), cap: int = 2000, seed: int = 0) -> Summary:
    """Mean and sd of the luminance term over unordered volume pairs (seeded subsample above ``cap``)."""
    if len(volumes) < 2:
        raise ValueError("luminance similarity needs at least two volumes")
    shapes = {tuple(np.shape(v.voxels if isinstance(v, Volume) else v)) for v in volumes}
    if len(shapes) != 1:
        raise ValueError(f"extent mismatch: {sorted(shapes)}")
    pairs = list(combinations(range(len(volumes)), 2))
    if len(pairs) > cap:
        pick = np.random.default_rng(seed).choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    mu = _filtered_means(volumes, params)
    values = []
    for i, j in pairs:
        lmap = _luminance_map(Tensor(mu[i], _trusted=True), Tensor(mu[j], _trusted=True), params.c1)
        values.append(float(lmap.data.mean()))
    return Summary.of(values)


def structural_preservation_summary(originals: Sequence[Volume], harmonized: Sequence[Volume], params: SsimParams = SsimParams()) -> Summary:
    """Mean and sd of ``structure_term(original, harmonized)`` over matched pairs."""
    if len(originals) != len(harmonized):
        raise ValueError(f"unmatched inputs: {len(originals)} originals vs {len(harmonized)} harmonized volumes")
    if not originals:
        raise ValueError("no volume pairs")
    return Summary.of([structure_term(o, h, params).item() for o, h in zip(originals, harmonized)])


def cross_subject_structure(volumes: Sequence[Volume], subjects: Sequence[int], n_pairs: int = 100, seed: int = 0, params: SsimParams = SsimParams()) -> Summary:
    """Structure term between volumes of different subjects: the "unrelated anatomy" baseline."""
    rng = np.random.default_rng(seed)
    values = []
    n = len(volumes)
    if len(set(subjects)) < 2:
        raise ValueError("need at least two subjects")
    while len(values) < n_pairs:
        i, j = rng.choice(n, size=2, replace=False)
        if subjects[i] != subjects[j]:
            values.append(structure_term(volumes[i], volumes[j], params).item())
    return Summary.of(values)


@dataclass
class EvalReport:
    target: str
    sites: list[str]
    w1_pre: list[list[float]]
    w1_post: list[list[float]]
    w1_pre_summary: Summary
    w1_post_summary: Summary
    luminance_pre: Summary
    luminance_post: Summary
    structure: Summary
    w1_pre_masked: Summary | None = None
    w1_post_masked: Summary | None = None
    samples_pre: list[SiteDistribution] = field(default_factory=list)
    samples_post: list[SiteDistribution] = field(default_factory=list)
    probe: dict | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, originals, harmonized, sites, names=None, target: str = "", params: SsimParams = SsimParams(), cap: int = 2000, seed: int = 0, metadata: dict | None = None) -> "EvalReport":
        pre = site_mean_distributions(originals, sites, names)
        post = site_mean_distributions(harmonized, sites, names)
        m_pre, s_pre = pairwise_w1_matrix(pre)
        m_post, s_post = pairwise_w1_matrix(post)
        return cls(
            target=target,
            sites=[d.name for d in pre],
            w1_pre=m_pre.tolist(),
            w1_post=m_post.tolist(),
            w1_pre_summary=s_pre,
            w1_post_summary=s_post,
            luminance_pre=luminance_similarity_summary(originals, params, cap, seed),
            luminance_post=luminance_similarity_summary(harmonized, params, cap, seed),
            structure=structural_preservation_summary(originals, harmonized, params),
            w1_pre_masked=pairwise_w1_matrix(site_mean_distributions(originals, sites, names, mask=True))[1],
            w1_post_masked=pairwise_w1_matrix(site_mean_distributions(harmonized, sites, names, mask=True))[1],
            samples_pre=pre,
            samples_post=post,
            metadata=dict(metadata or {}),
        )

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        version = d.pop("version", None)
        if version != REPORT_VERSION:
            raise ValueError(f"report version {version}, expected {REPORT_VERSION}")
        for key in ("w1_pre_summary", "w1_post_summary", "luminance_pre", "luminance_post", "structure", "w1_pre_masked", "w1_post_masked"):
            if d.get(key) is not None:
                d[key] = Summary(**d[key])
        for key in ("samples_pre", "samples_post"):
            d[key] = [SiteDistribution(**s) for s in d.get(key, [])]
        return cls(**d)


def _write_matrix(path: Path, names: list[str], mat) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site"] + names)
        for name, row in zip(names, mat):
            w.writerow([name] + [repr(float(x)) for x in row])


def _write_samples(path: Path, dists: list[SiteDistribution]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "mean_intensity"])
        for d in dists:
            for s in d.samples:
                w.writerow([d.name, repr(float(s))])


def emit_report(report: EvalReport, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``summary.json``, ``w1_pre.csv``, ``w1_post.csv`` and per-site sample CSVs."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "summary.json", out / "w1_pre.csv", out / "w1_post.csv", out / "samples_pre.csv", out / "samples_post.csv"]
        files[0].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        _write_matrix(files[1], report.sites, report.w1_pre)
        _write_matrix(files[2], report.sites, report.w1_post)
        _write_samples(files[3], report.samples_pre)
        _write_samples(files[4], report.samples_post)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return files
