"""Synthetic multi-site corpus: shared anatomies rendered under parametric site styles.

An anatomy is a head-like ellipsoid holding smaller ellipsoidal "tissue"
blobs at three intensity plateaus, lightly smoothed.  A site style applies,
in order: Gaussian blur, a degree-2 polynomial bias field, a gamma curve, a
gain and additive Gaussian noise, then clamps to [0, 1].  Every draw is
seeded, so a corpus is reproducible bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import LabeledVolume, LabelVector, Volume, write_nifti

__all__ = [
    "StyleTransform",
    "PhantomConfig",
    "ManifestRecord",
    "PLATEAUS",
    "default_sites",
    "make_anatomy",
    "apply_style",
    "render_corpus",
    "generate_corpus",
    "load_manifest",
]

PLATEAUS = (0.25, 0.55, 0.85)
# Head semi-axes are drawn from this range (normalized coordinates in [-1, 1]).
HEAD_RADII = (0.85, 0.95)
# Monomials of the bias polynomial, in coefficient order.
BIAS_TERMS = ("1", "x", "y", "z", "x^2", "y^2", "z^2", "xy", "xz", "yz")


@dataclass(frozen=True)
class StyleTransform:
    gain: float = 1.0
    gamma: float = 1.0
    bias_field: tuple[float, ...] = (1.0,) + (0.0,) * 9
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bias_field", tuple(float(c) for c in self.bias_field))
        if len(self.bias_field) != len(BIAS_TERMS):
            raise ValueError(f"bias_field needs {len(BIAS_TERMS)} coefficients ({', '.join(BIAS_TERMS)})")
        if not self.gain > 0 or not self.gamma > 0:
            raise ValueError("gain and gamma must be positive")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "StyleTransform":
        return cls(**{**d, "bias_field": tuple(d.get("bias_field", cls().bias_field))})


def default_sites(n_sites: int = 3) -> tuple[StyleTransform, ...]:
    """The three reference sites (darker/contrast-up, brighter/contrast-down, blurred/noisy).

    For other site counts, gain and gamma are interpolated between the first two
    reference sites and the bias tilt alternates in sign.
    """
    if n_sites == 3:
        return (
            StyleTransform(0.85, 1.2, (1.0, 0.08, 0.0, 0.0, -0.05, 0.0, 0.0, 0.0, 0.0, 0.0), name="A"),
            StyleTransform(1.15, 0.9, (1.0, -0.08, 0.0, 0.0, 0.0, -0.05, 0.0, 0.0, 0.0, 0.0), name="B"),
            StyleTransform(1.0, 1.0, blur_sigma=0.5, noise_sigma=0.02, name="C"),
        )
    if n_sites < 2:
        raise ValueError("need at least two sites")
    out = []
    for k, t in enumerate(np.linspace(0.0, 1.0, n_sites)):
        tilt = 0.08 if k % 2 == 0 else -0.08
        out.append(StyleTransform(0.85 + 0.3 * t, 1.2 - 0.3 * t, (1.0, tilt) + (0.0,) * 8, name=chr(ord("A") + k)))
    return tuple(out)


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple[int, int, int] = (32, 32, 32)
    n_subjects: int = 20
    n_sites: int = 3
    sites: tuple[StyleTransform, ...] | None = None
    blob_range: tuple[int, int] = (3, 8)
    smooth_sigma: float = 0.7
    texture_amplitude: float = 0.4
    texture_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "blob_range", tuple(int(b) for b in self.blob_range))
        if self.n_sites < 2 or self.n_subjects < 2:
            raise ValueError("a corpus needs at least two sites and two subjects")
        sites = tuple(self.sites) if self.sites is not None else default_sites(self.n_sites)
        if len(sites) != self.n_sites:
            raise ValueError(f"{len(sites)} site transforms given for n_sites={self.n_sites}")
        object.__setattr__(self, "sites", sites)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = [asdict(s) for s in self.sites]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown PhantomConfig fields: {sorted(unknown)}")
        if d.get("sites") is not None:
            d["sites"] = tuple(StyleTransform.from_dict(s) for s in d["sites"])
        return cls(**d)


def _grid(extents: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.linspace(-1.0, 1.0, n) for n in extents]
    return np.meshgrid(*axes, indexing="ij")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(coords: np.ndarray, center, radii, rot) -> np.ndarray:
    local = (coords - np.asarray(center)) @ rot
    return ((local / np.asarray(radii)) ** 2).sum(axis=-1) <= 1.0


def make_anatomy(
    seed: int,
    extents: Sequence[int] = (32, 32, 32),
    blob_range: tuple[int, int] = (3, 8),
    smooth_sigma: float = 0.7,
    texture_amplitude: float = 0.4,
    texture_sigma: float = 1.5,
) -> Volume:
    """Head ellipsoid at the lowest plateau plus inner blobs at the two upper plateaus.

    The head counts as one ellipsoid, so the total lies in ``blob_range``;
    both upper plateaus are always present.  Tissue intensities are modulated
    by ``1 + texture_amplitude * T`` with ``T`` a unit-variance smooth random
    field, so no two subjects share fine structure.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ValueError(f"anatomy extents must be >= 16 per axis, got {extents}")
    lo, hi = blob_range
    if lo < 3 or hi < lo:
        raise ValueError("blob_range must satisfy 3 <= low <= high")
    rng = np.random.default_rng(seed)
    coords = np.stack(_grid(extents), axis=-1)
    vol = np.zeros(extents)
    head_radii = rng.uniform(*HEAD_RADII, 3)
    head_rot = _random_rotation(rng)
    vol[_ellipsoid(coords, rng.uniform(-0.05, 0.05, 3), head_radii, head_rot)] = PLATEAUS[0]
    n_blobs = int(rng.integers(lo, hi + 1)) - 1
    levels = [PLATEAUS[1], PLATEAUS[2]] + list(rng.choice(PLATEAUS[1:], n_blobs - 2))
    for level in rng.permutation(levels):
        radii = rng.uniform(0.15, 0.42, 3)
        center = rng.uniform(-0.4, 0.4, 3) * head_radii
        vol[_ellipsoid(coords, center, radii, _random_rotation(rng)) & (vol > 0)] = level
    if texture_amplitude > 0:
        field = ndimage.gaussian_filter(rng.standard_normal(extents), texture_sigma, mode="wrap")
        vol *= 1.0 + texture_amplitude * field / field.std()
    if smooth_sigma > 0:
        vol = ndimage.gaussian_filter(vol, smooth_sigma, mode="constant")
    return Volume(np.clip(vol, 0.0, 1.0))


def bias_field(coeffs: Sequence[float], extents: Sequence[int]) -> np.ndarray:
    x, y, z = _grid(extents)
    monomials = (np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    return sum(c * m for c, m in zip(coeffs, monomials))


def apply_style(v: Volume, t: StyleTransform, seed: int = 0) -> Volume:
    """``clamp(gain * (blur(v) * bias)^gamma + noise, 0, 1)``; the identity transform is exact."""
    x = v.voxels
    if t.blur_sigma > 0:
        x = ndimage.gaussian_filter(x.astype(np.float64), t.blur_sigma, mode="nearest")
    if t.bias_field != StyleTransform().bias_field:
        x = np.maximum(x * bias_field(t.bias_field, v.extents), 0.0)
    if t.gamma != 1.0:
        x = np.power(x, t.gamma)
    if t.gain != 1.0:
        x = x * t.gain
    if t.noise_sigma > 0:
        x = x + np.random.default_rng(seed).normal(0.0, t.noise_sigma, v.extents)
    return v.with_voxels(np.clip(x, 0.0, 1.0))


@dataclass(frozen=True)
class ManifestRecord:
    file: str
    subject: int
    site: int
    site_name: str
    transform: dict = field(default_factory=dict)

    def label(self, n_sites: int) -> LabelVector:
        return LabelVector.site(self.site, n_sites)


def _subject_seed(seed: int, subject: int) -> int:
    return int(np.random.SeedSequence([seed, subject]).generate_state(1)[0])


def _noise_seed(seed: int, subject: int, site: int) -> int:
    return int(np.random.SeedSequence([seed, subject, site, 1]).generate_state(1)[0])


def render_corpus(config: PhantomConfig) -> list[tuple[ManifestRecord, Volume]]:
    """Every subject under every site, in (subject, site) order, without touching disk."""
    out = []
    for subject in range(config.n_subjects):
        anatomy = make_anatomy(
            _subject_seed(config.seed, subject),
            config.extents,
            config.blob_range,
            config.smooth_sigma,
            config.texture_amplitude,
            config.texture_sigma,
        )
        for site, t in enumerate(config.sites):
            rec = ManifestRecord(
                file=f"sub-{subject:03d}_site-{site}.nii",
                subject=subject,
                site=site,
                site_name=t.name or str(site),
                transform={**asdict(t), "bias_field": list(t.bias_field)},
            )
            out.append((rec, apply_style(anatomy, t, _noise_seed(config.seed, subject, site))))
    return out


def generate_corpus(config: PhantomConfig, out_dir: str | os.PathLike) -> Path:
    """Write every rendered volume as NIfTI plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for rec, vol in render_corpus(config):
            write_nifti(vol, out / rec.file)
            records.append(asdict(rec))
        manifest = out / "manifest.json"
        manifest.write_text(json.dumps(records, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    return manifest


def load_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: manifest must be a non-empty JSON array")
    try:
        return [ManifestRecord(**r) for r in raw]
    except TypeError as exc:
        raise ValueError(f"{path}: malformed manifest record ({exc})") from exc


def labeled(records_and_volumes, n_sites: int) -> list[LabeledVolume]:
    return [LabeledVolume(v, r.label(n_sites), r.site_name) for r, v in records_and_volumes]
