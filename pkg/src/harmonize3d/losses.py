"""Training objectives.

SSIM-bearing terms: reconstruction and cycle (SSIM/L1 mixes), structural
consistency (structure component) and luminance consistency (luminance
component).  Adversarial terms use the least-squares GAN form; label terms are
mean squared errors against {-1, +1} targets.

Generator side (encoders and generator)::

    L_G = lum*L_lum + struct*L_struct + cla*L_cla + adv_b*L_adv^b - pre_b*L_pre^b
          + rec*L_rec + adv_x*L_adv^x + pre_x_g*L_pre^{x,G} + cc*L_cc + lat*L_lat

Discriminator side::

    L_D = adv_b*L_adv^b(D) + pre_b*L_pre^b + adv_x*L_adv^x(D) + pre_x_d*L_pre^{x,D}

where the ``(D)`` adversarial terms are the discriminator halves of the
least-squares game (real towards 1, fake towards 0).  The minus sign on
``L_pre^b`` makes the encoders fight the content site classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .ssim import SsimParams, luminance_term, ssim_loss, structure_term
from .tensor import Tensor, as_tensor
from .volume import LabelVector

__all__ = [
    "LossWeights",
    "LossReport",
    "GENERATOR_TERMS",
    "DISCRIMINATOR_TERMS",
    "mix_loss",
    "cycle_loss",
    "reconstruction_loss",
    "structural_consistency_loss",
    "luminance_consistency_loss",
    "lsgan_discriminator_loss",
    "lsgan_generator_loss",
    "label_mse",
    "style_classification_loss",
    "latent_recovery_terms",
    "latent_recovery_loss",
    "adversarial_losses",
    "label_prediction_losses",
    "total_generator_objective",
    "total_discriminator_objective",
]


@dataclass(frozen=True)
class LossWeights:
    ssim_mix: float = 0.5
    lum: float = 5.0
    struct: float = 5.0
    cla: float = 1.0
    adv_b: float = 1.0
    pre_b: float = 1.0
    rec: float = 10.0
    adv_x: float = 1.0
    pre_x_g: float = 1.0
    pre_x_d: float = 1.0
    cc: float = 10.0
    lat: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and non-negative, got {v}")
        if self.ssim_mix > 1:
            raise ValueError("ssim_mix must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**d)


# term name -> (weight attribute, sign)
GENERATOR_TERMS = {
    "lum": ("lum", 1.0),
    "struct": ("struct", 1.0),
    "cla": ("cla", 1.0),
    "adv_b": ("adv_b", 1.0),
    "pre_b": ("pre_b", -1.0),
    "rec": ("rec", 1.0),
    "adv_x": ("adv_x", 1.0),
    "pre_x_g": ("pre_x_g", 1.0),
    "cc": ("cc", 1.0),
    "lat": ("lat", 1.0),
}
DISCRIMINATOR_TERMS = {
    "adv_b_d": ("adv_b", 1.0),
    "pre_b_d": ("pre_b", 1.0),
    "adv_x_d": ("adv_x", 1.0),
    "pre_x_d": ("pre_x_d", 1.0),
}


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mix_loss(x: Tensor, y: Tensor, lam: float, params: SsimParams = SsimParams()) -> Tensor:
    """``lam * (1 - SSIM(x, y)) + (1 - lam) * mean|x - y|``."""
    x, y = as_tensor(x), as_tensor(y)
    _check_same(x, y)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    l1 = (x - y).abs().mean()
    if lam == 0.0:
        return l1
    s = ssim_loss(x, y, params)
    if lam == 1.0:
        return s
    return s * lam + l1 * (1.0 - lam)


def cycle_loss(x_u, x_cc, lam: float, params: SsimParams = SsimParams()) -> Tensor:
    """Cycle consistency between ``x_u`` and its translate-and-back reconstruction."""
    return mix_loss(x_u, x_cc, lam, params)


def reconstruction_loss(x_u, x_uu, lam: float, params: SsimParams = SsimParams()) -> Tensor:
    """Self-reconstruction fidelity; same form as :func:`cycle_loss`."""
    return mix_loss(x_u, x_uu, lam, params)


def structural_consistency_loss(x_uu, x_ul, params: SsimParams = SsimParams()) -> Tensor:
    """``1 - s(x_uu, x_ul)``: translation must keep the structure of the reconstruction."""
    x_uu, x_ul = as_tensor(x_uu), as_tensor(x_ul)
    _check_same(x_uu, x_ul)
    return 1.0 - structure_term(x_uu, x_ul, params)


def luminance_consistency_loss(x_l, x_ul, params: SsimParams = SsimParams()) -> Tensor:
    """``1 - l(x_l, x_ul)``: the translated image should share the target image's brightness."""
    x_l, x_ul = as_tensor(x_l), as_tensor(x_ul)
    _check_same(x_l, x_ul)
    return 1.0 - luminance_term(x_l, x_ul, params)


def lsgan_discriminator_loss(real_out: Tensor, fake_out: Tensor) -> Tensor:
    """``mean((D(real) - 1)^2) + mean(D(fake)^2)``."""
    return ((real_out - 1.0) ** 2).mean() + (fake_out**2).mean()


def lsgan_generator_loss(fake_out: Tensor) -> Tensor:
    """``mean((D(fake) - 1)^2)``."""
    return ((fake_out - 1.0) ** 2).mean()


def label_targets(labels, n: int | None = None) -> Tensor:
    """Stack label vectors (or a (N, K) array) into a constant tensor of +-1 targets."""
    if isinstance(labels, LabelVector):
        labels = [labels]
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], LabelVector):
        arr = np.stack([lab.as_array() for lab in labels])
    else:
        arr = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr[None]
    if n is not None and arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n, axis=0)
    return Tensor(arr)


def label_mse(pred: Tensor, labels) -> Tensor:
    """Mean squared error between label predictions (N, K) and {-1, +1} targets."""
    target = label_targets(labels, pred.shape[0])
    if target.shape != pred.shape:
        raise ValueError(f"label length mismatch: predictions {pred.shape} vs labels {target.shape}")
    return ((pred - target) ** 2).mean()


def style_classification_loss(E_s, x_l, labels) -> Tensor:
    """L_cla^s: the style encoder's label head on labeled images vs their true labels."""
    return label_mse(E_s(x_l).label, labels)


def latent_recovery_terms(noise_rec: Tensor, n_r: Tensor, c_rec: Tensor, c_u: Tensor) -> Tensor:
    """``mean|noise_rec - n_r| + mean|c_rec - c_u|`` with ``c_u`` held constant."""
    _check_same(noise_rec, n_r)
    _check_same(c_rec, c_u)
    return (noise_rec - n_r.detach()).abs().mean() + (c_rec - c_u.detach()).abs().mean()


def latent_recovery_loss(E_b, E_s, x_ul: Tensor, c_u: Tensor, n_r: Tensor) -> Tensor:
    """L_lat: re-encoding the translated image must recover the drawn noise and the content code."""
    return latent_recovery_terms(E_s(x_ul).noise, as_tensor(n_r), E_b(x_ul), c_u)


@dataclass
class AdversarialTerms:
    gen_x: Tensor
    disc_x: Tensor
    gen_b: Tensor
    disc_b: Tensor


def adversarial_losses(image_disc, content_disc, real_x: Tensor, fake_x: Tensor, c_u: Tensor, c_l: Tensor) -> AdversarialTerms:
    """Both halves of the image and content least-squares games.

    Images: labeled ``real_x`` vs generated ``fake_x``.  Content: labeled-pool
    codes ``c_l`` act as real and unlabeled-pool codes ``c_u`` as fake.  The
    discriminator halves see detached inputs.
    """
    real_patch = image_disc(real_x)[0]
    fake_patch_d = image_disc(fake_x.detach())[0]
    fake_patch_g = image_disc(fake_x)[0]
    return AdversarialTerms(
        gen_x=lsgan_generator_loss(fake_patch_g),
        disc_x=lsgan_discriminator_loss(real_patch, fake_patch_d),
        gen_b=lsgan_generator_loss(content_disc(c_u)),
        disc_b=lsgan_discriminator_loss(content_disc(c_l.detach()), content_disc(c_u.detach())),
    )


@dataclass
class LabelTerms:
    pre_b: Tensor
    pre_x_d: Tensor
    pre_x_g: Tensor


def label_prediction_losses(content_cls, image_disc, c_l: Tensor, x_l: Tensor, x_ul: Tensor, true_labels, target_labels) -> LabelTerms:
    """L_pre^b on labeled content codes, L_pre^{x,D} on real labeled images, L_pre^{x,G} on translations.

    ``target_labels`` are the labels the translation ``x_ul`` was asked to carry.
    """
    return LabelTerms(
        pre_b=label_mse(content_cls(c_l), true_labels),
        pre_x_d=label_mse(image_disc(x_l)[1], true_labels),
        pre_x_g=label_mse(image_disc(x_ul)[1], target_labels),
    )


def _weighted(terms: Mapping[str, Tensor | float], weights: LossWeights, table: Mapping) -> Tensor | float:
    missing = [name for name in table if name not in terms]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    total: Tensor | float = 0.0
    for name, (attr, sign) in table.items():
        w = getattr(weights, attr) * sign
        if w != 0.0:
            total = total + terms[name] * w
    return total


def total_generator_objective(terms: Mapping[str, Tensor | float], weights: LossWeights) -> Tensor | float:
    return _weighted(terms, weights, GENERATOR_TERMS)


def total_discriminator_objective(terms: Mapping[str, Tensor | float], weights: LossWeights) -> Tensor | float:
    return _weighted(terms, weights, DISCRIMINATOR_TERMS)


def _value(t) -> float:
    return float(t.item() if isinstance(t, Tensor) else t)


@dataclass
class LossReport:
    """Named scalar terms of one training step and the two weighted totals."""

    step: int
    terms: dict[str, float] = field(default_factory=dict)
    generator_total: float = 0.0
    discriminator_total: float = 0.0

    @classmethod
    def from_terms(cls, step: int, terms: Mapping[str, Tensor | float], weights: LossWeights) -> "LossReport":
        values = {k: _value(v) for k, v in terms.items()}
        return cls(
            step=step,
            terms=values,
            generator_total=float(total_generator_objective(values, weights)),
            discriminator_total=float(total_discriminator_objective(values, weights)),
        )

    def to_json(self) -> str:
        # repr-exact floats so logs compare bit for bit
        return json.dumps({"step": self.step, **self.terms, "generator_total": self.generator_total, "discriminator_total": self.discriminator_total})

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        d = json.loads(line)
        step = d.pop("step")
        g = d.pop("generator_total")
        dt = d.pop("discriminator_total")
        return cls(step, d, g, dt)
