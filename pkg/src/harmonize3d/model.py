"""Content/style disentanglement networks and the harmonization entry point.

Networks:

* ``ContentEncoder`` (E_b): stem conv, stride-2 downsamplings and residual
  blocks, all instance-normalized, producing a spatial content code.
* ``StyleEncoder`` (E_s): stride-2 convs without normalization, global average
  pooling, a linear noise head and a tanh label head.
* ``Generator`` (G): an MLP turns the style code into per-channel scale/shift
  for adaptive-instance-norm residual blocks, followed by nearest-neighbour
  upsampling convs and a sigmoid output conv.
* ``ImageDiscriminator`` (D_a^x with D_p^x): a strided conv trunk with a
  patch realism head and a tanh label head.
* ``ContentDiscriminator`` (D_a^b) and ``ContentClassifier`` (D_p^b): small
  conv heads on the content code.

Tensors are laid out (N, C, D, H, W).  Label vectors use the {-1, +1}
convention throughout; an all -1 label is the style-agnostic target.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Literal, Sequence

import numpy as np

from .tensor import (
    Tensor,
    channel_affine,
    concat,
    conv3d,
    instance_norm,
    linear,
    pixel_shuffle3d,
    pixel_unshuffle3d,
    resample3d,
)
from .volume import LabelVector, Volume

__all__ = [
    "ModelConfig",
    "Module",
    "Conv3d",
    "Linear",
    "ContentEncoder",
    "StyleEncoder",
    "StyleCode",
    "Generator",
    "ImageDiscriminator",
    "ContentDiscriminator",
    "ContentClassifier",
    "Networks",
    "HarmonizationTarget",
    "build_networks",
    "encode_content",
    "encode_style",
    "generate",
    "discriminate",
    "predict_label",
    "discriminate_content",
    "predict_label_content",
    "harmonize",
    "harmonize_many",
]


@dataclass(frozen=True)
class ModelConfig:
    n_sites: int = 3
    noise_dim: int = 8
    content_channels: int = 64
    base_channels: int = 16
    n_down: int = 2
    n_res: int = 4
    stem_kernel: int = 7
    output_kernel: int = 7
    style_convs: int = 4
    style_channels: int = 0  # 0: same as base_channels
    mlp_dim: int = 64
    disc_levels: int = 3
    disc_channels: int = 0  # 0: same as base_channels
    leaky_slope: float = 0.2
    # io_shuffle r > 1 folds r^3 input voxels into channels before the stem
    # conv and unfolds the output conv's channels the same way, so no conv runs
    # at full resolution.  upsample "shuffle" uses sub-pixel convs instead of
    # nearest-neighbour resampling followed by a conv.
    io_shuffle: int = 1
    upsample: Literal["nearest", "shuffle"] = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.upsample not in ("nearest", "shuffle"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        for f in fields(self):
            if f.name in ("leaky_slope", "seed", "style_channels", "disc_channels", "upsample"):
                continue
            if f.name == "n_down" and self.n_down == 0:
                continue
            if getattr(self, f.name) < 1:
                raise ValueError(f"ModelConfig.{f.name} must be positive")
        if self.n_sites < 2:
            raise ValueError("ModelConfig.n_sites must be at least 2")
        if self.stem_kernel % 2 == 0 or self.output_kernel % 2 == 0:
            raise ValueError("stem and output kernels must have odd size")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in [0, 1)")

    @property
    def style_dim(self) -> int:
        return self.noise_dim + self.n_sites

    @property
    def stride(self) -> int:
        """Total downsampling factor of the content encoder."""
        return self.io_shuffle * 2**self.n_down

    def check_extents(self, extents: Sequence[int]) -> None:
        if any(e % self.stride for e in extents):
            raise ValueError(f"extents {tuple(extents)} not divisible by the encoder stride {self.stride}")
        if min(extents) < 2**self.style_convs or min(extents) < 2**self.disc_levels:
            raise ValueError(f"extents {tuple(extents)} too small for the style encoder / discriminator depth")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


# -- building blocks -----------------------------------------------------------

class Module:
    """Minimal parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_bound(fan_in: int, slope: float) -> float:
    return float(np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in)))


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None, slope: float = 0.2, bias: bool = True):
        fan_in = cin * kernel**3
        bound = _he_bound(fan_in, slope)
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, kernel, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, slope: float = 0.2):
        bound = _he_bound(fin, slope)
        self.weight = Tensor(rng.uniform(-bound, bound, (fout, fin)), requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def _down(cin: int, cout: int, rng, slope) -> Conv3d:
    return Conv3d(cin, cout, 4, rng, stride=2, padding=1, slope=slope)


class ResBlock(Module):
    """conv-IN-lrelu-conv-IN with an identity skip."""

    def __init__(self, ch: int, rng, slope: float):
        self.conv1 = Conv3d(ch, ch, 3, rng, slope=slope)
        self.conv2 = Conv3d(ch, ch, 3, rng, slope=slope)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        h = instance_norm(self.conv1(x)).leaky_relu(self.slope)
        return x + instance_norm(self.conv2(h))


class AdaResBlock(Module):
    """Residual block whose normalizations take per-instance scale/shift from the style MLP."""

    def __init__(self, ch: int, rng, slope: float):
        self.conv1 = Conv3d(ch, ch, 3, rng, slope=slope)
        self.conv2 = Conv3d(ch, ch, 3, rng, slope=slope)
        self.slope = slope

    def forward(self, x: Tensor, affine: Sequence[Tensor]) -> Tensor:
        g1, b1, g2, b2 = affine
        h = channel_affine(instance_norm(self.conv1(x)), g1 + 1.0, b1).leaky_relu(self.slope)
        return x + channel_affine(instance_norm(self.conv2(h)), g2 + 1.0, b2)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# -- networks ------------------------------------------------------------------

class ContentEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        a = cfg.leaky_slope
        self.shuffle = cfg.io_shuffle
        chans = [cfg.base_channels * 2**i for i in range(cfg.n_down)] + [cfg.content_channels]
        self.stem = Conv3d(cfg.io_shuffle**3, chans[0], cfg.stem_kernel, rng, slope=a)
        self.downs = [_down(chans[i], chans[i + 1], rng, a) for i in range(cfg.n_down)]
        self.blocks = [ResBlock(cfg.content_channels, rng, a) for _ in range(cfg.n_res)]
        self.slope = a

    def forward(self, x: Tensor) -> Tensor:
        if self.shuffle > 1:
            x = pixel_unshuffle3d(x, self.shuffle)
        h = instance_norm(self.stem(x)).leaky_relu(self.slope)
        for d in self.downs:
            h = instance_norm(d(h)).leaky_relu(self.slope)
        for b in self.blocks:
            h = b(h)
        return h


@dataclass
class StyleCode:
    """Style s = (n, l): ``noise`` (N, N_n) and ``label`` (N, K)."""

    noise: Tensor
    label: Tensor

    def as_tensor(self) -> Tensor:
        return concat([self.noise, self.label], axis=1)


class StyleEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        a = cfg.leaky_slope
        base = cfg.style_channels or cfg.base_channels
        chans = [1] + [base * 2 ** min(i, 2) for i in range(cfg.style_convs)]
        self.convs = [_down(chans[i], chans[i + 1], rng, a) for i in range(cfg.style_convs)]
        self.noise_head = Linear(chans[-1], cfg.noise_dim, rng, slope=1.0)
        self.label_head = Linear(chans[-1], cfg.n_sites, rng, slope=1.0)
        self.slope = a

    def forward(self, x: Tensor) -> StyleCode:
        h = x
        for c in self.convs:
            h = c(h).leaky_relu(self.slope)
        pooled = h.mean(axis=(2, 3, 4))
        return StyleCode(self.noise_head(pooled), self.label_head(pooled).tanh())


class Generator(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        a = cfg.leaky_slope
        ch = cfg.content_channels
        self.cfg = cfg
        self.mlp = [Linear(cfg.style_dim, cfg.mlp_dim, rng, a), Linear(cfg.mlp_dim, cfg.mlp_dim, rng, a)]
        # small initial AdaIN modulation: blocks start close to plain instance norm
        self.mlp_out = Linear(cfg.mlp_dim, cfg.n_res * 4 * ch, rng, slope=1.0)
        self.mlp_out.weight.data *= 0.1
        self.blocks = [AdaResBlock(ch, rng, a) for _ in range(cfg.n_res)]
        chans = [ch] + [cfg.base_channels * 2 ** (cfg.n_down - 1 - i) for i in range(cfg.n_down)]
        grow = 8 if cfg.upsample == "shuffle" else 1
        self.ups = [Conv3d(chans[i], chans[i + 1] * grow, 3, rng, slope=a) for i in range(cfg.n_down)]
        self.out = Conv3d(chans[-1], cfg.io_shuffle**3, cfg.output_kernel, rng, slope=1.0)
        self.slope = a

    def forward(self, c: Tensor, s: StyleCode | Tensor) -> Tensor:
        cfg = self.cfg
        s = s.as_tensor() if isinstance(s, StyleCode) else s
        if s.ndim != 2 or s.shape[1] != cfg.style_dim:
            raise ValueError(f"shape mismatch: style must be (N, {cfg.style_dim}), got {s.shape}")
        if c.ndim != 5 or c.shape[1] != cfg.content_channels or c.shape[0] != s.shape[0]:
            raise ValueError(f"shape mismatch: content {c.shape} vs style {s.shape}")
        h = s
        for layer in self.mlp:
            h = layer(h).leaky_relu(self.slope)
        params = self.mlp_out(h)
        ch = cfg.content_channels
        x = c
        for i, block in enumerate(self.blocks):
            chunk = [params[:, (4 * i + j) * ch : (4 * i + j + 1) * ch] for j in range(4)]
            x = block(x, chunk)
        for up in self.ups:
            if cfg.upsample == "shuffle":
                x = pixel_shuffle3d(up(x), 2).leaky_relu(self.slope)
            else:
                x = up(resample3d(x, 2, "nearest")).leaky_relu(self.slope)
        x = self.out(x)
        if cfg.io_shuffle > 1:
            x = pixel_shuffle3d(x, cfg.io_shuffle)
        return x.sigmoid()


class ImageDiscriminator(Module):
    """Shared strided trunk; ``forward`` returns (patch realism map, label prediction)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        a = cfg.leaky_slope
        base = cfg.disc_channels or cfg.base_channels
        chans = [1] + [base * 2 ** min(i, 2) for i in range(cfg.disc_levels)]
        self.trunk = [_down(chans[i], chans[i + 1], rng, a) for i in range(cfg.disc_levels)]
        self.patch_head = Conv3d(chans[-1], 1, 3, rng, slope=1.0)
        self.label_head = Linear(chans[-1], cfg.n_sites, rng, slope=1.0)
        self.slope = a

    def features(self, x: Tensor) -> Tensor:
        h = x
        for c in self.trunk:
            h = c(h).leaky_relu(self.slope)
        return h

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.features(x)
        return self.patch_head(h), self.label_head(h.mean(axis=(2, 3, 4))).tanh()


class _ContentHead(Module):
    def __init__(self, cfg: ModelConfig, n_out: int, rng: np.random.Generator):
        a = cfg.leaky_slope
        ch = cfg.content_channels
        self.conv1 = Conv3d(ch, ch, 3, rng, slope=a)
        self.conv2 = _down(ch, ch, rng, a)
        self.head = Linear(ch, n_out, rng, slope=1.0)
        self.slope = a

    def _pooled(self, c: Tensor) -> Tensor:
        h = self.conv1(c).leaky_relu(self.slope)
        h = self.conv2(h).leaky_relu(self.slope)
        return self.head(h.mean(axis=(2, 3, 4)))


class ContentDiscriminator(_ContentHead):
    """D_a^b: one unbounded realism score per content code."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, 1, rng)

    def forward(self, c: Tensor) -> Tensor:
        return self._pooled(c)


class ContentClassifier(_ContentHead):
    """D_p^b: site label prediction in (-1, 1) from a content code."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, cfg.n_sites, rng)

    def forward(self, c: Tensor) -> Tensor:
        return self._pooled(c).tanh()


# Prefixes used in checkpoints and optimizer state.
GENERATOR_SIDE = ("content_encoder", "style_encoder", "generator")
DISCRIMINATOR_SIDE = ("image_disc", "content_disc", "content_cls")


@dataclass
class Networks:
    config: ModelConfig
    content_encoder: ContentEncoder
    style_encoder: StyleEncoder
    generator: Generator
    image_disc: ImageDiscriminator
    content_disc: ContentDiscriminator
    content_cls: ContentClassifier

    def named_parameters(self, groups: Iterable[str] = GENERATOR_SIDE + DISCRIMINATOR_SIDE) -> list[tuple[str, Tensor]]:
        out = []
        for g in groups:
            out.extend(getattr(self, g).named_parameters(g + "."))
        return out

    def generator_parameters(self) -> list[tuple[str, Tensor]]:
        return self.named_parameters(GENERATOR_SIDE)

    def discriminator_parameters(self) -> list[tuple[str, Tensor]]:
        return self.named_parameters(DISCRIMINATOR_SIDE)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def build_networks(cfg: ModelConfig) -> Networks:
    """Initialize every network deterministically from ``cfg.seed``."""
    return Networks(
        config=cfg,
        content_encoder=ContentEncoder(cfg, _rng(cfg.seed, 1)),
        style_encoder=StyleEncoder(cfg, _rng(cfg.seed, 2)),
        generator=Generator(cfg, _rng(cfg.seed, 3)),
        image_disc=ImageDiscriminator(cfg, _rng(cfg.seed, 4)),
        content_disc=ContentDiscriminator(cfg, _rng(cfg.seed, 5)),
        content_cls=ContentClassifier(cfg, _rng(cfg.seed, 6)),
    )


# -- functional interface --------------------------------------------------------

def as_batch(x) -> Tensor:
    """Volume, (D, H, W) or (N, 1, D, H, W) input as an (N, 1, D, H, W) tensor."""
    if isinstance(x, Volume):
        x = x.voxels
    if isinstance(x, (list, tuple)):
        return Tensor(np.stack([v.voxels if isinstance(v, Volume) else np.asarray(v) for v in x])[:, None])
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        return t.reshape(1, 1, *t.shape)
    if t.ndim != 5 or t.shape[1] != 1:
        raise ValueError(f"expected a single-channel volume batch, got shape {t.shape}")
    return t


def encode_content(E_b: ContentEncoder, x, cfg: ModelConfig | None = None) -> Tensor:
    x = as_batch(x)
    if cfg is not None:
        cfg.check_extents(x.shape[2:])
    else:
        stride = E_b.shuffle * 2 ** len(E_b.downs)
        if any(e % stride for e in x.shape[2:]):
            raise ValueError(f"extents {x.shape[2:]} not divisible by the encoder stride {stride}")
    return E_b(x)


def encode_style(E_s: StyleEncoder, x) -> StyleCode:
    return E_s(as_batch(x))


def generate(G: Generator, c: Tensor, s: StyleCode | Tensor) -> Tensor:
    return G(c, s)


def discriminate(D: ImageDiscriminator, x) -> Tensor:
    return D(as_batch(x))[0]


def predict_label(D: ImageDiscriminator, x) -> Tensor:
    return D(as_batch(x))[1]


def discriminate_content(D: ContentDiscriminator, c: Tensor) -> Tensor:
    return D(c)


def predict_label_content(D: ContentClassifier, c: Tensor) -> Tensor:
    return D(c)


@dataclass(frozen=True)
class HarmonizationTarget:
    """Target appearance: a site (one +1 label entry) or the style-agnostic all -1 label.

    ``noise`` selects the style noise: ``zero``, ``sampled`` from N(0, 1) with
    ``seed``, or ``encoded`` (the input's own noise code from E_s).
    """

    variant: Literal["site", "agnostic"]
    index: int | None = None
    noise: Literal["zero", "sampled", "encoded"] = "zero"
    seed: int | None = None

    def __post_init__(self):
        if self.variant == "site":
            if self.index is None or self.index < 0:
                raise ValueError("a site target needs a non-negative index")
        elif self.variant == "agnostic":
            if self.index is not None:
                raise ValueError("the agnostic target takes no site index")
        else:
            raise ValueError(f"unknown target variant {self.variant!r}")
        if self.noise not in ("zero", "sampled", "encoded"):
            raise ValueError(f"unknown noise policy {self.noise!r}")
        if self.noise == "sampled" and self.seed is None:
            raise ValueError("sampled noise needs a seed")

    @classmethod
    def site(cls, index: int, noise: str = "zero", seed: int | None = None) -> "HarmonizationTarget":
        return cls("site", index, noise, seed)

    @classmethod
    def agnostic(cls, noise: str = "zero", seed: int | None = None) -> "HarmonizationTarget":
        return cls("agnostic", None, noise, seed)

    @classmethod
    def parse(cls, target: str, noise: str = "zero") -> "HarmonizationTarget":
        """Parse ``site:<k>`` | ``agnostic`` plus ``zero`` | ``seed:<n>`` | ``encoded``."""
        seed = None
        if noise.startswith("seed:"):
            seed, noise = int(noise.split(":", 1)[1]), "sampled"
        if target == "agnostic":
            return cls.agnostic(noise, seed)
        if target.startswith("site:"):
            return cls.site(int(target.split(":", 1)[1]), noise, seed)
        raise ValueError(f"target must be 'site:<k>' or 'agnostic', got {target!r}")

    def label_vector(self, n_sites: int) -> LabelVector:
        if self.variant == "agnostic":
            return LabelVector.agnostic(n_sites)
        if self.index >= n_sites:
            raise ValueError(f"site index {self.index} out of range: model has K={n_sites} sites")
        return LabelVector.site(self.index, n_sites)

    def describe(self) -> str:
        name = "agnostic" if self.variant == "agnostic" else f"site:{self.index}"
        noise = f"seed:{self.seed}" if self.noise == "sampled" else self.noise
        return f"{name} (noise {noise})"


def target_style(nets: Networks, target: HarmonizationTarget, x: Tensor, sampled: np.ndarray | None = None) -> StyleCode:
    """Style code the generator receives for ``target``, one row per volume in ``x``.

    ``sampled`` overrides the seeded N(0, 1) draw (rows already drawn for a larger batch).
    """
    cfg = nets.config
    n = x.shape[0]
    label = np.tile(target.label_vector(cfg.n_sites).as_array(), (n, 1))
    if target.noise == "zero":
        noise = Tensor(np.zeros((n, cfg.noise_dim)))
    elif target.noise == "sampled":
        if sampled is None:
            sampled = np.random.default_rng(target.seed).standard_normal((n, cfg.noise_dim))
        noise = Tensor(sampled)
    else:
        noise = nets.style_encoder(x).noise
    return StyleCode(noise, Tensor(label))


def harmonize(nets: Networks | None, x: Volume, target: HarmonizationTarget) -> Volume:
    """Re-render ``x`` with the target appearance; the output keeps ``x``'s spacing and orientation."""
    return harmonize_many(nets, [x], target)[0]


def harmonize_many(nets: Networks | None, volumes: Sequence[Volume], target: HarmonizationTarget, batch: int = 4) -> list[Volume]:
    if nets is None:
        raise ValueError("harmonization needs trained weights")
    target.label_vector(nets.config.n_sites)  # validates the index against K
    draws = None
    if target.noise == "sampled":
        draws = np.random.default_rng(target.seed).standard_normal((len(volumes), nets.config.noise_dim))
    out: list[Volume] = []
    for start in range(0, len(volumes), batch):
        chunk = volumes[start : start + batch]
        x = as_batch(list(chunk))
        nets.config.check_extents(x.shape[2:])
        c = nets.content_encoder(x)
        s = target_style(nets, target, x, None if draws is None else draws[start : start + len(chunk)])
        y = nets.generator(c, s).numpy()
        out.extend(v.with_voxels(y[i, 0]) for i, v in enumerate(chunk))
    return out
