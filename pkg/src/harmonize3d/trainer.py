"""Training: paired unlabeled/labeled sampling, the translation-cycle graph, alternating updates.

One step on an unlabeled image ``x_u`` and a labeled image ``x_l`` (label ``l``)::

    c_u, s_u = E_b(x_u), E_s(x_u)
    x_uu     = G(c_u, s_u)                  self reconstruction
    s_r      = (n_r ~ N(0, I), l)
    x_ul     = G(c_u, s_r)                  translation to x_l's site
    c_ul, n' = E_b(x_ul), E_s(x_ul).noise   re-encoding
    x_cc     = G(c_ul, s_u)                 cycle back

The discriminators are updated first on detached inputs, then the encoders
and generator on their objective against the updated discriminators.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .losses import (
    LossReport,
    LossWeights,
    label_mse,
    label_targets,
    latent_recovery_terms,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    luminance_consistency_loss,
    mix_loss,
    structural_consistency_loss,
    total_discriminator_objective,
    total_generator_objective,
)
from .model import GENERATOR_SIDE, DISCRIMINATOR_SIDE, ModelConfig, Networks, StyleCode, build_networks
from .ssim import SsimParams
from .tensor import Tape, Tensor, concat
from .volume import LabeledVolume, Volume

__all__ = [
    "TrainConfig",
    "TrainState",
    "Adam",
    "PairSampler",
    "NonFiniteLossError",
    "generator_terms",
    "discriminator_terms",
    "train_step",
    "init_state",
    "augment",
    "run_training",
    "split_pools",
    "save_checkpoint",
    "load_checkpoint",
    "load_networks",
]

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite loss term {term!r} at step {step} (value {value})")
        self.term = term
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssim: SsimParams = field(default_factory=SsimParams)
    checkpoint_every: int = 0  # 0: only the final checkpoint
    labeled_fraction: float = 0.5
    # spatial axes (0..2) among which random flips and transpositions are drawn each step
    augment_axes: tuple[int, ...] = ()
    corpus: str | None = None  # manifest path
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "augment_axes", tuple(int(a) for a in self.augment_axes))
        if len(set(self.augment_axes)) != len(self.augment_axes) or not set(self.augment_axes) <= {0, 1, 2}:
            raise ValueError("augment_axes must be distinct spatial axes in 0..2")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not (self.lr_g >= 0 and self.lr_d >= 0 and math.isfinite(self.lr_g) and math.isfinite(self.lr_d)):
            raise ValueError("learning rates must be finite and non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two decays in [0, 1)")
        if not 0 < self.labeled_fraction < 1:
            raise ValueError("labeled_fraction must lie strictly between 0 and 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment_axes"] = list(self.augment_axes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "ssim" in d:
            d["ssim"] = SsimParams(**d["ssim"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


class Adam:
    """Adaptive moment estimation over a fixed, named parameter list."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - (self.lr * update).astype(p.dtype)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


class PairSampler:
    """Seeded epoch-wise shuffling of the unlabeled and labeled pools.

    Each pool is walked in a fresh permutation per epoch; the state is the
    generator state plus the current orders and cursors, so it checkpoints.
    """

    def __init__(self, n_unlabeled: int, n_labeled: int, seed: int):
        if n_unlabeled < 1 or n_labeled < 1:
            raise ValueError("both pools need at least one volume")
        self.sizes = (n_unlabeled, n_labeled)
        self.rng = np.random.default_rng([seed, 7])
        self.orders = [self.rng.permutation(n) for n in self.sizes]
        self.cursors = [0, 0]

    def _take(self, pool: int, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.cursors[pool] == self.sizes[pool]:
                self.orders[pool] = self.rng.permutation(self.sizes[pool])
                self.cursors[pool] = 0
            out.append(int(self.orders[pool][self.cursors[pool]]))
            self.cursors[pool] += 1
        return out

    def next(self, batch: int) -> tuple[list[int], list[int]]:
        return self._take(0, batch), self._take(1, batch)

    def state(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "rng": self.rng.bit_generator.state,
            "orders": [o.tolist() for o in self.orders],
            "cursors": list(self.cursors),
        }

    def restore(self, state: dict) -> None:
        if tuple(state["sizes"]) != self.sizes:
            raise ValueError("sampler state does not match the pool sizes")
        self.rng.bit_generator.state = state["rng"]
        self.orders = [np.asarray(o, dtype=np.int64) for o in state["orders"]]
        self.cursors = list(state["cursors"])


@dataclass
class TrainState:
    config: TrainConfig
    nets: Networks
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    sampler: PairSampler | None = None
    step: int = 0


def init_state(config: TrainConfig, n_unlabeled: int | None = None, n_labeled: int | None = None) -> TrainState:
    nets = build_networks(config.model)
    b = config.betas
    sampler = PairSampler(n_unlabeled, n_labeled, config.seed) if n_unlabeled else None
    return TrainState(
        config=config,
        nets=nets,
        opt_g=Adam(nets.generator_parameters(), config.lr_g, b, config.adam_eps),
        opt_d=Adam(nets.discriminator_parameters(), config.lr_d, b, config.adam_eps),
        rng=np.random.default_rng([config.seed, 11]),
        sampler=sampler,
    )


# -- the step graph ---------------------------------------------------------------

@dataclass
class Translation:
    """Tensors of the generator graph that the discriminator and loss terms read."""

    x_u: Tensor
    x_l: Tensor
    c_u: Tensor
    c_l: Tensor
    x_uu: Tensor
    x_ul: Tensor
    x_cc: Tensor
    c_ul: Tensor
    noise_ul: Tensor
    n_r: Tensor
    style_label_l: Tensor
    labels: Tensor


def translate(nets: Networks, x_u: Tensor, x_l: Tensor, labels: Tensor, n_r: Tensor) -> Translation:
    n = x_u.shape[0]
    both = concat([x_u, x_l], axis=0)
    c = nets.content_encoder(both)
    s = nets.style_encoder(both)
    c_u, c_l = c[:n], c[n:]
    s_u = StyleCode(s.noise[:n], s.label[:n])
    # x_uu and x_ul share c_u: one generator pass on the doubled batch
    styles = concat([s_u.as_tensor(), concat([n_r, labels], axis=1)], axis=0)
    out = nets.generator(concat([c_u, c_u], axis=0), styles)
    x_uu, x_ul = out[:n], out[n:]
    c_ul = nets.content_encoder(x_ul)
    noise_ul = nets.style_encoder(x_ul).noise
    x_cc = nets.generator(c_ul, s_u)
    return Translation(x_u, x_l, c_u, c_l, x_uu, x_ul, x_cc, c_ul, noise_ul, n_r, s.label[n:], labels)


def _evaluate(thunks: dict[str, Callable[[], Tensor]], step: int | None) -> dict[str, Tensor]:
    """Evaluate loss terms in order; a non-finite value or operation is reported by term name."""
    out = {}
    for name, fn in thunks.items():
        try:
            value = fn()
        except NonFiniteLossError:
            raise
        except ArithmeticError as exc:
            raise NonFiniteLossError(name, step or 0, float("nan")) from exc
        if step is not None and not math.isfinite(value.item()):
            raise NonFiniteLossError(name, step, value.item())
        out[name] = value
    return out


def discriminator_terms(nets: Networks, t: Translation, step: int | None = None) -> dict[str, Tensor]:
    """Discriminator-side terms on detached generator outputs."""
    n = t.x_l.shape[0]
    patch, label = nets.image_disc(concat([t.x_l, t.x_ul.detach()], axis=0))
    codes = concat([t.c_l.detach(), t.c_u.detach()], axis=0)
    realism = nets.content_disc(codes)
    return _evaluate(
        {
            "adv_x_d": lambda: lsgan_discriminator_loss(patch[:n], patch[n:]),
            "pre_x_d": lambda: label_mse(label[:n], t.labels),
            "adv_b_d": lambda: lsgan_discriminator_loss(realism[:n], realism[n:]),
            "pre_b_d": lambda: label_mse(nets.content_cls(t.c_l.detach()), t.labels),
        },
        step,
    )


def generator_terms(nets: Networks, t: Translation, weights: LossWeights, params: SsimParams, step: int | None = None) -> dict[str, Tensor]:
    patch, label = nets.image_disc(t.x_ul)
    return _evaluate(
        {
            "lum": lambda: luminance_consistency_loss(t.x_l, t.x_ul, params),
            "struct": lambda: structural_consistency_loss(t.x_uu, t.x_ul, params),
            "cla": lambda: label_mse(t.style_label_l, t.labels),
            "adv_b": lambda: lsgan_generator_loss(nets.content_disc(t.c_u)),
            "pre_b": lambda: label_mse(nets.content_cls(t.c_l), t.labels),
            "rec": lambda: mix_loss(t.x_u, t.x_uu, weights.ssim_mix, params),
            "adv_x": lambda: lsgan_generator_loss(patch),
            "pre_x_g": lambda: label_mse(label, t.labels),
            "cc": lambda: mix_loss(t.x_u, t.x_cc, weights.ssim_mix, params),
            "lat": lambda: latent_recovery_terms(t.noise_ul, t.n_r, t.c_ul, t.c_u),
        },
        step,
    )


def _set_requires_grad(params, flag: bool) -> None:
    for _, p in params:
        p.requires_grad = flag


def _batch(volumes: Sequence[Volume]) -> Tensor:
    return Tensor(np.stack([v.voxels for v in volumes])[:, None])


def augment(x: np.ndarray, axes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Random flips of ``axes`` and a random permutation among them, per batch item.

    ``x`` is (N, C, D, H, W); ``axes`` are spatial. Permuted axes must share
    one extent.
    """
    if not axes:
        return x
    out = []
    for item in x:
        flips = rng.integers(0, 2, len(axes))
        order = rng.permutation(len(axes))
        perm = list(range(4))
        for a, o in zip(axes, order):
            perm[1 + a] = 1 + axes[o]
        y = item.transpose(perm)
        for a, f in zip(axes, flips):
            if f:
                y = np.flip(y, axis=1 + a)
        out.append(y)
    return np.ascontiguousarray(np.stack(out))


def train_step(state: TrainState, x_u: Sequence[Volume] | Volume, x_l: Sequence[LabeledVolume] | LabeledVolume) -> LossReport:
    """One discriminator update then one encoder/generator update on the given pair."""
    cfg = state.config
    nets = state.nets
    if isinstance(x_u, Volume):
        x_u = [x_u]
    if isinstance(x_l, LabeledVolume):
        x_l = [x_l]
    if len(x_u) != len(x_l):
        raise ValueError("need as many unlabeled as labeled volumes")
    for lv in x_l:
        if lv.label.n_sites != nets.config.n_sites:
            raise ValueError(f"label has {lv.label.n_sites} entries, model has K={nets.config.n_sites}")
    xu = _batch(x_u)
    xl = _batch([lv.volume for lv in x_l])
    nets.config.check_extents(xu.shape[2:])
    if cfg.augment_axes:
        if len({xu.shape[2 + a] for a in cfg.augment_axes}) != 1:
            raise ValueError("augmented axes must share one extent")
        xu = Tensor(augment(xu.data, cfg.augment_axes, state.rng))
        xl = Tensor(augment(xl.data, cfg.augment_axes, state.rng))
    labels = label_targets([lv.label for lv in x_l])
    n_r = Tensor(state.rng.standard_normal((len(x_u), nets.config.noise_dim)))
    step = state.step + 1

    g_params = nets.generator_parameters()
    d_params = nets.discriminator_parameters()
    with Tape() as tape_g:
        t = translate(nets, xu, xl, labels, n_r)

        with Tape() as tape_d:
            d_terms = discriminator_terms(nets, t, step)
            d_total = total_discriminator_objective(d_terms, cfg.weights)
            state.opt_d.zero_grad()
            tape_d.backward(d_total)
        tape_d.free()
        state.opt_d.step()

        # discriminators pass gradients through but take no weight gradients here
        _set_requires_grad(d_params, False)
        try:
            g_terms = generator_terms(nets, t, cfg.weights, cfg.ssim, step)
            g_total = total_generator_objective(g_terms, cfg.weights)
            state.opt_g.zero_grad()
            tape_g.backward(g_total)
        finally:
            _set_requires_grad(d_params, True)
    tape_g.free()
    state.opt_g.step()
    state.opt_g.zero_grad()
    state.opt_d.zero_grad()
    state.step = step
    return LossReport.from_terms(step, {**g_terms, **d_terms}, cfg.weights)


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, value in state.nets.state_dict().items():
        arrays["w/" + name] = value
    for tag, opt in (("g", state.opt_g), ("d", state.opt_d)):
        for name in opt.m:
            arrays[f"m{tag}/{name}"] = opt.m[name]
            arrays[f"v{tag}/{name}"] = opt.v[name]
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "adam_t": [state.opt_g.t, state.opt_d.t],
        "rng": state.rng.bit_generator.state,
        "sampler": state.sampler.state() if state.sampler is not None else None,
    }
    ckpt.write_container(path, arrays, meta)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    arrays, meta = ckpt.read_container(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
        sizes = meta["sampler"]["sizes"] if meta.get("sampler") else (None, None)
        state = init_state(config, *sizes)
        state.nets.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("w/")})
        for tag, opt, t in (("g", state.opt_g, meta["adam_t"][0]), ("d", state.opt_d, meta["adam_t"][1])):
            opt.t = t
            for name in opt.m:
                opt.m[name] = arrays[f"m{tag}/{name}"].copy()
                opt.v[name] = arrays[f"v{tag}/{name}"].copy()
        state.rng.bit_generator.state = meta["rng"]
        if state.sampler is not None:
            state.sampler.restore(meta["sampler"])
        state.step = meta["step"]
    except (KeyError, TypeError) as exc:
        raise ckpt.CheckpointCorruptError(f"{path}: incomplete checkpoint ({exc})") from exc
    return state


def load_networks(path: str | os.PathLike) -> Networks:
    """Weights only, for inference."""
    arrays, meta = ckpt.read_container(path)
    try:
        cfg = ModelConfig.from_dict(meta["config"]["model"])
    except KeyError as exc:
        raise ckpt.CheckpointCorruptError(f"{path}: checkpoint has no model config") from exc
    nets = build_networks(cfg)
    nets.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("w/")})
    return nets


# -- the training loop ------------------------------------------------------------------

def split_pools(corpus: Sequence[LabeledVolume], labeled_fraction: float, seed: int, keys: Sequence | None = None) -> tuple[list[Volume], list[LabeledVolume]]:
    """Withhold labels from ``1 - labeled_fraction`` of the corpus.

    Volumes are first put in a canonical order (``keys``, or their site then
    voxel checksum), so the split does not depend on input order.
    """
    if len(corpus) < 2:
        raise ValueError("training needs at least two volumes")
    if keys is None:
        keys = [(lv.label.index, float(lv.volume.voxels.sum(dtype=np.float64)), lv.volume.voxels.tobytes()[:64]) for lv in corpus]
    order = sorted(range(len(corpus)), key=lambda i: keys[i])
    perm = np.random.default_rng([seed, 5]).permutation(len(order))
    shuffled = [corpus[order[i]] for i in perm]
    n_lab = min(max(1, round(labeled_fraction * len(corpus))), len(corpus) - 1)
    return [lv.volume for lv in shuffled[n_lab:]], shuffled[:n_lab]


def _load_corpus(config: TrainConfig) -> list[LabeledVolume]:
    from .phantom import load_manifest
    from .volume import LabelVector, read_nifti

    if config.corpus is None:
        raise ValueError("no corpus given")
    manifest = Path(config.corpus)
    records = load_manifest(manifest)
    k = config.model.n_sites
    sites = {r.site for r in records}
    if len(sites) != k or max(sites) != k - 1:
        raise ValueError(f"corpus has {len(sites)} sites, model expects K={k}")
    return [LabeledVolume(read_nifti(manifest.parent / r.file), LabelVector.site(r.site, k), r.site_name) for r in records]


def run_training(
    config: TrainConfig,
    corpus: Sequence[LabeledVolume] | None = None,
    resume: str | os.PathLike | None = None,
    on_step: Callable[[LossReport, TrainState], None] | None = None,
) -> tuple[TrainState, list[LossReport]]:
    """Train for ``config.steps`` steps; writes checkpoints and ``loss_log.jsonl`` under ``out_dir``.

    With ``resume``, training continues from that checkpoint up to
    ``config.steps`` and the log is appended to.
    """
    if corpus is None:
        corpus = _load_corpus(config)
    if not corpus:
        raise ValueError("empty corpus")
    for lv in corpus:
        if lv.label.n_sites != config.model.n_sites:
            raise ValueError(f"corpus label count {lv.label.n_sites} does not match K={config.model.n_sites}")
    unlabeled, labeled = split_pools(corpus, config.labeled_fraction, config.seed)
    if resume is not None:
        state = load_checkpoint(resume)
        state = replace(state, config=replace(state.config, steps=config.steps, out_dir=config.out_dir, checkpoint_every=config.checkpoint_every))
    else:
        state = init_state(config, len(unlabeled), len(labeled))
    out = Path(config.out_dir) if config.out_dir else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(config.to_json() + "\n")
        log_path = out / "loss_log.jsonl"
        if resume is not None and log_path.exists():
            # keep exactly the lines up to the resumed step
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= state.step]
            log_path.write_text("".join(k + "\n" for k in kept))
            log_fh = open(log_path, "a")
        else:
            log_fh = open(log_path, "w")
    reports: list[LossReport] = []
    try:
        while state.step < config.steps:
            iu, il = state.sampler.next(config.batch_size)
            report = train_step(state, [unlabeled[i] for i in iu], [labeled[i] for i in il])
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.to_json() + "\n")
            if on_step is not None:
                on_step(report, state)
            if state.step % 50 == 0:
                log.info("step %d: G %.4f D %.4f", state.step, report.generator_total, report.discriminator_total)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                log_fh.flush()
                save_checkpoint(state, out / f"checkpoint_{state.step:06d}.h3d")
        if out is not None:
            save_checkpoint(state, out / "final.h3d")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, reports
