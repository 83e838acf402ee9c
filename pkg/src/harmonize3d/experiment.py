"""Desk-scale end-to-end run: phantom corpus, training, harmonization, evaluation, probe.

Subjects are split, not volumes: the first ``n_subjects - held_out`` subjects
(all of their site renderings) train the model and the rest are harmonized
and evaluated.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .eval import EvalReport, Summary, cross_subject_structure
from .losses import LossReport, LossWeights
from .model import HarmonizationTarget, ModelConfig, Networks, encode_content, encode_style, generate, harmonize_many
from .phantom import PhantomConfig, labeled, render_corpus
from .probe import ProbeResult, run_site_probe
from .tensor import Tensor
from .trainer import TrainConfig, TrainState, run_training
from .volume import Volume

__all__ = [
    "DESK_MODEL",
    "DESK_AUGMENT",
    "DEFAULT_TARGETS",
    "ExperimentConfig",
    "TargetOutcome",
    "ExperimentResult",
    "desk_train_config",
    "reconstruction_l1",
    "run_experiment",
]

log = logging.getLogger(__name__)

# 32^3 volumes: pixel-unshuffle by 2 at the input, one stride-2 level, 3^3 kernels
DESK_MODEL = dict(
    io_shuffle=2,
    n_down=1,
    content_channels=32,
    upsample="shuffle",
    style_channels=8,
    disc_channels=8,
    stem_kernel=3,
    output_kernel=3,
)
# phantom bias fields vary along axis 0 only, so flips and swaps of axes 1 and 2 keep site style
DESK_AUGMENT = (1, 2)
DEFAULT_TARGETS = ("site:0", "site:1", "agnostic")


def desk_train_config(
    seed: int = 0,
    steps: int = 1000,
    lr: float = 1e-3,
    weights: LossWeights | None = None,
    augment_axes: tuple[int, ...] = DESK_AUGMENT,
    **model,
) -> TrainConfig:
    cfg = ModelConfig(**{**DESK_MODEL, **model, "seed": seed})
    return TrainConfig(steps=steps, lr_g=lr, lr_d=lr, seed=seed, model=cfg, weights=weights or LossWeights(), augment_axes=augment_axes)


def reconstruction_l1(nets: Networks, volumes: Sequence[Volume], batch: int = 8) -> float:
    """Mean ``|G(E_b(x), E_s(x)) - x|`` over ``volumes``."""
    total = 0.0
    for start in range(0, len(volumes), batch):
        x = np.stack([v.voxels for v in volumes[start : start + batch]])[:, None]
        t = Tensor(x)
        y = generate(nets.generator, encode_content(nets.content_encoder, t), encode_style(nets.style_encoder, t).as_tensor())
        total += float(np.abs(y.numpy() - x).mean(axis=(1, 2, 3, 4)).sum())
    return total / len(volumes)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    steps: int = 1000
    lr: float = 1e-3
    held_out: int = 10
    phantom: PhantomConfig | None = None  # default: PhantomConfig(seed=seed)
    targets: tuple[str, ...] = DEFAULT_TARGETS
    weights: LossWeights = field(default_factory=LossWeights)
    augment_axes: tuple[int, ...] = DESK_AUGMENT
    # steps after which self-reconstruction L1 on the training volumes is recorded
    recon_checks: tuple[int, ...] = (500,)

    def phantom_config(self) -> PhantomConfig:
        return self.phantom if self.phantom is not None else PhantomConfig(seed=self.seed)

    def train_config(self) -> TrainConfig:
        return desk_train_config(self.seed, self.steps, self.lr, self.weights, self.augment_axes)


@dataclass
class TargetOutcome:
    target: str
    report: EvalReport
    probe_accuracy: float

    @property
    def w1_reduction(self) -> float:
        pre = self.report.w1_pre_summary.mean
        return 1.0 - self.report.w1_post_summary.mean / pre


@dataclass
class ExperimentResult:
    seed: int
    steps: int
    probe_raw: float
    probe_chance: float
    cross_subject: Summary
    outcomes: list[TargetOutcome]
    recon_train: dict[int, float]  # step -> self-reconstruction L1 on training volumes
    recon_held_out: float  # after training
    losses: list[LossReport]
    train_seconds: float
    eval_seconds: float

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "steps": self.steps,
            "probe_raw": self.probe_raw,
            "probe_chance": self.probe_chance,
            "cross_subject": asdict(self.cross_subject),
            "recon_train": dict(self.recon_train),
            "recon_held_out": self.recon_held_out,
            "targets": {
                o.target: {
                    "w1_pre": o.report.w1_pre_summary.mean,
                    "w1_post": o.report.w1_post_summary.mean,
                    "w1_reduction": o.w1_reduction,
                    "structure": o.report.structure.mean,
                    "luminance_pre": o.report.luminance_pre.mean,
                    "luminance_post": o.report.luminance_post.mean,
                    "probe": o.probe_accuracy,
                }
                for o in self.outcomes
            },
            "train_seconds": self.train_seconds,
            "eval_seconds": self.eval_seconds,
        }


def run_experiment(
    config: ExperimentConfig,
    on_step: Callable[[LossReport, TrainState], None] | None = None,
    state_out: list[TrainState] | None = None,
) -> ExperimentResult:
    pc = config.phantom_config()
    if not 0 < config.held_out < pc.n_subjects:
        raise ValueError("held_out must leave at least one training and one test subject")
    corpus = render_corpus(pc)
    cut = pc.n_subjects - config.held_out
    train = [(r, v) for r, v in corpus if r.subject < cut]
    test = [(r, v) for r, v in corpus if r.subject >= cut]

    train_vols = [v for _, v in train]
    recon_train: dict[int, float] = {}

    def hook(report: LossReport, state: TrainState) -> None:
        if state.step in config.recon_checks:
            recon_train[state.step] = reconstruction_l1(state.nets, train_vols)
        if on_step is not None:
            on_step(report, state)

    t0 = time.perf_counter()
    state, losses = run_training(config.train_config(), labeled(train, pc.n_sites), on_step=hook)
    t1 = time.perf_counter()
    if state_out is not None:
        state_out.append(state)

    vols = [v for _, v in test]
    sites = [r.site for r, _ in test]
    names = [r.site_name for r, _ in test]
    baseline = cross_subject_structure(vols, [r.subject for r, _ in test], seed=config.seed)
    recon_held_out = reconstruction_l1(state.nets, vols)
    outcomes = []
    probe_raw: ProbeResult | None = None
    for spec in config.targets:
        target = HarmonizationTarget.parse(spec)
        out = harmonize_many(state.nets, vols, target)
        report = EvalReport.build(vols, out, sites, names, target=target.describe(), seed=config.seed)
        probe = run_site_probe(vols, sites, out, seed=config.seed)
        probe_raw = probe
        outcomes.append(TargetOutcome(spec, report, probe.harmonized_accuracy))
        log.info("%s: W1 reduction %.3f structure %.4f", spec, outcomes[-1].w1_reduction, report.structure.mean)
    t2 = time.perf_counter()
    return ExperimentResult(
        seed=config.seed,
        steps=config.steps,
        probe_raw=probe_raw.raw_accuracy,
        probe_chance=probe_raw.chance,
        cross_subject=baseline,
        outcomes=outcomes,
        recon_train=recon_train,
        recon_held_out=recon_held_out,
        losses=losses,
        train_seconds=t1 - t0,
        eval_seconds=t2 - t1,
    )
