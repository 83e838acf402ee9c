import json
from dataclasses import replace

import numpy as np
import pytest

from harmonize3d import checkpoint as ckpt
from harmonize3d.losses import LossReport, LossWeights
from harmonize3d.model import ModelConfig, build_networks
from harmonize3d.phantom import PhantomConfig, labeled, render_corpus
from harmonize3d.tensor import Tape, Tensor, default_dtype, numerical_gradient, relative_error
from harmonize3d.trainer import (
    Adam,
    augment,
    NonFiniteLossError,
    PairSampler,
    TrainConfig,
    generator_terms,
    init_state,
    load_checkpoint,
    load_networks,
    run_training,
    save_checkpoint,
    split_pools,
    train_step,
    translate,
)
from harmonize3d.losses import latent_recovery_terms, total_generator_objective
from harmonize3d.volume import LabeledVolume, LabelVector

TINY = ModelConfig(content_channels=8, base_channels=4, n_down=1, n_res=1, stem_kernel=3, output_kernel=3, style_convs=3, disc_levels=3, mlp_dim=8, noise_dim=4)


@pytest.fixture(scope="module")
def corpus():
    return labeled(render_corpus(PhantomConfig(extents=(16, 16, 16), n_subjects=3)), 3)


def config(**kw):
    return TrainConfig(**{"steps": 4, "model": TINY, "lr_g": 1e-3, "lr_d": 1e-3, **kw})


def test_adam_matches_reference_formulas():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([("p", p)], lr=1e-4, betas=(0.5, 0.999), eps=1e-8)
    grads = [0.3, -0.2, 0.7]
    m = v = 0.0
    value = 0.5
    for t, g in enumerate(grads, 1):
        p.grad = np.array([g], dtype=p.dtype)
        opt.step()
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        value -= 1e-4 * (m / (1 - 0.5**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(value, abs=1e-7)


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_g=-1e-4)
    with pytest.raises(ValueError):
        TrainConfig(labeled_fraction=1.0)
    cfg = config(weights=LossWeights(rec=3.0))
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError, match="augment_axes"):
        TrainConfig(augment_axes=(1, 1))
    with pytest.raises(ValueError, match="augment_axes"):
        TrainConfig(augment_axes=(3,))
    aug = config(augment_axes=(1, 2))
    assert TrainConfig.from_json(aug.to_json()) == aug


def test_zero_learning_rate_leaves_weights(corpus):
    state = init_state(config(lr_g=0.0, lr_d=0.0), 1, 1)
    before = state.nets.state_dict()
    rep = train_step(state, corpus[0].volume, corpus[1])
    assert all(np.isfinite(v) for v in rep.terms.values())
    for name, value in state.nets.state_dict().items():
        np.testing.assert_array_equal(value, before[name])
    assert state.step == 1


def test_single_step_reproducible(corpus):
    reports, weights = [], []
    for _ in range(2):
        state = init_state(config(), 1, 1)
        reports.append(train_step(state, corpus[0].volume, corpus[4]).to_json())
        weights.append(state.nets.state_dict())
    assert reports[0] == reports[1]
    for k in weights[0]:
        np.testing.assert_array_equal(weights[0][k], weights[1][k])


def test_step_updates_both_sides(corpus):
    state = init_state(config(), 1, 1)
    before = state.nets.state_dict()
    train_step(state, corpus[0].volume, corpus[4])
    after = state.nets.state_dict()
    for prefix in ("content_encoder", "style_encoder", "generator", "image_disc", "content_disc", "content_cls"):
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith(prefix)), prefix


def test_unlabeled_pool_gives_no_label_supervision(corpus):
    w = LossWeights(cla=0.0, pre_x_d=0.0)
    state = init_state(config(weights=w), 1, 1)
    head = {k: v for k, v in state.nets.state_dict().items() if k.startswith("image_disc.label_head")}
    for i in range(3):
        train_step(state, corpus[i].volume, corpus[i + 3])
    after = state.nets.state_dict()
    assert head
    for k, v in head.items():
        np.testing.assert_array_equal(after[k], v)


def test_label_count_mismatch(corpus):
    state = init_state(config(), 1, 1)
    bad = LabeledVolume(corpus[0].volume, LabelVector.site(0, 4))
    with pytest.raises(ValueError, match="K=3"):
        train_step(state, corpus[0].volume, bad)


def test_nan_guard_names_term_and_step(corpus):
    state = init_state(config(), 1, 1)
    state.nets.generator.out.bias.data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, corpus[0].volume, corpus[4])
    assert info.value.step == 1
    assert info.value.term in str(info.value)


def test_full_generator_objective_gradient():
    """Finite differences through every network on 8^3 volumes, float64."""
    with default_dtype(np.float64):
        nets = build_networks(TINY)
        rng = np.random.default_rng(0)
        xu = Tensor(rng.uniform(0.1, 0.9, (1, 1, 8, 8, 8)))
        xl = Tensor(rng.uniform(0.1, 0.9, (1, 1, 8, 8, 8)))
        labels = Tensor(LabelVector.site(1, 3).as_array()[None])
        n_r = Tensor(rng.standard_normal((1, TINY.noise_dim)))
        weights = LossWeights()
        from harmonize3d.ssim import SsimParams

        frozen_cu = nets.content_encoder(xu).detach()

        def objective(fd=False):
            t = translate(nets, xu, xl, labels, n_r)
            terms = generator_terms(nets, t, weights, SsimParams())
            if fd:
                # the latent term holds c_u under a stop-gradient; differences must see it frozen
                terms["lat"] = latent_recovery_terms(t.noise_ul, t.n_r, t.c_ul, frozen_cu)
            return total_generator_objective(terms, weights)

        for _, p in nets.discriminator_parameters():
            p.requires_grad = False
        with Tape() as tape:
            tape.backward(objective())
        picks = [
            nets.content_encoder.stem.weight,
            nets.style_encoder.noise_head.weight,
            nets.generator.mlp_out.weight,
            nets.generator.out.weight,
        ]
        for p in picks:
            idx = rng.choice(p.size, size=min(12, p.size), replace=False)
            num = numerical_gradient(lambda: objective(fd=True).item(), p.data, eps=1e-6, indices=idx)
            err = relative_error(p.grad.reshape(-1)[idx], num.reshape(-1)[idx])
            assert err < 1e-3, err


def test_sampler_covers_pools_and_restores():
    s = PairSampler(5, 3, seed=1)
    seen_u, seen_l = [], []
    for _ in range(5):
        u, l = s.next(1)
        seen_u += u
        seen_l += l
    assert sorted(seen_u) == list(range(5))
    state = json.loads(json.dumps(s.state()))
    ahead = [s.next(2) for _ in range(4)]
    t = PairSampler(5, 3, seed=1)
    t.restore(state)
    assert [t.next(2) for _ in range(4)] == ahead


def test_split_is_order_invariant(corpus):
    u1, l1 = split_pools(corpus, 0.5, seed=3)
    u2, l2 = split_pools(corpus[::-1], 0.5, seed=3)
    assert [v.voxels.tobytes() for v in u1] == [v.voxels.tobytes() for v in u2]
    assert [lv.volume.voxels.tobytes() for lv in l1] == [lv.volume.voxels.tobytes() for lv in l2]
    assert len(l1) == round(0.5 * len(corpus))


def test_training_invariant_to_corpus_order(corpus, tmp_path):
    _, a = run_training(config(steps=2), corpus)
    _, b = run_training(config(steps=2), corpus[::-1])
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_checkpoint_round_trip_bit_exact(corpus, tmp_path):
    state, _ = run_training(config(steps=2), corpus)
    path = tmp_path / "s.h3d"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.step == 2 and back.config == state.config
    for k, v in state.nets.state_dict().items():
        a = back.nets.state_dict()[k]
        assert a.dtype == v.dtype and a.tobytes() == v.tobytes()
    for name in state.opt_g.m:
        assert back.opt_g.m[name].tobytes() == state.opt_g.m[name].tobytes()
        assert back.opt_g.v[name].tobytes() == state.opt_g.v[name].tobytes()
    assert back.opt_d.t == state.opt_d.t
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    nets = load_networks(path)
    assert nets.config == TINY


def test_checkpoint_errors(tmp_path, corpus):
    state = init_state(config(), 1, 1)
    path = tmp_path / "s.h3d"
    save_checkpoint(state, path)
    blob = bytearray(path.read_bytes())
    bad_magic = bytearray(blob)
    bad_magic[0:4] = b"XXXX"
    (tmp_path / "m.h3d").write_bytes(bytes(bad_magic))
    with pytest.raises(ckpt.CheckpointVersionError):
        load_checkpoint(tmp_path / "m.h3d")
    bad_version = bytearray(blob)
    bad_version[8] = 99
    (tmp_path / "v.h3d").write_bytes(bytes(bad_version))
    with pytest.raises(ckpt.CheckpointVersionError, match="version 99"):
        load_checkpoint(tmp_path / "v.h3d")
    flipped = bytearray(blob)
    flipped[len(flipped) // 2] ^= 0xFF
    (tmp_path / "c.h3d").write_bytes(bytes(flipped))
    with pytest.raises(ckpt.CheckpointCorruptError):
        load_checkpoint(tmp_path / "c.h3d")
    (tmp_path / "t.h3d").write_bytes(bytes(blob[:100]))
    with pytest.raises(ckpt.CheckpointError):
        load_checkpoint(tmp_path / "t.h3d")


def test_resume_matches_uninterrupted(corpus, tmp_path):
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    run_training(config(steps=6, out_dir=str(full_dir)), corpus)
    run_training(config(steps=3, out_dir=str(part_dir)), corpus)
    run_training(config(steps=6, out_dir=str(part_dir)), corpus, resume=part_dir / "final.h3d")
    full_log = (full_dir / "loss_log.jsonl").read_text()
    assert (part_dir / "loss_log.jsonl").read_text() == full_log
    assert len(full_log.splitlines()) == 6
    assert [LossReport.from_json(l).step for l in full_log.splitlines()] == list(range(1, 7))
    a, b = load_checkpoint(full_dir / "final.h3d"), load_checkpoint(part_dir / "final.h3d")
    for k, v in a.nets.state_dict().items():
        assert b.nets.state_dict()[k].tobytes() == v.tobytes()


def test_augment_draws_from_the_symmetry_group():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    item = x[0, 0]
    group = []
    for swap in (False, True):
        y = item.transpose(0, 2, 1) if swap else item
        for f1 in (False, True):
            for f2 in (False, True):
                z = np.flip(y, 1) if f1 else y
                group.append((np.flip(z, 2) if f2 else z).copy())
    seen = set()
    for _ in range(200):
        out = augment(x, (1, 2), rng)[0, 0]
        hits = [i for i, g in enumerate(group) if np.array_equal(out, g)]
        assert len(hits) == 1
        seen.add(hits[0])
        # axis 0 is never mixed in
        np.testing.assert_allclose(out.sum(axis=(1, 2)), item.sum(axis=(1, 2)), atol=1e-12)
    assert seen == set(range(8))
    assert augment(x, (), rng) is x


def test_augmented_training_resumes_identically(corpus, tmp_path):
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    run_training(config(steps=4, augment_axes=(1, 2), out_dir=str(full_dir)), corpus)
    run_training(config(steps=2, augment_axes=(1, 2), out_dir=str(part_dir)), corpus)
    run_training(config(steps=4, augment_axes=(1, 2), out_dir=str(part_dir)), corpus, resume=part_dir / "final.h3d")
    assert (part_dir / "loss_log.jsonl").read_text() == (full_dir / "loss_log.jsonl").read_text()
    plain = tmp_path / "plain"
    run_training(config(steps=4, out_dir=str(plain)), corpus)
    assert (plain / "loss_log.jsonl").read_text() != (full_dir / "loss_log.jsonl").read_text()


def test_zero_steps_persists_initial_state(corpus, tmp_path):
    state, reports = run_training(config(steps=0, out_dir=str(tmp_path)), corpus)
    assert reports == [] and (tmp_path / "loss_log.jsonl").read_text() == ""
    back = load_checkpoint(tmp_path / "final.h3d")
    init = build_networks(TINY).state_dict()
    for k, v in back.nets.state_dict().items():
        np.testing.assert_array_equal(v, init[k])


def test_periodic_checkpoints(corpus, tmp_path):
    run_training(config(steps=4, checkpoint_every=2, out_dir=str(tmp_path)), corpus)
    assert sorted(p.name for p in tmp_path.glob("*.h3d")) == ["checkpoint_000002.h3d", "checkpoint_000004.h3d", "final.h3d"]


def test_corpus_errors(corpus):
    with pytest.raises(ValueError):
        run_training(config(), [])
    wrong_k = [LabeledVolume(lv.volume, LabelVector.site(lv.label.index, 4)) for lv in corpus]
    with pytest.raises(ValueError, match="K=3"):
        run_training(config(), wrong_k)


def test_training_from_manifest(tmp_path):
    from harmonize3d.phantom import generate_corpus

    manifest = generate_corpus(PhantomConfig(extents=(16, 16, 16), n_subjects=2), tmp_path / "c")
    state, reports = run_training(config(steps=2, corpus=str(manifest)))
    assert len(reports) == 2
    with pytest.raises(ValueError, match="K=4"):
        run_training(config(steps=1, corpus=str(manifest), model=replace(TINY, n_sites=4)))
