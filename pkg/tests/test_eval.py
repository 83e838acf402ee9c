import csv
import json
import math
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from harmonize3d.eval import (
    EvalReport,
    SiteDistribution,
    cross_subject_structure,
    emit_report,
    luminance_similarity_summary,
    pairwise_w1_matrix,
    site_mean_distributions,
    structural_preservation_summary,
    w1_distance,
)
from harmonize3d.phantom import make_anatomy
from harmonize3d.ssim import luminance_term
from harmonize3d.volume import Volume


def sorted_pairing(a, b):
    """Oracle for equal sizes: exact rational mean of sorted absolute differences."""
    a, b = sorted(a), sorted(b)
    return float(sum(abs(Fraction(x) - Fraction(y)) for x, y in zip(a, b)) / len(a))


def lp_w1(a, b):
    """Oracle for any sizes: optimal transport as a linear program."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(np.asarray(a, float), np.asarray(b, float))).ravel()
    rows = []
    for i in range(n):
        r = np.zeros((n, m))
        r[i] = 1
        rows.append(r.ravel())
    for j in range(m):
        r = np.zeros((n, m))
        r[:, j] = 1
        rows.append(r.ravel())
    rhs = [1 / n] * n + [1 / m] * m
    res = linprog(cost, A_eq=np.array(rows), b_eq=rhs, bounds=(0, None), method="highs")
    return res.fun


def test_examples():
    assert w1_distance([0.3, 0.1], [0.1, 0.3]) == 0.0
    assert w1_distance([0.0], [3.0]) == 3.0
    assert w1_distance([0, 0], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        w1_distance([], [1.0])


def test_equal_sizes_match_sorted_pairing_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        # dyadic samples keep every partial sum exact
        a = (rng.integers(-2000, 2000, n) / 64).tolist()
        b = (rng.integers(-2000, 2000, n) / 64).tolist()
        assert w1_distance(a, b) == sorted_pairing(a, b)


def test_equal_sizes_random_floats_match_lp():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.uniform(size=(2, 12))
        assert w1_distance(a, b) == pytest.approx(lp_w1(a, b), abs=1e-9)


def test_unequal_sizes_match_lp():
    rng = np.random.default_rng(2)
    for _ in range(40):
        n, m = rng.integers(1, 15, 2)
        a, b = rng.uniform(size=n), rng.normal(size=m)
        assert w1_distance(a, b) == pytest.approx(lp_w1(a, b), abs=1e-9)


def test_unequal_sizes_hand_value():
    # quantile functions: a = 0 on [0, 1); b = 0 on [0, 1/2), 1 on [1/2, 1) -> 0.5
    assert w1_distance([0.0], [0.0, 1.0]) == 0.5
    # {0, 1, 2} vs {0, 2}: |F^-1| differs on [1/3, 1/2) by 1 and on [1/2, 2/3) by 1 -> 1/3
    assert w1_distance([0, 1, 2], [0, 2]) == pytest.approx(1 / 3, abs=1e-15)


dyadic = st.lists(st.integers(-1000, 1000).map(lambda k: k / 16), min_size=1, max_size=20)


@settings(max_examples=100, deadline=None)
@given(dyadic, dyadic, dyadic, st.integers(-500, 500).map(lambda k: k / 8))
def test_metric_axioms_exact(a, b, c, shift):
    assert w1_distance(a, b) == w1_distance(b, a)
    assert w1_distance(a, c) <= w1_distance(a, b) + w1_distance(b, c)
    assert w1_distance(a, a) == 0.0
    sa = [x + shift for x in a]
    sb = [x + shift for x in b]
    assert w1_distance(sa, sb) == w1_distance(a, b)
    assert w1_distance(sa, a) == abs(shift)


def test_site_mean_distributions_and_matrix():
    vols = [Volume(np.full((4, 4, 4), v)) for v in (0.5, 0.25, 0.75, 0.5)]
    dists = site_mean_distributions(vols, [0, 1, 1, 0], ["A", "B", "B", "A"])
    assert [d.samples for d in dists] == [[0.5, 0.5], [0.25, 0.75]]
    assert [d.name for d in dists] == ["A", "B"]
    mat, summary = pairwise_w1_matrix(dists)
    assert mat.shape == (2, 2) and mat[0, 1] == mat[1, 0] == 0.25
    assert summary.sd == 0.0
    with pytest.raises(ValueError):
        pairwise_w1_matrix(dists[:1])
    with pytest.raises(ValueError):
        site_mean_distributions(vols, [0, 1])
    with pytest.raises(ValueError):
        SiteDistribution(0, "A", [])


def test_masked_means_ignore_background():
    x = np.zeros((4, 4, 4), np.float32)
    x[:2] = 0.6
    v = Volume(x)
    assert site_mean_distributions([v], [0])[0].samples == [pytest.approx(0.3)]
    assert site_mean_distributions([v], [0], mask=True)[0].samples == [pytest.approx(0.6)]


def test_toy_matrix_by_hand():
    dists = [SiteDistribution(0, "a", [0.0, 1.0]), SiteDistribution(1, "b", [0.5, 1.5]), SiteDistribution(2, "c", [0.0, 3.0])]
    mat, summary = pairwise_w1_matrix(dists)
    expected = np.array([[0, 0.5, 1.0], [0.5, 0, 1.0], [1.0, 1.0, 0]])
    np.testing.assert_array_equal(mat, expected)
    assert summary.mean == pytest.approx(2.5 / 3)


def test_luminance_summary():
    vols = [make_anatomy(s, (16, 16, 16)) for s in range(4)]
    same = luminance_similarity_summary([vols[0]] * 3)
    assert same.mean == pytest.approx(1.0, abs=1e-9) and same.sd == pytest.approx(0.0, abs=1e-9)
    const = luminance_similarity_summary([Volume(np.full((8, 8, 8), 0.5)), Volume(np.full((8, 8, 8), 0.25))])
    assert const.mean == pytest.approx(0.8001, abs=1e-4)
    summary = luminance_similarity_summary(vols)
    direct = [luminance_term(a, b).item() for a, b in combinations(vols, 2)]
    assert summary.mean == pytest.approx(np.mean(direct), abs=1e-6)
    assert summary.n == 6
    assert luminance_similarity_summary(vols, cap=4).n == 4
    assert luminance_similarity_summary(vols[::-1]).mean == pytest.approx(summary.mean, abs=1e-12)
    with pytest.raises(ValueError, match="extent mismatch"):
        luminance_similarity_summary([vols[0], make_anatomy(0, (16, 16, 20))])


def test_structural_preservation():
    vols = [make_anatomy(s, (16, 16, 16)) for s in range(3)]
    ident = structural_preservation_summary(vols, vols)
    assert ident.mean == 1.0 or abs(ident.mean - 1.0) <= 1e-6
    rng = np.random.default_rng(0)
    permuted = [v.with_voxels(rng.permutation(v.voxels.ravel()).reshape(v.extents)) for v in vols]
    assert structural_preservation_summary(vols, permuted).mean < 0.5
    with pytest.raises(ValueError, match="unmatched"):
        structural_preservation_summary(vols, vols[:2])


def test_cross_subject_structure_baseline():
    vols = [make_anatomy(s) for s in range(6)]
    base = cross_subject_structure(vols, list(range(6)), n_pairs=10)
    assert base.n == 10 and base.mean < 0.9
    with pytest.raises(ValueError):
        cross_subject_structure(vols, [0] * 6)


def _report():
    rng = np.random.default_rng(3)
    vols = [make_anatomy(s, (16, 16, 16)) for s in range(6)]
    harm = [v.with_voxels(np.clip(v.voxels * 1.1, 0, 1)) for v in vols]
    return EvalReport.build(vols, harm, [0, 1, 2, 0, 1, 2], ["A", "B", "C"] * 2, target="site:0", metadata={"corpus": "toy"})


def test_report_files_and_round_trip(tmp_path):
    rep = _report()
    files = emit_report(rep, tmp_path / "r")
    names = {f.name for f in files}
    assert {"summary.json", "w1_pre.csv", "w1_post.csv"} <= names
    with open(tmp_path / "r" / "w1_pre.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    doc = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert EvalReport.from_dict(doc) == rep
    mat = np.array(doc["w1_post"])
    np.testing.assert_allclose(mat, mat.T, atol=1e-9)
    assert np.abs(np.diag(mat)).max() <= 1e-9
    emit_report(_report(), tmp_path / "again")
    for f in names:
        assert (tmp_path / "r" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
