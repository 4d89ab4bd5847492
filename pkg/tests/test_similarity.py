import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_orthonormal
from lorax.errors import DegenerateInput, ShapeError
from lorax.similarity import (PairingRules, PairScore, SimilarityReport, SimilarityScore, build_similarity_report,
                              match_modules, module_similarity, unweighted_similarity, weighted_similarity)
from lorax.tensor_store import TensorBundle, parse_module_key


def oracle_psi(a, b):
    return np.sum((a.T @ b) ** 2) / min(a.shape[1], b.shape[1])


def test_self_and_complement(rng):
    u = random_orthonormal(rng, 10, 4)
    assert unweighted_similarity(u, u) == pytest.approx(1.0, abs=1e-14)
    i4 = np.eye(4)
    assert unweighted_similarity(i4[:, :2], i4[:, 2:]) == 0.0
    assert unweighted_similarity(i4[:, :2], i4[:, :2]) == 1.0


def test_monte_carlo_mean(rng):
    vals = np.array([unweighted_similarity(random_orthonormal(rng, 64, 8), random_orthonormal(rng, 64, 8))
                     for _ in range(2000)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - 0.125) <= 3 * se


def test_shape_error(rng):
    with pytest.raises(ShapeError):
        unweighted_similarity(np.eye(3)[:, :1], np.eye(4)[:, :1])


def test_weighted_examples(rng):
    a = rng.standard_normal((6, 3))
    assert weighted_similarity(a, a) == pytest.approx(1.0)
    assert weighted_similarity(np.eye(4)[:, :2], np.eye(4)[:, 2:]) == 0.0
    assert weighted_similarity(np.diag([2.0, 1.0]), np.diag([1.0, 2.0])) == pytest.approx(8 / 17, abs=1e-15)
    assert weighted_similarity(a, 3.7 * a) == pytest.approx(1.0)
    with pytest.raises(DegenerateInput):
        weighted_similarity(np.zeros((3, 2)), a[:3])


def test_module_similarity_identical(rng):
    w = rng.standard_normal((12, 9))
    sc = module_similarity(w, w, rank_limit=4)
    assert sc.left == pytest.approx(1.0) and sc.right == pytest.approx(1.0)


def test_module_similarity_rotated(rng):
    w = rng.standard_normal((8, 8))
    q = random_orthonormal(rng, 8, 8)
    sc = module_similarity(w, q @ w, rank_limit=3)
    u, _, vt = np.linalg.svd(w)
    u2, _, vt2 = np.linalg.svd(q @ w)
    assert sc.right == pytest.approx(1.0, abs=1e-10)
    assert sc.right == pytest.approx(oracle_psi(vt[:3].T, vt2[:3].T), abs=1e-10)
    assert sc.left == pytest.approx(oracle_psi(q @ u[:, :3], u[:, :3]), abs=1e-10)
    assert sc.left == pytest.approx(oracle_psi(u2[:, :3], u[:, :3]), abs=1e-10)


def test_module_similarity_random(rng):
    vals = [module_similarity(rng.standard_normal((64, 64)), rng.standard_normal((64, 64)), rank_limit=8).left
            for _ in range(200)]
    assert abs(np.mean(vals) - 0.125) < 0.03
    full = module_similarity(rng.standard_normal((16, 16)), rng.standard_normal((16, 16)))
    assert full.left == pytest.approx(1.0) and full.right == pytest.approx(1.0)


def test_weighted_module_similarity(rng):
    w = rng.standard_normal((10, 6))
    sc = module_similarity(w, 2 * w, weighted=True)
    assert sc.weighted_left == pytest.approx(1.0) and sc.weighted_right == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_psi_properties(m, ka, kb, seed):
    r = np.random.default_rng(seed)
    ka, kb = min(ka, m), min(kb, m)
    a, b = random_orthonormal(r, m, ka), random_orthonormal(r, m, kb)
    psi = unweighted_similarity(a, b)
    assert 0.0 <= psi <= 1.0
    assert unweighted_similarity(a, a) == 1.0
    assert psi == pytest.approx(oracle_psi(a, b), abs=1e-12)
    assert unweighted_similarity(b, a) == pytest.approx(psi, abs=1e-12)
    qa, qb = random_orthonormal(r, ka, ka), random_orthonormal(r, kb, kb)
    assert unweighted_similarity(a @ qa, b @ qb) == pytest.approx(psi, abs=1e-12)


def _bundle(rng, spec):
    return TensorBundle.from_arrays({k: rng.standard_normal(shape) for k, shape in spec.items()})


def test_report_identical_bundles(rng):
    b = _bundle(rng, {"db.0.attentions.0.tb.0.to_q": (6, 5), "db.0.attentions.0.tb.0.to_k": (6, 5)})
    rep = build_similarity_report(b, b, PairingRules(rank_limit=3))
    for k in b.matrix_keys():
        p = rep.get(k, k)
        assert p.valid and p.score.left == pytest.approx(1.0) and p.score.right == pytest.approx(1.0)
    cross = rep.get("db.0.attentions.0.tb.0.to_q", "db.0.attentions.0.tb.0.to_k")
    assert not cross.valid and cross.invalid_reason == "op-kind mismatch"
    assert cross.score.left == 0.0 and cross.score.right == 0.0


def test_report_shape_and_part_mismatch(rng):
    s = _bundle(rng, {"db.0.attentions.0.tb.0.to_q": (6, 5), "up.0.attentions.0.tb.0.to_v": (4, 4)})
    t = _bundle(rng, {"db.0.attentions.0.tb.0.to_q": (8, 5), "db.1.attentions.0.tb.0.to_v": (4, 4)})
    rep = build_similarity_report(s, t)
    assert rep.get("db.0.attentions.0.tb.0.to_q", "db.0.attentions.0.tb.0.to_q").invalid_reason == "shape mismatch"
    assert rep.get("up.0.attentions.0.tb.0.to_v",
                   "db.1.attentions.0.tb.0.to_v").invalid_reason == "network-part mismatch"
    mapped = build_similarity_report(s, t, PairingRules(allow_dim_mapping=True, rank_limit=2))
    p = mapped.get("db.0.attentions.0.tb.0.to_q", "db.0.attentions.0.tb.0.to_q")
    assert p.valid and p.score.mapped


def test_report_independent_of_jobs(rng):
    b = _bundle(rng, {f"db.0.attentions.0.tb.{i}.to_q": (7, 7) for i in range(4)})
    c = _bundle(rng, {f"db.0.attentions.0.tb.{i}.to_q": (7, 7) for i in range(4)})
    one = build_similarity_report(b, c, PairingRules(rank_limit=2, jobs=1)).dumps()
    many = build_similarity_report(b, c, PairingRules(rank_limit=2, jobs=4)).dumps()
    assert one == many


def test_report_json_round_trip(rng):
    b = _bundle(rng, {"db.0.attentions.0.tb.0.to_q": (6, 5), "db.0.attentions.0.tb.1.to_q": (6, 5)})
    rep = build_similarity_report(b, b, PairingRules(rank_limit=2))
    back = SimilarityReport.from_json(json.loads(rep.dumps()))
    assert back.to_json() == rep.to_json()


def _pair(s, t, score, valid=True):
    return PairScore(parse_module_key(s), parse_module_key(t), SimilarityScore(score, score, 8), valid,
                     None if valid else "op-kind mismatch")


T3 = "db.2.attentions.0.tb.3.to_q"
T6 = "db.2.attentions.0.tb.6.to_q"
T1 = "db.2.attentions.0.tb.1.to_q"


def test_match_identity():
    rep = SimilarityReport([_pair(T3, T3, 0.9), _pair(T6, T6, 0.8), _pair(T3, T6, 0.1), _pair(T6, T3, 0.2)])
    plan = match_modules(rep, 0.4)
    assert plan.assignments == {T3: T3, T6: T6} and plan.filtered == []


def test_match_alternate_block():
    rep = SimilarityReport([_pair(T3, T3, 0.35), _pair(T6, T3, 0.7), _pair(T1, T3, 0.5)])
    plan = match_modules(rep, 0.4)
    assert plan.assignments == {T3: T6}


def test_match_tie_prefers_lowest_block():
    rep = SimilarityReport([_pair(T3, T3, 0.1), _pair(T6, T3, 0.7), _pair(T1, T3, 0.7)])
    assert match_modules(rep, 0.4).assignments == {T3: T1}


def test_match_filtered():
    rep = SimilarityReport([_pair(T3, T3, 0.35), _pair(T6, T3, 0.39), _pair(T1, T3, 0.9, valid=False)])
    plan = match_modules(rep, 0.4)
    assert plan.assignments == {} and plan.filtered == [T3]


def test_match_min_aggregation():
    p = PairScore(parse_module_key(T3), parse_module_key(T3), SimilarityScore(0.9, 0.3, 8), True)
    assert match_modules(SimilarityReport([p]), 0.4).filtered == [T3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=9, max_size=9), st.floats(0, 1))
def test_match_partitions_targets(scores, threshold):
    keys = [T1, T3, T6]
    pairs = [_pair(s, t, scores[3 * i + j]) for i, s in enumerate(keys) for j, t in enumerate(keys)]
    plan = match_modules(SimilarityReport(pairs), threshold)
    assert set(plan.assignments).isdisjoint(plan.filtered)
    assert set(plan.assignments) | set(plan.filtered) == set(keys)
