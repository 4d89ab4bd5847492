"""Subspace similarity between module weights and module matching.

``Ψ(A, B) = ‖A^T B‖_F² / min(cols A, cols B)`` for orthonormal bases A, B.
It is 1 for identical subspaces and 0 for orthogonal ones.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import DegenerateInput, NumericsError, ShapeError
from .numerics import SvdFactors, orthonormality_defect, svd
from .tensor_store import ModuleKey, TensorBundle, parse_module_key

DEFAULT_THRESHOLD = 0.4
ORTHO_TOL = 1e-8
AGGREGATION = "min(left, right)"


@dataclass(frozen=True)
class SimilarityScore:
    left: float
    right: float
    columns_compared: int
    mapped: bool = False
    weighted_left: float | None = None
    weighted_right: float | None = None

    @property
    def combined(self) -> float:
        return min(self.left, self.right)

    def side(self, which: str) -> float:
        if which == "left":
            return self.left
        if which == "right":
            return self.right
        raise ValueError(f"side must be 'left' or 'right', got {which!r}")


ZERO_SCORE = SimilarityScore(0.0, 0.0, 0)


def _clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def unweighted_similarity(u_a, u_b, check: bool = True) -> float:
    u_a = np.asarray(u_a, dtype=np.float64)
    u_b = np.asarray(u_b, dtype=np.float64)
    if u_a.shape[0] != u_b.shape[0]:
        raise ShapeError(f"bases live in different spaces: {u_a.shape[0]} vs {u_b.shape[0]} rows")
    if check:
        for name, u in (("first", u_a), ("second", u_b)):
            if orthonormality_defect(u) > ORTHO_TOL:
                raise NumericsError(f"{name} basis is not orthonormal")
    n = min(u_a.shape[1], u_b.shape[1])
    if n == 0:
        return 0.0
    x, y = (u_a, u_b) if u_a.shape[1] <= u_b.shape[1] else (u_b, u_a)
    cross = y.T @ x
    direct = np.linalg.norm(cross) ** 2 / n
    if direct < 0.5:
        return _clip01(direct)
    # near 1 the residual of projecting x onto span(y) is the accurate quantity
    return _clip01(1.0 - np.linalg.norm(x - y @ cross) ** 2 / n)


def weighted_similarity(a, b) -> float:
    """``‖A^T B‖_F² / (‖A^T A‖_F ‖B^T B‖_F)``; symmetric and scale invariant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    den = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if den == 0.0:
        raise DegenerateInput("weighted similarity of a zero matrix is undefined")
    return _clip01(np.linalg.norm(a.T @ b) ** 2 / den)


def _limit(f: SvdFactors, rank_limit: int | None) -> SvdFactors:
    if rank_limit is None or rank_limit >= f.k:
        return f
    return f.truncate(max(1, rank_limit))


def _weighted_side(ua, sa, ub, sb):
    if not (np.any(sa) and np.any(sb)):
        return None
    return weighted_similarity(ua * np.sqrt(sa), ub * np.sqrt(sb))


def factor_similarity(fs: SvdFactors, ft: SvdFactors, rank_limit: int | None = None,
                      weighted: bool = False, strict_paper_formula: bool = False) -> SimilarityScore:
    """Left/right similarity from precomputed decompositions."""
    fs, ft = _limit(fs, rank_limit), _limit(ft, rank_limit)
    mapped = fs.source_shape != ft.source_shape
    if mapped:
        from .transfer import map_basis_diff_dim

        bm = map_basis_diff_dim(fs, ft, strict=strict_paper_formula)
        k = bm.k
        us, vs = bm.mapped_u, bm.mapped_v
        left = _clip01(np.linalg.norm(us.T @ ft.u[:, :k]) ** 2 / k)
        right = _clip01(np.linalg.norm(vs.T @ ft.v[:, :k]) ** 2 / k)
        return SimilarityScore(left, right, k, True)
    left = unweighted_similarity(fs.u, ft.u, check=False)
    right = unweighted_similarity(fs.v, ft.v, check=False)
    wl = wr = None
    if weighted:
        wl = _weighted_side(fs.u, fs.sigma, ft.u, ft.sigma)
        wr = _weighted_side(fs.v, fs.sigma, ft.v, ft.sigma)
    return SimilarityScore(left, right, min(fs.k, ft.k), False, wl, wr)


def module_similarity(w_s, w_t, rank_limit: int | None = None, weighted: bool = False) -> SimilarityScore:
    """SVD both weights and compare their top-``rank_limit`` singular subspaces.

    Without ``rank_limit`` full bases are compared; for square full-rank
    weights these span the whole space and the score is trivially 1.
    """
    return factor_similarity(svd(w_s), svd(w_t), rank_limit, weighted)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class PairScore:
    source_key: ModuleKey
    target_key: ModuleKey
    score: SimilarityScore
    valid: bool
    invalid_reason: str | None = None

    def to_json(self) -> dict:
        d = {
            "source_key": self.source_key.raw,
            "target_key": self.target_key.raw,
            "left": self.score.left,
            "right": self.score.right,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
        }
        if self.score.weighted_left is not None:
            d["weighted_left"] = self.score.weighted_left
            d["weighted_right"] = self.score.weighted_right
        if self.score.mapped:
            d["mapped"] = True
        return d


@dataclass
class SimilarityReport:
    pairs: list[PairScore]
    rank_limit: int | None = None
    aggregation: str = AGGREGATION

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            k = (p.source_key.raw, p.target_key.raw)
            if k in seen:
                raise ValueError(f"pair {k} appears twice")
            seen.add(k)
        self._index = {(p.source_key.raw, p.target_key.raw): p for p in self.pairs}

    def get(self, source: str, target: str) -> PairScore | None:
        return self._index.get((str(source), str(target)))

    def source_keys(self) -> list[ModuleKey]:
        return _unique(p.source_key for p in self.pairs)

    def target_keys(self) -> list[ModuleKey]:
        return _unique(p.target_key for p in self.pairs)

    def to_json(self) -> list[dict]:
        return [p.to_json() for p in self.pairs]

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, rows: list[dict], rank_limit=None) -> "SimilarityReport":
        pairs = []
        for r in rows:
            score = SimilarityScore(float(r["left"]), float(r["right"]), 0, bool(r.get("mapped", False)),
                                    r.get("weighted_left"), r.get("weighted_right"))
            pairs.append(PairScore(parse_module_key(r["source_key"]), parse_module_key(r["target_key"]),
                                   score, bool(r["valid"]), r.get("invalid_reason")))
        return cls(pairs, rank_limit)


def _unique(keys: Iterable[ModuleKey]) -> list[ModuleKey]:
    out, seen = [], set()
    for k in keys:
        if k.raw not in seen:
            seen.add(k.raw)
            out.append(k)
    return out


@dataclass(frozen=True)
class PairingRules:
    """Which (source, target) pairs to score and when a pair counts as invalid.

    ``candidates``: ``"all"`` scores every S x T pair (needed for transport
    costs); ``"group"`` only pairs sharing a locator or an alternate-block
    group; ``"positional"`` only same-locator pairs.
    """

    candidates: str = "all"
    rank_limit: int | None = None
    allow_dim_mapping: bool = False
    weighted: bool = False
    strict_paper_formula: bool = False
    jobs: int | None = None
    keys: frozenset[str] | None = field(default=None)


def invalid_reason(s: ModuleKey, t: ModuleKey, s_shape, t_shape, allow_dim_mapping: bool) -> str | None:
    if s.op_kind != t.op_kind:
        return "op-kind mismatch"
    if s.network_part != t.network_part:
        return "network-part mismatch"
    if tuple(s_shape) != tuple(t_shape) and not allow_dim_mapping:
        return "shape mismatch"
    return None


def decompose(bundle: TensorBundle, keys: Iterable[str], jobs: int | None = None) -> dict[str, SvdFactors]:
    keys = list(keys)
    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        return dict(zip(keys, pool.map(lambda k: svd(bundle.matrix(k)), keys)))


def candidate_pairs(source_keys: list[ModuleKey], target_keys: list[ModuleKey], mode: str):
    for t in target_keys:
        for s in source_keys:
            if mode == "all":
                yield s, t
            elif mode == "positional" and s.locator == t.locator:
                yield s, t
            elif mode == "group" and (s.locator == t.locator or (t.group is not None and s.group == t.group)):
                yield s, t


def build_similarity_report(source: TensorBundle, target: TensorBundle, rules: PairingRules = PairingRules(),
                            factors: tuple[dict, dict] | None = None) -> SimilarityReport:
    """Score candidate module pairs; invalid pairs are recorded with score 0.

    Output is sorted by target key then source key, independent of ``jobs``.
    """
    if rules.candidates not in ("all", "group", "positional"):
        raise ValueError(f"unknown candidate mode {rules.candidates!r}")
    s_keys = [parse_module_key(k) for k in source.matrix_keys() if rules.keys is None or k in rules.keys]
    t_keys = [parse_module_key(k) for k in target.matrix_keys() if rules.keys is None or k in rules.keys]
    pairs = sorted(candidate_pairs(s_keys, t_keys, rules.candidates), key=lambda p: (p[1].raw, p[0].raw))

    todo = []
    for s, t in pairs:
        reason = invalid_reason(s, t, source[s.raw].shape, target[t.raw].shape, rules.allow_dim_mapping)
        todo.append((s, t, reason))
    need_s = sorted({s.raw for s, _, r in todo if r is None})
    need_t = sorted({t.raw for _, t, r in todo if r is None})
    fs, ft = factors if factors is not None else ({}, {})
    fs = {**decompose(source, [k for k in need_s if k not in fs], rules.jobs), **fs}
    ft = {**decompose(target, [k for k in need_t if k not in ft], rules.jobs), **ft}

    def score(item):
        s, t, reason = item
        if reason is not None:
            return PairScore(s, t, ZERO_SCORE, False, reason)
        sc = factor_similarity(fs[s.raw], ft[t.raw], rules.rank_limit, rules.weighted, rules.strict_paper_formula)
        return PairScore(s, t, sc, True, None)

    with ThreadPoolExecutor(max_workers=rules.jobs or os.cpu_count()) as pool:
        scored = list(pool.map(score, todo))
    return SimilarityReport(scored, rules.rank_limit)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchingPlan:
    assignments: dict[str, str]
    filtered: list[str]
    threshold: float
    scores: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "assignments": dict(self.assignments), "filtered": list(self.filtered)}


def match_modules(report: SimilarityReport, threshold: float = DEFAULT_THRESHOLD) -> MatchingPlan:
    """Assign each target module a source module to take its adapter from.

    The positionally corresponding source wins if ``min(left, right)`` clears
    ``threshold``; otherwise the best other transformer block in the same
    attention module is used (lowest block index on ties); otherwise the
    target is filtered.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    by_target: dict[str, list[PairScore]] = {}
    for p in report.pairs:
        by_target.setdefault(p.target_key.raw, []).append(p)

    assignments, filtered, scores = {}, [], {}
    for t_raw in sorted(by_target):
        cands = [p for p in by_target[t_raw] if p.valid]
        t = by_target[t_raw][0].target_key
        positional = [p for p in cands if p.source_key.locator == t.locator]
        positional.sort(key=lambda p: (p.source_key.raw != t_raw, p.source_key.raw))
        if positional and positional[0].score.combined >= threshold:
            best = positional[0]
        else:
            alts = [
                p for p in cands
                if t.group is not None and p.source_key.group == t.group
                and p.source_key.locator != t.locator and p.score.combined >= threshold
            ]
            alts.sort(key=lambda p: (-p.score.combined, p.source_key.transformer_block, p.source_key.raw))
            best = alts[0] if alts else None
        if best is None:
            filtered.append(t_raw)
        else:
            assignments[t_raw] = best.source_key.raw
            scores[t_raw] = best.score.combined
    return MatchingPlan(assignments, filtered, threshold, scores)
