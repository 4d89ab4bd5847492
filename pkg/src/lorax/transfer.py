"""Training-free adapter transfer between base models.

Same-shape modules use the subspace projection

    ΔW_{t<-s} = U_t U_t^T ΔW_s V_t V_t^T = U_t (U_t^T ΔW_s V_t) V_t^T

so the transferred adapter is the dense matrix ``U_t^T ΔW_s V_t`` on the
target's top singular directions. Modules whose shapes differ first map the
source bases into the target spaces (:func:`map_basis_diff_dim`).
"""
from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import (AdapterBundle, DenseLoraXAdapter, LoraAdapter, LoraXAdapter, materialize_delta)
from .errors import BasisMismatch, EmptyTransfer, InvalidRank, ShapeError
from .numerics import SvdFactors, pseudo_inverse, polar_factor, svd
from .similarity import DEFAULT_THRESHOLD, PairingRules, build_similarity_report, match_modules
from .tensor_store import TensorBundle, parse_module_key

COLLAPSE_TOL = 1e-9
MODES = ("project", "copy_sigma", "lora_baseline")


@dataclass(frozen=True)
class BasisMap:
    mapped_u: np.ndarray
    mapped_v: np.ndarray
    residual: float
    residual_v: float = 0.0
    degenerate: bool = False

    @property
    def k(self) -> int:
        return self.mapped_u.shape[1]


def _embed(basis: np.ndarray, rows: int) -> np.ndarray:
    """Zero-pad or truncate to ``rows`` leading coordinates, then re-orthonormalize."""
    out = np.zeros((rows, basis.shape[1]))
    n = min(rows, basis.shape[0])
    out[:n] = basis[:n]
    return polar_factor(out)


def _ls_map(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """``tgt src^T (src src^T)^+ src``: image of src under argmin_P ‖P src − tgt‖_F."""
    return tgt @ src.T @ pseudo_inverse(src @ src.T) @ src


def map_basis_diff_dim(source: SvdFactors, target: SvdFactors, strict: bool = False) -> BasisMap:
    """Map source singular bases into the target's row/column spaces.

    Both bases are first cut to ``k = min(source.k, target.k)`` columns. With
    ``strict=True`` the least-squares formulas are applied literally:

        Ũ_s = U_t U_s^T (U_s U_s^T)^+ U_s
        Ṽ_s = V_s (V_s^T V_s)^+ V_s^T V_t   (needs n == n'; otherwise the
                                            left-side form is used)

    For orthonormal U_s the left formula collapses to U_t, which carries no
    source information. By default, a side whose dimensions differ and whose
    least-squares image collapses (residual < 1e-9) is instead mapped by
    coordinate embedding (zero-pad or truncate, then nearest orthonormal
    matrix) and the map is flagged ``degenerate``. A side whose dimensions
    already agree keeps the source basis unchanged.
    """
    k = min(source.k, target.k)
    if k == 0:
        raise InvalidRank("cannot map empty bases")
    us, ut = source.u[:, :k], target.u[:, :k]
    vs, vt = source.v[:, :k], target.v[:, :k]

    lit_u = _ls_map(us, ut)
    if vs.shape[0] == vt.shape[0]:
        lit_v = vs @ pseudo_inverse(vs.T @ vs) @ vs.T @ vt
    else:
        lit_v = _ls_map(vs, vt)
    res_u = float(np.linalg.norm(lit_u - ut))
    res_v = float(np.linalg.norm(lit_v - vt))
    if strict:
        return BasisMap(lit_u, lit_v, res_u, res_v, False)

    degenerate = False
    if us.shape[0] == ut.shape[0]:
        mu = us
    elif res_u < COLLAPSE_TOL:
        mu, degenerate = _embed(us, ut.shape[0]), True
    else:
        mu = lit_u
    if vs.shape[0] == vt.shape[0]:
        mv = vs
    elif res_v < COLLAPSE_TOL:
        mv, degenerate = _embed(vs, vt.shape[0]), True
    else:
        mv = lit_v
    return BasisMap(mu, mv, res_u, res_v, degenerate)


def transfer_same_dim(delta_w_s, target: SvdFactors, module_key="") -> DenseLoraXAdapter:
    """Project a source update onto the (already truncated) target bases."""
    delta_w_s = np.asarray(delta_w_s, dtype=np.float64)
    if delta_w_s.shape != tuple(target.source_shape):
        raise ShapeError(f"update {delta_w_s.shape} does not match target weight {target.source_shape}")
    dense = target.u.T @ delta_w_s @ target.v
    return DenseLoraXAdapter(module_key, dense, target.basis_id)


def transfer_diff_dim(adapter: LoraXAdapter, source: SvdFactors, target: SvdFactors,
                      strict: bool = False) -> tuple[DenseLoraXAdapter, BasisMap]:
    """``ΔΣ_{t<-s} = U_t^T Ũ_s ΔΣ_s Ṽ_s^T V_t`` on mapped bases."""
    r = min(adapter.rank, source.k)
    bm = map_basis_diff_dim(source.truncate(r), target, strict)
    k = bm.k
    dense = target.u[:, :k].T @ (bm.mapped_u * adapter.delta_sigma[:k]) @ bm.mapped_v.T @ target.v[:, :k]
    return DenseLoraXAdapter(adapter.module_key, dense, target.basis_id), bm


def transfer_lora_baseline(adapter: LoraAdapter, target: SvdFactors) -> tuple[np.ndarray, np.ndarray]:
    """Project plain LoRA factors: ``B -> U_t U_t^T B``, ``A -> A V_t V_t^T``."""
    m, n = target.source_shape
    if adapter.b.shape[0] != m or adapter.a.shape[1] != n:
        raise ShapeError(f"LoRA {adapter.b.shape[0]}x{adapter.a.shape[1]} does not fit target {m}x{n}")
    b_proj = target.u @ (target.u.T @ adapter.b)
    a_proj = (adapter.a @ target.v) @ target.v.T
    return b_proj, a_proj


def copy_sigma_baseline(adapter: LoraXAdapter, target: SvdFactors) -> np.ndarray:
    """Ablation: reuse the source ΔΣ unrotated on the target bases."""
    r = adapter.rank
    if r > target.k:
        raise InvalidRank(f"adapter rank {r} exceeds target rank {target.k}")
    return (target.u[:, :r] * adapter.delta_sigma) @ target.v[:, :r].T


# ---------------------------------------------------------------------------
# bundle-level orchestration


@dataclass
class TransferConfig:
    mode: str = "project"
    rank: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    filter_blocks: tuple[str, ...] = ()
    strict_paper_formula: bool = False
    jobs: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rank is not None and self.rank < 1:
            raise InvalidRank(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        self.filter_blocks = tuple(self.filter_blocks)


@dataclass
class ModuleRecord:
    target_key: str
    source_key: str | None
    left: float | None
    right: float | None
    action: str  # transferred | remapped | filtered | degenerate
    frobenius_ratio: float | None
    reason: str | None = None


@dataclass
class TransferReport:
    mode: str
    threshold: float
    modules: list[ModuleRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mode": self.mode, "threshold": self.threshold, "modules": [asdict(m) for m in self.modules]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    def record(self, target_key: str) -> ModuleRecord:
        for m in self.modules:
            if m.target_key == target_key:
                return m
        raise KeyError(target_key)


def _positional_targets(source_keys, target_model: TensorBundle) -> dict[str, str | None]:
    by_loc = {}
    for k in target_model.matrix_keys():
        by_loc.setdefault(parse_module_key(k).locator, k)
    out = {}
    for k in source_keys:
        if k in target_model and len(target_model[k].shape) == 2:
            out[k] = k
        else:
            out[k] = by_loc.get(parse_module_key(k).locator)
    return out


def _ratio(delta_t, delta_s):
    ns = np.linalg.norm(delta_s)
    return float(np.linalg.norm(delta_t) / ns) if ns > 0 else 0.0


def transfer_bundle(source_model: TensorBundle, source_adapter: AdapterBundle, target_model: TensorBundle,
                    config: TransferConfig = TransferConfig()) -> tuple[AdapterBundle, TransferReport]:
    """Transfer every adapter module of ``source_adapter`` onto ``target_model``.

    Each source-adapter key appears exactly once in the report, under its
    positionally corresponding target key.
    """
    src_hash = source_model.content_hash()
    if source_adapter.base_model_hash != src_hash:
        raise BasisMismatch(f"adapter is bound to model {source_adapter.base_model_hash or '<none>'}, "
                            f"source model is {src_hash}")
    for key, ad in source_adapter.modules.items():
        if key not in source_model:
            raise BasisMismatch(f"adapter module {key!r} not present in source model")
        if config.mode == "lora_baseline" and not isinstance(ad, LoraAdapter):
            raise ValueError("lora_baseline mode needs plain LoRA (up/down) adapters")
        if config.mode != "lora_baseline" and not isinstance(ad, LoraXAdapter):
            raise ValueError(f"{config.mode} mode needs LoRA-X adapters")

    rank = config.rank or source_adapter.rank
    adapter_keys = sorted(source_adapter.modules)
    positional = _positional_targets(adapter_keys, target_model)
    targets = sorted({t for t in positional.values() if t is not None})

    rules = PairingRules(candidates="group", rank_limit=rank, allow_dim_mapping=True,
                         strict_paper_formula=config.strict_paper_formula, jobs=config.jobs,
                         keys=frozenset(adapter_keys) | frozenset(targets))
    src_view = TensorBundle([source_model[k] for k in adapter_keys])
    tgt_view = TensorBundle([target_model[k] for k in targets])
    report = build_similarity_report(src_view, tgt_view, rules)
    plan = match_modules(report, config.threshold)

    def run(key):
        t = positional[key]
        if t is None:
            return ModuleRecord(key, None, None, None, "filtered", None, "no corresponding target module"), None
        if t.startswith(config.filter_blocks) and config.filter_blocks:
            pair = report.get(key, t)
            left, right = (pair.score.left, pair.score.right) if pair else (None, None)
            return ModuleRecord(t, None, left, right, "filtered", None, "listed in filter_blocks"), None
        s = plan.assignments.get(t)
        if s is None:
            pair = report.get(key, t)
            left, right = (pair.score.left, pair.score.right) if pair else (None, None)
            reason = pair.invalid_reason if pair is not None and not pair.valid else "below similarity threshold"
            return ModuleRecord(t, None, left, right, "filtered", None, reason), None
        pair = report.get(s, t)
        ad = source_adapter.modules[s]
        w_s, w_t = source_model.matrix(s), target_model.matrix(t)
        fs_full, ft_full = svd(w_s), svd(w_t)
        action = "transferred" if s == key else "remapped"

        if config.mode == "lora_baseline":
            ft = ft_full.truncate(min(rank, ft_full.k))
            b_proj, a_proj = transfer_lora_baseline(ad, ft)
            out = LoraAdapter(t, b_proj, a_proj)
            ratio = _ratio(b_proj @ a_proj, ad.delta())
        else:
            fs = fs_full.truncate(min(ad.rank, fs_full.k))
            bound = LoraXAdapter(ad.module_key, ad.delta_sigma[: fs.k], fs.basis_id)
            delta_s = materialize_delta(bound, fs)
            ft = ft_full.truncate(min(rank, ft_full.k))
            if config.mode == "copy_sigma":
                r = min(bound.rank, ft.k)
                out = DenseLoraXAdapter(t, np.diag(bound.delta_sigma[:r]), ft.basis_id)
            elif w_s.shape == w_t.shape:
                out = transfer_same_dim(delta_s, ft, t)
            else:
                out, bm = transfer_diff_dim(bound, fs, ft, config.strict_paper_formula)
                out = DenseLoraXAdapter(t, out.delta_sigma_dense, ft.basis_id)
                if bm.degenerate:
                    action = "degenerate"
            ratio = _ratio(materialize_delta(out, ft), delta_s)
        rec = ModuleRecord(t, s, pair.score.left, pair.score.right, action, ratio)
        return rec, out

    with ThreadPoolExecutor(max_workers=config.jobs or os.cpu_count()) as pool:
        results = list(pool.map(run, adapter_keys))

    out_modules = {}
    transfer_report = TransferReport(config.mode, config.threshold)
    for rec, ad in results:
        transfer_report.modules.append(rec)
        if ad is not None:
            out_modules[rec.target_key] = ad
    if not out_modules:
        warnings.warn("no module passed matching; the transferred adapter is empty", EmptyTransfer, stacklevel=2)
    meta = {"transfer_mode": config.mode}
    return AdapterBundle(out_modules, target_model.content_hash(), meta), transfer_report


def bind_bases(adapters: AdapterBundle, model: TensorBundle) -> dict[str, SvdFactors]:
    """Decompose the model modules an adapter bundle refers to, checking the hash binding."""
    if adapters.base_model_hash != model.content_hash():
        raise BasisMismatch(f"adapter bound to {adapters.base_model_hash or '<none>'}, "
                            f"model is {model.content_hash()}")
    return {k: svd(model.matrix(k)) for k in adapters.modules}


def materialize_bundle(adapters: AdapterBundle, model: TensorBundle) -> dict[str, np.ndarray]:
    """Weight update of every module of ``adapters`` on ``model``."""
    bases = bind_bases(adapters, model)
    out = {}
    for k, ad in adapters.modules.items():
        if isinstance(ad, LoraAdapter):
            out[k] = ad.delta()
        else:
            f = bases[k]
            out[k] = materialize_delta(type(ad)(ad.module_key, *_payload(ad), f.basis_id), f)
    return out


def _payload(ad):
    return (ad.delta_sigma,) if isinstance(ad, LoraXAdapter) else (ad.delta_sigma_dense,)
