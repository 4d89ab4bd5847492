"""LoRA-X and LoRA adapter types, materialization, merging and file layout.

A LoRA-X adapter for a module with base weight ``W0 = U S V^T`` is the
vector ``delta_sigma`` of length r; its weight update is
``U[:, :r] @ diag(delta_sigma) @ V[:, :r].T``. Only the r numbers are stored;
the bases are recomputed from the base weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import BasisMismatch, InvalidBundle, InvalidRank, ShapeError
from .numerics import SvdFactors, clamp_rank
from .tensor_store import ModuleKey, TensorBundle, parse_module_key

LORAX_SUFFIX = ".lora_x.delta_sigma"
DENSE_SUFFIX = ".lora_x.delta_sigma_dense"
UP_SUFFIX = "_lora.up.weight"
DOWN_SUFFIX = "_lora.down.weight"


def _key(k) -> ModuleKey:
    return k if isinstance(k, ModuleKey) else parse_module_key(k)


@dataclass(frozen=True, eq=False)
class LoraXAdapter:
    module_key: ModuleKey
    delta_sigma: np.ndarray
    frozen_basis_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "module_key", _key(self.module_key))
        object.__setattr__(self, "delta_sigma", np.asarray(self.delta_sigma, dtype=np.float64).reshape(-1))

    @property
    def rank(self) -> int:
        return self.delta_sigma.shape[0]

    @property
    def n_params(self) -> int:
        return self.rank


@dataclass(frozen=True, eq=False)
class DenseLoraXAdapter:
    """Rotated (generally non-diagonal) singular-value update on target bases.

    Rows index target left singular directions, columns right ones.
    """

    module_key: ModuleKey
    delta_sigma_dense: np.ndarray
    basis_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "module_key", _key(self.module_key))
        d = np.asarray(self.delta_sigma_dense, dtype=np.float64)
        if d.ndim != 2 or not np.all(np.isfinite(d)):
            raise ValueError("delta_sigma_dense must be a finite 2-D matrix")
        object.__setattr__(self, "delta_sigma_dense", d)

    @property
    def frozen_basis_ref(self):
        return self.basis_ref


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    module_key: ModuleKey
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "module_key", _key(self.module_key))
        b = np.asarray(self.b, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0]:
            raise ShapeError(f"LoRA factors do not chain: B {b.shape}, A {a.shape}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    def delta(self) -> np.ndarray:
        return self.b @ self.a


AnyAdapter = Union[LoraXAdapter, DenseLoraXAdapter, LoraAdapter]


@dataclass(frozen=True)
class ValidationReport:
    violations: list[int]
    margins: np.ndarray = field(repr=False)

    @property
    def valid(self) -> bool:
        return not self.violations


def init_lorax(base: SvdFactors, r: int, module_key="") -> LoraXAdapter:
    r = clamp_rank(r, base.k)
    return LoraXAdapter(module_key, np.zeros(r), base.basis_id)


def _check_basis(ref, basis: SvdFactors):
    if ref is not None and basis.basis_id and ref != basis.basis_id:
        raise BasisMismatch(f"adapter is bound to basis {ref}, got {basis.basis_id}")


def materialize_delta(adapter: LoraXAdapter | DenseLoraXAdapter, basis: SvdFactors) -> np.ndarray:
    """Weight update ``U ΔΣ V^T`` on the top directions of ``basis``."""
    _check_basis(adapter.frozen_basis_ref, basis)
    if isinstance(adapter, DenseLoraXAdapter):
        rt, rs = adapter.delta_sigma_dense.shape
        if rt > basis.k or rs > basis.k:
            raise BasisMismatch(f"dense ΔΣ {adapter.delta_sigma_dense.shape} exceeds basis rank {basis.k}")
        return basis.u[:, :rt] @ adapter.delta_sigma_dense @ basis.v[:, :rs].T
    r = adapter.rank
    if r > basis.k:
        raise BasisMismatch(f"adapter rank {r} exceeds basis rank {basis.k}")
    return (basis.u[:, :r] * adapter.delta_sigma) @ basis.v[:, :r].T


def merge_into_base(w0, delta) -> np.ndarray:
    w0 = np.asarray(w0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if w0.shape != delta.shape:
        raise ShapeError(f"cannot merge delta {delta.shape} into weight {w0.shape}")
    return w0 + delta


def export_up_down(adapter: LoraXAdapter, basis: SvdFactors) -> tuple[np.ndarray, np.ndarray]:
    """``up = Ũ`` and ``down = ΔΣ Ṽ^T`` (singular values absorbed into down)."""
    _check_basis(adapter.frozen_basis_ref, basis)
    r = adapter.rank
    if r > basis.k:
        raise BasisMismatch(f"adapter rank {r} exceeds basis rank {basis.k}")
    up = basis.u[:, :r].copy()
    down = adapter.delta_sigma[:, None] * basis.v[:, :r].T
    return up, down


def validate_adapter(adapter: LoraXAdapter, base_sigma) -> ValidationReport:
    """List (1-based) indices i where sigma_i + delta_sigma_i < 0."""
    base_sigma = np.asarray(base_sigma, dtype=np.float64)
    if adapter.rank > base_sigma.shape[0]:
        raise InvalidRank(f"adapter rank {adapter.rank} exceeds {base_sigma.shape[0]} base singular values")
    margins = base_sigma[: adapter.rank] + adapter.delta_sigma
    return ValidationReport([int(i) + 1 for i in np.flatnonzero(margins < 0)], margins)


# ---------------------------------------------------------------------------
# adapter bundles


@dataclass
class AdapterBundle:
    """Adapters keyed by module name, bound to one base model by content hash."""

    modules: dict[str, AnyAdapter]
    base_model_hash: str = ""
    extra_metadata: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.modules)

    def __iter__(self):
        return iter(self.modules)

    def __getitem__(self, key):
        return self.modules[key]

    @property
    def rank(self) -> int:
        ranks = [
            a.rank if not isinstance(a, DenseLoraXAdapter) else max(a.delta_sigma_dense.shape)
            for a in self.modules.values()
        ]
        return max(ranks, default=0)

    def to_tensor_bundle(self, dtype: str = "F32") -> TensorBundle:
        arrays = {}
        for key, ad in self.modules.items():
            if isinstance(ad, LoraXAdapter):
                arrays[key + LORAX_SUFFIX] = ad.delta_sigma
            elif isinstance(ad, DenseLoraXAdapter):
                arrays[key + DENSE_SUFFIX] = ad.delta_sigma_dense
            else:
                arrays[key + UP_SUFFIX] = ad.b
                arrays[key + DOWN_SUFFIX] = ad.a
        meta = {"rank": str(self.rank), "base_model_hash": self.base_model_hash}
        meta.update(self.extra_metadata)
        return TensorBundle.from_arrays(arrays, dtype=dtype, metadata=meta)

    @classmethod
    def from_tensor_bundle(cls, tb: TensorBundle, basis_refs: dict[str, str] | None = None) -> "AdapterBundle":
        refs = basis_refs or {}
        modules: dict[str, AnyAdapter] = {}
        for name in tb:
            if name.endswith(LORAX_SUFFIX):
                key = name[: -len(LORAX_SUFFIX)]
                modules[key] = LoraXAdapter(key, tb.matrix(name), refs.get(key))
            elif name.endswith(DENSE_SUFFIX):
                key = name[: -len(DENSE_SUFFIX)]
                modules[key] = DenseLoraXAdapter(key, tb.matrix(name), refs.get(key))
            elif name.endswith(UP_SUFFIX):
                key = name[: -len(UP_SUFFIX)]
                down = name.replace("_lora.up", "_lora.down")
                if down not in tb:
                    raise InvalidBundle(f"{name!r} has no matching {down!r}")
                modules[key] = LoraAdapter(key, tb.matrix(name), tb.matrix(down))
            elif name.endswith(DOWN_SUFFIX):
                if name.replace("_lora.down", "_lora.up") not in tb:
                    raise InvalidBundle(f"{name!r} has no matching up tensor")
            else:
                raise InvalidBundle(f"unrecognised adapter tensor {name!r}")
        meta = dict(tb.metadata)
        model_hash = meta.pop("base_model_hash", "")
        meta.pop("rank", None)
        return cls(modules, model_hash, meta)


def export_up_down_bundle(adapters: AdapterBundle, bases: dict[str, SvdFactors], dtype="F32") -> TensorBundle:
    """Write LoRA-X adapters in the interchange ``<key>_lora.up/down.weight`` layout."""
    arrays = {}
    for key, ad in adapters.modules.items():
        if isinstance(ad, DenseLoraXAdapter):
            f = bases[key]
            rt, rs = ad.delta_sigma_dense.shape
            up, down = f.u[:, :rt], ad.delta_sigma_dense @ f.v[:, :rs].T
        elif isinstance(ad, LoraXAdapter):
            up, down = export_up_down(ad, bases[key])
        else:
            up, down = ad.b, ad.a
        arrays[key + UP_SUFFIX] = up
        arrays[key + DOWN_SUFFIX] = down
    return TensorBundle.from_arrays(arrays, dtype=dtype, metadata={"base_model_hash": adapters.base_model_hash})
