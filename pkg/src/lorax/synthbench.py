"""Synthetic model families with controlled subspace alignment.

A source module is ``W0 = Q_u diag(σ) Q_v^T`` with ``σ_i = γ^i``. A target at
angle θ rotates each top-r singular direction i toward direction r+i by θ on
both sides, so every principal angle between the rank-r subspaces equals θ
and the rank-r similarity is ``cos²θ``.

The toy task for a module is linear regression ``y = (W0 + ΔW*) x`` with a
planted update ΔW* inside the source's top-r subspace. On the target, the
same functional change ``(W0' + ΔW*) x`` is asked for, so a transfer is
scored by how much of ΔW* survives on the target's subspace.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .adapters import AdapterBundle, LoraXAdapter
from .errors import InvalidSpec, TrainingDiverged
from .numerics import SvdFactors, truncated_svd
from .similarity import SimilarityScore, module_similarity
from .tensor_store import TensorBundle
from .transfer import TransferConfig, materialize_bundle, transfer_bundle

OPS = ("to_q", "to_k", "to_v", "to_out")
DEGRADATION_EPS = 1e-8
DIVERGENCE_FACTOR = 1e3
CSV_COLUMNS = ["seed", "theta", "rank", "mode", "trained_loss", "transferred_loss", "degradation",
               "psi_left", "psi_right", "status"]


@dataclass(frozen=True)
class SynthSpec:
    m: int = 64
    n: int = 64
    r: int = 8
    alignment_angle: float = 0.0
    modules: int = 4
    seed: int = 0
    noise: float = 0.0
    gamma: float = 0.9
    samples: int | None = None  # toy-task batch size, default 2n
    planted_scale: float = 0.5

    def validate(self):
        if min(self.m, self.n, self.r, self.modules) < 1:
            raise InvalidSpec("m, n, r and modules must be positive")
        if self.r > min(self.m, self.n):
            raise InvalidSpec(f"rank {self.r} exceeds min(m, n) = {min(self.m, self.n)}")
        if not 0.0 <= self.alignment_angle <= math.pi / 2 + 1e-12:
            raise InvalidSpec("alignment_angle must lie in [0, pi/2]")
        if self.alignment_angle > 0 and 2 * self.r > min(self.m, self.n):
            raise InvalidSpec("rotating the top-r subspace needs 2r <= min(m, n)")
        if not 0.0 < self.gamma < 1.0 or self.noise < 0:
            raise InvalidSpec("gamma must lie in (0, 1) and noise must be >= 0")

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown spec fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ToyTask:
    inputs: np.ndarray  # N x n
    targets: np.ndarray  # N x m
    hidden_delta: np.ndarray  # m x n


@dataclass(frozen=True)
class TransferResult:
    trained_loss: float
    transferred_loss: float
    degradation: float
    similarity_at_r: SimilarityScore
    relative_loss: float = float("nan")  # transferred loss / loss with no adapter on the target


def module_keys(count: int) -> list[str]:
    return [f"db.0.attentions.0.tb.{i // len(OPS)}.{OPS[i % len(OPS)]}" for i in range(count)]


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _rotate(q: np.ndarray, r: int, theta: float) -> np.ndarray:
    out = q.copy()
    c, s = math.cos(theta), math.sin(theta)
    a, b = q[:, :r], q[:, r: 2 * r]
    out[:, :r] = c * a + s * b
    out[:, r: 2 * r] = -s * a + c * b
    return out


def _module_bases(spec: SynthSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    return _orthogonal(rng, spec.m), _orthogonal(rng, spec.n)


def gen_family(spec: SynthSpec, angles, noise: float | None = None) -> list[TensorBundle]:
    """Models sharing one source basis, each rotated by its own angle."""
    spec.validate()
    noise = spec.noise if noise is None else noise
    k = min(spec.m, spec.n)
    sigma = spec.gamma ** np.arange(1, k + 1)
    keys = module_keys(spec.modules)
    arrays = [dict() for _ in angles]
    for idx, key in enumerate(keys):
        qu, qv = _module_bases(spec, idx)
        for a_idx, theta in enumerate(angles):
            if theta and 2 * spec.r > k:
                raise InvalidSpec("rotating the top-r subspace needs 2r <= min(m, n)")
            u = _rotate(qu, spec.r, theta) if theta else qu
            v = _rotate(qv, spec.r, theta) if theta else qv
            w = (u[:, :k] * sigma) @ v[:, :k].T
            if noise and a_idx > 0:
                nrng = np.random.default_rng([spec.seed, idx, a_idx, 7])
                w = w + noise * nrng.standard_normal(w.shape) / math.sqrt(w.size)
            arrays[a_idx][key] = w
    return [TensorBundle.from_arrays(a, dtype="F32") for a in arrays]


def gen_model_pair(spec: SynthSpec) -> tuple[TensorBundle, TensorBundle]:
    source, target = gen_family(spec, [0.0, spec.alignment_angle])
    return source, target


# ---------------------------------------------------------------------------
# toy task and fitting


def make_task(w0, hidden_delta, samples: int, seed) -> ToyTask:
    w0 = np.asarray(w0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, w0.shape[1]))
    return ToyTask(x, x @ (w0 + hidden_delta).T, np.asarray(hidden_delta, dtype=np.float64))


def make_tasks(source: TensorBundle, spec: SynthSpec) -> dict[str, ToyTask]:
    """Plant ``δσ*_i = planted_scale · σ_i`` on the top-r directions of every module."""
    samples = spec.samples or 2 * spec.n
    tasks = {}
    for idx, key in enumerate(source.matrix_keys()):
        w0 = source.matrix(key)
        f = truncated_svd(w0, spec.r)
        delta = (f.u * (spec.planted_scale * f.sigma)) @ f.v.T
        tasks[key] = make_task(w0, delta, samples, [spec.seed, idx, 1])
    return tasks


def task_loss(w, task: ToyTask) -> float:
    """Mean over samples of the squared prediction error."""
    resid = task.inputs @ np.asarray(w).T - task.targets
    return float(np.sum(resid * resid) / task.inputs.shape[0])


def lorax_loss(delta_sigma, basis: SvdFactors, w0, task: ToyTask) -> float:
    r = len(delta_sigma)
    dw = (basis.u[:, :r] * delta_sigma) @ basis.v[:, :r].T
    return task_loss(np.asarray(w0) + dw, task)


def lorax_grad(delta_sigma, basis: SvdFactors, w0, task: ToyTask) -> np.ndarray:
    """d loss / d δσ_i = (2/N) Σ_k (u_i · e_k)(v_i · x_k) with e_k the residual."""
    r = len(delta_sigma)
    u, v = basis.u[:, :r], basis.v[:, :r]
    w = np.asarray(w0) + (u * delta_sigma) @ v.T
    resid = task.inputs @ w.T - task.targets  # N x m
    return 2.0 / task.inputs.shape[0] * np.sum((resid @ u) * (task.inputs @ v), axis=0)


def fit_module(w0, basis: SvdFactors, task: ToyTask, steps: int = 500, lr: float = 0.1):
    """Gradient descent on δσ with bases frozen; δσ is clipped to keep σ + δσ >= 0.

    Returns ``(delta_sigma, losses)`` where ``losses[i]`` is the loss after step i.
    """
    r = basis.k
    ds = np.zeros(r)
    floor = -basis.sigma
    start = lorax_loss(ds, basis, w0, task)
    losses = []
    for _ in range(steps):
        ds = np.maximum(ds - lr * lorax_grad(ds, basis, w0, task), floor)
        loss = lorax_loss(ds, basis, w0, task)
        # projected GD at a stable step size never raises a convex loss
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(start, 1e-12):
            raise TrainingDiverged(f"loss reached {loss} (start {start})")
        losses.append(loss)
    return ds, losses


def fit_lorax(source: TensorBundle, tasks: dict[str, ToyTask], r: int, steps: int = 500,
              lr: float = 0.1) -> AdapterBundle:
    """Fit one LoRA-X adapter per task module; bases stay frozen, only δσ moves."""
    modules, losses = {}, []
    for key, task in tasks.items():
        w0 = source.matrix(key)
        basis = truncated_svd(w0, r)
        ds, hist = fit_module(w0, basis, task, steps, lr)
        modules[key] = LoraXAdapter(key, ds, basis.basis_id)
        losses.append(hist[-1] if hist else lorax_loss(ds, basis, w0, task))
    meta = {"constraint": "clip", "fit_loss": repr(float(np.mean(losses)) if losses else 0.0)}
    return AdapterBundle(modules, source.content_hash(), meta)


def eval_transfer(source: TensorBundle, target: TensorBundle, adapter: AdapterBundle,
                  tasks: dict[str, ToyTask], config: TransferConfig,
                  eps: float = DEGRADATION_EPS) -> TransferResult:
    trained = materialize_bundle(adapter, source)
    trained_loss = float(np.mean([task_loss(source.matrix(k) + trained[k], t) for k, t in tasks.items()]))

    moved, _ = transfer_bundle(source, adapter, target, config)
    deltas = materialize_bundle(moved, target) if len(moved) else {}
    t_losses, base_losses, lefts, rights = [], [], [], []
    for k, t in tasks.items():
        w_t = target.matrix(k)
        t_task = ToyTask(t.inputs, t.inputs @ (w_t + t.hidden_delta).T, t.hidden_delta)
        t_losses.append(task_loss(w_t + deltas.get(k, 0.0), t_task))
        base_losses.append(task_loss(w_t, t_task))
        sc = module_similarity(source.matrix(k), w_t, rank_limit=adapter[k].rank)
        lefts.append(sc.left)
        rights.append(sc.right)
    transferred_loss = float(np.mean(t_losses))
    base = float(np.mean(base_losses))
    score = SimilarityScore(float(np.mean(lefts)), float(np.mean(rights)), adapter.rank)
    return TransferResult(
        trained_loss, transferred_loss,
        (transferred_loss - trained_loss) / max(eps, trained_loss),
        score,
        transferred_loss / base if base > 0 else float("nan"),
    )


# ---------------------------------------------------------------------------
# sweeps


def default_theta_grid(points: int = 9) -> list[float]:
    return [i * (math.pi / 2) / (points - 1) for i in range(points)]


def run_cell(spec: SynthSpec, modes=("project", "copy_sigma"), steps: int = 500, lr: float = 0.1) -> list[dict]:
    rows = []
    try:
        source, target = gen_model_pair(spec)
        tasks = make_tasks(source, spec)
        adapter = fit_lorax(source, tasks, spec.r, steps, lr)
    except TrainingDiverged:
        nan = float("nan")
        return [dict(seed=spec.seed, theta=spec.alignment_angle, rank=spec.r, mode=m, trained_loss=nan,
                     transferred_loss=nan, degradation=nan, psi_left=nan, psi_right=nan, status="diverged")
                for m in modes]
    for mode in modes:
        config = TransferConfig(mode=mode, rank=spec.r, threshold=0.0, jobs=1)
        res = eval_transfer(source, target, adapter, tasks, config)
        rows.append(dict(seed=spec.seed, theta=spec.alignment_angle, rank=spec.r, mode=mode,
                         trained_loss=res.trained_loss, transferred_loss=res.transferred_loss,
                         degradation=res.degradation, psi_left=res.similarity_at_r.left,
                         psi_right=res.similarity_at_r.right, status="ok"))
    return rows


def run_sweep(spec: SynthSpec, thetas, seeds, modes=("project", "copy_sigma"), steps: int = 500,
              lr: float = 0.1, jobs: int | None = None) -> list[dict]:
    """Every (seed, theta) cell; rows come back in (seed, theta, mode) order."""
    cells = [replace(spec, seed=int(s), alignment_angle=float(t)) for s in seeds for t in thetas]
    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        out = list(pool.map(lambda c: run_cell(c, modes, steps, lr), cells))
    return [row for rows in out for row in rows]


def summarize(rows: list[dict], mode: str = "project", compare_to: str = "copy_sigma",
              from_theta: float = math.pi / 8) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    main = [r for r in ok if r["mode"] == mode]
    summary: dict = {"mode": mode, "cells": len(main), "diverged": sum(r["status"] != "ok" for r in rows)}
    if len(main) > 1:
        rho = spearmanr([r["theta"] for r in main], [r["degradation"] for r in main]).statistic
        summary["spearman_rho"] = float(rho)
    zero = [r["degradation"] for r in main if r["theta"] == 0.0]
    summary["theta0_max_degradation"] = float(max(zero)) if zero else None
    other = {(r["seed"], r["theta"]): r for r in ok if r["mode"] == compare_to}
    by_theta: dict[float, list[bool]] = {}
    for r in main:
        o = other.get((r["seed"], r["theta"]))
        if o is not None and r["theta"] >= from_theta - 1e-12:
            by_theta.setdefault(r["theta"], []).append(r["degradation"] <= o["degradation"])
    summary["win_fraction_vs_" + compare_to] = {repr(t): float(np.mean(v)) for t, v in sorted(by_theta.items())}
    return summary


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
