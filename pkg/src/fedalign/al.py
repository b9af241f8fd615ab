"""Federated active learning: selection functions, the cycle loop, and EMD evaluation.

Selection functions come in two layers. The scoring and assignment cores
work on arrays the server actually receives (energies, latents, logits);
the public ``select_*`` wrappers compute those arrays from the global model
for direct use and testing.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datagen import STREAM_POOL, ClientDataset, FederationSplit, init_labeled_pool
from .fed import FedConfig, run_fdg, default_model_config
from .model import ModelConfig, ModelParams, forward, free_energies, unflatten
from .numcore import make_rng, softmax_rows
from .protocol import Ledger, MessageKind

STREAM_SELECT = 41


class SelectorKind(str, enum.Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    CORESET = "coreset"
    ENERGY_SOURCE = "energy"
    FEDAL = "fedal"
    FEDALV = "fedalv"


@dataclass
class SelectionResult:
    indices: list[np.ndarray]

    @property
    def budgets(self) -> list[int]:
        return [int(ix.size) for ix in self.indices]

    @property
    def total(self) -> int:
        return sum(self.budgets)


@dataclass
class Budget:
    total: int
    per_client: list[int]

    def __post_init__(self):
        if sum(self.per_client) != self.total:
            raise ValueError(f"per-client budgets {self.per_client} do not sum to {self.total}")


def _params(params, model_config=None) -> ModelParams:
    if isinstance(params, ModelParams):
        return params
    return unflatten(model_config, params, copy=False)


def _check_budgets(sources: list[ClientDataset], budgets) -> list[int]:
    if np.isscalar(budgets):
        budgets = [int(budgets)] * len(sources)
    budgets = [int(b) for b in budgets]
    if len(budgets) != len(sources):
        raise ValueError(f"{len(budgets)} budgets for {len(sources)} clients")
    for k, (b, s) in enumerate(zip(budgets, sources)):
        pool = int((~s.labeled_mask).sum())
        if b < 0 or b > pool:
            raise ValueError(f"client {k}: budget {b} exceeds unlabeled pool of {pool}")
    return budgets


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest scores; ties go to the lower position."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


# -- per-client scoring --------------------------------------------------------

def predictive_entropy(logits: np.ndarray) -> np.ndarray:
    p = softmax_rows(logits)
    return -np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=1)


def energy_margin_scores(logits: np.ndarray) -> np.ndarray:
    """Free energy plus negated top-2 probability margin; larger is more informative."""
    p = np.sort(softmax_rows(logits), axis=1)
    margin = p[:, -1] - p[:, -2]
    return free_energies(logits) - margin


def select_random(sources, budget_per_client, rng: np.random.Generator) -> SelectionResult:
    budgets = _check_budgets(sources, budget_per_client)
    out = []
    for s, b in zip(sources, budgets):
        pool = s.unlabeled_indices
        out.append(np.sort(rng.choice(pool, size=b, replace=False)) if b else np.zeros(0, np.int64))
    return SelectionResult(out)


def _select_by_score(global_params, sources, budgets, score_fn, model_config=None):
    params = _params(global_params, model_config)
    budgets = _check_budgets(sources, budgets)
    out = []
    for s, b in zip(sources, budgets):
        pool = s.unlabeled_indices
        if b == 0:
            out.append(np.zeros(0, np.int64))
            continue
        scores = score_fn(forward(params, s.features[pool], mode="eval").logits)
        out.append(pool[_top_k(scores, b)])
    return SelectionResult(out)


def select_entropy(global_params, sources, budget_per_client, model_config=None) -> SelectionResult:
    return _select_by_score(global_params, sources, budget_per_client, predictive_entropy, model_config)


def select_energy_source(global_params, sources, budget_per_client, model_config=None) -> SelectionResult:
    return _select_by_score(global_params, sources, budget_per_client, energy_margin_scores, model_config)


def kcenter_greedy(centers: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Farthest-first traversal; returns candidate positions in pick order."""
    if k == 0:
        return np.zeros(0, np.int64)
    if centers.shape[0]:
        d = np.sqrt(((candidates[:, None, :] - centers[None, :, :]) ** 2).sum(-1)).min(axis=1)
    else:
        d = np.full(candidates.shape[0], np.inf)
    picked = []
    for _ in range(k):
        d_masked = d.copy()
        d_masked[picked] = -np.inf
        j = int(np.argmax(d_masked))
        picked.append(j)
        d = np.minimum(d, np.sqrt(((candidates - candidates[j]) ** 2).sum(-1)))
    return np.asarray(picked, dtype=np.int64)


def select_coreset(global_params, sources, budget_per_client, model_config=None) -> SelectionResult:
    params = _params(global_params, model_config)
    budgets = _check_budgets(sources, budget_per_client)
    out = []
    for k, (s, b) in enumerate(zip(sources, budgets)):
        lab, pool = s.labeled_indices, s.unlabeled_indices
        if lab.size == 0:
            raise ValueError(f"client {k} has no labeled samples to seed the core set")
        z = forward(params, s.features, mode="eval").mu
        out.append(pool[kcenter_greedy(z[lab], z[pool], b)])
    return SelectionResult(out)


# -- target-guided nearest-source selection ---------------------------------

def top_energy_targets(target_energies: np.ndarray, b: int) -> np.ndarray:
    return _top_k(np.asarray(target_energies, dtype=np.float64), b)


def nearest_source_assign(
    target_latents: np.ndarray,
    source_latents: list[np.ndarray],
    quotas: list[int] | None = None,
) -> list[list[int]]:
    """Greedy nearest-neighbour assignment without replacement.

    Targets are visited in the given order (callers pass them sorted by
    descending energy). Each takes the closest still-free source point over
    all clients; distance ties go to the lower ``(client, position)``.
    With ``quotas``, clients whose quota is spent are skipped.
    Returns per-client positions into ``source_latents[k]`` in pick order.
    """
    owners = np.concatenate([np.full(len(z), k) for k, z in enumerate(source_latents)]).astype(np.int64)
    positions = np.concatenate([np.arange(len(z)) for z in source_latents]).astype(np.int64)
    pts = np.concatenate([z for z in source_latents if len(z)], axis=0) if owners.size else np.zeros((0, 1))
    if target_latents.shape[0] > owners.size:
        raise ValueError("more targets than unlabeled source samples")
    taken = np.zeros(owners.size, dtype=bool)
    left = None if quotas is None else np.asarray(quotas, dtype=np.int64).copy()
    picks: list[list[int]] = [[] for _ in source_latents]
    for t in target_latents:
        d = np.sqrt(((pts - t) ** 2).sum(axis=1))
        d[taken] = np.inf
        if left is not None:
            d[left[owners] <= 0] = np.inf
        j = int(np.argmin(d))
        if not np.isfinite(d[j]):
            raise ValueError("no eligible source sample left for assignment")
        taken[j] = True
        picks[owners[j]].append(int(positions[j]))
        if left is not None:
            left[owners[j]] -= 1
    return picks


def fedal_quotas(total: int, num_clients: int) -> list[int]:
    base, rem = divmod(int(total), int(num_clients))
    return [base + (1 if k < rem else 0) for k in range(num_clients)]


def _target_guided(global_params, sources, target, total_budget, quotas, model_config):
    params = _params(global_params, model_config)
    t_pool = target.unlabeled_indices
    unl = [s.unlabeled_indices for s in sources]
    if total_budget > t_pool.size:
        raise ValueError(f"budget {total_budget} exceeds target pool {t_pool.size}")
    if total_budget > sum(u.size for u in unl):
        raise ValueError(f"budget {total_budget} exceeds unlabeled source pools")
    if quotas is not None:
        for k, (q, u) in enumerate(zip(quotas, unl)):
            if q > u.size:
                raise ValueError(f"client {k}: quota {q} exceeds unlabeled pool of {u.size}")
    t_trace = forward(params, target.features[t_pool], mode="eval")
    top = top_energy_targets(free_energies(t_trace.logits), total_budget)
    z_src = [forward(params, s.features[u], mode="eval").mu for s, u in zip(sources, unl)]
    picks = nearest_source_assign(t_trace.mu[top], z_src, quotas)
    return SelectionResult([u[np.asarray(p, dtype=np.int64)] for u, p in zip(unl, picks)])


def select_fedalv(global_params, sources, target, total_budget: int, model_config=None) -> SelectionResult:
    return _target_guided(global_params, sources, target, total_budget, None, model_config)


def select_fedal(global_params, sources, target, total_budget: int, model_config=None) -> SelectionResult:
    quotas = fedal_quotas(total_budget, len(sources))
    return _target_guided(global_params, sources, target, total_budget, quotas, model_config)


# -- EMD ------------------------------------------------------------------------

def emd(set_a, set_b) -> float:
    """Exact earth mover's distance between two equal-size, uniformly weighted point sets."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.ndim == 2 and a.shape[0] == 1 and np.ndim(set_a) == 1:
        a, b = a.T, b.T
    if a.shape[0] != b.shape[0] or a.shape[0] < 1:
        raise ValueError(f"emd needs equal, nonzero set sizes; got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"point dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def selection_emd(global_params, sources, target, selection: SelectionResult, model_config=None) -> float:
    """EMD between the selected source latents and the top-B energy target latents."""
    params = _params(global_params, model_config)
    B = selection.total
    if B == 0:
        return float("nan")
    t_pool = target.unlabeled_indices
    t_trace = forward(params, target.features[t_pool], mode="eval")
    z_t = t_trace.mu[top_energy_targets(free_energies(t_trace.logits), B)]
    z_s = np.concatenate([
        forward(params, s.features[ix], mode="eval").mu
        for s, ix in zip(sources, selection.indices) if ix.size
    ])
    return emd(z_s, z_t)


# -- the active-learning campaign ------------------------------------------------

@dataclass(frozen=True)
class AlConfig:
    cycles: int = 5
    budget: int = 0
    initial_fraction: float = 0.02
    selector: SelectorKind = SelectorKind.FEDALV

    def __post_init__(self):
        object.__setattr__(self, "selector", SelectorKind(self.selector))
        if self.cycles < 1 or self.budget < 0:
            raise ValueError("cycles must be >= 1 and budget >= 0")
        if not 0.0 <= self.initial_fraction <= 1.0:
            raise ValueError("initial_fraction must lie in [0, 1]")


@dataclass
class CycleRecord:
    cycle: int
    selector: str
    labeled_total: int
    budgets: list[int]
    target_acc: float
    source_acc_mean: float
    emd: float
    selection: SelectionResult
    global_params: np.ndarray = field(repr=False, default=None)


@dataclass
class FalResult:
    cycles: list[CycleRecord]
    ledger: Ledger
    federation: FederationSplit
    model_config: ModelConfig


def _server_select(kind: SelectorKind, theta, federation, sources, budget, mcfg, seed, cycle,
                   ledger: Ledger) -> SelectionResult:
    """Run one selection with every client/server transfer recorded in the ledger."""
    K = len(sources)
    target = federation.target
    params = unflatten(mcfg, theta, copy=False)
    for k in range(K):
        ledger.to_client(MessageKind.PARAM_VECTOR, f"client_{k}", theta, cycle)

    if kind is SelectorKind.RANDOM:
        sizes = [ledger.to_server(MessageKind.DATASET_SIZE, f"client_{k}",
                                  [s.unlabeled_indices.size], cycle)[0] for k, s in enumerate(sources)]
        per = _split_budget(budget, sizes)
        for k in range(K):
            ledger.to_client(MessageKind.DATASET_SIZE, f"client_{k}", [per[k]], cycle)
        rng = make_rng(seed, STREAM_SELECT, cycle)
        sel = select_random(sources, per, rng)
    elif kind in (SelectorKind.ENTROPY, SelectorKind.ENERGY_SOURCE, SelectorKind.CORESET):
        sizes = [ledger.to_server(MessageKind.DATASET_SIZE, f"client_{k}",
                                  [s.unlabeled_indices.size], cycle)[0] for k, s in enumerate(sources)]
        per = _split_budget(budget, sizes)
        for k in range(K):
            ledger.to_client(MessageKind.DATASET_SIZE, f"client_{k}", [per[k]], cycle)
        fn = {SelectorKind.ENTROPY: select_entropy, SelectorKind.ENERGY_SOURCE: select_energy_source,
              SelectorKind.CORESET: select_coreset}[kind]
        # scoring is local; only the chosen indices are reported back
        sel = fn(params, sources, per)
        for k, ix in enumerate(sel.indices):
            ledger.to_server(MessageKind.SAMPLE_INDICES, f"client_{k}", ix, cycle)
    else:
        tid = "target"
        ledger.to_client(MessageKind.PARAM_VECTOR, tid, theta, cycle)
        t_pool = target.unlabeled_indices
        t_trace = forward(params, target.features[t_pool], mode="eval")
        F_t = ledger.to_server(MessageKind.ENERGY_SCALARS, tid, free_energies(t_trace.logits), cycle)
        top = top_energy_targets(F_t, budget)
        ledger.to_client(MessageKind.SAMPLE_INDICES, tid, top, cycle)
        z_t = ledger.to_server(MessageKind.LATENT_VECTORS, tid, t_trace.mu[top], cycle).reshape(len(top), mcfg.latent_dim)
        unl = [s.unlabeled_indices for s in sources]
        z_src = []
        for k, (s, u) in enumerate(zip(sources, unl)):
            z = forward(params, s.features[u], mode="eval").mu
            z_src.append(ledger.to_server(MessageKind.LATENT_VECTORS, f"client_{k}", z, cycle)
                         .reshape(len(u), mcfg.latent_dim))
        quotas = fedal_quotas(budget, K) if kind is SelectorKind.FEDAL else None
        if quotas is not None:
            for k, (q, u) in enumerate(zip(quotas, unl)):
                if q > u.size:
                    raise ValueError(f"client {k}: quota {q} exceeds unlabeled pool of {u.size}")
        picks = nearest_source_assign(z_t, z_src, quotas)
        sel = SelectionResult([u[np.asarray(p, dtype=np.int64)] for u, p in zip(unl, picks)])

    for k, ix in enumerate(sel.indices):
        ledger.to_client(MessageKind.SAMPLE_INDICES, f"client_{k}", ix, cycle)
    return sel


def _split_budget(total: int, pool_sizes) -> list[int]:
    """Even split with remainder to lower ids, respecting pool sizes."""
    pools = [int(p) for p in pool_sizes]
    if total > sum(pools):
        raise ValueError(f"budget {total} exceeds unlabeled source pools ({sum(pools)})")
    per = [0] * len(pools)
    left = int(total)
    while left > 0:
        open_ = [k for k in range(len(pools)) if per[k] < pools[k]]
        share, rem = divmod(left, len(open_))
        for i, k in enumerate(open_):
            add = min(share + (1 if i < rem else 0), pools[k] - per[k])
            per[k] += add
            left -= add
    return per


def run_fal(
    config: FedConfig,
    federation: FederationSplit,
    al: AlConfig,
    model_config: ModelConfig | None = None,
    threads: int = 1,
) -> FalResult:
    """Train, select, label, repeat for ``al.cycles`` cycles.

    The federation is copied; the caller's datasets are not modified.
    """
    mcfg = model_config or default_model_config(federation)
    sources = [s.copy() for s in federation.sources]
    for k, s in enumerate(sources):
        init_labeled_pool(s, al.initial_fraction, make_rng(config.seed, STREAM_POOL, k))
        if s.labeled_mask.sum() == 0:
            raise ValueError(f"client {k}: initial labeled pool is empty")
    fed = FederationSplit(sources, federation.target, federation.held_out_domain, federation.validation)
    ledger = Ledger()
    records = []
    for c in range(1, al.cycles + 1):
        res = run_fdg(config, fed, mcfg, threads=threads, cycle=c)
        ledger.extend(res.ledger)
        theta = res.server.global_params
        sel = _server_select(al.selector, theta, fed, sources, al.budget, mcfg, config.seed, c, ledger)
        emd_val = selection_emd(theta, sources, fed.target, sel, mcfg) if sel.total else float("nan")
        for s, ix in zip(sources, sel.indices):
            if np.any(s.labeled_mask[ix]):
                raise AssertionError("selector returned an already-labeled sample")
            s.labeled_mask[ix] = True  # simulated annotator reveals the stored label
        records.append(CycleRecord(
            c, al.selector.value, int(sum(s.labeled_mask.sum() for s in sources)), sel.budgets,
            res.target_accuracy(), res.source_accuracy(), emd_val, sel, theta,
        ))
    return FalResult(records, ledger, fed, mcfg)


def pools_before_cycle(result: FalResult, cycle: int) -> FederationSplit:
    """Federation view with labeled masks as they stood before ``cycle``'s selection."""
    sources = []
    for k, s in enumerate(result.federation.sources):
        c = s.copy()
        for r in result.cycles:
            if r.cycle >= cycle:
                c.labeled_mask[r.selection.indices[k]] = False
        sources.append(c)
    f = result.federation
    return FederationSplit(sources, f.target, f.held_out_domain, f.validation)


def write_cycles_csv(records: list[CycleRecord], path, num_clients: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "selector", "labeled_total",
                    *[f"budget_client_{k}" for k in range(num_clients)],
                    "target_acc", "source_acc_mean", "emd"])
        for r in records:
            w.writerow([r.cycle, r.selector, r.labeled_total, *r.budgets,
                        f"{r.target_acc:.6f}", f"{r.source_acc_mean:.6f}", f"{r.emd:.6f}"])
