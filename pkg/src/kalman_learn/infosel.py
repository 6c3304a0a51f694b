"""Mutual-information term selection and the structure-learning loop.

Candidate terms are scored against the current model's error variables with
the Gaussian pairwise mutual information ``-0.5 * log(1 - rho**2)``.  The
ranked scores are cut greedily where the uncaptured share of information
plus a linear complexity penalty is smallest, the chosen terms join the
model, their coefficients are estimated with the ensemble Kalman update and
near-zero coefficients are pruned again.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynsys import (
    EstimationConfig,
    PolyModel,
    TermDictionary,
    estimate_parameters,
    term_values,
)
from .ensemble import STREAM_REBALANCE, child_rng

__all__ = [
    "PSI_CAP",
    "MiTable",
    "RankedMi",
    "SelectionConfig",
    "Selection",
    "SurvivalRecord",
    "StructureResult",
    "pairwise_mi",
    "rank_mi",
    "selection_objective",
    "greedy_select",
    "prune",
    "add_terms",
    "rebalance_variance",
    "structure_learn",
]

RHO2_CLAMP = 1.0 - 1e-12
PSI_CAP = -0.5 * np.log(1.0 - RHO2_CLAMP)


@dataclass
class MiTable:
    values: np.ndarray  # (n_terms, n_errors)
    term_ids: list
    error_ids: list


@dataclass
class RankedMi:
    psi: np.ndarray
    term_index: np.ndarray
    error_index: np.ndarray
    psi_total: float

    def __len__(self):
        return len(self.psi)


@dataclass(frozen=True)
class SelectionConfig:
    penalty_c: float = 0.05
    max_cycles: int = 5
    prune_threshold: float = 1e-3
    cycle_variance_target: float = 1e-8
    rebalance_std: float = 10.0
    # selection window; None uses every sample from window_start on
    window: int | None = None
    window_start: int = 0
    # relative RMS below which an equation's error counts as explained
    error_tolerance: float = 1e-4

    def __post_init__(self):
        if self.penalty_c < 0:
            raise ValueError("penalty_c must be nonnegative")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be nonnegative")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        if self.window is not None and self.window < 3:
            raise ValueError("window must hold at least 3 samples")

    @property
    def rebalance_floor(self) -> float:
        return 1e-3 * self.rebalance_std


def pairwise_mi(term_series, error_series, term_ids=None, error_ids=None) -> MiTable:
    """Gaussian mutual information between every term column and error column."""
    A = np.asarray(term_series, dtype=float)
    B = np.asarray(error_series, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise ValueError("term and error series must have the same number of samples")
    if A.shape[0] < 3:
        raise ValueError(f"need at least 3 samples, got {A.shape[0]}")
    Ad = A - A.mean(axis=0)
    Bd = B - B.mean(axis=0)
    na = np.sqrt(np.sum(Ad**2, axis=0))
    nb = np.sqrt(np.sum(Bd**2, axis=0))
    # columns that are constant to round-off carry no information
    live_a = na > 1e-12 * np.maximum(np.sqrt(np.sum(A**2, axis=0)), np.finfo(float).tiny)
    live_b = nb > 1e-12 * np.maximum(np.sqrt(np.sum(B**2, axis=0)), np.finfo(float).tiny)
    rho = np.zeros((A.shape[1], B.shape[1]))
    if live_a.any() and live_b.any():
        Au = Ad[:, live_a] / na[live_a]
        Bu = Bd[:, live_b] / nb[live_b]
        rho[np.ix_(live_a, live_b)] = Au.T @ Bu
    rho2 = np.minimum(rho**2, RHO2_CLAMP)
    psi = -0.5 * np.log1p(-rho2)
    return MiTable(
        psi,
        list(term_ids) if term_ids is not None else list(range(A.shape[1])),
        list(error_ids) if error_ids is not None else list(range(B.shape[1])),
    )


def rank_mi(table: MiTable) -> RankedMi:
    """Flatten and sort descending; ties keep (term, error) order."""
    values = np.asarray(table.values, dtype=float)
    flat = values.ravel()  # row-major: term index major, error index minor
    order = np.argsort(-flat, kind="stable")
    ti, ei = np.unravel_index(order, values.shape)
    return RankedMi(flat[order], ti, ei, float(flat.sum()))


def selection_objective(ranked: RankedMi, penalty_c: float) -> np.ndarray:
    """``J(k)`` for ``k = 1 .. len(ranked)``: uncaptured information share plus ``c * k``."""
    k = np.arange(1, len(ranked) + 1)
    return 1.0 - np.cumsum(ranked.psi) / ranked.psi_total + penalty_c * k


@dataclass
class Selection:
    k: int
    pairs: list  # (term, error) pairs of the top-k entries
    terms: list  # distinct term indices among them


def greedy_select(ranked: RankedMi, cfg: SelectionConfig) -> Selection:
    if len(ranked) == 0 or ranked.psi_total <= 0:
        return Selection(0, [], [])
    J = selection_objective(ranked, cfg.penalty_c)
    k = int(np.argmin(J)) + 1  # argmin returns the first of tied minima
    pairs = [(int(t), int(e)) for t, e in zip(ranked.term_index[:k], ranked.error_index[:k])]
    terms = sorted({t for t, _ in pairs})
    return Selection(k, pairs, terms)


def prune(model: PolyModel, threshold: float):
    """Drop active coefficients whose ensemble mean is negligible within its equation.

    A coefficient goes when ``|mean| < threshold * max(1, largest |mean| in
    the same equation)``.  Returns the reduced model and the dropped
    ``(equation, term)`` pairs.
    """
    means = model.mean_matrix()
    scale = np.maximum(1.0, np.abs(means).max(axis=1, keepdims=True))
    drop = model.active & (np.abs(means) < threshold * scale)
    if not drop.any():
        return model.copy(), []
    keep_rows = [not drop[eq, tm] for eq, tm in model.pairs()]
    active = model.active & ~drop
    pruned = [tuple(int(v) for v in p) for p in np.argwhere(drop)]
    return PolyModel(model.dictionary, active, model.coeffs[keep_rows]), pruned


def add_terms(model: PolyModel, pairs) -> PolyModel:
    """Activate ``(equation, term)`` pairs; new rows start at zero."""
    active = model.active.copy()
    for eq, tm in pairs:
        active[eq, tm] = True
    old = {p: row for row, p in enumerate(model.pairs())}
    new_pairs = [tuple(p) for p in np.argwhere(active)]
    coeffs = np.zeros((len(new_pairs), model.E))
    for row, p in enumerate(new_pairs):
        if p in old:
            coeffs[row] = model.coeffs[old[p]]
    return PolyModel(model.dictionary, active, coeffs)


def rebalance_variance(model: PolyModel, cfg: SelectionConfig, seed: int, new_pairs=()) -> PolyModel:
    """Reset spreads before the next round of estimation.

    Rows in ``new_pairs`` get a fresh ``N(0, rebalance_std**2)`` ensemble.
    Every other row keeps its mean; if its spread collapsed below
    ``rebalance_floor`` it gets fresh centred deviations whose sample
    standard deviation is exactly that floor.
    """
    model = model.copy()
    rng = child_rng(seed, STREAM_REBALANCE)
    new_pairs = {tuple(p) for p in new_pairs}
    E = model.E
    for row, p in enumerate(model.pairs()):
        if p in new_pairs:
            model.coeffs[row] = cfg.rebalance_std * rng.standard_normal(E)
            continue
        c = model.coeffs[row]
        mean = c.mean()
        dev = c - mean
        std = dev.std(ddof=1)
        if std >= cfg.rebalance_floor:
            continue
        # a collapsed ensemble is (nearly) rank one across rows, so scaling
        # its old deviations would keep it degenerate; draw new ones instead
        dev = rng.standard_normal(E)
        dev -= dev.mean()
        model.coeffs[row] = mean + dev * (cfg.rebalance_floor / dev.std(ddof=1))
    return model


@dataclass
class SurvivalRecord:
    """Per ``(equation, term)`` history of ``(cycle, status)`` events."""

    n_equations: int
    n_terms: int
    events: dict = field(default_factory=dict)

    def add(self, cycle, equation, term, status):
        self.events.setdefault((equation, term), []).append((cycle, status))

    def rows(self):
        for (eq, tm), hist in sorted(self.events.items()):
            for cycle, status in hist:
                yield cycle, eq, tm, status

    def last_status(self, equation, term):
        hist = self.events.get((equation, term))
        return hist[-1][1] if hist else None


@dataclass
class StructureResult:
    model: PolyModel
    survival: SurvivalRecord
    log: list  # one dict per EnKF iteration
    cycles: list  # one dict per selection cycle
    converged: bool
    total_iterations: int


def _window_errors(model, states, derivs):
    pred = term_values(model.dictionary, states) @ model.mean_matrix().T
    return derivs - pred


def structure_learn(
    dictionary: TermDictionary,
    states,
    derivs,
    cfg: SelectionConfig = SelectionConfig(),
    est_cfg: EstimationConfig = EstimationConfig(target_variance=1e-8, max_iters=100),
    E: int = 100,
) -> StructureResult:
    """Alternate MI-driven term selection with ensemble coefficient estimation.

    Starts from the empty model (all derivatives predicted as zero).  Each
    cycle scores every candidate term against each equation's error over the
    selection window, adds the greedily chosen (term, equation) pairs,
    rebalances spreads, estimates to ``cfg.cycle_variance_target`` and prunes.
    Whenever pruning removes anything, the survivors are rebalanced and
    estimated again within the same cycle, until a prune removes nothing.
    Stops when every equation's error is within tolerance, when a cycle
    changes nothing, or after ``cfg.max_cycles`` cycles.  ``est_cfg.max_iters``
    caps the total number of EnKF iterations over the whole run.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    derivs = np.atleast_2d(np.asarray(derivs, dtype=float))
    n_eq = derivs.shape[1]
    w0 = cfg.window_start
    w1 = None if cfg.window is None else w0 + cfg.window
    win_states = states[w0:w1]
    win_derivs = derivs[w0:w1]
    terms = term_values(dictionary, win_states)
    deriv_rms = np.sqrt(np.mean(win_derivs**2, axis=0))

    model = PolyModel.empty(dictionary, n_eq, E)
    survival = SurvivalRecord(n_eq, len(dictionary))
    ever_selected = np.zeros((n_eq, len(dictionary)), bool)
    log, cycles = [], []
    next_index = est_cfg.start
    total = 0
    converged = False

    def explained(err):
        rms = np.sqrt(np.mean(err**2, axis=0))
        return rms <= cfg.error_tolerance * np.maximum(deriv_rms, np.finfo(float).tiny)

    for cycle in range(1, cfg.max_cycles + 1):
        err = _window_errors(model, win_states, win_derivs)
        done = explained(err)
        if done.all():
            converged = True
            break
        # equations already within tolerance contribute no information
        err = np.where(done, 0.0, err)
        table = pairwise_mi(terms, err, dictionary.names, [f"e{j + 1}" for j in range(n_eq)])
        # active pairs are already candidates; rank only the remaining ones
        table.values[model.active.T] = 0.0
        sel = greedy_select(rank_mi(table), cfg)
        new = sorted({(e, t) for t, e in sel.pairs if not model.active[e, t]})
        for eq, tm in new:
            survival.add(cycle, eq, tm, "selected")
            ever_selected[eq, tm] = True

        pruned = []
        result = None
        if new:
            model = add_terms(model, new)
            model = rebalance_variance(model, cfg, est_cfg.seed + cycle, new)
        iterations = 0
        if model.coeffs.shape[0] and (new or cycle == 1):
            refits = 0
            while True:
                budget = est_cfg.max_iters - total
                if budget <= 0:
                    break
                result = estimate_parameters(
                    model,
                    states,
                    derivs,
                    EstimationConfig(
                        target_variance=cfg.cycle_variance_target,
                        max_iters=budget,
                        r=est_cfg.r,
                        seed=est_cfg.seed,
                        start=next_index,
                        stride=est_cfg.stride,
                        batch=est_cfg.batch,
                        normalized=est_cfg.normalized,
                    ),
                )
                model = result.model
                next_index = result.next_index
                for k, v in enumerate(result.variance):
                    log.append({"iteration": total + k + 1, "cycle": cycle, "variance": v})
                total += result.iterations
                iterations += result.iterations
                model, dropped = prune(model, cfg.prune_threshold)
                pruned += dropped
                if not dropped or not model.coeffs.shape[0] or total >= est_cfg.max_iters:
                    break
                # the survivors absorbed the dropped terms' contribution; refit them
                refits += 1
                model = rebalance_variance(model, cfg, est_cfg.seed + 1000 * refits + cycle)

        for eq in range(n_eq):
            for tm in range(len(dictionary)):
                if (eq, tm) in pruned:
                    status = "pruned"
                elif model.active[eq, tm]:
                    status = "active"
                elif ever_selected[eq, tm]:
                    status = "pruned"
                else:
                    status = "never_selected"
                survival.add(cycle, eq, tm, status)
        cycles.append(
            {
                "cycle": cycle,
                "k": sel.k,
                "table": table,
                "added": new,
                "pruned": pruned,
                "iterations": iterations,
                "active": model.pairs(),
            }
        )
        if not new and not pruned:
            converged = bool(explained(_window_errors(model, win_states, win_derivs)).all())
            break
    else:
        converged = bool(explained(_window_errors(model, win_states, win_derivs)).all())
    return StructureResult(model, survival, log, cycles, converged, total)
