"""Linear benchmark reconciliation: bottom-up and four GLS-based methods.

The single primitive is the weighted least-squares projection onto the
coherent subspace spanned by a summing matrix: b = (S'W^-1 S)^-1 S'W^-1 y,
reconciled = S b. The two-step methods (tcs, cst), their iterated variant
(ite), and the one-shot cross-temporal projection (oct) differ only in
which summing matrices and weight matrices they chain. Every method ends
by rounding the revised bottom order-1 forecasts and rebuilding the whole
grid by aggregation, so reported numbers are always coherent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .baseforecast import BaseForecastSet
from .hierarchy import (
    HierarchySpec,
    TemporalScheme,
    build_summing_matrix,
    expand_cross_temporal,
)
from .panels import clip_round

__all__ = [
    "LINEAR_METHODS",
    "ResidualSet",
    "CovarianceEstimate",
    "ReconciledForecastSet",
    "estimate_wlsv",
    "estimate_shrinkage",
    "gls_reconcile",
    "bottom_up",
    "reconcile",
    "temporal_summing_matrix",
    "cross_temporal_summing_matrix",
    "coherence_error",
]

LINEAR_METHODS = ("bu", "tcs", "cst", "ite", "oct")

ITE_TOLERANCE = 1e-6
ITE_MAX_SWEEPS = 100
PD_JITTER = 1e-8


# ---------------------------------------------------------------------------
# residual views


@dataclass
class ResidualSet:
    """In-sample one-step residuals per (node, order).

    Vectors may carry leading NaNs where a model conditioned on a prefix;
    matrix views align member vectors on their common finite suffix.
    """

    residuals: dict[tuple[str, int], np.ndarray]
    scheme: TemporalScheme

    @classmethod
    def from_base(cls, base: BaseForecastSet, scheme: TemporalScheme) -> "ResidualSet":
        return cls(residuals=dict(base.residuals), scheme=scheme)

    def _tail(self, node: str, k: int) -> np.ndarray:
        vec = np.asarray(self.residuals[(node, k)], dtype=float)
        finite = np.isfinite(vec)
        if not finite.any():
            return np.empty(0)
        first = int(np.argmax(finite))
        tail = vec[first:]
        if not np.isfinite(tail).all():
            tail = tail[np.isfinite(tail)]
        return tail

    def cross_sectional_matrix(self, k: int, nodes: Sequence[str]) -> np.ndarray:
        """(time x node) residuals at one order, aligned on the common suffix."""
        tails = [self._tail(node, k) for node in nodes]
        rows = min(len(t) for t in tails)
        if rows == 0:
            raise ValueError(f"no finite residuals at order {k}")
        return np.column_stack([t[-rows:] for t in tails])

    def temporal_matrix(self, node: str) -> tuple[np.ndarray, list[int]]:
        """(period x position) residuals of one node across all orders.

        Columns run coarse-to-fine (order m first); the second element maps
        each column to its order for grouped variance pooling.
        """
        orders = sorted(self.scheme.orders, reverse=True)
        per_order: dict[int, np.ndarray] = {}
        periods = None
        for k in orders:
            m_k = self.scheme.m_k(k)
            tail = self._tail(node, k)
            avail = len(tail) // m_k
            periods = avail if periods is None else min(periods, avail)
            per_order[k] = tail
        if not periods:
            raise ValueError(f"no complete residual periods for node {node!r}")
        blocks = []
        groups: list[int] = []
        for k in orders:
            m_k = self.scheme.m_k(k)
            tail = per_order[k][-periods * m_k :]
            blocks.append(tail.reshape(periods, m_k))
            groups.extend([k] * m_k)
        return np.hstack(blocks), groups

    def variance(self, node: str, k: int) -> float:
        """Population variance of the finite residuals of one series."""
        tail = self._tail(node, k)
        if len(tail) < 2:
            raise ValueError(f"need >=2 residuals for ({node!r}, {k})")
        return float(np.var(tail))


# ---------------------------------------------------------------------------
# covariance estimators


@dataclass
class CovarianceEstimate:
    """A symmetric positive (semi)definite weight matrix and its provenance."""

    kind: str
    W: np.ndarray
    shrink_lambda: float | None = None
    notes: tuple[str, ...] = ()


def _substitute_zero_variances(variances: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    out = variances.astype(float).copy()
    bad = ~(out > 0) | ~np.isfinite(out)
    if not bad.any():
        return out, ()
    positive = out[~bad]
    fill = float(positive.min()) if len(positive) else 1.0
    out[bad] = fill
    return out, (f"substituted {int(bad.sum())} zero variances with {fill}",)


def estimate_wlsv(
    residual_matrix: np.ndarray, column_groups: Sequence[int] | None = None
) -> CovarianceEstimate:
    """Diagonal weight matrix of residual variances (population form).

    ``column_groups`` pools columns sharing a group label into one variance
    (the temporal view shares one variance per order); otherwise each column
    gets its own variance.
    """
    R = np.asarray(residual_matrix, dtype=float)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError("wlsv needs a (rows x cols) matrix with >=2 rows")
    if column_groups is None:
        variances = np.var(R, axis=0)
    else:
        if len(column_groups) != R.shape[1]:
            raise ValueError("column_groups length mismatch")
        groups = np.asarray(column_groups)
        variances = np.empty(R.shape[1])
        for g in dict.fromkeys(column_groups):
            mask = groups == g
            variances[mask] = np.var(R[:, mask])
    variances, notes = _substitute_zero_variances(variances)
    return CovarianceEstimate(kind="diagonal-wlsv", W=np.diag(variances), notes=notes)


def estimate_shrinkage(residual_matrix: np.ndarray) -> CovarianceEstimate:
    """Sample covariance with off-diagonals shrunk toward zero.

    The intensity is the optimal-on-the-correlation-scale estimator
    (variance of the pairwise correlations over their squared magnitudes),
    clamped to [0, 1]. Fewer than 3 rows force a diagonal result.
    """
    R = np.asarray(residual_matrix, dtype=float)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError("shrinkage needs a (rows x cols) matrix with >=2 rows")
    n, p = R.shape
    centered = R - R.mean(axis=0)
    sample = centered.T @ centered / (n - 1)

    if n < 3:
        variances, notes = _substitute_zero_variances(np.diag(sample))
        return CovarianceEstimate(
            kind="shrinkage",
            W=np.diag(variances),
            shrink_lambda=1.0,
            notes=notes + ("fewer than 3 rows: intensity forced to 1",),
        )

    sd = np.sqrt(np.diag(sample))
    safe_sd = np.where(sd > 0, sd, 1.0)
    xs = centered / safe_sd
    corr = sample / np.outer(safe_sd, safe_sd)
    np.fill_diagonal(corr, 1.0)

    # variance of each pairwise correlation estimate
    w_bar = (xs.T @ xs) / n
    sq = (xs**2).T @ (xs**2)
    var_r = (n / (n - 1.0) ** 3) * (sq - n * w_bar**2)
    off = ~np.eye(p, dtype=bool)
    denom = float(np.sum(corr[off] ** 2))
    lam = 1.0 if denom <= 0 else float(np.clip(np.sum(var_r[off]) / denom, 0.0, 1.0))

    W = lam * np.diag(np.diag(sample)) + (1.0 - lam) * sample
    variances, notes = _substitute_zero_variances(np.diag(W))
    if notes:
        W = W.copy()
        np.fill_diagonal(W, variances)
    return CovarianceEstimate(kind="shrinkage", W=W, shrink_lambda=lam, notes=notes)


# ---------------------------------------------------------------------------
# the GLS projection primitive


def _weight_matrix(W) -> np.ndarray:
    if isinstance(W, CovarianceEstimate):
        return W.W
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        return np.diag(W)
    return W


class _GlsProjector:
    """Factorized map y -> (b, S b) reused across many right-hand sides."""

    def __init__(self, S: np.ndarray, W) -> None:
        S = np.asarray(S, dtype=float)
        W = _weight_matrix(W)
        if W.shape[0] != W.shape[1] or W.shape[0] != S.shape[0]:
            raise ValueError(
                f"weight matrix {W.shape} does not match summing matrix {S.shape}"
            )
        self.S = S
        try:
            self._prepare(W)
        except (LinAlgError, np.linalg.LinAlgError):
            jitter = PD_JITTER * np.trace(W) / W.shape[0]
            self._prepare(W + jitter * np.eye(W.shape[0]))

    def _prepare(self, W: np.ndarray) -> None:
        w_fact = cho_factor(W, lower=True)
        winv_s = cho_solve(w_fact, self.S)
        normal = self.S.T @ winv_s
        self._normal_fact = cho_factor(normal, lower=True)
        self._w_fact = w_fact

    def bottom(self, y: np.ndarray) -> np.ndarray:
        rhs = self.S.T @ cho_solve(self._w_fact, y)
        return cho_solve(self._normal_fact, rhs)

    def reconcile(self, y: np.ndarray) -> np.ndarray:
        return self.S @ self.bottom(y)


def gls_reconcile(base: np.ndarray, S: np.ndarray, W) -> np.ndarray:
    """Project base forecasts onto the coherent subspace of ``S`` under ``W``.

    ``base`` may be a vector or a (rows x cases) matrix of independent
    problems. Singular weight matrices get a trace-scaled diagonal jitter;
    a still-singular system raises.
    """
    base = np.asarray(base, dtype=float)
    return _GlsProjector(S, W).reconcile(base)


# ---------------------------------------------------------------------------
# summing matrices for the temporal and cross-temporal views


def temporal_summing_matrix(scheme: TemporalScheme, horizon_days: int) -> np.ndarray:
    """Map m*H base slots to every (order, step) position, coarse order first."""
    m, H = scheme.m, horizon_days
    rows = []
    for k in sorted(scheme.orders, reverse=True):
        steps = scheme.m_k(k) * H
        block = np.zeros((steps, m * H))
        for j in range(steps):
            block[j, j * k : (j + 1) * k] = 1.0
        rows.append(block)
    return np.vstack(rows)


def cross_temporal_summing_matrix(
    spec: HierarchySpec, scheme: TemporalScheme, horizon_days: int
) -> np.ndarray:
    """Full cross-temporal summing matrix (node-major rows, leaf-major cols)."""
    S_cs = build_summing_matrix(spec).astype(float)
    T_S = temporal_summing_matrix(scheme, horizon_days)
    return np.kron(S_cs, T_S)


def temporal_stack(
    state: Mapping[tuple[str, int], np.ndarray], node: str, scheme: TemporalScheme
) -> np.ndarray:
    return np.concatenate(
        [state[(node, k)] for k in sorted(scheme.orders, reverse=True)]
    )


def _unstack_temporal(
    vec: np.ndarray, scheme: TemporalScheme, horizon_days: int
) -> dict[int, np.ndarray]:
    out = {}
    pos = 0
    for k in sorted(scheme.orders, reverse=True):
        steps = scheme.m_k(k) * horizon_days
        out[k] = vec[pos : pos + steps]
        pos += steps
    return out


# ---------------------------------------------------------------------------
# reconciled sets


@dataclass
class ReconciledForecastSet:
    """Coherent forecasts over the full grid plus provenance."""

    recon_method: str
    base_method: str
    window_id: str
    horizon_days: int
    forecasts: dict[tuple[str, int], np.ndarray]
    raw: dict[tuple[str, int], np.ndarray] | None = None


def coherence_error(
    forecasts: Mapping[tuple[str, int], np.ndarray],
    spec: HierarchySpec,
    scheme: TemporalScheme,
) -> float:
    """Largest absolute deviation from the bottom-rebuilt grid."""
    bottom = np.vstack([forecasts[(leaf, 1)] for leaf in spec.leaves])
    rebuilt = expand_cross_temporal(bottom, spec, scheme)
    worst = 0.0
    for key, vec in forecasts.items():
        worst = max(worst, float(np.max(np.abs(np.asarray(vec) - rebuilt[key]))))
    return worst


def _finalize(
    state: Mapping[tuple[str, int], np.ndarray],
    base: BaseForecastSet,
    method: str,
    spec: HierarchySpec,
    scheme: TemporalScheme,
) -> ReconciledForecastSet:
    """Round revised bottom order-1 values, rebuild the whole grid."""
    bottom_float = np.vstack([state[(leaf, 1)] for leaf in spec.leaves])
    raw = expand_cross_temporal(bottom_float, spec, scheme)
    rounded = expand_cross_temporal(clip_round(bottom_float), spec, scheme)
    return ReconciledForecastSet(
        recon_method=method,
        base_method=base.method,
        window_id=base.window_id,
        horizon_days=base.horizon_days,
        forecasts=rounded,
        raw=raw,
    )


def bottom_up(
    base: BaseForecastSet, spec: HierarchySpec, scheme: TemporalScheme
) -> ReconciledForecastSet:
    """Aggregate the (already rounded) bottom order-1 forecasts everywhere."""
    missing = [leaf for leaf in spec.leaves if (leaf, 1) not in base.forecasts]
    if missing:
        raise ValueError(f"bottom order-1 forecasts missing for {missing}")
    bottom = np.vstack([base.forecasts[(leaf, 1)] for leaf in spec.leaves])
    forecasts = expand_cross_temporal(bottom, spec, scheme)
    return ReconciledForecastSet(
        recon_method="bu",
        base_method=base.method,
        window_id=base.window_id,
        horizon_days=base.horizon_days,
        forecasts=forecasts,
        raw={key: vec.astype(float) for key, vec in forecasts.items()},
    )


def _cross_sectional_pass(
    state: dict[tuple[str, int], np.ndarray],
    residuals: ResidualSet,
    spec: HierarchySpec,
    scheme: TemporalScheme,
) -> None:
    S_cs = build_summing_matrix(spec).astype(float)
    nodes = spec.ordered_nodes
    for k in scheme.orders:
        est = estimate_shrinkage(residuals.cross_sectional_matrix(k, nodes))
        projector = _GlsProjector(S_cs, est)
        Y = np.vstack([state[(node, k)] for node in nodes])
        revised = projector.reconcile(Y)
        for i, node in enumerate(nodes):
            state[(node, k)] = revised[i]


def _temporal_pass(
    state: dict[tuple[str, int], np.ndarray],
    residuals: ResidualSet,
    spec: HierarchySpec,
    scheme: TemporalScheme,
    horizon_days: int,
) -> None:
    T_S = temporal_summing_matrix(scheme, horizon_days)
    for node in spec.ordered_nodes:
        matrix, groups = residuals.temporal_matrix(node)
        est = estimate_wlsv(matrix, column_groups=groups)
        # one shared variance per order, repeated over that order's positions
        per_position = np.diag(est.W)
        group_arr = np.asarray(groups)
        var_of_order = {k: float(per_position[group_arr == k][0]) for k in scheme.orders}
        diag = np.concatenate(
            [
                np.full(scheme.m_k(k) * horizon_days, var_of_order[k])
                for k in sorted(scheme.orders, reverse=True)
            ]
        )
        projector = _GlsProjector(T_S, np.diag(diag))
        revised = projector.reconcile(temporal_stack(state, node, scheme))
        for k, vec in _unstack_temporal(revised, scheme, horizon_days).items():
            state[(node, k)] = vec


def _oct_pass(
    state: dict[tuple[str, int], np.ndarray],
    residuals: ResidualSet,
    spec: HierarchySpec,
    scheme: TemporalScheme,
    horizon_days: int,
) -> None:
    S_ct = cross_temporal_summing_matrix(spec, scheme, horizon_days)
    stack = np.concatenate(
        [temporal_stack(state, node, scheme) for node in spec.ordered_nodes]
    )
    variances = []
    for node in spec.ordered_nodes:
        for k in sorted(scheme.orders, reverse=True):
            variances.extend([residuals.variance(node, k)] * (scheme.m_k(k) * horizon_days))
    diag, _ = _substitute_zero_variances(np.asarray(variances))
    revised = gls_reconcile(stack, S_ct, np.diag(diag))
    pos = 0
    period_len = scheme.positions_per_period * horizon_days
    for node in spec.ordered_nodes:
        chunk = revised[pos : pos + period_len]
        for k, vec in _unstack_temporal(chunk, scheme, horizon_days).items():
            state[(node, k)] = vec
        pos += period_len


def reconcile(
    method: str,
    base: BaseForecastSet,
    residuals: ResidualSet,
    spec: HierarchySpec,
    scheme: TemporalScheme,
) -> ReconciledForecastSet:
    """Run one linear benchmark method over a base forecast set."""
    if method == "bu":
        return bottom_up(base, spec, scheme)
    if method not in LINEAR_METHODS:
        raise ValueError(f"unknown linear method {method!r}")
    H = base.horizon_days
    state = {
        (node, k): np.asarray(base.raw[(node, k)], dtype=float).copy()
        for node in spec.ordered_nodes
        for k in scheme.orders
    }
    if method == "tcs":
        _temporal_pass(state, residuals, spec, scheme, H)
        _cross_sectional_pass(state, residuals, spec, scheme)
    elif method == "cst":
        _cross_sectional_pass(state, residuals, spec, scheme)
        _temporal_pass(state, residuals, spec, scheme, H)
    elif method == "ite":
        for _ in range(ITE_MAX_SWEEPS):
            prev = {key: vec.copy() for key, vec in state.items()}
            _cross_sectional_pass(state, residuals, spec, scheme)
            _temporal_pass(state, residuals, spec, scheme, H)
            delta = max(
                float(np.max(np.abs(state[key] - prev[key]))) for key in state
            )
            if delta < ITE_TOLERANCE:
                break
    elif method == "oct":
        _oct_pass(state, residuals, spec, scheme, H)
    result = _finalize(state, base, method, spec, scheme)
    return result
