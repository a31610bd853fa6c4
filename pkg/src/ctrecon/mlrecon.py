"""Tree-ensemble forecast reconciliation.

One regression model per bottom series learns the map from base forecasts
(rounded, replicated down to the base-period grid) to the actual bottom
values over the validation windows. Out of sample, the models revise the
bottom forecasts and the whole grid is rebuilt by aggregation, so the
result is coherent by construction.

Two feature layouts: ``compact`` (all order-1 series plus the focal
series' own coarser orders, width n + p - 1) and ``complete`` (every
series at every order, width p * n).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .baseforecast import BaseForecastSet
from .hierarchy import HierarchySpec, TemporalScheme, expand_cross_temporal
from .linear import ReconciledForecastSet
from .panels import clip_round
from .trees import (
    GbmParams,
    RandomForestParams,
    TreeEnsemble,
    TreeNode,
    train_gbm,
    train_random_forest,
)

__all__ = [
    "FEATURE_VARIANTS",
    "ML_METHODS",
    "FeatureMatrix",
    "feature_columns",
    "parse_feature_column",
    "build_features",
    "default_params",
    "train_model",
    "tune",
    "reconcile_ml",
    "permutation_importance",
    "save_ensemble",
    "load_ensemble",
]

FEATURE_VARIANTS = ("compact", "complete")
ML_METHODS = ("rf", "gbm-depth", "gbm-leaf")

ENSEMBLE_FORMAT_VERSION = 1


@dataclass
class FeatureMatrix:
    """Validation (or test) rows for one model: features, optional target."""

    X: np.ndarray
    y: np.ndarray | None
    columns: tuple[str, ...]
    variant: str
    focal: str | None


def feature_columns(
    spec: HierarchySpec,
    scheme: TemporalScheme,
    variant: str,
    focal: str | None = None,
) -> tuple[str, ...]:
    """Column names fixing the feature layout.

    compact: order-1 columns of every other node, the focal node's order-1
    column, then the focal node's coarser orders ascending. complete:
    order-1 columns of every node, then each coarser order over every node.
    """
    if variant not in FEATURE_VARIANTS:
        raise ValueError(f"unknown feature variant {variant!r}")
    nodes = spec.ordered_nodes
    higher = [k for k in scheme.orders if k > 1]
    if variant == "compact":
        if focal is None or focal not in spec.leaves:
            raise ValueError(f"compact layout needs a bottom focal node, got {focal!r}")
        others = [n for n in nodes if n != focal]
        names = [f"{n}@k1" for n in others]
        names.append(f"{focal}@k1")
        names.extend(f"{focal}@k{k}" for k in higher)
        return tuple(names)
    names = [f"{n}@k1" for n in nodes]
    for k in higher:
        names.extend(f"{n}@k{k}" for n in nodes)
    return tuple(names)


def parse_feature_column(name: str) -> tuple[str, int]:
    node, _, order = name.rpartition("@k")
    if not node or not order.isdigit():
        raise ValueError(f"malformed feature column {name!r}")
    return node, int(order)


def build_features(
    sets: Sequence[BaseForecastSet],
    spec: HierarchySpec,
    scheme: TemporalScheme,
    variant: str,
    focal: str | None = None,
    targets: np.ndarray | None = None,
) -> FeatureMatrix:
    """Stack base forecasts of the given windows into one feature matrix.

    Each window contributes m * H rows; coarser-order forecast values are
    replicated onto the base-period grid. ``targets`` (when given) must hold
    the focal node's actual order-1 values over the same windows.
    """
    if not sets:
        raise ValueError("no forecast windows given")
    columns = feature_columns(spec, scheme, variant, focal)
    keys = [parse_feature_column(c) for c in columns]
    blocks = []
    for fset in sets:
        missing = [key for key in keys if key not in fset.forecasts]
        if missing:
            raise ValueError(f"window {fset.window_id}: missing forecasts for {missing}")
        cols = [
            np.repeat(np.asarray(fset.forecasts[key], dtype=float), key[1])
            for key in keys
        ]
        lengths = {len(c) for c in cols}
        if len(lengths) != 1:
            raise ValueError(f"window {fset.window_id}: ragged forecast lengths")
        blocks.append(np.column_stack(cols))
    X = np.vstack(blocks)
    if targets is not None:
        targets = np.asarray(targets, dtype=float)
        if len(targets) != len(X):
            raise ValueError(
                f"target length {len(targets)} != {len(X)} feature rows"
            )
    return FeatureMatrix(X=X, y=targets, columns=columns, variant=variant, focal=focal)


# ---------------------------------------------------------------------------
# training and tuning


def default_params(family: str):
    if family == "rf":
        return RandomForestParams()
    if family == "gbm-depth":
        return GbmParams.depthwise_defaults()
    if family == "gbm-leaf":
        return GbmParams.leafwise_defaults()
    raise ValueError(f"unknown ensemble family {family!r}")


def train_model(
    family: str,
    fm: FeatureMatrix,
    params=None,
    seed: int = 0,
) -> TreeEnsemble:
    if fm.y is None:
        raise ValueError("feature matrix carries no target")
    params = params if params is not None else default_params(family)
    if family == "rf":
        return train_random_forest(fm.X, fm.y, params, seed, fm.columns)
    if family in ("gbm-depth", "gbm-leaf"):
        return train_gbm(fm.X, fm.y, params, seed, fm.columns)
    raise ValueError(f"unknown ensemble family {family!r}")


def _sample_rf_params(rng: np.random.Generator, n_features: int) -> RandomForestParams:
    return RandomForestParams(
        n_trees=int(rng.integers(5, 51)) * 10,
        mtry=int(rng.integers(2, min(51, max(3, n_features + 1)))),
        min_node_size=int(rng.integers(5, 51)),
    )


def _sample_gbm_params(rng: np.random.Generator, leafwise: bool) -> GbmParams:
    common = dict(
        n_rounds=int(rng.integers(50, 201)),
        learning_rate=float(rng.uniform(0.01, 0.05)),
        row_subsample=float(rng.uniform(0.3, 1.0)),
        col_subsample=float(rng.uniform(0.3, 1.0)),
        min_child_weight=float(rng.uniform(0.0, 10.0)),
        max_depth=int(rng.integers(2, 11)),
    )
    if leafwise:
        return GbmParams(
            growth="leaf",
            num_leaves=int(rng.integers(5, 32)),
            l1=float(rng.uniform(0.0, 5.0)),
            l2=0.0,
            min_split_gain=0.0,
            **common,
        )
    return GbmParams(growth="depth", min_split_gain=float(rng.uniform(0.0, 5.0)), **common)


def tune(
    family: str,
    fm: FeatureMatrix,
    row_groups: Sequence,
    budget: int = 10,
    seed: int = 0,
    candidates: Sequence | None = None,
):
    """Pick ensemble parameters by forward-chaining cross-validation.

    Each validation week (a distinct ``row_groups`` label) is left out once;
    the candidate with the lowest mean held-out RMSE wins. Without an
    explicit candidate list, ``budget`` candidates are sampled uniformly
    within the documented tuning bounds.
    """
    if fm.y is None:
        raise ValueError("tuning needs targets")
    groups = np.asarray(row_groups)
    if len(groups) != len(fm.X):
        raise ValueError("row_groups length mismatch")
    folds = list(dict.fromkeys(groups.tolist()))
    if candidates is None:
        if budget < 1:
            raise ValueError("budget must be >= 1")
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xC0DE]))
        if family == "rf":
            candidates = [_sample_rf_params(rng, fm.X.shape[1]) for _ in range(budget)]
        else:
            candidates = [
                _sample_gbm_params(rng, leafwise=(family == "gbm-leaf"))
                for _ in range(budget)
            ]
    if not candidates:
        raise ValueError("empty candidate set")

    best = None
    for idx, params in enumerate(candidates):
        errors = []
        for fold in folds:
            mask = groups == fold
            train = FeatureMatrix(
                X=fm.X[~mask], y=fm.y[~mask], columns=fm.columns,
                variant=fm.variant, focal=fm.focal,
            )
            model = train_model(family, train, params, seed=seed + idx)
            pred = model.predict(fm.X[mask])
            errors.append(float(np.sqrt(np.mean((pred - fm.y[mask]) ** 2))))
        score = float(np.mean(errors))
        if best is None or score < best[0]:
            best = (score, params)
    return best[1]


# ---------------------------------------------------------------------------
# reconciliation and diagnostics


def reconcile_ml(
    models: Mapping[str, TreeEnsemble],
    oos_base: BaseForecastSet,
    spec: HierarchySpec,
    scheme: TemporalScheme,
    variant: str,
    method_name: str = "ml",
) -> ReconciledForecastSet:
    """Predict revised bottom forecasts and rebuild the coherent grid."""
    missing = [leaf for leaf in spec.leaves if leaf not in models]
    if missing:
        raise ValueError(f"no model for bottom nodes {missing}")
    bottom_raw = []
    for leaf in spec.leaves:
        model = models[leaf]
        focal = leaf if variant == "compact" else None
        fm = build_features([oos_base], spec, scheme, variant, focal=focal)
        if tuple(model.feature_names) != fm.columns:
            raise ValueError(
                f"feature layout mismatch for {leaf!r}: model was trained on a "
                f"different variant or hierarchy"
            )
        bottom_raw.append(np.asarray(model.predict(fm.X), dtype=float))
    bottom_raw = np.vstack(bottom_raw)
    forecasts = expand_cross_temporal(clip_round(bottom_raw), spec, scheme)
    raw = expand_cross_temporal(bottom_raw, spec, scheme)
    return ReconciledForecastSet(
        recon_method=method_name,
        base_method=oos_base.method,
        window_id=oos_base.window_id,
        horizon_days=oos_base.horizon_days,
        forecasts=forecasts,
        raw=raw,
    )


def permutation_importance(
    model, fm: FeatureMatrix, repeats: int = 5, seed: int = 0
) -> dict[str, float]:
    """Mean MSE increase per permuted feature, normalized to sum to one."""
    if fm.y is None:
        raise ValueError("importance needs targets")
    if len(fm.X) < 2:
        raise ValueError("need at least two rows")
    base_pred = model.predict(fm.X)
    base_mse = float(np.mean((base_pred - fm.y) ** 2))
    raw = np.zeros(len(fm.columns))
    for j in range(len(fm.columns)):
        bumps = []
        for r in range(repeats):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed & 0xFFFFFFFF, j, r])
            )
            Xp = fm.X.copy()
            Xp[:, j] = Xp[rng.permutation(len(Xp)), j]
            mse = float(np.mean((model.predict(Xp) - fm.y) ** 2))
            bumps.append(mse - base_mse)
        raw[j] = np.mean(bumps)
    raw = np.maximum(raw, 0.0)
    total = raw.sum()
    scores = raw / total if total > 0 else raw
    return {name: float(s) for name, s in zip(fm.columns, scores)}


# ---------------------------------------------------------------------------
# serialization


def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(payload: dict) -> TreeNode:
    if "value" in payload and "feature" not in payload:
        return TreeNode(value=float(payload["value"]))
    threshold = float(payload["threshold"])
    if not np.isfinite(threshold):
        raise ValueError("non-finite split threshold in serialized tree")
    return TreeNode(
        feature=int(payload["feature"]),
        threshold=threshold,
        left=_node_from_dict(payload["left"]),
        right=_node_from_dict(payload["right"]),
    )


def save_ensemble(model: TreeEnsemble, path) -> None:
    """Versioned JSON artifact: manifest plus the full tree structure."""
    payload = {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "family": model.family,
        "seed": model.seed,
        "base_score": model.base_score,
        "feature_names": list(model.feature_names),
        "params_kind": type(model.params).__name__,
        "params": asdict(model.params),
        "trees": [_node_to_dict(t) for t in model.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_ensemble(path) -> TreeEnsemble:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != ENSEMBLE_FORMAT_VERSION:
        raise ValueError(f"unsupported ensemble format version {version!r}")
    kind = payload["params_kind"]
    if kind == "RandomForestParams":
        params = RandomForestParams(**payload["params"])
    elif kind == "GbmParams":
        params = GbmParams(**payload["params"])
    else:
        raise ValueError(f"unknown params kind {kind!r}")
    return TreeEnsemble(
        family=payload["family"],
        trees=[_node_from_dict(t) for t in payload["trees"]],
        params=params,
        seed=int(payload["seed"]),
        feature_names=tuple(payload["feature_names"]),
        base_score=float(payload["base_score"]),
    )
