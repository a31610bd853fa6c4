"""Cross-sectional trees, temporal aggregation grids, and exact aggregation.

The cross-sectional side is a forest of named nodes (one root per market);
the temporal side is a set of aggregation orders that tile a top-level
period of ``m`` base slots. Everything here is pure and deterministic:
node ordering is fixed (aggregates by depth then id, leaves last by id) so
matrices are reproducible across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "HierarchyError",
    "HierarchySpec",
    "TemporalScheme",
    "CrossTemporalIndex",
    "ValidationReport",
    "validate_hierarchy",
    "build_summing_matrix",
    "temporal_aggregate",
    "cross_sectional_aggregate",
    "expand_cross_temporal",
    "load_hierarchy_csv",
]


class HierarchyError(ValueError):
    """A structural precondition on the cross-sectional tree is violated."""


@dataclass(frozen=True)
class HierarchySpec:
    """A cross-sectional aggregation forest.

    ``parent_of`` maps child id to parent id; roots are absent from it.
    ``level_of`` carries free-form level labels (e.g. area/zone/market)
    used for reporting and level averages.
    """

    nodes: tuple[str, ...]
    parent_of: Mapping[str, str]
    level_of: Mapping[str, str]

    def __init__(self, nodes, parent_of, level_of):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "parent_of", dict(parent_of))
        object.__setattr__(self, "level_of", dict(level_of))

    @cached_property
    def children(self) -> dict[str, tuple[str, ...]]:
        kids: dict[str, list[str]] = {node: [] for node in self.nodes}
        for child, parent in self.parent_of.items():
            if parent in kids:
                kids[parent].append(child)
        return {node: tuple(sorted(c)) for node, c in kids.items()}

    @cached_property
    def leaves(self) -> tuple[str, ...]:
        return tuple(sorted(n for n in self.nodes if not self.children[n]))

    @cached_property
    def aggregates(self) -> tuple[str, ...]:
        aggs = [n for n in self.nodes if self.children[n]]
        return tuple(sorted(aggs, key=lambda n: (self.depth(n), n)))

    @cached_property
    def roots(self) -> tuple[str, ...]:
        return tuple(sorted(n for n in self.nodes if n not in self.parent_of))

    @property
    def ordered_nodes(self) -> tuple[str, ...]:
        """Fixed node ordering: aggregates by (depth, id), then leaves by id."""
        return self.aggregates + self.leaves

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_b(self) -> int:
        return len(self.leaves)

    @property
    def n_a(self) -> int:
        return self.n - self.n_b

    def depth(self, node: str) -> int:
        """Edge distance from the node's root; guards against cycles."""
        steps = 0
        cur = node
        while cur in self.parent_of:
            cur = self.parent_of[cur]
            steps += 1
            if steps > len(self.nodes):
                raise HierarchyError(f"cycle reached from node {node!r}")
        return steps

    def leaf_descendants(self, node: str) -> tuple[str, ...]:
        """Leaves under ``node`` (the node itself when it is a leaf)."""
        if not self.children[node]:
            return (node,)
        found: list[str] = []
        stack = [node]
        seen = set()
        while stack:
            cur = stack.pop()
            if cur in seen:
                raise HierarchyError(f"cycle reached from node {node!r}")
            seen.add(cur)
            kids = self.children[cur]
            if kids:
                stack.extend(kids)
            else:
                found.append(cur)
        return tuple(sorted(found))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[str, ...]
    notes: tuple[str, ...]
    n: int
    n_a: int
    n_b: int


def validate_hierarchy(spec: HierarchySpec) -> ValidationReport:
    """Report structural problems (cycles, orphans, childless aggregates).

    Report-style: never raises. Mixed-depth leaves are flagged as a note,
    not an issue.
    """
    issues: list[str] = []
    notes: list[str] = []
    node_set = set(spec.nodes)

    if len(node_set) != len(spec.nodes):
        dupes = sorted({n for n in spec.nodes if spec.nodes.count(n) > 1})
        issues.append(f"duplicate node ids: {dupes}")

    for child, parent in sorted(spec.parent_of.items()):
        if child not in node_set:
            issues.append(f"orphan relation: unknown child {child!r}")
        if parent not in node_set:
            issues.append(f"orphan relation: unknown parent {parent!r} of {child!r}")

    # Cycle detection by walking parent chains with a step bound.
    cyclic: list[str] = []
    for node in spec.nodes:
        cur, steps = node, 0
        while cur in spec.parent_of and spec.parent_of[cur] in node_set:
            cur = spec.parent_of[cur]
            steps += 1
            if steps > len(spec.nodes):
                cyclic.append(node)
                break
    if cyclic:
        issues.append(f"cycle involving: {sorted(set(cyclic))}")

    children: dict[str, list[str]] = {n: [] for n in spec.nodes}
    for child, parent in spec.parent_of.items():
        if parent in children and child in node_set:
            children[parent].append(child)

    # A childless node whose level label elsewhere belongs to parents is an
    # aggregate that lost its children.
    parent_levels = {spec.level_of.get(n) for n in spec.nodes if children[n]}
    for node in sorted(spec.nodes):
        if not children[node] and spec.level_of.get(node) in parent_levels:
            issues.append(f"childless aggregate: {node!r}")

    n_b = sum(1 for n in spec.nodes if not children[n])
    n = len(spec.nodes)

    if not issues:
        depths = {spec.depth(leaf) for leaf in spec.leaves}
        if len(depths) > 1:
            notes.append(f"mixed-depth leaves (depths {sorted(depths)})")

    return ValidationReport(
        ok=not issues,
        issues=tuple(issues),
        notes=tuple(notes),
        n=n,
        n_a=n - n_b,
        n_b=n_b,
    )


def build_summing_matrix(spec: HierarchySpec) -> np.ndarray:
    """Binary (n x n_b) matrix mapping bottom series to every node.

    Rows follow ``spec.ordered_nodes`` (aggregates first, leaves last in the
    column order), so the bottom block is an identity matrix.
    """
    report = validate_hierarchy(spec)
    if not report.ok:
        raise HierarchyError("; ".join(report.issues))
    leaves = spec.leaves
    col_of = {leaf: i for i, leaf in enumerate(leaves)}
    S = np.zeros((spec.n, spec.n_b), dtype=np.int64)
    for r, node in enumerate(spec.ordered_nodes):
        for leaf in spec.leaf_descendants(node):
            S[r, col_of[leaf]] = 1
    return S


def temporal_aggregate(series: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping sums of ``k`` consecutive base-period values.

    Operates on the last axis; the length must be divisible by ``k``.
    Integer input stays integer (sums are exact).
    """
    if k < 1:
        raise ValueError(f"order must be positive, got {k}")
    arr = np.asarray(series)
    length = arr.shape[-1]
    if length % k:
        raise ValueError(f"length {length} not divisible by order {k}")
    if k == 1:
        return arr.copy()
    return arr.reshape(arr.shape[:-1] + (length // k, k)).sum(axis=-1)


def cross_sectional_aggregate(
    bottom_values: np.ndarray,
    bottom_nodes: Sequence[str],
    spec: HierarchySpec,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Sum bottom rows up the tree; returns (n x T) values and node order.

    ``bottom_values`` rows must correspond to ``bottom_nodes``, which must be
    exactly the leaves of ``spec`` (any order).
    """
    if set(bottom_nodes) != set(spec.leaves) or len(bottom_nodes) != spec.n_b:
        raise HierarchyError(
            f"leaf-set mismatch: panel has {sorted(bottom_nodes)}, "
            f"hierarchy has {list(spec.leaves)}"
        )
    values = np.asarray(bottom_values)
    if values.shape[0] != spec.n_b:
        raise HierarchyError(
            f"expected {spec.n_b} bottom rows, got {values.shape[0]}"
        )
    row_of = {node: i for i, node in enumerate(bottom_nodes)}
    ordered = values[[row_of[leaf] for leaf in spec.leaves], :]
    S = build_summing_matrix(spec)
    return S @ ordered, spec.ordered_nodes


def expand_cross_temporal(
    bottom: np.ndarray,
    spec: HierarchySpec,
    scheme: "TemporalScheme",
) -> dict[tuple[str, int], np.ndarray]:
    """Rebuild the full (node, order) grid from bottom order-1 values.

    ``bottom`` is (n_b x m*H) in ``spec.leaves`` row order; the result maps
    every (node, order) to its length m_k*H vector. Aggregation is exact
    for integer input.
    """
    bottom = np.asarray(bottom)
    if bottom.ndim != 2 or bottom.shape[0] != spec.n_b:
        raise HierarchyError(f"expected ({spec.n_b} x T) bottom block")
    if bottom.shape[1] % scheme.m:
        raise ValueError(
            f"bottom length {bottom.shape[1]} not divisible by m={scheme.m}"
        )
    full, order_nodes = cross_sectional_aggregate(bottom, spec.leaves, spec)
    out: dict[tuple[str, int], np.ndarray] = {}
    for i, node in enumerate(order_nodes):
        for k in scheme.orders:
            out[(node, k)] = temporal_aggregate(full[i], k)
    return out


@dataclass(frozen=True)
class TemporalScheme:
    """Temporal aggregation orders K over a top-level period of m base slots.

    Every order divides m; 1 and m are always present. Orders need not nest
    (grouped schemes aggregate directly from the base order).
    """

    m: int
    orders: tuple[int, ...]

    def __init__(self, m: int, orders: Sequence[int]):
        object.__setattr__(self, "m", int(m))
        object.__setattr__(self, "orders", tuple(sorted(set(int(k) for k in orders))))
        if self.m < 1:
            raise ValueError(f"m must be positive, got {self.m}")
        if len(self.orders) < 2:
            raise ValueError("need at least two temporal orders")
        if self.orders[0] != 1 or self.orders[-1] != self.m:
            raise ValueError(f"orders must contain 1 and m={self.m}: {self.orders}")
        bad = [k for k in self.orders if self.m % k]
        if bad:
            raise ValueError(f"orders {bad} do not divide m={self.m}")

    @property
    def p(self) -> int:
        return len(self.orders)

    def m_k(self, k: int) -> int:
        if k not in self.orders:
            raise ValueError(f"order {k} not in scheme {self.orders}")
        return self.m // k

    @property
    def positions_per_period(self) -> int:
        """Number of cross-temporal positions one top-level period carries."""
        return sum(self.m // k for k in self.orders)


@dataclass(frozen=True)
class CrossTemporalIndex:
    """Address of one forecast position: node, order, step within a period."""

    node: str
    order: int
    step: int
    period: int

    def validate(self, scheme: TemporalScheme) -> None:
        if not 1 <= self.step <= scheme.m_k(self.order):
            raise ValueError(
                f"step {self.step} outside 1..{scheme.m_k(self.order)} "
                f"for order {self.order}"
            )


def load_hierarchy_csv(path) -> HierarchySpec:
    """Read `node_id,parent_id,level` triples (header required, empty parent
    marks a root)."""
    nodes: list[str] = []
    parent_of: dict[str, str] = {}
    level_of: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != [
            "node_id",
            "parent_id",
            "level",
        ]:
            raise HierarchyError(
                f"{path}: expected header 'node_id,parent_id,level', got {header}"
            )
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            node, parent, level = (cell.strip() for cell in row[:3])
            nodes.append(node)
            level_of[node] = level
            if parent:
                parent_of[node] = parent
    return HierarchySpec(nodes=nodes, parent_of=parent_of, level_of=level_of)
