"""Survey records, region geographies and rural population fractions.

A :class:`SurveyDataset` keeps its records column-wise (numpy arrays) so that
large simulated surveys stay cheap; :attr:`SurveyDataset.records` rebuilds the
row view on demand.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SurveyError(Exception):
    """Base class for survey ingestion problems."""


class SurveyParseError(SurveyError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SurveyValidationError(SurveyError):
    """Input parsed but violates a dataset invariant."""


class GraphError(Exception):
    pass


@dataclass(frozen=True)
class IndividualRecord:
    region_id: int  # 1-based
    stratum_id: str
    cluster_id: str
    weight: float
    rural_flag: bool
    outcomes: tuple[float, ...]  # nan marks a missing outcome


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected neighbourhood graph over ``n_nodes`` regions.

    Edges are stored 0-based as ``(i, j)`` with ``i < j``.
    """

    n_nodes: int
    edges: frozenset[tuple[int, int]]
    node_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_nodes < 1:
            raise GraphError("graph needs at least one node")
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at node {i + 1}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise GraphError(f"edge ({i + 1}, {j + 1}) outside 1..{self.n_nodes}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        if self.node_labels is not None:
            labels = tuple(str(s) for s in self.node_labels)
            if len(labels) != self.n_nodes:
                raise GraphError("node_labels length must equal n_nodes")
            if len(set(labels)) != len(labels):
                raise GraphError("node labels must be unique")
            object.__setattr__(self, "node_labels", labels)

    @classmethod
    def from_pairs(cls, n_nodes: int, pairs: Iterable[Sequence[int]],
                   labels: Sequence[str] | None = None, one_based: bool = True):
        off = 1 if one_based else 0
        edges = []
        for p in pairs:
            i, j = int(p[0]) - off, int(p[1]) - off
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise GraphError(f"node id out of range in edge {tuple(p)}")
            edges.append((i, j))
        return cls(n_nodes, frozenset(edges), tuple(labels) if labels is not None else None)

    @property
    def labels(self) -> tuple[str, ...]:
        if self.node_labels is not None:
            return self.node_labels
        return tuple(str(i + 1) for i in range(self.n_nodes))

    def neighbours(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in sorted(self.edges):
            nb[i].append(j)
            nb[j].append(i)
        return nb

    def adjacency_matrix(self) -> np.ndarray:
        W = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)
        for i, j in self.edges:
            W[i, j] = W[j, i] = 1
        return W

    @cached_property
    def components(self) -> tuple[np.ndarray, ...]:
        """Connected components as sorted 0-based index arrays, ordered by first node."""
        nb = self.neighbours()
        seen = np.zeros(self.n_nodes, dtype=bool)
        comps = []
        for start in range(self.n_nodes):
            if seen[start]:
                continue
            seen[start] = True
            queue = deque([start])
            members = []
            while queue:
                v = queue.popleft()
                members.append(v)
                for w in nb[v]:
                    if not seen[w]:
                        seen[w] = True
                        queue.append(w)
            comps.append(np.array(sorted(members), dtype=np.int64))
        return tuple(comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def to_json(self) -> dict:
        return {
            "n": self.n_nodes,
            "labels": list(self.labels),
            "edges": [[i + 1, j + 1] for i, j in sorted(self.edges)],
        }

    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}


@dataclass(frozen=True)
class RuralFractions:
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).copy()
        if q.ndim != 1:
            raise SurveyValidationError("rural fractions must be a vector")
        if not np.all(np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
            raise SurveyValidationError("rural fractions must lie in [0, 1]")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def __len__(self):
        return len(self.q)


class SurveyDataset:
    """Sampled individuals with design information and ``C`` outcomes."""

    def __init__(self, region: np.ndarray, stratum: Sequence[str], cluster: Sequence[str],
                 weight: np.ndarray, rural: np.ndarray, outcomes: np.ndarray,
                 region_count: int, region_labels: Sequence[str] | None = None):
        self.region = np.asarray(region, dtype=np.int64)  # 0-based
        self.stratum = np.asarray([str(s) for s in stratum], dtype=object)
        self.cluster = np.asarray([str(c) for c in cluster], dtype=object)
        self.weight = np.asarray(weight, dtype=float)
        self.rural = np.asarray(rural, dtype=bool)
        y = np.asarray(outcomes, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        self.outcomes = y
        self.region_count = int(region_count)
        self.region_labels = (tuple(region_labels) if region_labels is not None
                              else tuple(str(i + 1) for i in range(self.region_count)))
        for arr in (self.region, self.weight, self.rural, self.outcomes):
            arr.setflags(write=False)
        self._check()

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_records(cls, records: Sequence[IndividualRecord], n_outcomes: int,
                     region_count: int, region_labels=None) -> "SurveyDataset":
        n = len(records)
        y = np.full((n, n_outcomes), np.nan)
        for i, rec in enumerate(records):
            if len(rec.outcomes) != n_outcomes:
                raise SurveyValidationError(f"record {i} has {len(rec.outcomes)} outcomes, expected {n_outcomes}")
            y[i] = rec.outcomes
        return cls(
            region=np.array([r.region_id - 1 for r in records], dtype=np.int64),
            stratum=[r.stratum_id for r in records],
            cluster=[r.cluster_id for r in records],
            weight=np.array([r.weight for r in records], dtype=float),
            rural=np.array([r.rural_flag for r in records], dtype=bool),
            outcomes=y.reshape(n, n_outcomes),
            region_count=region_count,
            region_labels=region_labels,
        )

    def _check(self):
        n = len(self.weight)
        if self.outcomes.shape[0] != n or not (len(self.region) == len(self.stratum) == len(self.cluster) == len(self.rural) == n):
            raise SurveyValidationError("column lengths differ")
        if self.n_outcomes < 1:
            raise SurveyValidationError("need at least one outcome")
        bad = np.flatnonzero(~np.isfinite(self.weight) | (self.weight <= 0))
        if bad.size:
            raise SurveyValidationError(f"record {bad[0] + 1}: weight must be positive and finite, got {self.weight[bad[0]]!r}")
        if n and (self.region.min() < 0 or self.region.max() >= self.region_count):
            raise SurveyValidationError("region id outside 1..R")
        # one stratum, region and rural flag per cluster
        seen: dict[str, tuple] = {}
        for i, c in enumerate(self.cluster):
            key = (self.stratum[i], int(self.region[i]), bool(self.rural[i]))
            prev = seen.setdefault(c, key)
            if prev != key:
                what = ("strata" if prev[0] != key[0] else "regions" if prev[1] != key[1] else "rural flags")
                raise SurveyValidationError(f"cluster {c!r} spans two {what} (record {i + 1})")

    # -- derived views --------------------------------------------------------
    @property
    def n_outcomes(self) -> int:
        return self.outcomes.shape[1]

    def __len__(self):
        return len(self.weight)

    @property
    def records(self) -> list[IndividualRecord]:
        return [
            IndividualRecord(int(self.region[i]) + 1, str(self.stratum[i]), str(self.cluster[i]),
                             float(self.weight[i]), bool(self.rural[i]),
                             tuple(float(v) for v in self.outcomes[i]))
            for i in range(len(self))
        ]

    @cached_property
    def cluster_index(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, c in enumerate(self.cluster):
            out.setdefault(c, []).append(i)
        return {c: np.asarray(v) for c, v in out.items()}

    @cached_property
    def stratum_index(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for c, idx in self.cluster_index.items():
            out.setdefault(str(self.stratum[idx[0]]), []).append(c)
        return out

    @cached_property
    def cluster_codes(self) -> np.ndarray:
        """Integer code per record, clusters numbered by first appearance."""
        codes = {}
        return np.array([codes.setdefault(c, len(codes)) for c in self.cluster], dtype=np.int64)

    @cached_property
    def stratum_codes(self) -> np.ndarray:
        codes = {}
        return np.array([codes.setdefault(s, len(codes)) for s in self.stratum], dtype=np.int64)

    @property
    def all_missing_rows(self) -> np.ndarray:
        return np.flatnonzero(np.all(np.isnan(self.outcomes), axis=1))

    def records_per_region(self) -> np.ndarray:
        return np.bincount(self.region, minlength=self.region_count)

    def clusters_per_region(self) -> np.ndarray:
        first = {c: idx[0] for c, idx in self.cluster_index.items()}
        regs = np.array([self.region[i] for i in first.values()], dtype=np.int64)
        return np.bincount(regs, minlength=self.region_count)

    def subset(self, mask: np.ndarray) -> "SurveyDataset":
        mask = np.asarray(mask, dtype=bool)
        return SurveyDataset(self.region[mask], self.stratum[mask], self.cluster[mask],
                             self.weight[mask], self.rural[mask], self.outcomes[mask],
                             self.region_count, self.region_labels)

    def permuted(self, order: np.ndarray) -> "SurveyDataset":
        order = np.asarray(order)
        return SurveyDataset(self.region[order], self.stratum[order], self.cluster[order],
                             self.weight[order], self.rural[order], self.outcomes[order],
                             self.region_count, self.region_labels)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _parse_bool(text: str, line: int) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "rural"):
        return True
    if t in ("0", "false", "f", "no", "urban"):
        return False
    raise SurveyParseError(f"cannot read rural flag {text!r}", line)


def load_survey_csv(path, n_outcomes: int, graph: AdjacencyGraph | None = None) -> SurveyDataset:
    """Read a survey CSV (``region,stratum,cluster,weight,rural,y1..yC``).

    Regions are resolved against ``graph``'s node labels when a graph is given;
    otherwise the region column must hold 1-based integer ids.
    """
    path = Path(path)
    expected = ["region", "stratum", "cluster", "weight", "rural"] + [f"y{c + 1}" for c in range(n_outcomes)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SurveyParseError("empty file", 1) from None
        if header != expected:
            raise SurveyParseError(f"header must be {','.join(expected)}, got {','.join(header)}", 1)
        lab_index = graph.label_index() if graph is not None else None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(expected):
                raise SurveyParseError(f"expected {len(expected)} fields, got {len(row)}", lineno)
            reg_txt = row[0].strip()
            if lab_index is not None and reg_txt in lab_index:
                reg = lab_index[reg_txt]
            else:
                try:
                    reg = int(reg_txt) - 1
                except ValueError:
                    raise SurveyParseError(f"unknown region {reg_txt!r}", lineno) from None
            try:
                w = float(row[3])
            except ValueError:
                raise SurveyParseError(f"weight {row[3]!r} is not a number", lineno) from None
            if not (math.isfinite(w) and w > 0):
                raise SurveyValidationError(f"line {lineno}: weight must be positive, got {row[3].strip()}")
            ys = []
            for f in row[5:]:
                f = f.strip()
                if f == "" or f.upper() == "NA":
                    ys.append(np.nan)
                else:
                    try:
                        ys.append(float(f))
                    except ValueError:
                        raise SurveyParseError(f"outcome {f!r} is not a number", lineno) from None
            rows.append((reg, row[1].strip(), row[2].strip(), w, _parse_bool(row[4], lineno), ys, lineno))

    if graph is not None:
        R = graph.n_nodes
        labels = graph.labels
    else:
        R = max((r[0] for r in rows), default=-1) + 1
        labels = None
    for reg, *_rest, lineno in rows:
        if not (0 <= reg < R):
            raise SurveyValidationError(f"line {lineno}: region {reg + 1} not in graph (1..{R})")
    # cluster consistency with line numbers
    seen: dict[str, tuple] = {}
    for reg, strat, clus, _w, rural, _ys, lineno in rows:
        prev = seen.setdefault(clus, (strat, reg, rural))
        if prev[0] != strat:
            raise SurveyValidationError(f"line {lineno}: cluster {clus!r} spans two strata ({prev[0]!r}, {strat!r})")
        if prev != (strat, reg, rural):
            raise SurveyValidationError(f"line {lineno}: cluster {clus!r} changes region or rural flag")
    y = np.array([r[5] for r in rows], dtype=float).reshape(len(rows), n_outcomes)
    return SurveyDataset(
        region=np.array([r[0] for r in rows], dtype=np.int64),
        stratum=[r[1] for r in rows],
        cluster=[r[2] for r in rows],
        weight=np.array([r[3] for r in rows], dtype=float),
        rural=np.array([r[4] for r in rows], dtype=bool),
        outcomes=y,
        region_count=R,
        region_labels=labels,
    )


def write_survey_csv(data: SurveyDataset, path) -> None:
    C = data.n_outcomes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "stratum", "cluster", "weight", "rural"] + [f"y{c + 1}" for c in range(C)])
        for i in range(len(data)):
            ys = ["" if np.isnan(v) else repr(float(v)) for v in data.outcomes[i]]
            w.writerow([data.region_labels[data.region[i]], data.stratum[i], data.cluster[i],
                        repr(float(data.weight[i])), int(data.rural[i])] + ys)


def load_adjacency(path) -> AdjacencyGraph:
    """Load a graph from JSON (``{"n", "labels", "edges"}``) or from a text file
    whose first line is the node count followed by one ``i j`` pair per line.
    Ids are 1-based; duplicate edges collapse silently.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict):
        try:
            n = int(obj["n"])
        except (KeyError, TypeError, ValueError):
            raise GraphError("graph JSON needs an integer 'n'") from None
        labels = obj.get("labels")
        edges = obj.get("edges", [])
        return AdjacencyGraph.from_pairs(n, edges, labels)
    lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError("empty graph file")
    try:
        n = int(lines[0])
        pairs = [tuple(int(t) for t in ln.replace(",", " ").split()) for ln in lines[1:]]
    except ValueError as exc:
        raise GraphError(f"malformed graph file: {exc}") from None
    if any(len(p) != 2 for p in pairs):
        raise GraphError("each edge line needs exactly two node ids")
    return AdjacencyGraph.from_pairs(n, pairs)


def write_graph_json(graph: AdjacencyGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json()), encoding="utf-8")


def load_rural_fractions(path) -> RuralFractions:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict) or "q" not in obj:
        raise SurveyParseError("rural fractions JSON needs a 'q' array")
    return RuralFractions(np.asarray(obj["q"], dtype=float))


def write_rural_fractions(q: RuralFractions, path) -> None:
    Path(path).write_text(json.dumps({"q": [float(v) for v in q.q]}), encoding="utf-8")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    missing_regions: list[str] = field(default_factory=list)
    lonely_psu_strata: list[str] = field(default_factory=list)
    sparse_cells: list[tuple[str, int]] = field(default_factory=list)  # (region label, 1-based outcome)
    problems: list[str] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not (self.missing_regions or self.lonely_psu_strata or self.sparse_cells or self.problems)

    def lines(self) -> list[str]:
        out = [f"region {r}: no sampled clusters" for r in self.missing_regions]
        out += [f"stratum {s}: single cluster (lonely PSU)" for s in self.lonely_psu_strata]
        out += [f"region {r}, outcome {c}: fewer than 2 observations" for r, c in self.sparse_cells]
        out += list(self.problems)
        return out

    def __str__(self):
        return "\n".join(self.lines()) if not self.is_empty else "dataset supports full Stage-1 estimation"


def validate_dataset(data: SurveyDataset, graph: AdjacencyGraph, q: RuralFractions | None = None) -> ValidationReport:
    rep = ValidationReport()
    labels = graph.labels
    if data.region_count != graph.n_nodes:
        rep.problems.append(f"dataset has {data.region_count} regions but graph has {graph.n_nodes} nodes")
    if q is not None and len(q) != graph.n_nodes:
        rep.problems.append(f"rural fractions have length {len(q)}, expected {graph.n_nodes}")
    K = data.clusters_per_region()
    for r in range(min(graph.n_nodes, len(K))):
        if K[r] == 0:
            rep.missing_regions.append(labels[r])
    for r in range(len(K), graph.n_nodes):
        rep.missing_regions.append(labels[r])
    for s, clusters in data.stratum_index.items():
        if len(clusters) == 1:
            rep.lonely_psu_strata.append(s)
    obs = ~np.isnan(data.outcomes)
    for r in range(min(graph.n_nodes, data.region_count)):
        if K[r] == 0:
            continue
        sel = data.region == r
        for c in range(data.n_outcomes):
            if obs[sel, c].sum() < 2:
                rep.sparse_cells.append((labels[r], c + 1))
    return rep


# ---------------------------------------------------------------------------
# synthetic geographies
# ---------------------------------------------------------------------------

def lattice_graph(nrows: int, ncols: int, drop: Iterable[tuple[int, int]] = ()) -> AdjacencyGraph:
    """Rook-adjacency grid; ``drop`` removes cells given as (row, col)."""
    drop = set(drop)
    cells = [(i, j) for i in range(nrows) for j in range(ncols) if (i, j) not in drop]
    idx = {cell: k for k, cell in enumerate(cells)}
    edges = set()
    for (i, j), k in idx.items():
        for nb in ((i + 1, j), (i, j + 1)):
            if nb in idx:
                edges.add((k, idx[nb]))
    labels = [f"r{i}c{j}" for i, j in cells]
    return AdjacencyGraph(len(cells), frozenset(edges), tuple(labels))


def default_geography() -> AdjacencyGraph:
    """47-node planar lattice: a 7x7 grid without two opposite corners."""
    return lattice_graph(7, 7, drop=[(0, 0), (6, 6)])
