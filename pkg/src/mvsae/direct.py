"""Stage-1 design-based estimation: Hájek means and their covariance.

Covariances use the with-replacement ultimate-cluster linearization. For a
region with normalized weights ``w*`` (summing to one), linearized residuals
are ``e_i = w*_i (y_i - yhat)``; with ``t_hk`` the total of ``e`` over cluster
``k`` of stratum ``h``::

    V[c, c'] = sum_h n_h / (n_h - 1) * sum_k (t_hkc - tbar_hc) (t_hkc' - tbar_hc')

A stratum holding a single cluster ("lonely PSU") either raises or, with
``lonely_psu="centered"``, contributes its total centred at the mean of all
cluster totals in the region (multiplier 1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .survey import SurveyDataset, SurveyError

LONELY_PSU_POLICIES = ("error", "centered")


class LonelyPSUError(SurveyError):
    def __init__(self, strata):
        self.strata = list(strata)
        super().__init__("strata with a single sampled cluster: " + ", ".join(map(str, self.strata))
                         + " (use lonely_psu='centered' to allow)")


@dataclass
class DirectEstimateSet:
    """Per-region Hájek means ``y_hat`` (R, C) and covariances ``V_hat`` (R, C, C).

    Cells that cannot be estimated are ``nan`` and ``availability`` is False.
    """

    y_hat: np.ndarray
    V_hat: np.ndarray
    availability: np.ndarray
    region_labels: tuple[str, ...] = ()
    psd_projected: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=float)
        self.V_hat = np.asarray(self.V_hat, dtype=float)
        self.availability = np.asarray(self.availability, dtype=bool)
        R = self.y_hat.shape[0]
        if not self.region_labels:
            self.region_labels = tuple(str(i + 1) for i in range(R))
        if self.psd_projected is None:
            self.psd_projected = np.zeros(R, dtype=bool)

    @property
    def n_regions(self) -> int:
        return self.y_hat.shape[0]

    @property
    def n_outcomes(self) -> int:
        return self.y_hat.shape[1]

    def region_block(self, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Available outcome indices, mean sub-vector and covariance sub-block."""
        idx = np.flatnonzero(self.availability[r])
        return idx, self.y_hat[r, idx], self.V_hat[r][np.ix_(idx, idx)]

    def drop_region(self, r: int) -> "DirectEstimateSet":
        y = self.y_hat.copy()
        V = self.V_hat.copy()
        a = self.availability.copy()
        y[r] = np.nan
        V[r] = np.nan
        a[r] = False
        return DirectEstimateSet(y, V, a, self.region_labels, self.psd_projected.copy())


def _weighted_residual_totals(w, y, cl):
    """Cluster totals of normalized linearized residuals and the Hájek mean."""
    ws = w / w.sum()
    mean = float(np.dot(ws, y))
    e = ws * (y - mean)
    return mean, np.bincount(cl, weights=e)


def hajek_mean(data: SurveyDataset, region: int, outcome: int) -> float | None:
    """Weighted mean of ``outcome`` in ``region`` (0-based indices).

    Returns None when no record in the region observes the outcome.
    """
    sel = (data.region == region) & ~np.isnan(data.outcomes[:, outcome])
    if not sel.any():
        return None
    w = data.weight[sel]
    y = data.outcomes[sel, outcome]
    ws = w / w.sum()
    est = float(np.dot(ws, y))
    # guard the convex-combination bound against rounding
    return float(np.clip(est, y.min(), y.max()))


def _pair_covariance(data, sel, c1, c2, lonely_psu):
    """One covariance cell from the records ``sel`` (pairwise complete)."""
    w = data.weight[sel]
    codes = data.cluster_codes[sel]
    uniq, cl = np.unique(codes, return_inverse=True)
    strata_of_cluster = np.empty(len(uniq), dtype=np.int64)
    strata_of_cluster[cl] = data.stratum_codes[sel]
    _, t1 = _weighted_residual_totals(w, data.outcomes[sel, c1], cl)
    if c2 == c1:
        t2 = t1
    else:
        _, t2 = _weighted_residual_totals(w, data.outcomes[sel, c2], cl)
    n_h = np.bincount(strata_of_cluster)
    lonely = np.flatnonzero(n_h == 1)
    if lonely.size and lonely_psu == "error":
        names = sorted({str(data.stratum[sel][data.stratum_codes[sel] == h][0]) for h in lonely})
        raise LonelyPSUError(names)
    m1 = np.bincount(strata_of_cluster, weights=t1) / np.maximum(n_h, 1)
    m2 = np.bincount(strata_of_cluster, weights=t2) / np.maximum(n_h, 1)
    d1 = t1 - m1[strata_of_cluster]
    d2 = t2 - m2[strata_of_cluster]
    nk = n_h[strata_of_cluster]
    mult = np.where(nk > 1, nk / np.maximum(nk - 1, 1), 0.0)
    v = float(np.sum(mult * d1 * d2))
    if lonely.size:
        is_lonely = nk == 1
        v += float(np.sum((t1[is_lonely] - t1.mean()) * (t2[is_lonely] - t2.mean())))
    return v


def _nearest_psd(V):
    vals, vecs = np.linalg.eigh(V)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def design_covariance(data: SurveyDataset, region: int, lonely_psu: str = "error") -> np.ndarray:
    """Design-based covariance of the region's Hájek mean vector (C x C).

    Entries involving an outcome with no observations are ``nan``. The result is
    not PSD-projected; :func:`direct_estimates` does that and flags it.
    """
    if lonely_psu not in LONELY_PSU_POLICIES:
        raise ValueError(f"lonely_psu must be one of {LONELY_PSU_POLICIES}")
    C = data.n_outcomes
    V = np.full((C, C), np.nan)
    in_region = data.region == region
    obs = ~np.isnan(data.outcomes)
    for a in range(C):
        for b in range(a, C):
            sel = in_region & obs[:, a] & obs[:, b]
            if not sel.any():
                continue
            V[a, b] = V[b, a] = _pair_covariance(data, sel, a, b, lonely_psu)
    return V


def direct_estimates(data: SurveyDataset, lonely_psu: str = "error") -> DirectEstimateSet:
    R, C = data.region_count, data.n_outcomes
    y = np.full((R, C), np.nan)
    V = np.full((R, C, C), np.nan)
    avail = np.zeros((R, C), dtype=bool)
    projected = np.zeros(R, dtype=bool)
    notes = []
    for r in range(R):
        for c in range(C):
            m = hajek_mean(data, r, c)
            if m is not None:
                y[r, c] = m
                avail[r, c] = True
        if not avail[r].any():
            continue
        Vr = design_covariance(data, r, lonely_psu)
        idx = np.flatnonzero(avail[r])
        block = Vr[np.ix_(idx, idx)]
        if np.isnan(block).any():
            # an outcome pair never co-observed: treat as uncorrelated
            off = np.isnan(block)
            block[off] = 0.0
            notes.append(f"region {data.region_labels[r]}: no co-observed records for some outcome pairs")
        scale = max(1.0, float(np.max(np.abs(np.diag(block))))) if block.size else 1.0
        if block.size and np.linalg.eigvalsh(block).min() < -1e-10 * scale:
            block = _nearest_psd(block)
            projected[r] = True
            notes.append(f"region {data.region_labels[r]}: covariance projected to PSD")
        block = 0.5 * (block + block.T)
        V[r][np.ix_(idx, idx)] = block
    return DirectEstimateSet(y, V, avail, data.region_labels, projected, notes)


def naive_variance(data: SurveyDataset, region: int, outcome: int) -> float:
    """Variance of the weighted mean ignoring clustering and strata (iid records)."""
    sel = (data.region == region) & ~np.isnan(data.outcomes[:, outcome])
    w = data.weight[sel]
    y = data.outcomes[sel, outcome]
    ws = w / w.sum()
    e = ws * (y - np.dot(ws, y))
    n = len(e)
    return float(n / (n - 1) * np.sum(e**2)) if n > 1 else 0.0


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def direct_csv_header(C: int) -> list[str]:
    cols = ["region"] + [f"y{c + 1}" for c in range(C)]
    cols += [f"V{a + 1}{b + 1}" for a in range(C) for b in range(a, C)]
    cols += [f"avail{c + 1}" for c in range(C)]
    return cols


def write_direct_estimates_csv(est: DirectEstimateSet, path) -> None:
    C = est.n_outcomes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(direct_csv_header(C))
        for r in range(est.n_regions):
            row = [est.region_labels[r]] + [_fmt(v) for v in est.y_hat[r]]
            row += [_fmt(est.V_hat[r, a, b]) for a in range(C) for b in range(a, C)]
            row += [int(v) for v in est.availability[r]]
            w.writerow(row)


def read_direct_estimates_csv(path, graph=None) -> DirectEstimateSet:
    """Inverse of :func:`write_direct_estimates_csv`; rows are reordered to the
    graph's node order when a graph is supplied."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    C = sum(1 for h in header if h.startswith("y"))
    if header != direct_csv_header(C):
        raise SurveyError(f"{path}: unexpected header {header}")
    labels = [r[0] for r in body]
    if graph is not None:
        index = graph.label_index()
        missing = [lab for lab in labels if lab not in index]
        if missing:
            raise SurveyError(f"regions not in graph: {missing}")
        order = [index[lab] for lab in labels]
        R = graph.n_nodes
        out_labels = graph.labels
    else:
        order = list(range(len(body)))
        R = len(body)
        out_labels = tuple(labels)
    y = np.full((R, C), np.nan)
    V = np.full((R, C, C), np.nan)
    a = np.zeros((R, C), dtype=bool)

    def num(s):
        return float(s) if s.strip() else np.nan

    for r, row in zip(order, body):
        y[r] = [num(s) for s in row[1:1 + C]]
        k = 1 + C
        for i in range(C):
            for j in range(i, C):
                V[r, i, j] = V[r, j, i] = num(row[k])
                k += 1
        a[r] = [bool(int(s)) for s in row[k:k + C]]
    return DirectEstimateSet(y, V, a, tuple(out_labels))
