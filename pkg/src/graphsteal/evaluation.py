"""Validity, uniqueness, reconstruction rate, embedding distance and reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import gnn
from .graphdata import ValidityRules, canonical_key, is_valid


class MetricsError(ValueError):
    pass


def sample_metrics(graphs, rules: ValidityRules) -> tuple[float, float]:
    graphs = list(graphs)
    if not graphs:
        raise MetricsError("cannot score an empty reconstruction set")
    valid = sum(is_valid(g, rules) for g in graphs)
    distinct = len({canonical_key(g) for g in graphs})
    return valid / len(graphs), distinct / len(graphs)


def reconstruction_rate(reconstructed, targets) -> float:
    """|keys(D_r) & keys(D_t)| / |keys(D_r)| over canonical key sets."""
    rk = {canonical_key(g) for g in reconstructed}
    tk = {canonical_key(g) for g in targets}
    if not rk or not tk:
        raise MetricsError("both sets must be non-empty")
    return len(rk & tk) / len(rk)


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_embeddings(cls, emb, reg=1e-6):
        emb = np.asarray(emb, dtype=float)
        if emb.ndim != 2 or len(emb) == 0:
            raise MetricsError("embeddings must be a non-empty 2-D array")
        mean = emb.mean(axis=0)
        d = emb.shape[1]
        if len(emb) > 1:
            cov = np.cov(emb, rowvar=False).reshape(d, d)
        else:
            cov = np.zeros((d, d))
        if len(emb) < d + 1:
            cov = cov + reg * np.eye(d)
        return cls(mean, 0.5 * (cov + cov.T))


def _sqrtm_trace(c1, c2) -> float:
    """Tr((C1 C2)^{1/2}) via the symmetric form C1^{1/2} C2 C1^{1/2}."""
    w, v = np.linalg.eigh(c1)
    r1 = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
    m = r1 @ c2 @ r1
    m = 0.5 * (m + m.T)
    ev = np.linalg.eigvalsh(m)
    return float(np.sqrt(np.maximum(ev, 0.0)).sum())


def frechet_distance(p: FrechetStats, q: FrechetStats) -> float:
    if p.mean.shape != q.mean.shape:
        raise MetricsError("statistics have different dimensions")
    diff = p.mean - q.mean
    d2 = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * _sqrtm_trace(p.cov, q.cov))
    return max(d2, 0.0)


def fed(reconstructed, targets, encoder: gnn.GnnClassifier) -> float:
    er = gnn.embed(encoder, list(reconstructed))
    et = gnn.embed(encoder, list(targets))
    return frechet_distance(FrechetStats.from_embeddings(er), FrechetStats.from_embeddings(et))


# --------------------------------------------------------------------------- report

REPORT_COLUMNS = ["method", "seed_count", "validity_mean", "validity_std", "uniqueness_mean",
                  "uniqueness_std", "recon_mean", "recon_std", "fed_mean", "fed_std"]
METRICS = ("validity", "uniqueness", "recon", "fed")


def method_metrics(reconstructed, targets, rules, encoder) -> dict:
    v, u = sample_metrics(reconstructed, rules)
    return {"validity": v, "uniqueness": u, "recon": reconstruction_rate(reconstructed, targets),
            "fed": fed(reconstructed, targets, encoder)}


@dataclass
class MetricsReport:
    rows: list[dict]
    fingerprint: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r["method"], r["seed_count"]] + [f"{r[c]:.6f}" for c in REPORT_COLUMNS[2:]])
        return buf.getvalue()

    def to_text(self) -> str:
        return json.dumps({"fingerprint": self.fingerprint, "rows": self.rows},
                          sort_keys=True, indent=1) + "\n"

    def row(self, method):
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)


def full_report(per_seed: dict, fingerprint: str = "") -> MetricsReport:
    """Aggregate ``{seed: {method: metrics}}`` into mean and sample std per cell."""
    if not per_seed:
        raise MetricsError("no seeds to report")
    seeds = sorted(per_seed)
    methods = list(per_seed[seeds[0]])
    for s in seeds:
        if set(per_seed[s]) != set(methods):
            raise MetricsError(f"seed {s} reports methods {sorted(per_seed[s])}, expected {sorted(methods)}")
    rows = []
    for m in methods:
        row = {"method": m, "seed_count": len(seeds)}
        for key in METRICS:
            vals = np.array([per_seed[s][m][key] for s in seeds], dtype=float)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return MetricsReport(rows, fingerprint)
