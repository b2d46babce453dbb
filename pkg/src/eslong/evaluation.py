"""Protein-centric Fmax: threshold sweep over the harmonic mean of precision
and recall.

At threshold tau, a protein's predicted set P(tau) holds every term scored at
or above tau. Precision averages |P∩T|/|P| over the m(tau) proteins with a
nonempty P(tau); recall averages |P∩T|/|T| over all n proteins in the truth
set. Thresholds where m(tau)=0 leave precision undefined and are excluded
from the sweep. The grid is the 100 points 0.01..1.00.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

GRID = tuple(round(k / 100.0, 2) for k in range(1, 101))


@dataclass(frozen=True)
class CurvePoint:
    tau: float
    pr: float
    rc: float
    f: float
    m: int


@dataclass(frozen=True)
class EvalResult:
    fmax: float
    tau_star: float | None
    curve: tuple[CurvePoint, ...]
    n: int
    namespace: str = ""


def _restrict(terms: dict[str, float], exclude: frozenset[str]) -> dict[str, float]:
    if not exclude:
        return terms
    return {t: s for t, s in terms.items() if t not in exclude}


def _validate(pred, truth, exclude):
    if not truth:
        raise EvaluationError("evaluation needs at least one protein with ground truth")
    for protein in pred:
        if protein not in truth:
            raise EvaluationError(f"prediction for unknown protein {protein!r}")
    for protein, terms in truth.items():
        if not _restrict(terms, exclude):
            raise EvaluationError(f"protein {protein!r} has no ground-truth terms")


def precision_at(pred, truth, tau: float, exclude_terms=()) -> tuple[float, int]:
    """(precision at tau, m(tau)); (0.0, 0) when no protein predicts anything."""
    exclude = frozenset(exclude_terms)
    _validate(pred, truth, exclude)
    total = 0.0
    m = 0
    for protein, terms in pred.items():
        chosen = {t for t, s in _restrict(terms, exclude).items() if s >= tau}
        if not chosen:
            continue
        m += 1
        true_terms = set(_restrict(truth[protein], exclude))
        total += len(chosen & true_terms) / len(chosen)
    if m == 0:
        return 0.0, 0
    return total / m, m


def recall_at(pred, truth, tau: float, exclude_terms=()) -> float:
    """Recall at tau, averaged over every protein in the truth set."""
    exclude = frozenset(exclude_terms)
    _validate(pred, truth, exclude)
    total = 0.0
    for protein, true_raw in truth.items():
        true_terms = set(_restrict(true_raw, exclude))
        chosen = {
            t for t, s in _restrict(pred.get(protein, {}), exclude).items() if s >= tau
        }
        total += len(chosen & true_terms) / len(true_terms)
    return total / len(truth)


def fmax(pred, truth, namespace: str = "", exclude_terms=(), grid=GRID) -> EvalResult:
    """Sweep the grid and return the best F with its smallest maximizing tau.

    If every threshold has m(tau)=0 (no predictions at all), the curve is
    empty and fmax is 0.
    """
    exclude = frozenset(exclude_terms)
    _validate(pred, truth, exclude)
    proteins = sorted(truth)
    n = len(proteins)
    taus = np.asarray(grid, dtype=np.float64)
    pr_sum = np.zeros(len(taus))
    rc_sum = np.zeros(len(taus))
    m_count = np.zeros(len(taus), dtype=np.int64)
    for protein in proteins:
        true_terms = set(_restrict(truth[protein], exclude))
        scored = _restrict(pred.get(protein, {}), exclude)
        if scored:
            items = sorted(scored.items(), key=lambda kv: kv[1])
            scores = np.array([s for _, s in items], dtype=np.float64)
            is_true = np.array([t in true_terms for t, _ in items], dtype=np.float64)
            # suffix sums: how many predictions / correct predictions score >= tau
            first_idx = np.searchsorted(scores, taus, side="left")
            pred_count = len(scores) - first_idx
            true_suffix = np.concatenate([np.cumsum(is_true[::-1])[::-1], [0.0]])
            inter = true_suffix[first_idx]
            active = pred_count > 0
            m_count += active
            with np.errstate(invalid="ignore", divide="ignore"):
                pr_sum += np.where(active, inter / np.maximum(pred_count, 1), 0.0)
            rc_sum += inter / len(true_terms)
    curve = []
    best_f = 0.0
    tau_star = None
    for j, tau in enumerate(taus):
        if m_count[j] == 0:
            continue
        pr = pr_sum[j] / m_count[j]
        rc = rc_sum[j] / n
        f = 0.0 if pr + rc == 0 else 2.0 * pr * rc / (pr + rc)
        curve.append(CurvePoint(tau=float(tau), pr=float(pr), rc=float(rc),
                                f=float(f), m=int(m_count[j])))
        if f > best_f:
            best_f = f
            tau_star = float(tau)
    if tau_star is None and curve:
        tau_star = curve[0].tau  # all F values are exactly zero
    return EvalResult(fmax=float(best_f), tau_star=tau_star, curve=tuple(curve),
                      n=n, namespace=namespace)


def stratified_eval(pred, truth, lengths: dict[str, int], min_len: int,
                    namespace: str = "", exclude_terms=()) -> EvalResult:
    """Fmax restricted to proteins longer than min_len residues."""
    missing = [p for p in truth if p not in lengths]
    if missing:
        raise EvaluationError(f"no length available for proteins {missing[:5]}")
    keep = {p for p in truth if lengths[p] > min_len}
    if not keep:
        raise EvaluationError(
            f"stratum is empty: no protein longer than {min_len} residues"
        )
    sub_truth = {p: t for p, t in truth.items() if p in keep}
    sub_pred = {p: t for p, t in pred.items() if p in keep}
    return fmax(sub_pred, sub_truth, namespace=namespace, exclude_terms=exclude_terms)


def result_to_json(result: EvalResult) -> dict:
    return {
        "namespace": result.namespace,
        "fmax": result.fmax,
        "tau_star": result.tau_star,
        "n": result.n,
        "curve": [
            {"tau": p.tau, "pr": p.pr, "rc": p.rc, "f": p.f, "m": p.m}
            for p in result.curve
        ],
    }


def write_report(path, result: EvalResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result_to_json(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curve_tsv(path, result: EvalResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tau\tpr\trc\tf\tm\n")
        for p in result.curve:
            fh.write(f"{p.tau:.2f}\t{p.pr:.9g}\t{p.rc:.9g}\t{p.f:.9g}\t{p.m}\n")
