"""Measured quantities from reverse-anneal outcome records.

A sweep produces one :class:`ExperimentRecord` per protocol point: outcome
class counts (Start / TrueMin / FalseMin / Other) at one (device, J_t, s*,
tau).  This module turns those into class probabilities with binomial
standard errors, locates the regime boundaries of a sweep (exit threshold,
transfer peak, low-fluctuation plateau), and fits the two-parameter
branching model

    P_false(tau) = 1 - (1 - r_false) * exp(-kappa * tau)

by bounded nonlinear least squares with a deterministic multi-start.
Records round-trip through CSV and JSON lines with a fixed column schema so
external datasets can be re-ingested after a column mapping.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import least_squares

from .ising import GadgetSpec, OutcomeClass, classify
from .schedule import ScheduleTable, gamma

CLASS_LABELS = ("Start", "TrueMin", "FalseMin", "Other")
CSV_COLUMNS = ("device", "J_t", "s_star", "gamma_star", "tau_us",
               "n_start", "n_true", "n_false", "n_other", "shots")

# default plateau cutoffs Gamma* <= Gamma_max, keyed by device label
PLATEAU_GAMMA_MAX = {"low_noise": 0.1, "high_noise": 0.05}

_GAMMA_TOL = 1e-6
_DEGENERATE_TOL = 1e-12
_R_STARTS = (0.05, 0.35, 0.65, 0.95)
_K_STARTS = (1e-3, 1e-2, 1e-1, 1.0)


class AnalysisError(ValueError):
    """Malformed record, degenerate input, or unsatisfiable query."""


@dataclass(frozen=True)
class ExperimentRecord:
    """Outcome counts of one protocol point.

    ``device`` is a schedule label (e.g. ``low_noise``), ``gamma_star`` the
    transverse-field strength at the hold point ``s_star``, ``tau_us`` the
    hold time.  The four counts are mutually exclusive and exhaustive;
    out-of-family (leaked) shots belong in ``n_other``.
    """

    device: str
    j_t: float
    s_star: float
    gamma_star: float
    tau_us: float
    n_start: int
    n_true: int
    n_false: int
    n_other: int
    shots: int

    def __post_init__(self):
        if self.shots < 1:
            raise AnalysisError("shots must be >= 1")
        counts = (self.n_start, self.n_true, self.n_false, self.n_other)
        if any(c < 0 for c in counts):
            raise AnalysisError("negative class count")
        if sum(counts) != self.shots:
            raise AnalysisError(
                f"counts sum to {sum(counts)}, expected shots = {self.shots}")
        if not 0.0 <= self.s_star <= 1.0:
            raise AnalysisError(f"s_star = {self.s_star} outside [0, 1]")
        if self.tau_us < 0.0:
            raise AnalysisError("tau_us must be non-negative")
        if not math.isfinite(self.gamma_star) or self.gamma_star < 0.0:
            raise AnalysisError(f"bad gamma_star = {self.gamma_star}")

    @property
    def counts(self) -> np.ndarray:
        return np.array([self.n_start, self.n_true, self.n_false, self.n_other],
                        dtype=np.int64)

    def check_gamma(self, table: ScheduleTable, tol: float = _GAMMA_TOL) -> None:
        """Verify gamma_star against the schedule's A(s*)/B(s*)."""
        g = gamma(table, self.s_star)
        if abs(g - self.gamma_star) > tol:
            raise AnalysisError(
                f"gamma_star = {self.gamma_star!r} disagrees with schedule "
                f"value {g!r} at s* = {self.s_star} (tol {tol})")

    def to_json_dict(self) -> dict:
        return {"device": self.device, "J_t": self.j_t, "s_star": self.s_star,
                "gamma_star": self.gamma_star, "tau_us": self.tau_us,
                "n_start": self.n_start, "n_true": self.n_true,
                "n_false": self.n_false, "n_other": self.n_other,
                "shots": self.shots}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(device=str(d["device"]), j_t=float(d["J_t"]),
                   s_star=float(d["s_star"]), gamma_star=float(d["gamma_star"]),
                   tau_us=float(d["tau_us"]), n_start=int(d["n_start"]),
                   n_true=int(d["n_true"]), n_false=int(d["n_false"]),
                   n_other=int(d["n_other"]), shots=int(d["shots"]))


def record_from_histogram(hist, gadget: GadgetSpec, device: str,
                          s_star: float, gamma_star: float,
                          tau_us: float) -> ExperimentRecord:
    """Classify a sampled outcome histogram against a gadget.

    Leaked (out-of-family) shots count as Other, as does any configuration
    that is neither the start state, the true minimum, nor a false minimum.
    """
    tally = dict.fromkeys(OutcomeClass, 0)
    for config, n in hist.counts.items():
        tally[classify(config, gadget)] += n
    tally[OutcomeClass.OTHER] += hist.leaked
    return ExperimentRecord(
        device=device, j_t=gadget.j_t, s_star=s_star, gamma_star=gamma_star,
        tau_us=tau_us, n_start=tally[OutcomeClass.START],
        n_true=tally[OutcomeClass.TRUE_MIN], n_false=tally[OutcomeClass.FALSE_MIN],
        n_other=tally[OutcomeClass.OTHER], shots=hist.shots)


class ClassProbabilities(NamedTuple):
    """Class probabilities and binomial standard errors, in CLASS_LABELS order."""

    p: np.ndarray
    se: np.ndarray

    def as_dict(self) -> dict:
        return {lab: (float(p), float(se))
                for lab, p, se in zip(CLASS_LABELS, self.p, self.se)}


def class_probabilities(record: ExperimentRecord) -> ClassProbabilities:
    """Per-class probabilities p = count/shots with se = sqrt(p(1-p)/shots).

    The four probabilities sum to 1.0 exactly under correctly-rounded
    summation (math.fsum): division rounding is absorbed into the largest
    class, an adjustment of at most one ulp computed in exact rational
    arithmetic.
    """
    counts = record.counts
    shots = record.shots
    p = counts / shots
    k = int(counts.argmax())
    rest = sum(Fraction(float(p[i])) for i in range(4) if i != k)
    p[k] = float(1 - rest)
    se = np.sqrt(p * (1.0 - p) / shots)
    return ClassProbabilities(p, se)


# ---------------------------------------------------------------------------
# branching-ratio fit


@dataclass(frozen=True)
class BranchingFit:
    """Bounded least-squares fit of the two-parameter branching model.

    ``r_false`` is the asymptotic false-minimum fraction of the fast initial
    transfer, ``kappa`` the slow decay rate (1/us) of the remainder.
    ``cov`` is the 2x2 parameter covariance (JtJ)^-1 * RSS/(n-2) at the
    optimum, ordered (r_false, kappa).  When the data cannot constrain the
    decay rate (all probabilities equal within 1e-12), ``kappa_identifiable``
    is False and the covariance is reported as zeros.
    """

    r_false: float
    kappa: float
    cov: np.ndarray
    rss: float
    n_points: int
    kappa_identifiable: bool = True

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "cov", cov)
        if not 0.0 <= self.r_false <= 1.0:
            raise AnalysisError(f"r_false = {self.r_false} outside [0, 1]")
        if self.kappa < 0.0:
            raise AnalysisError(f"kappa = {self.kappa} negative")
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-12):
            raise AnalysisError("covariance must be symmetric 2x2")
        scale = max(abs(cov).max(), 1.0)
        if np.linalg.eigvalsh(cov).min() < -1e-12 * scale:
            raise AnalysisError("covariance not positive semidefinite")
        if self.rss < 0.0 or self.n_points < 3:
            raise AnalysisError("bad rss or n_points")

    @property
    def stderr(self) -> "tuple[float, float]":
        d = np.sqrt(np.clip(np.diag(self.cov), 0.0, None))
        return float(d[0]), float(d[1])

    def predict(self, tau_us) -> np.ndarray:
        return _branching_model(np.asarray(tau_us, dtype=np.float64),
                                self.r_false, self.kappa)

    def to_json_dict(self) -> dict:
        se = self.stderr
        return {"r_false": self.r_false, "kappa_per_us": self.kappa,
                "stderr_r_false": se[0], "stderr_kappa": se[1],
                "covariance": self.cov.tolist(), "rss": self.rss,
                "n_points": self.n_points,
                "kappa_identifiable": self.kappa_identifiable}


def _branching_model(tau, r, k):
    return 1.0 - (1.0 - r) * np.exp(-k * tau)


def branching_fit(points: "Sequence[tuple[float, float]]") -> BranchingFit:
    """Fit P_false(tau) = 1 - (1 - r_false) exp(-kappa tau) to (tau, P) points.

    Bounded nonlinear least squares over (r_false, kappa) in [0,1] x [0,inf),
    restarted from a fixed grid of initial guesses; the best of all starts is
    reported, so the objective never regresses when more starts are added.
    Input order does not matter (points are sorted before fitting).

    Parameters
    ----------
    points : sequence of (tau_us, p_false)
        At least 3 points with at least 2 distinct hold times.

    Returns
    -------
    BranchingFit
    """
    pts = sorted((float(t), float(p)) for t, p in points)
    n = len(pts)
    if n < 3:
        raise AnalysisError(f"need >= 3 points, got {n}")
    tau = np.array([t for t, _ in pts])
    y = np.array([p for _, p in pts])
    if np.unique(tau).size < 2:
        raise AnalysisError("need >= 2 distinct hold times")
    if (tau < 0.0).any() or (y < -1e-9).any() or (y > 1.0 + 1e-9).any():
        raise AnalysisError("hold times must be >= 0 and probabilities in [0, 1]")

    if y.max() - y.min() <= _DEGENERATE_TOL:
        # flat curve: any kappa fits once r_false soaks up the level
        r = float(np.clip(y.mean(), 0.0, 1.0))
        rss = float(((y - r) ** 2).sum())
        return BranchingFit(r_false=r, kappa=0.0, cov=np.zeros((2, 2)),
                            rss=rss, n_points=n, kappa_identifiable=False)

    def resid(theta):
        return _branching_model(tau, theta[0], theta[1]) - y

    best = None
    for r0 in _R_STARTS:
        for k0 in _K_STARTS:
            sol = least_squares(resid, x0=[r0, k0],
                                bounds=([0.0, 0.0], [1.0, np.inf]),
                                method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14)
            if best is None or sol.cost < best.cost:
                best = sol
    r, k = best.x
    rss = float((best.fun ** 2).sum())
    jtj = best.jac.T @ best.jac
    identifiable = bool(np.linalg.cond(jtj) < 1e12)
    if identifiable:
        cov = np.linalg.inv(jtj) * (rss / (n - 2))
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((2, 2))
    return BranchingFit(r_false=float(r), kappa=float(k), cov=cov, rss=rss,
                        n_points=n, kappa_identifiable=identifiable)


# ---------------------------------------------------------------------------
# sweep statistics


def _pool_by_gamma(records: "Sequence[ExperimentRecord]") -> "list[tuple[float, np.ndarray, int]]":
    """Pool counts of records sharing gamma_star; ascending in gamma_star."""
    groups: dict = {}
    for rec in records:
        key = float(rec.gamma_star)
        counts, shots = groups.get(key, (np.zeros(4, dtype=np.int64), 0))
        groups[key] = (counts + rec.counts, shots + rec.shots)
    return [(g, c, s) for g, (c, s) in sorted(groups.items())]


def peak_true_min(records: "Sequence[ExperimentRecord]") -> "tuple[float, float]":
    """(gamma_star, P_TrueMin) of the highest measured TrueMin probability.

    No interpolation or smoothing: the argmax is taken over measured points,
    with ties broken toward larger gamma_star.  Records sharing a gamma_star
    are pooled first.  Requires >= 3 distinct gamma_star values.
    """
    pooled = _pool_by_gamma(records)
    if len(pooled) < 3:
        raise AnalysisError(f"need >= 3 distinct gamma_star values, got {len(pooled)}")
    best_g, best_p = None, -1.0
    for g, counts, shots in pooled:
        p = counts[1] / shots
        if p >= best_p:        # >= so later (larger) gamma wins ties
            best_g, best_p = g, p
    return best_g, best_p


def plateau_false_min(records: "Sequence[ExperimentRecord]",
                      gamma_max: "float | None" = None) -> float:
    """Max pooled P_FalseMin over points with gamma_star <= gamma_max.

    With ``gamma_max`` omitted, the cutoff comes from the records' device
    label via ``PLATEAU_GAMMA_MAX`` (the records must then agree on the
    device).  Raises if no record falls inside the cutoff.
    """
    if gamma_max is None:
        labels = {rec.device for rec in records}
        if len(labels) != 1:
            raise AnalysisError(f"gamma_max not given and device labels mixed: {sorted(labels)}")
        label = labels.pop()
        if label not in PLATEAU_GAMMA_MAX:
            raise AnalysisError(f"no default plateau cutoff for device {label!r}")
        gamma_max = PLATEAU_GAMMA_MAX[label]
    inside = [(g, c, s) for g, c, s in _pool_by_gamma(records) if g <= gamma_max]
    if not inside:
        raise AnalysisError(f"no records with gamma_star <= {gamma_max}")
    return max(c[2] / s for _, c, s in inside)


def exit_threshold(records: "Sequence[ExperimentRecord]") -> float:
    """gamma_star at which P_Start first drops below 0.5.

    Scans pooled points in ascending gamma_star and linearly interpolates
    between the first bracketing pair (P >= 0.5 followed by P < 0.5).
    Raises when the sweep does not span the transition.
    """
    pooled = _pool_by_gamma(records)
    if len(pooled) < 2:
        raise AnalysisError("need >= 2 distinct gamma_star values")
    gs = np.array([g for g, _, _ in pooled])
    ps = np.array([c[0] / s for _, c, s in pooled])
    if ps[0] < 0.5:
        raise AnalysisError(
            f"P_Start = {ps[0]:.3f} already below 0.5 at the smallest gamma_star")
    below = np.nonzero(ps < 0.5)[0]
    if below.size == 0:
        raise AnalysisError("P_Start never drops below 0.5 in this sweep")
    i = int(below[0])
    g0, g1, p0, p1 = gs[i - 1], gs[i], ps[i - 1], ps[i]
    return float(g0 + (0.5 - p0) * (g1 - g0) / (p1 - p0))


# ---------------------------------------------------------------------------
# persistence


def write_records_csv(records: "Sequence[ExperimentRecord]", path,
                      header_lines: "Sequence[str]" = ()) -> None:
    """Write records as CSV; ``header_lines`` become leading '#' comments."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            d = rec.to_json_dict()
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c]
                        for c in CSV_COLUMNS])


def read_records_csv(path) -> "list[ExperimentRecord]":
    """Read a records CSV (skipping '#' comment lines), checking the header."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh)
                if r and not r[0].lstrip().startswith("#")]
    if not rows or tuple(h.strip() for h in rows[0]) != CSV_COLUMNS:
        raise AnalysisError(
            f"expected header {','.join(CSV_COLUMNS)}, got {rows[0] if rows else 'empty file'}")
    return [ExperimentRecord.from_json_dict(dict(zip(CSV_COLUMNS, row)))
            for row in rows[1:]]


def write_records_jsonl(records: "Sequence[ExperimentRecord]", path,
                        append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")


def read_records_jsonl(path) -> "list[ExperimentRecord]":
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ExperimentRecord.from_json_dict(json.loads(line)))
    return out
