"""Cox proportional-hazards fitting, Kaplan-Meier curves and log-rank tests.

The Cox fitter maximizes the partial likelihood with Efron handling of tied
event times, by damped Newton iterations (step-halving on any likelihood
decrease). It is pure: no shared mutable state, so arbitrarily many fits may
run concurrently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2 as _chi2

from .errors import ConvergenceError, ValidationError
from .validation import check_matrix, check_survival_arrays

MAX_ITER = 50
MAX_HALVINGS = 20
GRAD_TOL = 1e-9  # on max|score|/n
LOGLIK_RTOL = 1e-12
SEPARATION_BETA = 50.0
SEPARATION_Z = 100.0


@dataclass
class SurvivalData:
    """Event-time outcomes with a covariate matrix (predictor of interest first)."""

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray  # (n, d)
    names: list[str] | None = None

    def __post_init__(self):
        self.time, self.event = check_survival_arrays(self.time, self.event)
        self.covariates = check_matrix(self.covariates, "covariates")
        if self.covariates.shape[0] != self.time.shape[0]:
            raise ValidationError("covariate rows must match the number of subjects")
        if np.isnan(self.covariates).any():
            raise ValidationError("covariates must be complete; drop incomplete rows first")

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def n_events(self) -> int:
        return int(self.event.sum())


@dataclass
class CoxFit:
    beta: np.ndarray
    cov: np.ndarray
    z: np.ndarray
    loglik: float
    n: int
    n_events: int
    converged: bool
    n_iter: int
    names: list[str] | None = None


class CoxPartialLikelihood:
    """Efron partial likelihood with analytic gradient and information.

    Subjects are sorted by time once; risk-set aggregates are suffix sums
    over the sorted order, grouped by unique event times.
    """

    def __init__(self, data: SurvivalData):
        if data.n_events < 1:
            raise ValidationError("need at least one observed event")
        spread = data.covariates.max(axis=0) - data.covariates.min(axis=0)
        for j in np.flatnonzero(spread == 0.0):
            name = data.names[j] if data.names else f"column {j}"
            raise ValidationError(f"constant covariate: {name}")

        order = np.argsort(data.time, kind="stable")
        self.time = data.time[order]
        self.event = data.event[order]
        self.x = data.covariates[order]
        self.n, self.d = self.x.shape

        # Unique event times, each with its risk-set start (suffix) and the
        # indices of tied deaths. Singleton groups (no ties) take a fully
        # vectorized path; tied groups loop over the Efron fractions.
        self.event_groups: list[tuple[int, np.ndarray]] = []
        utimes = np.unique(self.time[self.event == 1])
        starts = np.searchsorted(self.time, utimes, side="left")
        for t, start in zip(utimes, starts):
            in_group = (self.time == t) & (self.event == 1)
            self.event_groups.append((int(start), np.flatnonzero(in_group)))
        self._single_starts = np.array(
            [s for s, d in self.event_groups if len(d) == 1], dtype=np.int64
        )
        self._single_deaths = np.array(
            [d[0] for _, d in self.event_groups if len(d) == 1], dtype=np.int64
        )
        self._tied_groups = [(s, d) for s, d in self.event_groups if len(d) > 1]

    def _aggregates(self, beta: np.ndarray):
        eta = self.x @ beta
        eta = eta - eta.max()
        w = np.exp(eta)
        wx = w[:, None] * self.x
        wxx = wx[:, :, None] * self.x[:, None, :]
        # suffix sums: S*[i] aggregates subjects i..n-1 (time >= time[i])
        s0 = np.cumsum(w[::-1])[::-1]
        s1 = np.cumsum(wx[::-1], axis=0)[::-1]
        s2 = np.cumsum(wxx[::-1], axis=0)[::-1]
        return eta, w, wx, wxx, s0, s1, s2

    def loglik(self, beta) -> float:
        """Efron partial log-likelihood; beta may be a (d,) vector or a
        (d, B) matrix of candidate vectors evaluated in one sweep."""
        beta = np.asarray(beta, dtype=float)
        batched = beta.ndim == 2
        eta = self.x @ beta  # (n,) or (n, B)
        eta = eta - eta.max(axis=0)
        w = np.exp(eta)
        s0 = np.cumsum(w[::-1], axis=0)[::-1]
        ll = eta[self._single_deaths].sum(axis=0) - np.log(s0[self._single_starts]).sum(axis=0)
        for start, deaths in self._tied_groups:
            m = len(deaths)
            frac = (np.arange(m) / m)[:, None] if batched else np.arange(m) / m
            s0f = w[deaths].sum(axis=0)
            ll = ll + eta[deaths].sum(axis=0) - np.log(s0[start] - frac * s0f).sum(axis=0)
        return ll if batched else float(ll)

    def loglik_grad_info(self, beta: np.ndarray):
        beta = np.asarray(beta, dtype=float)
        eta, w, wx, wxx, s0, s1, s2 = self._aggregates(beta)
        ll = 0.0
        grad = np.zeros(self.d)
        info = np.zeros((self.d, self.d))
        if self._single_starts.size:
            st, de = self._single_starts, self._single_deaths
            s0g = s0[st]  # (g,)
            ratio = s1[st] / s0g[:, None]  # (g, d)
            ll += eta[de].sum() - np.log(s0g).sum()
            grad += self.x[de].sum(axis=0) - ratio.sum(axis=0)
            info += (s2[st] / s0g[:, None, None]).sum(axis=0)
            info -= np.einsum("li,lj->ij", ratio, ratio)
        for start, deaths in self._tied_groups:
            m = len(deaths)
            frac = np.arange(m) / m
            s0f = w[deaths].sum()
            s1f = wx[deaths].sum(axis=0)
            s2f = wxx[deaths].sum(axis=0)
            denom = s0[start] - frac * s0f  # (m,)
            num = s1[start][None, :] - frac[:, None] * s1f[None, :]  # (m, d)
            ratio = num / denom[:, None]
            ll += eta[deaths].sum() - np.log(denom).sum()
            grad += self.x[deaths].sum(axis=0) - ratio.sum(axis=0)
            s2_l = s2[start][None, :, :] - frac[:, None, None] * s2f[None, :, :]
            info += (s2_l / denom[:, None, None]).sum(axis=0)
            info -= np.einsum("li,lj->ij", ratio, ratio)
        return float(ll), grad, info

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        return self.loglik_grad_info(beta)[1]


def cox_fit(data: SurvivalData) -> CoxFit:
    """Maximize the Efron partial likelihood by damped Newton iterations.

    Converged when max|score|/n < 1e-9 or the relative log-likelihood change
    drops below 1e-12. Monotone-likelihood fits (any |beta| beyond 50 while
    the likelihood still climbs) are flagged nonconverged and their Wald
    statistics reported as sign(beta) times a cap.
    """
    pl = CoxPartialLikelihood(data)
    beta = np.zeros(pl.d)
    ll, grad, info = pl.loglik_grad_info(beta)
    converged = False
    separated = False
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        new_beta = beta + step
        new_ll, new_grad, new_info = pl.loglik_grad_info(new_beta)
        halvings = 0
        while new_ll < ll and halvings < MAX_HALVINGS:
            step *= 0.5
            halvings += 1
            new_beta = beta + step
            new_ll, new_grad, new_info = pl.loglik_grad_info(new_beta)
        if new_ll < ll:
            # Step-halving exhausted without improvement: keep the last point.
            converged = np.max(np.abs(grad)) / pl.n < GRAD_TOL
            break
        beta, grad, info = new_beta, new_grad, new_info
        if np.any(np.abs(beta) > SEPARATION_BETA):
            separated = True
            ll = new_ll
            break
        rel_change = abs(new_ll - ll) / max(abs(ll), 1.0)
        ll = new_ll
        if np.max(np.abs(grad)) / pl.n < GRAD_TOL or rel_change < LOGLIK_RTOL:
            converged = True
            break

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    if separated:
        capped = np.abs(beta) > SEPARATION_BETA
        z = np.where(capped, np.sign(beta) * SEPARATION_Z, z)
        converged = False
    return CoxFit(
        beta=beta,
        cov=cov,
        z=z,
        loglik=float(ll),
        n=pl.n,
        n_events=int(pl.event.sum()),
        converged=converged,
        n_iter=n_iter,
        names=data.names,
    )


def wald_statistic(fit: CoxFit, index: int = 0) -> float:
    if not fit.converged:
        raise ConvergenceError("Wald statistic requested from a nonconverged fit")
    return float(fit.z[index])


def cox_pvalue(z: float) -> float:
    """Two-sided normal p-value of a Wald statistic."""
    return float(2.0 * ndtr(-abs(z)))


@dataclass
class KMCurve:
    """Product-limit estimate: survival after each distinct event time."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        s = self.survival
        if s.size and (np.any(s > 1.0 + 1e-12) or np.any(s < -1e-12) or np.any(np.diff(s) > 1e-12)):
            raise ValidationError("survival curve must be non-increasing within [0, 1]")


def km_estimate(times, events, mask=None) -> KMCurve:
    """Kaplan-Meier curve; censored-only times shrink the risk set silently."""
    times, events = check_survival_arrays(times, events)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        times, events = times[mask], events[mask]
    if times.size == 0:
        raise ValidationError("group is empty")
    utimes = np.unique(times[events == 1])
    at_risk = np.empty(utimes.size, dtype=int)
    deaths = np.empty(utimes.size, dtype=int)
    surv = np.empty(utimes.size)
    s = 1.0
    for r, t in enumerate(utimes):
        at_risk[r] = int((times >= t).sum())
        deaths[r] = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - deaths[r] / at_risk[r]
        surv[r] = s
    return KMCurve(utimes, surv, at_risk, deaths)


def km_csv_rows(curve: KMCurve, group: str) -> list[list[str]]:
    rows = []
    for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
        rows.append([repr(float(t)), repr(float(s)), str(int(n)), str(int(d)), group])
    return rows


def write_km_csv(path, curves: list[tuple[str, KMCurve]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "survival", "at_risk", "events", "group"])
        for group, curve in curves:
            writer.writerows(km_csv_rows(curve, group))


@dataclass
class LogRankResult:
    statistic: float
    p_value: float


def logrank_test(times, events, groups) -> LogRankResult:
    """Two-group log-rank chi-square (1 df) with hypergeometric variance."""
    times, events = check_survival_arrays(times, events)
    groups = np.asarray(groups, dtype=int)
    if groups.shape != times.shape:
        raise ValidationError("group labels must match the number of subjects")
    if not np.isin(groups, (0, 1)).all():
        raise ValidationError("group labels must be 0 or 1")
    n1 = int((groups == 1).sum())
    if n1 == 0 or n1 == groups.size:
        raise ValidationError("both groups must be non-empty")

    observed = expected = variance = 0.0
    for t in np.unique(times[events == 1]):
        at_risk = times >= t
        n_j = int(at_risk.sum())
        n1_j = int((at_risk & (groups == 1)).sum())
        dead = (times == t) & (events == 1)
        d_j = int(dead.sum())
        d1_j = int((dead & (groups == 1)).sum())
        observed += d1_j
        expected += d_j * n1_j / n_j
        if n_j > 1:
            variance += d_j * (n1_j / n_j) * (1.0 - n1_j / n_j) * (n_j - d_j) / (n_j - 1)
    if variance <= 0.0:
        return LogRankResult(0.0, 1.0)
    stat = (observed - expected) ** 2 / variance
    return LogRankResult(float(stat), float(_chi2.sf(stat, df=1)))
