"""Empirical-Bayes edge inference over a field of per-pair Wald statistics.

Each observed statistic is modelled as Gaussian noise (unit variance) around
a mean that is zero for non-edges and nonzero for edges; the nonzero means
carry a spike-and-Laplace mixture prior. Per-node prior weights are fitted
by marginal maximum likelihood, nonzero means are estimated by the posterior
median (which thresholds exactly to zero for small statistics), and an edge
is kept only when the two node-wise median estimates agree in sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import ValidationError
from .validation import pair_block, pair_count, pair_to_index

DEFAULT_LAPLACE_SCALE = 0.5
# Noise variance of the Wald statistics; fixed by their asymptotic behaviour.
_SIGMA2 = 1.0

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _log_phi(z):
    return -0.5 * np.square(z) - _LOG_SQRT_2PI


def _log_g_pieces(z, a):
    """Log of the two half-line contributions to the Laplace-normal convolution."""
    base = np.log(a / 2.0) + 0.5 * a * a
    lp_pos = base - a * z + log_ndtr(z - a)
    lp_neg = base + a * z + log_ndtr(-z - a)
    return lp_pos, lp_neg


def log_marginal_nonnull(z, a: float = DEFAULT_LAPLACE_SCALE):
    """log g(z) where g is the Laplace(a) prior convolved with unit Gaussian noise."""
    lp_pos, lp_neg = _log_g_pieces(np.asarray(z, dtype=float), a)
    return np.logaddexp(lp_pos, lp_neg)


def laplace_gauss_marginal(z, a: float = DEFAULT_LAPLACE_SCALE):
    """Density of an observation whose mean is Laplace(a) and noise is N(0,1).

    Evaluated through complementary-normal log forms, so it stays finite and
    accurate for |z| well beyond 40.
    """
    if a <= 0:
        raise ValidationError(f"Laplace scale must be positive, got {a}")
    out = np.exp(log_marginal_nonnull(z, a))
    return float(out) if np.isscalar(z) else out


def _posterior_pieces(zabs, w, a):
    """For z >= 0: P(mean nonzero | z) and the negative-side share of the
    continuous posterior. Vectorized over zabs/w."""
    zabs = np.asarray(zabs, dtype=float)
    w = np.asarray(w, dtype=float)
    lg = log_marginal_nonnull(zabs, a)
    lphi = _log_phi(zabs)
    with np.errstate(divide="ignore"):
        log_null = np.where(w < 1.0, np.log1p(-np.minimum(w, 1.0 - 1e-300)) + lphi, -np.inf)
        log_nonnull = np.where(w > 0.0, np.log(np.maximum(w, 1e-300)) + lg, -np.inf)
    # omega = w g / (w g + (1-w) phi), computed as a logistic for stability
    omega = 1.0 / (1.0 + np.exp(np.clip(log_null - log_nonnull, -745.0, 745.0)))
    lp_pos, lp_neg = _log_g_pieces(zabs, a)
    q_neg = np.exp(lp_neg - np.logaddexp(lp_pos, lp_neg))
    return omega, q_neg


def posterior_median(z, w, a: float = DEFAULT_LAPLACE_SCALE):
    """Posterior median of the mean given statistic z and prior weight w.

    The posterior mixes an atom at zero with a two-piece truncated-normal
    continuous part; the median is exactly zero whenever |z| is below the
    weight-dependent threshold, and is antisymmetric in z.
    """
    if a <= 0:
        raise ValidationError(f"Laplace scale must be positive, got {a}")
    scalar = np.isscalar(z) and np.isscalar(w)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    w = np.broadcast_to(np.asarray(w, dtype=float), z.shape).copy()
    if np.any((w <= 0.0) | (w > 1.0)):
        raise ValidationError("prior weight w must lie in (0, 1]")

    sign = np.sign(z)
    zabs = np.abs(z)
    omega, q_neg = _posterior_pieces(zabs, w, a)

    # P(mean <= 0 | z) for z >= 0; median is 0 unless this falls below 1/2.
    p_le0 = (1.0 - omega) + omega * q_neg
    med = np.zeros_like(zabs)
    solve = p_le0 < 0.5
    if np.any(solve):
        zs = zabs[solve]
        om = omega[solve]
        qn = q_neg[solve]
        q_pos_mass = om * (1.0 - qn)  # > 1/2 on this branch
        lo_cdf = ndtr(a - zs)
        span = ndtr(zs - a)
        target = lo_cdf + span * (0.5 - (1.0 - om) - om * qn) / q_pos_mass
        target = np.clip(target, 1e-300, 1.0 - 1e-16)
        med[solve] = zs - a + ndtri(target)
    med *= sign
    return float(med[0]) if scalar else med.reshape(np.shape(z))


def _median_is_zero(zabs: float, w: float, a: float) -> bool:
    omega, q_neg = _posterior_pieces(zabs, w, a)
    return float((1.0 - omega) + omega * q_neg) >= 0.5


def threshold_from_weight(w: float, a: float = DEFAULT_LAPLACE_SCALE) -> float:
    """t(w): the posterior median is exactly 0 for |z| <= t(w)."""
    if not 0.0 < w <= 1.0:
        raise ValidationError("prior weight w must lie in (0, 1]")
    if not _median_is_zero(1e-12, w, a):
        return 0.0
    hi = 1.0
    while _median_is_zero(hi, w, a):
        hi *= 2.0
        if hi > 1e6:  # pragma: no cover - w below any representable weight
            return np.inf
    lo = hi / 2.0 if hi > 1.0 else 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _median_is_zero(mid, w, a):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def weight_from_threshold(t: float, a: float = DEFAULT_LAPLACE_SCALE) -> float:
    """Inverse of threshold_from_weight: the w whose zero region ends at t."""
    if t <= 0.0:
        return 1.0
    # P(mean <= 0 | z=t) - 1/2 decreases in w; bisect on log(w).
    lo, hi = np.log(1e-280), 0.0
    if _median_is_zero(t, 1.0, a):  # pragma: no cover - t below t(1) ~ 0
        return 1.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if _median_is_zero(t, float(np.exp(mid)), a):
            lo = mid  # still inside the zero region: w too small
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return float(np.exp(0.5 * (lo + hi)))


def universal_weight_floor(n_statistics: int, a: float = DEFAULT_LAPLACE_SCALE) -> float:
    """Weight floor whose threshold equals sqrt(2 log N) for N statistics."""
    if n_statistics < 2:
        raise ValidationError("need at least 2 statistics for a weight floor")
    return weight_from_threshold(float(np.sqrt(2.0 * np.log(n_statistics))), a)


def marginal_loglik(z_row, w: float, a: float = DEFAULT_LAPLACE_SCALE) -> float:
    """Sum of log[(1-w) phi(z) + w g(z)] over the row."""
    z_row = np.asarray(z_row, dtype=float)
    lphi = _log_phi(z_row)
    lg = log_marginal_nonnull(z_row, a)
    if w >= 1.0:
        return float(np.sum(lg))
    if w <= 0.0:
        return float(np.sum(lphi))
    return float(np.sum(np.logaddexp(np.log1p(-w) + lphi, np.log(w) + lg)))


@dataclass(frozen=True)
class NodeWeight:
    """Fitted prior weight for one node's row of pair statistics."""

    node: int
    w: float
    loglik: float
    w_min: float


def estimate_node_weight(
    node: int,
    z_row,
    a: float = DEFAULT_LAPLACE_SCALE,
    w_min: float | None = None,
) -> NodeWeight:
    """Maximize the row marginal likelihood over w in [w_min, 1].

    The objective is concave in w, so the derivative-sign bisection is exact.
    When w_min is None it is set so the posterior-median threshold at the
    floor equals sqrt(2 log N) with N the row length.
    """
    z_row = np.asarray(z_row, dtype=float)
    if z_row.size == 0:
        raise ValidationError(f"node {node}: empty statistic row")
    if w_min is None:
        if z_row.size < 2:
            raise ValidationError(f"node {node}: need >= 2 statistics to set the weight floor")
        w_min = universal_weight_floor(z_row.size, a)

    phi = np.exp(_log_phi(z_row))
    g = np.exp(log_marginal_nonnull(z_row, a))

    def deriv(w: float) -> float:
        denom = (1.0 - w) * phi + w * g
        ok = denom > 0.0
        terms = np.where(ok, (g - phi) / np.where(ok, denom, 1.0), 1.0 / w)
        return float(np.sum(terms))

    lo, hi = float(w_min), 1.0
    if deriv(lo) <= 0.0:
        w_hat = lo
    elif deriv(hi) >= 0.0:
        w_hat = hi
    else:
        while hi - lo > 1e-7:
            mid = 0.5 * (lo + hi)
            if deriv(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        w_hat = 0.5 * (lo + hi)
    return NodeWeight(node=node, w=w_hat, loglik=marginal_loglik(z_row, w_hat, a), w_min=float(w_min))


@dataclass
class WaldField:
    """Per-pair Wald statistics and log hazard ratios for all m-choose-2 pairs.

    Pairs are stored flat in lexicographic (i < j) order. Pairs whose fit did
    not converge carry z = 0, theta = 0 and converged = False.
    """

    m: int
    z: np.ndarray
    theta: np.ndarray
    converged: np.ndarray
    genes: list[str] | None = None

    def __post_init__(self):
        n = pair_count(self.m)
        self.z = np.asarray(self.z, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.converged = np.asarray(self.converged, dtype=bool)
        for name, arr in (("z", self.z), ("theta", self.theta), ("converged", self.converged)):
            if arr.shape != (n,):
                raise ValidationError(f"WaldField.{name} must have shape ({n},), got {arr.shape}")
        bad = ~self.converged
        if np.any(self.z[bad] != 0.0) or np.any(self.theta[bad] != 0.0):
            raise ValidationError("nonconverged pairs must carry z = 0 and theta = 0")

    def z_row(self, i: int) -> np.ndarray:
        """All z_ij for fixed i (row length m - 1)."""
        idx = [pair_to_index(min(i, j), max(i, j), self.m) for j in range(self.m) if j != i]
        return self.z[np.asarray(idx, dtype=np.int64)]


@dataclass
class PrognosticNetwork:
    """Sparse symmetric adjacency with per-edge statistics and medians."""

    m: int
    edges: np.ndarray  # (n_edges, 2) int, i < j, sorted lexicographically
    theta: np.ndarray
    z: np.ndarray
    mu_ij: np.ndarray
    mu_ji: np.ndarray
    genes: list[str] | None = None
    node_weights: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def density(self) -> float:
        npairs = pair_count(self.m)
        return self.n_edges / npairs if npairs else 0.0

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.m, dtype=np.int64)
        for col in (0, 1):
            np.add.at(deg, self.edges[:, col], 1)
        return deg


def estimate_all_node_weights(
    field: WaldField,
    a: float = DEFAULT_LAPLACE_SCALE,
    w_min: float | None = None,
) -> list[NodeWeight]:
    """Fit one prior weight per node from its row of the field.

    By default the weight floor is shared across nodes and tied to the total
    number of pair statistics in the field (the quantity actually screened
    for edges), which keeps the false-edge rate at the universal-threshold
    level of the whole field rather than of a single row.
    """
    if w_min is None:
        w_min = universal_weight_floor(pair_count(field.m), a)
    return [estimate_node_weight(i, field.z_row(i), a, w_min) for i in range(field.m)]


def build_adjacency(
    field: WaldField,
    weights: list[NodeWeight],
    a: float = DEFAULT_LAPLACE_SCALE,
    chunk: int = 1_000_000,
) -> PrognosticNetwork:
    """Conservative adjacency: keep (i, j) only when the posterior medians
    under both node weights are nonzero and share a sign."""
    if len(weights) != field.m:
        raise ValidationError(f"need {field.m} node weights, got {len(weights)}")
    w = np.empty(field.m, dtype=float)
    for nw in weights:
        w[nw.node] = nw.w

    n = pair_count(field.m)
    keep_idx: list[np.ndarray] = []
    mu_i_parts: list[np.ndarray] = []
    mu_j_parts: list[np.ndarray] = []
    ii_parts: list[np.ndarray] = []
    jj_parts: list[np.ndarray] = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        ii, jj = pair_block(start, stop, field.m)
        z = field.z[start:stop]
        mu_i = posterior_median(z, w[ii], a)
        mu_j = posterior_median(z, w[jj], a)
        keep = ((mu_i > 0) & (mu_j > 0)) | ((mu_i < 0) & (mu_j < 0))
        sel = np.flatnonzero(keep)
        keep_idx.append(sel + start)
        mu_i_parts.append(mu_i[sel])
        mu_j_parts.append(mu_j[sel])
        ii_parts.append(ii[sel])
        jj_parts.append(jj[sel])

    idx = np.concatenate(keep_idx) if keep_idx else np.empty(0, dtype=np.int64)
    edges = np.stack(
        [np.concatenate(ii_parts), np.concatenate(jj_parts)], axis=1
    ) if idx.size else np.empty((0, 2), dtype=np.int64)
    return PrognosticNetwork(
        m=field.m,
        edges=edges,
        theta=field.theta[idx],
        z=field.z[idx],
        mu_ij=np.concatenate(mu_i_parts) if idx.size else np.empty(0),
        mu_ji=np.concatenate(mu_j_parts) if idx.size else np.empty(0),
        genes=field.genes,
        node_weights=w,
    )
