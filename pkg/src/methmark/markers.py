"""Community markers: per-patient scores, prognostic groups and validation.

A marker is one detected community together with its within-community edges
and their fitted log hazard ratios. The per-patient score is the
theta-weighted sum of the patient's pair interaction values over those
edges; patients split into better/worse groups at the training-median score,
and held-out samples are classified one at a time with the stored threshold
(no test-cohort statistics are ever consulted).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _stats
from scipy.special import ndtr

from .data import AlignedStudy, ExpressionMatrix, HEALTHY
from .ebayes import PrognosticNetwork
from .errors import ValidationError
from .interaction import HealthyReference
from .community import CommunityAssignment
from .survival import CoxFit, KMCurve, SurvivalData, cox_fit, km_estimate, logrank_test

BETTER = "better"
WORSE = "worse"

MULTIVARIATE_TERMS = ("score", "age", "residual_disease", "stage")


@dataclass
class MarkerModel:
    """One community's edge set, fitted thetas and training threshold."""

    community: int
    edges: list[tuple[str, str]]
    theta: np.ndarray
    genes: list[str]
    threshold: float | None = None
    n_train: int | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (len(self.edges),):
            raise ValidationError("theta must align with the marker's edges")
        members = set(self.genes)
        for gx, gy in self.edges:
            if gx not in members or gy not in members:
                raise ValidationError(f"edge ({gx}, {gy}) leaves the community")

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def build_marker_models(network: PrognosticNetwork, assignment: CommunityAssignment) -> list[MarkerModel]:
    """One marker per block, holding the network edges internal to it."""
    if assignment.node_ids is None:
        raise ValidationError("assignment must carry gene ids")
    gene_block = {g: int(b) for g, b in zip(assignment.node_ids, assignment.labels)}
    genes = network.genes
    if genes is None:
        raise ValidationError("network must carry gene ids")
    models = []
    for block in range(1, assignment.n_blocks + 1):
        members = [g for g in assignment.node_ids if gene_block[g] == block]
        member_set = set(members)
        edges, theta = [], []
        for (i, j), th in zip(network.edges, network.theta):
            gi, gj = genes[i], genes[j]
            if gi in member_set and gj in member_set:
                edges.append((gi, gj))
                theta.append(th)
        models.append(MarkerModel(community=block, edges=edges, theta=np.array(theta), genes=members))
    return models


def prognostic_score(model: MarkerModel, rho_values) -> float:
    """Sum of theta_ij * rho_ij(k) over the marker's edges.

    rho_values is either an array aligned with model.edges or a mapping
    keyed by (gene_i, gene_j) in either orientation.
    """
    if isinstance(rho_values, dict):
        vals = []
        for gx, gy in model.edges:
            if (gx, gy) in rho_values:
                vals.append(rho_values[(gx, gy)])
            elif (gy, gx) in rho_values:
                vals.append(rho_values[(gy, gx)])
            else:
                raise ValidationError(f"missing interaction value for edge ({gx}, {gy})")
        rho = np.array(vals, dtype=float)
    else:
        rho = np.asarray(rho_values, dtype=float)
        if rho.shape != (model.n_edges,):
            raise ValidationError(
                f"expected {model.n_edges} interaction values, got shape {rho.shape}"
            )
    return float(model.theta @ rho) if model.n_edges else 0.0


def marker_scores(
    model: MarkerModel, reference: HealthyReference, study: AlignedStudy, sample_ids: list[str]
) -> np.ndarray:
    """Scores for a roster of samples, vectorized over the marker's edges."""
    if model.n_edges == 0:
        return np.zeros(len(sample_ids))
    positions = {s: i for i, s in enumerate(study.methylation.sample_ids)}
    sample_idx = np.array([positions[s] for s in sample_ids], dtype=int)
    scores = reference.projection_scores(study.methylation, sample_idx)
    ii = np.array([reference.gene_index(gx) for gx, _ in model.edges], dtype=int)
    jj = np.array([reference.gene_index(gy) for _, gy in model.edges], dtype=int)
    rho, _ = reference.rho_block(scores, ii, jj)  # (n_edges, n_samples)
    return model.theta @ rho


def train_threshold(model: MarkerModel, training_scores) -> float:
    scores = np.asarray(training_scores, dtype=float)
    if scores.size < 2:
        raise ValidationError("need at least 2 training scores")
    model.threshold = float(np.median(scores))
    model.n_train = int(scores.size)
    return model.threshold


def classify(model: MarkerModel, score: float) -> str:
    """worse iff score > threshold; a score equal to the threshold is better."""
    if model.threshold is None:
        raise ValidationError("threshold not trained")
    return WORSE if score > model.threshold else BETTER


@dataclass(frozen=True)
class CoxTerm:
    term: str
    hr: float
    ci_lo: float
    ci_hi: float
    p: float

    @staticmethod
    def from_fit(fit: CoxFit, index: int, term: str) -> "CoxTerm":
        beta = float(fit.beta[index])
        se = float(np.sqrt(max(fit.cov[index, index], 0.0)))
        z = beta / se if se > 0 else 0.0
        return CoxTerm(
            term=term,
            hr=float(np.exp(beta)),
            ci_lo=float(np.exp(beta - 1.96 * se)),
            ci_hi=float(np.exp(beta + 1.96 * se)),
            p=float(2.0 * ndtr(-abs(z))),
        )


@dataclass
class MarkerValidation:
    """Validation of one marker on one cohort."""

    community: int
    cohort: str
    n: int
    evaluable: bool
    reason: str = ""
    univariate: CoxTerm | None = None
    multivariate: list[CoxTerm] = field(default_factory=list)
    n_multivariate: int = 0
    logrank_p: float | None = None
    km_curves: dict[str, KMCurve] = field(default_factory=dict)
    scores: np.ndarray | None = None
    groups: list[str] | None = None


def validate_marker(
    model: MarkerModel,
    study: AlignedStudy,
    reference: HealthyReference,
    cohort: str,
) -> MarkerValidation:
    """Univariate Cox on the binary group, multivariate Cox on the continuous
    score plus clinical covariates (incomplete-covariate samples dropped from
    the multivariate fit only), KM curves and a log-rank test."""
    sample_ids = study.tumour_ids(cohort)
    scores = marker_scores(model, reference, study, sample_ids)
    groups = [classify(model, s) for s in scores]
    result = MarkerValidation(
        community=model.community,
        cohort=cohort,
        n=len(sample_ids),
        evaluable=True,
        scores=scores,
        groups=groups,
    )
    worse = np.array([g == WORSE for g in groups], dtype=float)
    if worse.sum() in (0, len(groups)):
        result.evaluable = False
        result.reason = "all samples fall into one prognostic group"
        return result

    time, event, covs = study.survival_arrays(sample_ids)
    if event.sum() == 0:
        result.evaluable = False
        result.reason = "no observed events in cohort"
        return result

    try:
        uni = cox_fit(SurvivalData(time, event, worse[:, None], names=["group"]))
        result.univariate = CoxTerm.from_fit(uni, 0, "group")
    except ValidationError as exc:
        result.evaluable = False
        result.reason = f"univariate fit failed: {exc}"
        return result

    mask = np.array([s not in study.incomplete_covariates for s in sample_ids])
    # covariates arrive as (age, stage, residual_disease); report order is
    # score, age, residual_disease, stage
    X = np.column_stack([scores, covs[:, 0], covs[:, 2], covs[:, 1]])[mask]
    try:
        multi = cox_fit(
            SurvivalData(time[mask], event[mask], X, names=list(MULTIVARIATE_TERMS))
        )
        result.multivariate = [
            CoxTerm.from_fit(multi, i, name) for i, name in enumerate(MULTIVARIATE_TERMS)
        ]
        result.n_multivariate = int(mask.sum())
    except ValidationError:
        result.multivariate = []
        result.n_multivariate = int(mask.sum())

    lr = logrank_test(time, event, worse.astype(int))
    result.logrank_p = lr.p_value
    result.km_curves = {
        BETTER: km_estimate(time, event, worse == 0),
        WORSE: km_estimate(time, event, worse == 1),
    }
    return result


def rank_markers(reports: list[MarkerValidation]) -> list[MarkerValidation]:
    """Reporting order: test-set univariate p ascending, not-evaluable last."""
    def key(r: MarkerValidation):
        p = r.univariate.p if (r.evaluable and r.univariate) else np.inf
        return (not r.evaluable, p, r.community)

    return sorted(reports, key=key)


# ---------------------------------------------------------------------------
# Expression concordance


class ExpressionReference:
    """Healthy mean and standard deviation (1/n_h normalizer) per gene."""

    def fit(self, expr: ExpressionMatrix) -> "ExpressionReference":
        healthy = [i for i, c in enumerate(expr.cohort) if c == HEALTHY]
        if len(healthy) < 2:
            raise ValidationError("need >= 2 healthy expression samples")
        vals = expr.values[:, healthy]
        if np.isnan(vals).any():
            raise ValidationError("healthy expression values must be complete")
        self.genes_ = list(expr.genes)
        self.mu_ = vals.mean(axis=1)
        self.sd_ = np.sqrt(np.mean((vals - self.mu_[:, None]) ** 2, axis=1))
        self.n_h_ = len(healthy)
        self._index = {g: i for i, g in enumerate(self.genes_)}
        return self

    def standardize(self, gene: str, value: float) -> tuple[float, bool]:
        i = self._index.get(gene)
        if i is None:
            raise ValidationError(f"unknown gene {gene!r} in expression reference")
        if self.sd_[i] <= 0.0:
            return 0.0, True
        return float((value - self.mu_[i]) / self.sd_[i]), False


def expression_interaction(
    xe: float, ye: float, stats_x: tuple[float, float], stats_y: tuple[float, float]
) -> tuple[float, bool]:
    """Product of the two genes' standardized healthy-relative deviations.

    Returns (value, degenerate); a zero healthy standard deviation flags the
    value degenerate and pins it at 0.
    """
    mu_x, sd_x = stats_x
    mu_y, sd_y = stats_y
    if sd_x <= 0.0 or sd_y <= 0.0:
        return 0.0, True
    return float((xe - mu_x) / sd_x * (ye - mu_y) / sd_y), False


@dataclass(frozen=True)
class ConcordanceEntry:
    gene_i: str
    gene_j: str
    pearson_r: float
    pearson_p: float
    spearman_r: float
    spearman_p: float
    n: int
    evaluable: bool = True
    reason: str = ""


def concordance_test(edge: tuple[str, str], rho_series, rho_expr_series) -> ConcordanceEntry:
    """Pearson correlation (two-sided t test, df = n-2) between the
    methylation and expression interaction series, Spearman alongside."""
    rho = np.asarray(rho_series, dtype=float)
    rho_expr = np.asarray(rho_expr_series, dtype=float)
    if rho.shape != rho_expr.shape:
        raise ValidationError("series length mismatch")
    n = rho.size
    if n < 10:
        raise ValidationError(f"need >= 10 shared samples, got {n}")
    gi, gj = edge
    if np.ptp(rho) == 0.0 or np.ptp(rho_expr) == 0.0:
        return ConcordanceEntry(gi, gj, np.nan, np.nan, np.nan, np.nan, n, False, "constant series")
    pr = _stats.pearsonr(rho, rho_expr)
    sr = _stats.spearmanr(rho, rho_expr)
    return ConcordanceEntry(
        gi, gj, float(pr.statistic), float(pr.pvalue), float(sr.statistic), float(sr.pvalue), n
    )
