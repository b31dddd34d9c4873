"""Synthetic cohorts with planted prognostic pairs and planted block structure.

Healthy profiles come from per-gene Gaussian factor models squashed into
[0, 1] by a clamped affine map (the map is affine so the linear covariance
structure the interaction measure relies on survives). Genes joined by
planted edges share a healthy latent factor, so their healthy profiles
covary; tumour samples draw per-gene deviation amplitudes, and the realized
pair interaction values enter an exponential proportional-hazards model as
the log hazard. Everything is drawn from a single seeded stream, so a seed
pins the cohort bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    AlignedStudy,
    ClinicalTable,
    ExpressionMatrix,
    HEALTHY,
    MethylationDataset,
    TUMOUR_TEST,
    TUMOUR_TRAIN,
    align_cohorts,
    write_clinical_csv,
    write_expression_csv,
    write_methylation_csv,
)
from .ebayes import WaldField
from .errors import ValidationError
from .community import SparseGraph
from .interaction import HealthyReference
from .validation import check_probability, check_seed, pair_count, pair_to_index

# Factor-model constants; chosen so planted pairs at effect 1.0 and n ~ 300
# produce Wald statistics well past the edge threshold while null pairs stay
# calibrated.
_SHARED_FACTOR_R = 0.75
_LOCUS_NOISE = 0.6
_TUMOUR_AMPLITUDE = 1.6
_SQUASH_GAIN = 0.09
_SQUASH_CENTER = 0.5


@dataclass
class SynthSpec:
    """Parameters of one synthetic study."""

    m: int
    n_healthy: int
    n_train: int
    n_test: int
    loci_range: tuple[int, int] = (3, 8)
    planted_edges: list[tuple[int, int, float]] = field(default_factory=list)
    baseline_hazard: float = 1e-3
    censoring_rate: float = 0.3
    missing_covariate_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n_healthy < 2 or self.n_train < 1 or self.n_test < 0:
            raise ValidationError("counts must be positive (and >= 2 healthy samples)")
        lo, hi = self.loci_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad loci range {self.loci_range}")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ValidationError("censoring rate must lie in [0, 1)")
        if self.baseline_hazard <= 0:
            raise ValidationError("baseline hazard must be positive")
        check_probability(self.missing_covariate_rate + 1e-12, "missing_covariate_rate")
        self.seed = check_seed(self.seed)
        seen = set()
        for i, j, _ in self.planted_edges:
            if not (0 <= i < self.m and 0 <= j < self.m and i != j):
                raise ValidationError(f"planted edge ({i}, {j}) outside the gene range")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"duplicate planted edge {key}")
            seen.add(key)


def planted_community_spec(
    m: int,
    community_size: int,
    effect: float,
    n_healthy: int,
    n_train: int,
    n_test: int,
    seed: int = 0,
    **kwargs,
) -> SynthSpec:
    """Spec with one fully connected planted community on genes 0..size-1."""
    edges = [
        (i, j, effect) for i in range(community_size) for j in range(i + 1, community_size)
    ]
    return SynthSpec(
        m=m,
        n_healthy=n_healthy,
        n_train=n_train,
        n_test=n_test,
        planted_edges=edges,
        seed=seed,
        **kwargs,
    )


@dataclass
class SynthStudy:
    study: AlignedStudy
    spec: SynthSpec
    gene_names: list[str]
    planted_components: np.ndarray  # per-gene component id; 0 = unplanted
    realized_censoring: dict[str, float]

    def ground_truth(self) -> dict:
        return {
            "planted_edges": [
                {"gene_i": self.gene_names[i], "gene_j": self.gene_names[j], "effect": eff}
                for i, j, eff in self.spec.planted_edges
            ],
            "planted_components": {
                g: int(c) for g, c in zip(self.gene_names, self.planted_components) if c > 0
            },
            "realized_censoring": self.realized_censoring,
            "spec": {
                **{k: v for k, v in asdict(self.spec).items() if k != "planted_edges"},
                "planted_edges": [[i, j, e] for i, j, e in self.spec.planted_edges],
            },
        }


def _planted_components(m: int, edges: list[tuple[int, int, float]]) -> np.ndarray:
    """Connected components of the planted-edge graph; genes in one component
    share a healthy latent factor."""
    parent = np.arange(m)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j, _ in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comp = np.zeros(m, dtype=int)
    root_ids: dict[int, int] = {}
    for g in range(m):
        if not any(g in (i, j) for i, j, _ in edges):
            continue
        r = find(g)
        if r not in root_ids:
            root_ids[r] = len(root_ids) + 1
        comp[g] = root_ids[r]
    return comp


def _squash(raw: np.ndarray) -> np.ndarray:
    return np.clip(_SQUASH_CENTER + _SQUASH_GAIN * raw, 0.0, 1.0)


def generate(spec: SynthSpec) -> SynthStudy:
    """Draw one full study (methylation + clinical + expression) with ground truth."""
    rng = np.random.default_rng(spec.seed)
    m = spec.m
    comp = _planted_components(m, spec.planted_edges)
    n_comp = int(comp.max())

    gene_names = [f"g{i:04d}" for i in range(m)]
    loci_counts = rng.integers(spec.loci_range[0], spec.loci_range[1] + 1, size=m)
    # Unit per-locus loading power: |L|^2 = p, so the factor-to-noise ratio
    # does not swing with the gene's locus count.
    loadings = []
    for p in loci_counts:
        raw = rng.standard_normal(p)
        loadings.append(raw * np.sqrt(p) / np.linalg.norm(raw))

    n_h, n_tr, n_te = spec.n_healthy, spec.n_train, spec.n_test
    n_all = n_h + n_tr + n_te

    # Latent factors: shared per planted component, independent otherwise.
    shared = rng.standard_normal((n_comp + 1, n_all))
    own = rng.standard_normal((m, n_all))
    r = _SHARED_FACTOR_R
    factors = np.where(
        (comp > 0)[:, None], np.sqrt(r) * shared[comp] + np.sqrt(1 - r) * own, own
    )

    # Tumour deviation amplitudes (healthy columns unused). Genes of a
    # planted component deviate coherently: each sample carries a per-
    # component activity level u in [0, 1] and a direction, so the
    # component's pair interactions rise and fall together across samples.
    amplitudes = rng.standard_normal((m, n_all))
    if n_comp:
        activity = rng.random((n_comp + 1, n_all))
        direction = rng.standard_normal((n_comp + 1, n_all))
        planted = comp > 0
        cc = comp[planted]
        amplitudes[planted] = np.sqrt(activity[cc]) * direction[cc] + np.sqrt(
            1.0 - activity[cc]
        ) * amplitudes[planted]
    is_tumour = np.zeros(n_all, dtype=bool)
    is_tumour[n_h:] = True

    blocks = []
    for g in range(m):
        p = loci_counts[g]
        sig = loadings[g][:, None] * factors[g][None, :]
        dev = loadings[g][:, None] * (_TUMOUR_AMPLITUDE * amplitudes[g][None, :])
        raw = np.where(is_tumour[None, :], dev, sig) + _LOCUS_NOISE * rng.standard_normal((p, n_all))
        blocks.append(_squash(raw))

    sample_ids = (
        [f"H{i:04d}" for i in range(n_h)]
        + [f"TR{i:04d}" for i in range(n_tr)]
        + [f"TE{i:04d}" for i in range(n_te)]
    )
    cohort = [HEALTHY] * n_h + [TUMOUR_TRAIN] * n_tr + [TUMOUR_TEST] * n_te
    loci = [[f"g{g:04d}_cg{r:03d}" for r in range(loci_counts[g])] for g in range(m)]
    methylation = MethylationDataset(gene_names, loci, blocks, sample_ids, cohort)

    # Realized interaction values on the planted edges drive the hazard.
    tumour_idx = np.flatnonzero(is_tumour)
    log_hazard = np.zeros(n_tr + n_te)
    if spec.planted_edges:
        ref = HealthyReference().fit(methylation)
        scores = ref.projection_scores(methylation, tumour_idx)
        ii = np.array([min(i, j) for i, j, _ in spec.planted_edges])
        jj = np.array([max(i, j) for i, j, _ in spec.planted_edges])
        rho, _ = ref.rho_block(scores, ii, jj)
        effects = np.array([e for _, _, e in spec.planted_edges])
        log_hazard = effects @ rho

    hazards = spec.baseline_hazard * np.exp(log_hazard)
    event_times = rng.exponential(1.0 / hazards)
    if spec.censoring_rate > 0.0:
        cens_rate = _censoring_rate_for(hazards, spec.censoring_rate)
        censor_times = rng.exponential(1.0 / cens_rate, size=hazards.size)
        times = np.minimum(event_times, censor_times)
        events = (event_times <= censor_times).astype(int)
    else:
        times = event_times
        events = np.ones(hazards.size, dtype=int)

    age = rng.normal(60.0, 10.0, size=hazards.size)
    stage = rng.integers(1, 5, size=hazards.size).astype(float)
    residual = (rng.random(hazards.size) < 0.4).astype(float)
    covs = np.column_stack([age, stage, residual])
    if spec.missing_covariate_rate > 0.0:
        drop = rng.random(covs.shape) < spec.missing_covariate_rate
        covs[drop] = np.nan
    clinical = ClinicalTable(sample_ids[n_h:], times, events, covs)

    # Expression: tied to the same deviation amplitudes so planted pairs show
    # methylation/expression concordance.
    expr_noise = rng.standard_normal((m, n_all))
    expr_base = rng.normal(8.0, 1.0, size=m)
    expr_vals = expr_base[:, None] + np.where(
        is_tumour[None, :], 1.2 * amplitudes, 0.8 * factors
    ) + 0.5 * expr_noise
    expression = ExpressionMatrix(gene_names, list(sample_ids), expr_vals, list(cohort))

    study = align_cohorts(methylation, clinical, expression)
    realized = {
        "train": float(1.0 - events[:n_tr].mean()) if n_tr else 0.0,
        "test": float(1.0 - events[n_tr:].mean()) if n_te else 0.0,
    }
    return SynthStudy(study, spec, gene_names, comp, realized)


def _censoring_rate_for(hazards: np.ndarray, target: float) -> float:
    """Exponential censoring rate whose expected censored fraction is target.

    With subject hazard L and censoring rate c the censoring probability is
    c / (c + L); solve mean over subjects = target by bisection.
    """
    lo, hi = 1e-12, float(hazards.max()) * 1e6

    def frac(c):
        return float(np.mean(c / (c + hazards)))

    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


def write_cohort(result: SynthStudy, outdir) -> dict[str, str]:
    """Emit the CSV artifacts the ingestion layer reads, plus ground truth."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    d = result.study.methylation
    paths = {}
    for cohort, name in ((HEALTHY, "methylation_healthy.csv"),
                         (TUMOUR_TRAIN, "methylation_train.csv"),
                         (TUMOUR_TEST, "methylation_test.csv")):
        subset = d.restrict_samples(d.sample_mask(cohort))
        path = outdir / name
        write_methylation_csv(subset, path)
        paths[cohort] = str(path)
    write_clinical_csv(result.study.clinical, outdir / "clinical.csv")
    paths["clinical"] = str(outdir / "clinical.csv")
    write_expression_csv(result.study.expression, outdir / "expression.csv")
    paths["expression"] = str(outdir / "expression.csv")
    truth_path = outdir / "ground_truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(result.ground_truth(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["ground_truth"] = str(truth_path)
    return paths


def generate_sbm(
    n: int, n_blocks: int, p_within: float, p_between: float, seed: int = 0
) -> tuple[SparseGraph, np.ndarray]:
    """Stochastic blockmodel draw: balanced blocks, independent edges."""
    check_probability(p_within, "p_within", low_open=False)
    check_probability(p_between, "p_between", low_open=False)
    if n_blocks < 1 or n < n_blocks:
        raise ValidationError("need 1 <= n_blocks <= n")
    rng = np.random.default_rng(check_seed(seed))
    sizes = np.full(n_blocks, n // n_blocks)
    sizes[: n % n_blocks] += 1
    labels = np.repeat(np.arange(n_blocks), sizes)
    iu = np.triu_indices(n, k=1)
    probs = np.where(labels[iu[0]] == labels[iu[1]], p_within, p_between)
    draw = rng.random(probs.size) < probs
    edges = np.stack([iu[0][draw], iu[1][draw]], axis=1)
    return SparseGraph(n=n, edges=edges), labels


def generate_wald_field(
    m: int,
    planted_pairs: list[tuple[int, int]],
    magnitude: float = 6.0,
    seed: int = 0,
    theta_scale: float = 0.1,
) -> tuple[WaldField, np.ndarray]:
    """Field of null N(0,1) statistics with planted pairs at +-magnitude.

    Returns the field and the flat indices of the planted pairs.
    """
    rng = np.random.default_rng(check_seed(seed))
    n = pair_count(m)
    z = rng.standard_normal(n)
    idx = np.array([pair_to_index(min(i, j), max(i, j), m) for i, j in planted_pairs], dtype=int)
    signs = np.where(rng.random(idx.size) < 0.5, -1.0, 1.0)
    z[idx] = signs * magnitude
    theta = theta_scale * z
    field = WaldField(m=m, z=z, theta=theta, converged=np.ones(n, dtype=bool))
    return field, idx
