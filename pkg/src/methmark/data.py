"""Ingestion, validation, filtering and imputation of cohort tables.

Methylation values are kept as per-gene blocks (loci x samples) because gene
profiles are ragged; locus order within a gene follows the input file and is
identical across samples. Missing values are NaN internally and the empty
string or "NA" in CSV form. All loaded datasets are immutable (arrays are
marked read-only) and safe for concurrent readers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ImputationError, ParseError, ValidationError

HEALTHY = "healthy"
TUMOUR_TRAIN = "tumour_train"
TUMOUR_TEST = "tumour_test"
COHORTS = (HEALTHY, TUMOUR_TRAIN, TUMOUR_TEST)

_MISSING_TOKENS = ("", "NA")


class _opened:
    """Accept a path or an open text handle; close only what we opened."""

    def __init__(self, path_or_buffer):
        self._own = not hasattr(path_or_buffer, "read")
        self._fh = (
            open(path_or_buffer, newline="", encoding="utf-8") if self._own else path_or_buffer
        )

    def __enter__(self):
        return self._fh

    def __exit__(self, *exc):
        if self._own:
            self._fh.close()
        return False


def _parse_value(token: str, line: int, what: str, lo: float | None = None, hi: float | None = None) -> float:
    token = token.strip()
    if token in _MISSING_TOKENS:
        return np.nan
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"cannot parse {what} {token!r}", line) from None
    if lo is not None and hi is not None and not (lo <= value <= hi):
        raise ValidationError(f"line {line}: {what} {value} outside [{lo}, {hi}]")
    return value


def _fmt(value: float) -> str:
    if isinstance(value, float) and np.isnan(value):
        return ""
    return repr(float(value))


@dataclass
class MethylationDataset:
    """Per-gene blocks of beta values over a common sample roster."""

    genes: list[str]
    loci: list[list[str]]  # per gene, locus ids in fixed order
    values: list[np.ndarray]  # per gene, (p_g, n) float with NaN = missing
    sample_ids: list[str]
    cohort: list[str]  # per sample label

    def __post_init__(self):
        if len(self.sample_ids) != len(set(self.sample_ids)):
            raise ValidationError("sample ids must be unique")
        if len(self.cohort) != len(self.sample_ids):
            raise ValidationError("cohort labels must match sample count")
        for label in self.cohort:
            if label not in COHORTS:
                raise ValidationError(f"unknown cohort label {label!r}")
        if not (len(self.genes) == len(self.loci) == len(self.values)):
            raise ValidationError("genes, loci and values must align")
        n = len(self.sample_ids)
        for g, locs, block in zip(self.genes, self.loci, self.values):
            if block.shape != (len(locs), n):
                raise ValidationError(f"gene {g}: block shape {block.shape} != ({len(locs)}, {n})")
            with np.errstate(invalid="ignore"):
                if np.any((block < 0.0) | (block > 1.0)):
                    raise ValidationError(f"gene {g}: beta values outside [0, 1]")
            block.setflags(write=False)
        self._gene_index = {g: i for i, g in enumerate(self.genes)}

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def n_probes(self) -> int:
        return sum(len(locs) for locs in self.loci)

    def gene_block(self, gene: str) -> np.ndarray:
        return self.values[self.gene_index(gene)]

    def gene_index(self, gene: str) -> int:
        try:
            return self._gene_index[gene]
        except KeyError:
            raise ValidationError(f"unknown gene {gene!r}") from None

    def sample_mask(self, cohort: str) -> np.ndarray:
        return np.array([c == cohort for c in self.cohort], dtype=bool)

    def restrict_samples(self, mask: np.ndarray) -> "MethylationDataset":
        idx = np.flatnonzero(mask)
        return MethylationDataset(
            genes=list(self.genes),
            loci=[list(locs) for locs in self.loci],
            values=[block[:, idx].copy() for block in self.values],
            sample_ids=[self.sample_ids[i] for i in idx],
            cohort=[self.cohort[i] for i in idx],
        )

    def has_missing(self) -> bool:
        return any(np.isnan(block).any() for block in self.values)


def load_methylation(path, cohort: str) -> MethylationDataset:
    """Read a methylation CSV (header: probe_id,gene,<sample ids...>).

    Rows are grouped by gene, preserving the file order of loci within each
    gene and of genes by first appearance.
    """
    if cohort not in COHORTS:
        raise ValidationError(f"unknown cohort label {cohort!r}")
    with _opened(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file (missing header)", 1) from None
        if len(header) < 2 or header[0] != "probe_id" or header[1] != "gene":
            raise ParseError("header must start with probe_id,gene", 1)
        sample_ids = [s.strip() for s in header[2:]]
        n = len(sample_ids)

        genes: list[str] = []
        loci: dict[str, list[str]] = {}
        rows: dict[str, list[np.ndarray]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n + 2:
                raise ParseError(f"expected {n + 2} columns, found {len(row)}", line_no)
            probe, gene = row[0].strip(), row[1].strip()
            if gene not in rows:
                genes.append(gene)
                loci[gene] = []
                rows[gene] = []
            loci[gene].append(probe)
            rows[gene].append(
                np.array(
                    [_parse_value(t, line_no, f"beta for probe {probe}", 0.0, 1.0) for t in row[2:]],
                    dtype=float,
                )
            )

    return MethylationDataset(
        genes=genes,
        loci=[loci[g] for g in genes],
        values=[np.vstack(rows[g]) if rows[g] else np.empty((0, n)) for g in genes],
        sample_ids=sample_ids,
        cohort=[cohort] * n,
    )


def write_methylation_csv(dataset: MethylationDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["probe_id", "gene"] + list(dataset.sample_ids))
        for gene, locs, block in zip(dataset.genes, dataset.loci, dataset.values):
            for r, probe in enumerate(locs):
                writer.writerow([probe, gene] + [_fmt(v) for v in block[r]])


def concat_samples(datasets: list[MethylationDataset]) -> MethylationDataset:
    """Merge cohort files over their shared probes.

    Probe set is the intersection on (gene, locus), ordered as in the first
    dataset; sample rosters must be disjoint.
    """
    if not datasets:
        raise ValidationError("no datasets to merge")
    first = datasets[0]
    keyset = None
    for d in datasets:
        keys = {(g, p) for g, locs in zip(d.genes, d.loci) for p in locs}
        keyset = keys if keyset is None else (keyset & keys)

    sample_ids: list[str] = []
    cohort: list[str] = []
    for d in datasets:
        sample_ids.extend(d.sample_ids)
        cohort.extend(d.cohort)

    lookup = []
    for d in datasets:
        by_key = {}
        for gi, (g, locs) in enumerate(zip(d.genes, d.loci)):
            for r, p in enumerate(locs):
                by_key[(g, p)] = (gi, r)
        lookup.append(by_key)

    genes: list[str] = []
    loci: list[list[str]] = []
    values: list[np.ndarray] = []
    for g, locs in zip(first.genes, first.loci):
        kept = [p for p in locs if (g, p) in keyset]
        if not kept:
            continue
        block = np.empty((len(kept), len(sample_ids)))
        col = 0
        for d, by_key in zip(datasets, lookup):
            for r, p in enumerate(kept):
                gi, rr = by_key[(g, p)]
                block[r, col : col + d.n_samples] = d.values[gi][rr]
            col += d.n_samples
        genes.append(g)
        loci.append(kept)
        values.append(block)
    return MethylationDataset(genes, loci, values, sample_ids, cohort)


def filter_probes(
    dataset: MethylationDataset,
    min_coverage: float = 0.95,
    max_detection_p: float = 0.05,
    detection_p: MethylationDataset | None = None,
) -> MethylationDataset:
    """Drop badly covered probes and mask values that failed detection.

    Values with detection p above ``max_detection_p`` become missing first;
    probes whose observed fraction then falls below ``min_coverage`` are
    removed, and genes left without loci disappear. Masking before the
    coverage pass makes the operation idempotent.
    """
    if not 0.0 < min_coverage <= 1.0:
        raise ValidationError(f"min_coverage must lie in (0, 1], got {min_coverage}")
    det_lookup = None
    if detection_p is not None:
        if detection_p.sample_ids != dataset.sample_ids:
            raise ValidationError("detection p matrix must cover the same samples in the same order")
        det_lookup = {}
        for gi, (g, locs) in enumerate(zip(detection_p.genes, detection_p.loci)):
            for r, p in enumerate(locs):
                det_lookup[(g, p)] = detection_p.values[gi][r]

    n = dataset.n_samples
    genes, loci, values = [], [], []
    for g, locs, block in zip(dataset.genes, dataset.loci, dataset.values):
        block = block.copy()
        if det_lookup is not None:
            for r, p in enumerate(locs):
                pvals = det_lookup.get((g, p))
                if pvals is not None:
                    with np.errstate(invalid="ignore"):
                        block[r, pvals > max_detection_p] = np.nan
        coverage = 1.0 - np.isnan(block).sum(axis=1) / n if n else np.ones(block.shape[0])
        keep = coverage >= min_coverage
        if not keep.any():
            continue
        genes.append(g)
        loci.append([p for p, k in zip(locs, keep) if k])
        values.append(block[keep])
    return MethylationDataset(genes, loci, values, list(dataset.sample_ids), list(dataset.cohort))


def knn_impute(dataset: MethylationDataset, k: int = 5) -> MethylationDataset:
    """Replace each missing value by the mean over the k nearest probes.

    Probe nearness is Euclidean distance between probe rows over samples
    where both probes are observed, rescaled by the observed fraction;
    donors must themselves be observed in the target sample. Distance ties
    break by probe order in the dataset. Observed values pass through
    bit-identical.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not dataset.has_missing():
        return dataset

    matrix = np.vstack([b for b in dataset.values if b.shape[0]]) if dataset.n_probes else np.empty((0, dataset.n_samples))
    probe_names = [p for locs in dataset.loci for p in locs]
    observed = ~np.isnan(matrix)
    n_probes, n = matrix.shape
    counts = observed.sum(axis=1)
    for r in np.flatnonzero(counts == 0):
        raise ImputationError(f"probe {probe_names[r]} has no observed values")

    filled = np.where(observed, matrix, 0.0)
    row_means = filled.sum(axis=1) / counts
    out = matrix.copy()
    for r in np.flatnonzero(~observed.all(axis=1)):
        # Rescaled squared distance to every other probe over shared samples.
        shared = observed & observed[r]
        n_shared = shared.sum(axis=1)
        diff = np.where(shared, matrix[r] - filled, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist2 = np.where(n_shared > 0, (diff * diff).sum(axis=1) * (n / np.maximum(n_shared, 1)), np.inf)
        dist2[r] = np.inf
        order = np.lexsort((np.arange(n_probes), dist2))
        for s in np.flatnonzero(~observed[r]):
            donors = order[(observed[order, s]) & np.isfinite(dist2[order])][:k]
            out[r, s] = matrix[donors, s].mean() if donors.size else row_means[r]

    values = []
    start = 0
    for block in dataset.values:
        values.append(out[start : start + block.shape[0]].copy())
        start += block.shape[0]
    return MethylationDataset(
        list(dataset.genes),
        [list(locs) for locs in dataset.loci],
        values,
        list(dataset.sample_ids),
        list(dataset.cohort),
    )


CLINICAL_COLUMNS = ("sample_id", "time_days", "event", "age", "stage", "residual_disease")
COVARIATE_NAMES = ("age", "stage", "residual_disease")


@dataclass
class ClinicalTable:
    """One row per tumour sample: follow-up, event and clinical covariates."""

    sample_ids: list[str]
    time_days: np.ndarray
    event: np.ndarray
    covariates: np.ndarray  # (n, 3): age, stage, residual_disease; NaN = missing

    def __post_init__(self):
        if len(self.sample_ids) != len(set(self.sample_ids)):
            raise ValidationError("clinical sample ids must be unique")
        self.time_days = np.asarray(self.time_days, dtype=float)
        self.event = np.asarray(self.event, dtype=int)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if np.any(self.time_days <= 0):
            raise ValidationError("follow-up times must be strictly positive")
        if not np.isin(self.event, (0, 1)).all():
            raise ValidationError("event indicators must be 0 or 1")
        if self.covariates.shape != (len(self.sample_ids), len(COVARIATE_NAMES)):
            raise ValidationError("covariate matrix shape mismatch")
        self._index = {s: i for i, s in enumerate(self.sample_ids)}

    def row_index(self, sample_id: str) -> int | None:
        return self._index.get(sample_id)

    def complete(self, sample_id: str) -> bool:
        i = self._index[sample_id]
        return not np.isnan(self.covariates[i]).any()


def load_clinical(path) -> ClinicalTable:
    with _opened(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CLINICAL_COLUMNS:
            raise ParseError(f"clinical header must be {','.join(CLINICAL_COLUMNS)}", 1)
        ids, times, events, covs = [], [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CLINICAL_COLUMNS):
                raise ParseError(f"expected {len(CLINICAL_COLUMNS)} columns, found {len(row)}", line_no)
            ids.append(row[0].strip())
            t = _parse_value(row[1], line_no, "time_days")
            if np.isnan(t) or t <= 0:
                raise ValidationError(f"line {line_no}: time_days must be a positive number")
            times.append(t)
            ev = _parse_value(row[2], line_no, "event")
            if ev not in (0.0, 1.0):
                raise ValidationError(f"line {line_no}: event must be 0 or 1")
            events.append(int(ev))
            covs.append([_parse_value(row[3 + j], line_no, COVARIATE_NAMES[j]) for j in range(3)])
    return ClinicalTable(ids, np.array(times), np.array(events), np.array(covs).reshape(len(ids), 3))


def write_clinical_csv(table: ClinicalTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLINICAL_COLUMNS)
        for i, sid in enumerate(table.sample_ids):
            writer.writerow(
                [sid, _fmt(table.time_days[i]), str(int(table.event[i]))]
                + [_fmt(v) for v in table.covariates[i]]
            )


@dataclass
class ExpressionMatrix:
    """One expression value per gene per sample."""

    genes: list[str]
    sample_ids: list[str]
    values: np.ndarray  # (n_genes, n_samples), NaN = missing
    cohort: list[str]

    def __post_init__(self):
        if len(self.sample_ids) != len(set(self.sample_ids)):
            raise ValidationError("expression sample ids must be unique")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.genes), len(self.sample_ids)):
            raise ValidationError("expression matrix shape mismatch")
        if len(self.cohort) != len(self.sample_ids):
            raise ValidationError("cohort labels must match sample count")
        self.values.setflags(write=False)
        self._gene_index = {g: i for i, g in enumerate(self.genes)}
        self._sample_index = {s: i for i, s in enumerate(self.sample_ids)}

    def gene_index(self, gene: str) -> int:
        try:
            return self._gene_index[gene]
        except KeyError:
            raise ValidationError(f"unknown gene {gene!r} in expression data") from None

    def sample_index(self, sample_id: str) -> int | None:
        return self._sample_index.get(sample_id)


def load_expression(path, cohort: str | list[str]) -> ExpressionMatrix:
    with _opened(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "gene":
            raise ParseError("expression header must start with gene", 1)
        sample_ids = [s.strip() for s in header[1:]]
        genes, values = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(sample_ids) + 1:
                raise ParseError(f"expected {len(sample_ids) + 1} columns, found {len(row)}", line_no)
            genes.append(row[0].strip())
            values.append([_parse_value(t, line_no, "expression") for t in row[1:]])
    labels = [cohort] * len(sample_ids) if isinstance(cohort, str) else list(cohort)
    return ExpressionMatrix(genes, sample_ids, np.array(values, dtype=float).reshape(len(genes), len(sample_ids)), labels)


def write_expression_csv(expr: ExpressionMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gene"] + list(expr.sample_ids))
        for i, g in enumerate(expr.genes):
            writer.writerow([g] + [_fmt(v) for v in expr.values[i]])


@dataclass
class AlignedStudy:
    """Methylation, clinical and optional expression data on shared rosters."""

    methylation: MethylationDataset
    clinical: ClinicalTable
    expression: ExpressionMatrix | None
    healthy_ids: list[str]
    train_ids: list[str]
    test_ids: list[str]
    incomplete_covariates: frozenset[str] = field(default_factory=frozenset)

    def tumour_ids(self, cohort: str) -> list[str]:
        if cohort == TUMOUR_TRAIN:
            return self.train_ids
        if cohort == TUMOUR_TEST:
            return self.test_ids
        raise ValidationError(f"not a tumour cohort: {cohort!r}")

    def survival_arrays(self, sample_ids: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(time, event, covariates) rows for the given samples, in order."""
        idx = [self.clinical.row_index(s) for s in sample_ids]
        idx = np.array(idx, dtype=int)
        return (
            self.clinical.time_days[idx],
            self.clinical.event[idx],
            self.clinical.covariates[idx],
        )


def align_cohorts(
    methylation: MethylationDataset,
    clinical: ClinicalTable,
    expression: ExpressionMatrix | None = None,
) -> AlignedStudy:
    """Intersect rosters and flag tumour samples with incomplete covariates.

    Flagged samples stay in the study; they are dropped only inside
    multivariate model fits. A tumour sample without any clinical row is an
    alignment error.
    """
    healthy_ids, train_ids, test_ids = [], [], []
    incomplete = set()
    for sid, label in zip(methylation.sample_ids, methylation.cohort):
        if label == HEALTHY:
            healthy_ids.append(sid)
            continue
        if clinical.row_index(sid) is None:
            raise AlignmentError(f"tumour sample {sid!r} has no clinical row")
        (train_ids if label == TUMOUR_TRAIN else test_ids).append(sid)
        if not clinical.complete(sid):
            incomplete.add(sid)

    if expression is not None:
        shared = [s for s in expression.sample_ids if s in set(methylation.sample_ids)]
        if expression.genes and shared == [] and expression.sample_ids:
            raise AlignmentError("expression data shares no samples with the methylation dataset")

    return AlignedStudy(
        methylation=methylation,
        clinical=clinical,
        expression=expression,
        healthy_ids=healthy_ids,
        train_ids=train_ids,
        test_ids=test_ids,
        incomplete_covariates=frozenset(incomplete),
    )


