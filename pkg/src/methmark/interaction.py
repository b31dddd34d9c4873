"""Healthy-reference moments and the per-sample gene-pair interaction measure.

For genes X and Y with healthy-population mean vectors and covariance blocks,
the interaction value of one tumour sample is the cross-covariance quadratic
form between its centered profiles, normalized by the two within-gene
quadratic forms. With all three blocks estimated from the same healthy
samples (1/n_h normalizer throughout) this equals the cosine between the two
vectors of centered-profile projections onto the healthy sample axes, so it
is bounded by 1 in magnitude.

Cross-covariance blocks are never materialized per pair: with centered
healthy blocks C_X (p x n_h) the quadratic form x'S_XY y is (C_X' x) . (C_Y' y) / n_h,
two thin matrix products per pair.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .data import HEALTHY, MethylationDataset
from .errors import InsufficientReferenceError, ValidationError
from .validation import ParamsMixin

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class GeneMoments:
    """Healthy mean vector and covariance block of one gene."""

    gene: str
    mu: np.ndarray  # (p,)
    sigma: np.ndarray  # (p, p), 1/n_h normalizer
    n_h: int

    def check_psd(self, tol: float = 1e-10) -> bool:
        eig = np.linalg.eigvalsh(self.sigma)
        return bool(eig.min() >= -tol * max(eig.max(), 0.0))


@dataclass(frozen=True)
class CenteredHealthyBlock:
    """Mean-centered healthy profiles of one gene, one column per sample."""

    gene: str
    centered: np.ndarray  # (p, n_h)


@dataclass(frozen=True)
class InteractionValue:
    gene_x: str
    gene_y: str
    sample_id: str
    rho: float
    degenerate: bool = False


class HealthyReference(ParamsMixin):
    """Per-gene healthy moments fitted once, then applied to tumour profiles.

    fit() restricts the dataset to its healthy cohort and estimates, per
    gene, the mean vector and the 1/n_h covariance block together with the
    centered healthy matrix used to reconstruct cross-covariances on demand.
    """

    def __init__(self):
        pass

    def fit(self, dataset: MethylationDataset) -> "HealthyReference":
        mask = dataset.sample_mask(HEALTHY)
        n_h = int(mask.sum())
        if n_h < 2:
            raise InsufficientReferenceError(f"need >= 2 healthy samples, found {n_h}")
        idx = np.flatnonzero(mask)

        self.genes_: list[str] = list(dataset.genes)
        self.loci_: list[list[str]] = [list(l) for l in dataset.loci]
        self.n_h_ = n_h
        self.mu_: list[np.ndarray] = []
        self.centered_: list[np.ndarray] = []
        self.sigma_: list[np.ndarray] = []
        for block in dataset.values:
            healthy = block[:, idx]
            if np.isnan(healthy).any():
                raise ValidationError("healthy cohort contains missing values; impute first")
            mu = healthy.mean(axis=1)
            c = healthy - mu[:, None]
            self.mu_.append(mu)
            self.centered_.append(c)
            self.sigma_.append(c @ c.T / n_h)
        self._gene_index = {g: i for i, g in enumerate(self.genes_)}
        self.healthy_hash_ = healthy_content_hash(dataset)
        return self

    # -- accessors ---------------------------------------------------------

    def _gi(self, gene: str) -> int:
        try:
            return self._gene_index[gene]
        except AttributeError:
            raise ValidationError("reference not fitted") from None
        except KeyError:
            raise ValidationError(f"unknown gene {gene!r}") from None

    def gene_index(self, gene: str) -> int:
        return self._gi(gene)

    def moments(self, gene: str) -> GeneMoments:
        i = self._gi(gene)
        return GeneMoments(gene, self.mu_[i], self.sigma_[i], self.n_h_)

    def centered_block(self, gene: str) -> CenteredHealthyBlock:
        i = self._gi(gene)
        return CenteredHealthyBlock(gene, self.centered_[i])

    # -- per-sample interaction --------------------------------------------

    def _projections(self, gene: str, profile: np.ndarray) -> np.ndarray:
        i = self._gi(gene)
        profile = np.asarray(profile, dtype=float)
        if profile.shape != self.mu_[i].shape:
            raise ValidationError(
                f"gene {gene}: profile length {profile.shape} does not match {self.mu_[i].shape}"
            )
        if np.isnan(profile).any():
            raise ValidationError(f"gene {gene}: tumour profile must be fully observed")
        return self.centered_[i].T @ (profile - self.mu_[i])

    def pair_interaction(self, gene_x: str, gene_y: str, xk, yk, sample_id: str = "") -> InteractionValue:
        """Interaction value of one sample's profiles for genes X and Y."""
        u = self._projections(gene_x, xk)
        v = self._projections(gene_y, yk)
        qx = float(u @ u) / self.n_h_
        qy = float(v @ v) / self.n_h_
        if qx <= DEGENERATE_EPS or qy <= DEGENERATE_EPS:
            return InteractionValue(gene_x, gene_y, sample_id, 0.0, True)
        rho = float(u @ v) / self.n_h_ / np.sqrt(qx * qy)
        return InteractionValue(gene_x, gene_y, sample_id, float(np.clip(rho, -1.0, 1.0)), False)

    # -- vectorized tables ---------------------------------------------------

    def projection_scores(self, dataset: MethylationDataset, sample_idx: np.ndarray) -> list[np.ndarray]:
        """Per-gene matrices U_g = C_g' (X_g - mu_g), shape (n_h, len(sample_idx)).

        The interaction value of pair (i, j) for a sample is the cosine of the
        corresponding columns of U_i and U_j.
        """
        if list(dataset.genes) != self.genes_ or [list(l) for l in dataset.loci] != self.loci_:
            raise ValidationError("dataset genes/loci do not match the fitted reference")
        scores = []
        for i, block in enumerate(dataset.values):
            profiles = block[:, sample_idx]
            if np.isnan(profiles).any():
                raise ValidationError(f"gene {self.genes_[i]}: profiles must be fully observed")
            scores.append(self.centered_[i].T @ (profiles - self.mu_[i][:, None]))
        return scores

    def rho_block(
        self, scores: list[np.ndarray], ii: np.ndarray, jj: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Interaction values for pair index arrays (ii, jj) over all columns
        of the score matrices. Returns (rho, degenerate), each (n_pairs, n_samples)."""
        norms2 = np.stack([np.einsum("ij,ij->j", s, s) for s in scores])  # (m, n)
        thresh = self.n_h_ * DEGENERATE_EPS
        n = norms2.shape[1]
        rho = np.empty((len(ii), n))
        degen = np.empty((len(ii), n), dtype=bool)
        for r, (i, j) in enumerate(zip(ii, jj)):
            num = np.einsum("ij,ij->j", scores[i], scores[j])
            d = (norms2[i] <= thresh) | (norms2[j] <= thresh)
            with np.errstate(invalid="ignore", divide="ignore"):
                vals = num / np.sqrt(norms2[i] * norms2[j])
            rho[r] = np.where(d, 0.0, np.clip(vals, -1.0, 1.0))
            degen[r] = d
        return rho, degen

    def interaction_table(
        self,
        dataset: MethylationDataset,
        pairs: Iterable[tuple[str, str]],
        cohort: str | None = None,
        chunk_size: int = 4096,
    ) -> Iterator[InteractionValue]:
        """Stream interaction values in pair-major, sample-minor order.

        Pair chunks are evaluated independently (bounded memory) and the
        output order does not depend on the chunking.
        """
        if cohort is None:
            sample_idx = np.arange(dataset.n_samples)
        else:
            sample_idx = np.flatnonzero(dataset.sample_mask(cohort))
        sample_ids = [dataset.sample_ids[i] for i in sample_idx]
        pair_idx = [(self._gi(gx), self._gi(gy)) for gx, gy in pairs]
        scores = self.projection_scores(dataset, sample_idx)
        pair_names = list(pairs)
        for start in range(0, len(pair_idx), max(1, chunk_size)):
            chunk = pair_idx[start : start + chunk_size]
            ii = np.array([p[0] for p in chunk], dtype=int)
            jj = np.array([p[1] for p in chunk], dtype=int)
            rho, degen = self.rho_block(scores, ii, jj)
            for r in range(len(chunk)):
                gx, gy = pair_names[start + r]
                for s, sid in enumerate(sample_ids):
                    yield InteractionValue(gx, gy, sid, float(rho[r, s]), bool(degen[r, s]))

    def transform(self, dataset: MethylationDataset, pairs: list[tuple[str, str]], cohort: str | None = None) -> np.ndarray:
        """(n_samples, n_pairs) interaction feature matrix (degenerate -> 0)."""
        if cohort is None:
            sample_idx = np.arange(dataset.n_samples)
        else:
            sample_idx = np.flatnonzero(dataset.sample_mask(cohort))
        scores = self.projection_scores(dataset, sample_idx)
        ii = np.array([self._gi(gx) for gx, _ in pairs], dtype=int)
        jj = np.array([self._gi(gy) for _, gy in pairs], dtype=int)
        rho, _ = self.rho_block(scores, ii, jj)
        return rho.T

    # -- CCA diagnostic ------------------------------------------------------

    def cca_directions(self, gene_x: str, gene_y: str) -> tuple[float, np.ndarray, np.ndarray]:
        """Leading canonical correlation and direction vectors of two genes.

        Whitening uses a small ridge (1e-8 of the mean diagonal) so the
        within-gene blocks are always invertible. Diagnostic only; the
        pipeline path never solves for these directions.
        """
        ix, iy = self._gi(gene_x), self._gi(gene_y)
        sxx, syy = self.sigma_[ix], self.sigma_[iy]
        sxy = self.centered_[ix] @ self.centered_[iy].T / self.n_h_
        wx = _inv_sqrt_ridge(sxx)
        wy = _inv_sqrt_ridge(syy)
        u, s, vt = np.linalg.svd(wx @ sxy @ wy)
        corr = float(np.clip(s[0], 0.0, 1.0))
        return corr, wx @ u[:, 0], wy @ vt[0]


def _inv_sqrt_ridge(sigma: np.ndarray, rel: float = 1e-8) -> np.ndarray:
    p = sigma.shape[0]
    eps = rel * max(np.trace(sigma) / p, 1e-300)
    eig, vec = np.linalg.eigh(sigma + eps * np.eye(p))
    return (vec / np.sqrt(eig)) @ vec.T


def estimate_moments(dataset: MethylationDataset) -> HealthyReference:
    """Fit healthy moments for every gene (1/n_h normalizers throughout)."""
    return HealthyReference().fit(dataset)


def interaction_measure(
    mx: GeneMoments,
    cx: CenteredHealthyBlock,
    my: GeneMoments,
    cy: CenteredHealthyBlock,
    xk,
    yk,
) -> InteractionValue:
    """Standalone form of the pair interaction, from explicit moment objects."""
    xk = np.asarray(xk, dtype=float)
    yk = np.asarray(yk, dtype=float)
    if xk.shape != mx.mu.shape or yk.shape != my.mu.shape:
        raise ValidationError("profile length does not match the gene's locus count")
    u = cx.centered.T @ (xk - mx.mu)
    v = cy.centered.T @ (yk - my.mu)
    qx = float(u @ u) / mx.n_h
    qy = float(v @ v) / my.n_h
    if qx <= DEGENERATE_EPS or qy <= DEGENERATE_EPS:
        return InteractionValue(mx.gene, my.gene, "", 0.0, True)
    rho = float(u @ v) / mx.n_h / np.sqrt(qx * qy)
    return InteractionValue(mx.gene, my.gene, "", float(np.clip(rho, -1.0, 1.0)), False)


# ---------------------------------------------------------------------------
# Binary cache of fitted references: versioned header, little-endian float64
# arrays, keyed by a content hash of the healthy cohort.

_MAGIC = b"MMRF"
_VERSION = 1


def healthy_content_hash(dataset: MethylationDataset) -> str:
    mask = dataset.sample_mask(HEALTHY)
    idx = np.flatnonzero(mask)
    h = hashlib.sha256()
    h.update(",".join(dataset.sample_ids[i] for i in idx).encode())
    for gene, locs, block in zip(dataset.genes, dataset.loci, dataset.values):
        h.update(gene.encode())
        h.update(",".join(locs).encode())
        h.update(np.ascontiguousarray(block[:, idx], dtype="<f8").tobytes())
    return h.hexdigest()


def save_reference(ref: HealthyReference, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        digest = bytes.fromhex(ref.healthy_hash_)
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<II", len(ref.genes_), ref.n_h_))
        for i, gene in enumerate(ref.genes_):
            name = gene.encode()
            loci = ",".join(ref.loci_[i]).encode()
            fh.write(struct.pack("<II", len(name), len(loci)))
            fh.write(name)
            fh.write(loci)
            p = ref.mu_[i].shape[0]
            fh.write(struct.pack("<I", p))
            fh.write(np.ascontiguousarray(ref.mu_[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ref.centered_[i], dtype="<f8").tobytes())


def load_reference(path) -> HealthyReference:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValidationError(f"{path}: not a reference cache file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValidationError(f"{path}: unsupported cache version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        digest = fh.read(hlen).hex()
        n_genes, n_h = struct.unpack("<II", fh.read(8))
        ref = HealthyReference()
        ref.genes_, ref.loci_, ref.mu_, ref.centered_, ref.sigma_ = [], [], [], [], []
        ref.n_h_ = n_h
        for _ in range(n_genes):
            name_len, loci_len = struct.unpack("<II", fh.read(8))
            gene = fh.read(name_len).decode()
            loci = fh.read(loci_len).decode()
            (p,) = struct.unpack("<I", fh.read(4))
            mu = np.frombuffer(fh.read(8 * p), dtype="<f8").copy()
            centered = (
                np.frombuffer(fh.read(8 * p * n_h), dtype="<f8").reshape(p, n_h).copy()
            )
            ref.genes_.append(gene)
            ref.loci_.append(loci.split(",") if loci else [])
            ref.mu_.append(mu)
            ref.centered_.append(centered)
            ref.sigma_.append(centered @ centered.T / n_h)
        ref._gene_index = {g: i for i, g in enumerate(ref.genes_)}
        ref.healthy_hash_ = digest
    return ref


def all_pairs(genes: list[str]) -> list[tuple[str, str]]:
    """All unordered gene pairs in lexicographic index order."""
    return [(genes[i], genes[j]) for i in range(len(genes)) for j in range(i + 1, len(genes))]
