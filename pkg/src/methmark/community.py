"""Community detection on the prognostic network.

Pipeline: largest connected component -> block count from a bandwidth rule
-> regularized spectral clustering of the degree-corrected blockmodel
(tau-regularized normalized adjacency, leading eigenvectors by orthogonal
iteration, row-normalized embedding, k-means++ with restarts).

Everything is deterministic for a fixed seed, independent of worker count:
restarts are seeded from a spawned sequence and selected by
(within-cluster sum of squares, restart index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConvergenceError, ValidationError
from .validation import ParamsMixin


@dataclass
class SparseGraph:
    """Undirected simple graph as a sorted, deduplicated edge list."""

    n: int
    edges: np.ndarray  # (n_edges, 2) with i < j, lexicographically sorted
    node_ids: list[str] | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValidationError("self-loops are not allowed")
            if np.any((edges < 0) | (edges >= self.n)):
                raise ValidationError("edge endpoint out of range")
            edges = np.sort(edges, axis=1)
            edges = np.unique(edges, axis=0)
        self.edges = edges
        if self.node_ids is not None and len(self.node_ids) != self.n:
            raise ValidationError("node_ids length must equal n")

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for col in (0, 1):
            np.add.at(deg, self.edges[:, col], 1)
        return deg

    def adjacency(self) -> sparse.csr_matrix:
        if self.n_edges == 0:
            return sparse.csr_matrix((self.n, self.n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * self.n_edges)
        return sparse.csr_matrix(
            (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(self.n, self.n)
        )

    def neighbor_lists(self) -> list[np.ndarray]:
        adj = self.adjacency()
        return [adj.indices[adj.indptr[v] : adj.indptr[v + 1]] for v in range(self.n)]


def connected_components(graph: SparseGraph) -> list[np.ndarray]:
    """Components in discovery order (scanning nodes ascending), BFS within."""
    neigh = graph.neighbor_lists()
    seen = np.zeros(graph.n, dtype=bool)
    comps = []
    for start in range(graph.n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        members = []
        while queue:
            v = queue.pop()
            members.append(v)
            for u in neigh[v]:
                if not seen[u]:
                    seen[u] = True
                    queue.append(int(u))
        comps.append(np.array(sorted(members), dtype=np.int64))
    return comps


def largest_component(graph: SparseGraph) -> SparseGraph:
    """Induced subgraph on the largest component; size ties go to the
    component holding the smallest node index. An empty graph stays empty."""
    if graph.n == 0:
        return graph
    comps = connected_components(graph)
    best = max(comps, key=len)  # discovery order breaks ties at the smallest index
    for comp in comps:
        if len(comp) == len(best):
            best = comp  # first such component in discovery order
            break
    keep = np.zeros(graph.n, dtype=bool)
    keep[best] = True
    new_index = -np.ones(graph.n, dtype=np.int64)
    new_index[best] = np.arange(len(best))
    mask = keep[graph.edges[:, 0]] & keep[graph.edges[:, 1]]
    edges = new_index[graph.edges[mask]]
    node_ids = [graph.node_ids[v] for v in best] if graph.node_ids is not None else None
    return SparseGraph(n=len(best), edges=edges, node_ids=node_ids)


@dataclass(frozen=True)
class BlockCount:
    n: int
    bandwidth: int
    n_blocks: int
    multiplier: float
    overridden: bool


def select_block_count(graph: SparseGraph, multiplier: float = 2.0, k_override: int | None = None) -> BlockCount:
    """Block count from the bandwidth rule h = max(2, round(c * sqrt(n))),
    K = max(1, floor(n / h)); an explicit K override wins."""
    n = graph.n
    if n < 2:
        raise ValidationError("need at least 2 nodes to choose a block count")
    h = max(2, int(np.floor(multiplier * np.sqrt(n) + 0.5)))
    k = max(1, n // h)
    if k_override is not None:
        if not 1 <= k_override <= n:
            raise ValidationError(f"K override {k_override} outside [1, {n}]")
        return BlockCount(n, h, int(k_override), multiplier, True)
    return BlockCount(n, h, k, multiplier, False)


@dataclass
class CommunityAssignment:
    """Node-to-block labels, 1-based, with per-block node lists."""

    labels: np.ndarray
    n_blocks: int
    bandwidth: int | None = None
    node_ids: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.n_blocks):
            raise ValidationError("labels must lie in {1..K}")

    def block_members(self, block: int) -> np.ndarray:
        return np.flatnonzero(self.labels == block)

    def blocks(self) -> dict[int, list[int]]:
        return {b: list(self.block_members(b)) for b in range(1, self.n_blocks + 1)}


class RegularizedSpectralClustering(ParamsMixin):
    """Spectral fit of the degree-corrected blockmodel on one graph.

    Builds L_tau = D_tau^{-1/2} A D_tau^{-1/2} with D_tau = D + tau*I
    (tau defaults to the mean degree), extracts the K leading eigenvectors
    by orthogonal iteration on I + L_tau (same eigenvectors, shifted
    spectrum in [0, 2] so the algebraically largest are also dominant),
    row-normalizes the embedding and clusters rows by seeded k-means++.
    """

    def __init__(
        self,
        n_blocks: int,
        tau: float | None = None,
        tol: float = 1e-8,
        max_iter: int = 5000,
        n_restarts: int = 25,
        seed: int = 0,
    ):
        self.n_blocks = n_blocks
        self.tau = tau
        self.tol = tol
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.seed = seed

    def fit(self, graph: SparseGraph) -> "RegularizedSpectralClustering":
        k = int(self.n_blocks)
        if k < 1:
            raise ValidationError("n_blocks must be >= 1")
        if k > graph.n:
            raise ValidationError(f"n_blocks {k} exceeds node count {graph.n}")
        if len(connected_components(graph)) > 1:
            raise ValidationError("graph must be connected; extract a component first")

        if k == 1:
            self.labels_ = np.zeros(graph.n, dtype=np.int64)
            self.embedding_ = np.ones((graph.n, 1))
            self.tau_ = float(graph.degrees().mean()) if self.tau is None else float(self.tau)
            self.n_iter_ = 0
            self.residual_ = 0.0
            self.inertia_ = 0.0
            return self

        adj = graph.adjacency()
        deg = graph.degrees().astype(float)
        tau = float(deg.mean()) if self.tau is None else float(self.tau)
        self.tau_ = tau
        dinv = 1.0 / np.sqrt(deg + tau) if tau > 0 or deg.min() > 0 else np.zeros_like(deg)

        def op(v: np.ndarray) -> np.ndarray:
            return dinv[:, None] * (adj @ (dinv[:, None] * v)) + v

        rng = np.random.default_rng(self.seed)
        v = np.linalg.qr(rng.standard_normal((graph.n, k)))[0]
        residual = np.inf
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            sv = op(v)
            h = v.T @ sv
            residual = float(np.linalg.norm(sv - v @ h) / max(1.0, np.linalg.norm(sv)))
            if residual < self.tol:
                break
            q, r = np.linalg.qr(sv)
            signs = np.sign(np.diag(r))
            signs[signs == 0] = 1.0
            v = q * signs
        if residual >= self.tol:
            raise ConvergenceError(
                f"eigensolver did not reach tol={self.tol} in {self.max_iter} iterations "
                f"(residual {residual:.3e})"
            )
        self.n_iter_ = n_iter
        self.residual_ = residual

        # Rotate the converged subspace onto eigenvectors, largest first,
        # with a deterministic sign convention.
        evals, q = np.linalg.eigh(v.T @ op(v))
        order = np.argsort(evals)[::-1]
        v = v @ q[:, order]
        for col in range(k):
            pivot = int(np.argmax(np.abs(v[:, col])))
            if v[pivot, col] < 0:
                v[:, col] = -v[:, col]
        self.eigenvalues_ = evals[order] - 1.0  # undo the +I shift

        norms = np.linalg.norm(v, axis=1)
        nonzero = norms > 1e-300
        embedding = np.zeros_like(v)
        embedding[nonzero] = v[nonzero] / norms[nonzero, None]
        self.embedding_ = embedding

        self.labels_, self.inertia_ = _kmeans_best(
            embedding, k, n_restarts=self.n_restarts, seed=self.seed
        )
        return self

    def fit_predict(self, graph: SparseGraph) -> np.ndarray:
        return self.fit(graph).labels_


def spectral_partition(
    graph: SparseGraph,
    n_blocks: int,
    seed: int = 0,
    tau: float | None = None,
    bandwidth: int | None = None,
) -> CommunityAssignment:
    """Partition a connected graph into n_blocks communities."""
    model = RegularizedSpectralClustering(n_blocks=n_blocks, tau=tau, seed=seed).fit(graph)
    labels = canonical_labels(model.labels_) + 1
    return CommunityAssignment(
        labels=labels, n_blocks=n_blocks, bandwidth=bandwidth, node_ids=graph.node_ids
    )


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters by first appearance so output does not depend on
    internal cluster numbering."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


# ---------------------------------------------------------------------------
# Seeded k-means++ with Lloyd iterations. Hand-rolled so restart selection,
# tie-breaking and empty-cluster handling are fully deterministic.


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.maximum(
        (x * x).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)[None, :],
        0.0,
    )


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1]).ravel()
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random(), side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[c : c + 1]).ravel())
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> tuple[np.ndarray, float]:
    labels = np.full(x.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new_labels = d2.argmin(axis=1)
        for c in range(centers.shape[0]):
            members = new_labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the worst-fit point.
                far = int(np.argmax(d2[np.arange(len(new_labels)), new_labels]))
                centers[c] = x[far]
                new_labels[far] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    d2 = _sq_dists(x, centers)
    inertia = float(d2[np.arange(len(labels)), labels].sum())
    return labels, inertia


def _kmeans_best(x: np.ndarray, k: int, n_restarts: int, seed: int) -> tuple[np.ndarray, float]:
    best_labels = None
    best_inertia = np.inf
    child_seeds = np.random.SeedSequence(seed).spawn(n_restarts)
    for restart in range(n_restarts):
        rng = np.random.default_rng(child_seeds[restart])
        centers = _kmeanspp_init(x, k, rng)
        labels, inertia = _lloyd(x, centers)
        if inertia < best_inertia:  # strict: ties keep the earliest restart
            best_inertia = inertia
            best_labels = labels
    return best_labels, best_inertia


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected partition agreement; 1 means identical up to relabeling."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError("partitions must cover the same nodes")
    n = a.size
    if n == 0:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) // 2
    sum_ij = comb(table).sum()
    sum_a = comb(table.sum(axis=1)).sum()
    sum_b = comb(table.sum(axis=0)).sum()
    total = comb(n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
