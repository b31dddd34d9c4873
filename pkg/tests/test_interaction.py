import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from methmark.data import HEALTHY, TUMOUR_TRAIN, MethylationDataset
from methmark.errors import InsufficientReferenceError, ValidationError
from methmark.interaction import (
    HealthyReference,
    all_pairs,
    estimate_moments,
    healthy_content_hash,
    interaction_measure,
    load_reference,
    save_reference,
)


def _dataset(blocks, n_healthy, n_tumour=0, genes=None):
    """Blocks are (p_g, n) arrays over healthy-then-tumour columns."""
    n = n_healthy + n_tumour
    genes = genes or [f"g{i}" for i in range(len(blocks))]
    return MethylationDataset(
        genes=genes,
        loci=[[f"{g}_c{r}" for r in range(b.shape[0])] for g, b in zip(genes, blocks)],
        values=[np.asarray(b, dtype=float) for b in blocks],
        sample_ids=[f"s{i}" for i in range(n)],
        cohort=[HEALTHY] * n_healthy + [TUMOUR_TRAIN] * n_tumour,
    )


def _random_dataset(rng, dims, n_healthy, n_tumour=0, scale=0.12):
    blocks = [
        np.clip(0.5 + scale * rng.standard_normal((p, n_healthy + n_tumour)), 0, 1)
        for p in dims
    ]
    return _dataset(blocks, n_healthy, n_tumour)


def test_moments_match_double_loop_oracle():
    # 3 healthy samples, 2 loci, hand-pickable values
    block = np.array([[0.1, 0.5, 0.9], [0.2, 0.2, 0.8]])
    ref = estimate_moments(_dataset([block], 3))
    mom = ref.moments("g0")
    n_h = 3
    mu = block.mean(axis=1)
    sigma = np.zeros((2, 2))
    for k in range(n_h):
        d = block[:, k] - mu
        for i in range(2):
            for j in range(2):
                sigma[i, j] += d[i] * d[j] / n_h
    np.testing.assert_allclose(mom.mu, mu, rtol=0, atol=1e-15)
    np.testing.assert_allclose(mom.sigma, sigma, rtol=0, atol=1e-15)
    assert mom.check_psd()


def test_moments_identical_samples_give_zero_sigma():
    block = np.tile(np.array([[0.3], [0.7]]), (1, 2))
    ref = estimate_moments(_dataset([block], 2))
    np.testing.assert_array_equal(ref.moments("g0").sigma, np.zeros((2, 2)))


def test_moments_constant_probe_mean():
    ref = estimate_moments(_dataset([np.full((1, 4), 0.5)], 4))
    assert ref.moments("g0").mu[0] == 0.5


def test_moments_require_two_healthy():
    with pytest.raises(InsufficientReferenceError):
        estimate_moments(_dataset([np.array([[0.5]])], 1))


def test_centered_block_rows_mean_zero(rng):
    ref = estimate_moments(_random_dataset(rng, [5, 3], 8))
    for gene in ref.genes_:
        c = ref.centered_block(gene).centered
        np.testing.assert_allclose(c.mean(axis=1), 0.0, atol=1e-12)


def _explicit_rho(ref, gx, gy, xk, yk):
    """Oracle: materialize the cross-covariance block and evaluate directly."""
    mx, my = ref.moments(gx), ref.moments(gy)
    cx, cy = ref.centered_block(gx).centered, ref.centered_block(gy).centered
    sigma_xy = cx @ cy.T / ref.n_h_
    xc = np.asarray(xk) - mx.mu
    yc = np.asarray(yk) - my.mu
    qx = xc @ mx.sigma @ xc
    qy = yc @ my.sigma @ yc
    if qx <= 1e-12 or qy <= 1e-12:
        return 0.0, True
    return float(xc @ sigma_xy @ yc / np.sqrt(qx * qy)), False


def test_pair_interaction_matches_materialized_oracle(rng):
    ref = estimate_moments(_random_dataset(rng, [4, 3], 6))
    xk = np.clip(0.5 + 0.1 * rng.standard_normal(4), 0, 1)
    yk = np.clip(0.5 + 0.1 * rng.standard_normal(3), 0, 1)
    val = ref.pair_interaction("g0", "g1", xk, yk)
    expected, degen = _explicit_rho(ref, "g0", "g1", xk, yk)
    assert not degen and not val.degenerate
    np.testing.assert_allclose(val.rho, expected, rtol=1e-12)


def test_pair_interaction_same_gene_is_one(rng):
    ref = estimate_moments(_random_dataset(rng, [4], 7))
    xk = np.clip(0.5 + 0.2 * rng.standard_normal(4), 0, 1)
    val = ref.pair_interaction("g0", "g0", xk, xk)
    assert val.rho == pytest.approx(1.0, abs=1e-12)


def test_pair_interaction_at_mean_is_degenerate(rng):
    ref = estimate_moments(_random_dataset(rng, [4, 4], 6))
    mu = ref.moments("g0").mu
    yk = np.clip(0.5 + 0.2 * rng.standard_normal(4), 0, 1)
    val = ref.pair_interaction("g0", "g1", mu, yk)
    assert val.degenerate and val.rho == 0.0


def test_pair_interaction_dimension_mismatch(rng):
    ref = estimate_moments(_random_dataset(rng, [4, 3], 6))
    with pytest.raises(ValidationError):
        ref.pair_interaction("g0", "g1", np.zeros(3), np.zeros(3))


def test_interaction_measure_standalone_matches_method(rng):
    ref = estimate_moments(_random_dataset(rng, [5, 2], 9))
    xk = np.clip(0.5 + 0.1 * rng.standard_normal(5), 0, 1)
    yk = np.clip(0.5 + 0.1 * rng.standard_normal(2), 0, 1)
    a = ref.pair_interaction("g0", "g1", xk, yk)
    b = interaction_measure(
        ref.moments("g0"), ref.centered_block("g0"),
        ref.moments("g1"), ref.centered_block("g1"),
        xk, yk,
    )
    assert a.rho == b.rho


def test_table_cardinality_and_cross_check(rng):
    d = _random_dataset(rng, [3, 4, 2, 5, 3], 8, n_tumour=2)
    ref = HealthyReference().fit(d)
    pairs = all_pairs(d.genes)
    assert len(pairs) == 10
    rows = list(ref.interaction_table(d, pairs, cohort=TUMOUR_TRAIN))
    assert len(rows) == 20  # pair-major, sample-minor
    # cross-check against the single-pair path
    for row in rows:
        col = d.sample_ids.index(row.sample_id)
        xk = d.gene_block(row.gene_x)[:, col]
        yk = d.gene_block(row.gene_y)[:, col]
        single = ref.pair_interaction(row.gene_x, row.gene_y, xk, yk)
        np.testing.assert_allclose(row.rho, single.rho, rtol=0, atol=1e-12)


def test_table_pair_order_is_pair_major(rng):
    d = _random_dataset(rng, [3, 3], 6, n_tumour=3)
    ref = HealthyReference().fit(d)
    rows = list(ref.interaction_table(d, [("g0", "g1")], cohort=TUMOUR_TRAIN))
    assert [r.sample_id for r in rows] == ["s6", "s7", "s8"]


def test_swapped_pair_gives_identical_rho(rng):
    d = _random_dataset(rng, [4, 3], 7, n_tumour=2)
    ref = HealthyReference().fit(d)
    ab = [r.rho for r in ref.interaction_table(d, [("g0", "g1")], cohort=TUMOUR_TRAIN)]
    ba = [r.rho for r in ref.interaction_table(d, [("g1", "g0")], cohort=TUMOUR_TRAIN)]
    np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-12)


def test_unknown_gene_in_pair_list(rng):
    d = _random_dataset(rng, [3], 5)
    ref = HealthyReference().fit(d)
    with pytest.raises(ValidationError, match="gX"):
        list(ref.interaction_table(d, [("g0", "gX")]))


# -- invariants --------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_boundedness_fuzz(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.integers(1, 7, size=2)
    n_h = int(rng.integers(2, 10))
    ref = estimate_moments(_random_dataset(rng, [int(p), int(q)], n_h))
    xk = np.clip(0.5 + 0.3 * rng.standard_normal(int(p)), 0, 1)
    yk = np.clip(0.5 + 0.3 * rng.standard_normal(int(q)), 0, 1)
    val = ref.pair_interaction("g0", "g1", xk, yk)
    assert abs(val.rho) <= 1.0


def test_symmetry_exact(rng):
    ref = estimate_moments(_random_dataset(rng, [4, 6], 9))
    xk = np.clip(0.5 + 0.2 * rng.standard_normal(4), 0, 1)
    yk = np.clip(0.5 + 0.2 * rng.standard_normal(6), 0, 1)
    assert (
        ref.pair_interaction("g0", "g1", xk, yk).rho
        == ref.pair_interaction("g1", "g0", yk, xk).rho
    )


def test_scale_invariance(rng):
    # multiply one gene's values by c > 0 in healthy and tumour data
    n_h, p, q, c = 8, 4, 3, 3.7
    hx = 0.1 + 0.05 * rng.random((p, n_h))
    hy = 0.1 + 0.05 * rng.random((q, n_h))
    xk = 0.1 + 0.05 * rng.random(p)
    yk = 0.1 + 0.05 * rng.random(q)
    base = estimate_moments(_dataset([hx, hy], n_h))
    scaled = estimate_moments(_dataset([np.clip(c * hx, 0, 1), hy], n_h))
    r0 = base.pair_interaction("g0", "g1", xk, yk).rho
    r1 = scaled.pair_interaction("g0", "g1", np.clip(c * xk, 0, 1), yk).rho
    np.testing.assert_allclose(r0, r1, rtol=1e-9)


def test_locus_permutation_covariance(rng):
    n_h, p, q = 7, 5, 4
    hx, hy = rng.random((p, n_h)), rng.random((q, n_h))
    xk, yk = rng.random(p), rng.random(q)
    perm = rng.permutation(p)
    base = estimate_moments(_dataset([hx, hy], n_h))
    permuted = estimate_moments(_dataset([hx[perm], hy], n_h))
    r0 = base.pair_interaction("g0", "g1", xk, yk).rho
    r1 = permuted.pair_interaction("g0", "g1", xk[perm], yk).rho
    np.testing.assert_allclose(r0, r1, rtol=0, atol=1e-12)


# -- CCA diagnostic -----------------------------------------------------------


def _power_iteration_cc(ref, gx, gy, iters=4000):
    """Oracle: power iteration on the whitened cross-covariance operator."""
    from methmark.interaction import _inv_sqrt_ridge

    ix, iy = ref.gene_index(gx), ref.gene_index(gy)
    sxy = ref.centered_[ix] @ ref.centered_[iy].T / ref.n_h_
    w = _inv_sqrt_ridge(ref.sigma_[ix]) @ sxy @ _inv_sqrt_ridge(ref.sigma_[iy])
    mat = w @ w.T
    v = np.ones(mat.shape[0]) / np.sqrt(mat.shape[0])
    for _ in range(iters):
        nv = mat @ v
        norm = np.linalg.norm(nv)
        if norm == 0:
            return 0.0
        v = nv / norm
    return float(np.sqrt(v @ mat @ v))


def test_cca_exact_linear_image_gives_one(rng):
    n_h = 12
    hx = rng.random((3, n_h))
    transform = rng.standard_normal((4, 3))
    hy = transform @ hx  # Y is an exact linear image of X
    hy = (hy - hy.min()) / (hy.max() - hy.min())
    ref = estimate_moments(_dataset([hx, hy], n_h))
    corr, _, _ = ref.cca_directions("g0", "g1")
    assert corr == pytest.approx(1.0, abs=1e-6)


def test_cca_independent_blocks_small_and_matches_power_iteration(rng):
    n_h = 500
    ref = estimate_moments(_random_dataset(rng, [3, 3], n_h))
    corr, _, _ = ref.cca_directions("g0", "g1")
    assert corr < 0.5
    oracle = _power_iteration_cc(ref, "g0", "g1")
    np.testing.assert_allclose(corr, oracle, atol=1e-6)


def test_cca_same_gene_directions_match_up_to_sign(rng):
    ref = estimate_moments(_random_dataset(rng, [4, 4], 10))
    i = ref.gene_index("g0")
    ref.sigma_[1] = ref.sigma_[i].copy()
    ref.centered_[1] = ref.centered_[i].copy()
    ref.mu_[1] = ref.mu_[i].copy()
    corr, a, b = ref.cca_directions("g0", "g1")
    assert corr == pytest.approx(1.0, abs=1e-6)
    sign = np.sign(a @ b)
    np.testing.assert_allclose(a, sign * b, atol=1e-6)


# -- binary cache -------------------------------------------------------------


def test_reference_cache_round_trip(tmp_path, rng):
    d = _random_dataset(rng, [4, 2, 3], 6)
    ref = HealthyReference().fit(d)
    path = tmp_path / "moments.bin"
    save_reference(ref, path)
    back = load_reference(path)
    assert back.genes_ == ref.genes_
    assert back.n_h_ == ref.n_h_
    assert back.healthy_hash_ == ref.healthy_hash_ == healthy_content_hash(d)
    for a, b in zip(back.mu_, ref.mu_):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(back.centered_, ref.centered_):
        np.testing.assert_array_equal(a, b)


def test_reference_params_mixin():
    ref = HealthyReference()
    assert ref.get_params() == {}
    assert repr(ref) == "HealthyReference()"
