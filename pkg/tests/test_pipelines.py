import numpy as np
import pytest

from smpctd.errors import AuditFailure, RangeError
from smpctd.ingest import Accumulators, accumulate, make_spectrum_data
from smpctd.oracle import oracle_eigen, oracle_pipeline
from smpctd.pipelines import (FaModel, fa_diagnostics, PcaModel, PipelineConfig, SvdModel, cpt_tot_col_avg, eigensystem,
                              loadings, merge_covariances, power_iteration, project, run_pipeline,
                              shift_alpha, shift_power_iteration, traditional_covariance)
from smpctd.runner import run_local

FAST = PipelineConfig(iters=30, shift_iters=60)

# correlation matrix with top eigenvalues 1.620 and 1.615 (built by
# alternating projections, rounded to four decimals)
NEAR_TIE = np.array([
    [1.0, 0.0264, 0.3649, 0.3111, -0.044],
    [0.0264, 1.0, -0.2697, 0.5147, 0.1826],
    [0.3649, -0.2697, 1.0, 0.0687, -0.3114],
    [0.3111, 0.5147, 0.0687, 1.0, -0.0882],
    [-0.044, 0.1826, -0.3114, -0.0882, 1.0],
])


def _spd(seed, spectrum):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(len(spectrum), len(spectrum))))
    return q @ np.diag(spectrum) @ q.T


def _residuals(m, vals, vecs):
    return [float(np.linalg.norm(m @ vecs[:, i] - vals[i] * vecs[:, i])) for i in range(len(vals))]


# -- plaintext eigen helpers ---------------------------------------------------

def test_power_iteration_diag():
    vals, vecs = power_iteration(np.diag([2.0, 1.0]), 50)
    np.testing.assert_allclose(vals, [2, 1], atol=1e-12)
    np.testing.assert_allclose(np.abs(vecs), np.eye(2), atol=1e-12)


def test_power_iteration_two_by_two():
    vals, vecs = power_iteration([[2.0, 1.0], [1.0, 2.0]], 50)
    np.testing.assert_allclose(vals, [3, 1], atol=1e-12)
    np.testing.assert_allclose(np.abs(vecs[:, 0]), [2**-0.5, 2**-0.5], atol=1e-12)


def test_power_iteration_random_spd_vs_jacobi():
    m = _spd(3, [6.0, 4.0, 2.5, 1.5, 0.8, 0.3])
    vals, vecs = power_iteration(m, 50)
    ref, ref_vecs = oracle_eigen(m)
    assert np.max(np.abs(vals - ref) / ref) <= 1e-4
    assert np.min(np.abs(np.sum(vecs * ref_vecs, axis=0))) >= 0.9999


def test_shift_examples():
    assert shift_alpha([3.0, 1.0], 0) == 0.5
    assert shift_alpha([3.0, 1.0], 1) == 0.5
    vals, vecs = shift_power_iteration([[2.0, 1.0], [1.0, 2.0]], [3.0, 1.0], 300)
    assert abs(vals[0] - 3) <= 1e-12
    np.testing.assert_allclose(np.abs(vecs[:, 0]), [2**-0.5, 2**-0.5], atol=1e-12)
    vals, vecs = shift_power_iteration(np.eye(2), [1.0, 1.0], 300)
    np.testing.assert_allclose(vals, [1, 1], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=0), [1, 1], atol=1e-12)


def test_shift_beats_plain_on_near_tie():
    assert abs(oracle_eigen(NEAR_TIE)[0][1] - 1.615) < 1e-3
    plain = power_iteration(NEAR_TIE, 300)
    first, _ = power_iteration(NEAR_TIE, 50)
    shifted = shift_power_iteration(NEAR_TIE, first, 300)
    assert max(_residuals(NEAR_TIE, *plain)) > 1e-3
    assert max(_residuals(NEAR_TIE, *shifted)) <= 1e-3


def test_power_iteration_rejects_non_square():
    with pytest.raises(RangeError):
        power_iteration(np.zeros((2, 3)))


def test_merge_covariances_weight_identity():
    rng = np.random.default_rng(0)
    parts = [rng.normal(size=(n, 3)) + 1.0 for n in (5, 11, 7)]
    pooled = np.vstack(parts)
    mu = pooled.mean(axis=0)
    covs, ns = [], []
    for p in parts:
        acc = accumulate(Accumulators(3), p, "centered_gram", mu)
        covs.append(acc.centered_gram / len(p))
        ns.append(len(p))
    np.testing.assert_allclose(merge_covariances(covs, ns), np.cov(pooled.T), rtol=1e-12)


def test_loadings_scale_columns():
    v = np.array([[0.6, -0.8], [0.8, 0.6]])
    np.testing.assert_allclose(loadings(v, [4.0, 1.0]), [[1.2, -0.8], [1.6, 0.6]])


# -- shared sub-tasks ----------------------------------------------------------

def test_cpt_tot_col_avg_examples():
    def weighted(eng):
        avg, n = (np.array([2.0]), 2) if eng.party_id == 0 else (np.array([5.0]), 4)
        return cpt_tot_col_avg(eng, avg, n, PipelineConfig())

    def equal(eng):
        return cpt_tot_col_avg(eng, np.array([1.5, -3.0, 0.25]), 10 + 7 * eng.party_id, PipelineConfig())
    assert abs(run_local(2, weighted)[0].value[0] - 4.0) <= 1e-4
    np.testing.assert_allclose(run_local(3, equal)[0].value, [1.5, -3.0, 0.25], atol=1e-4)


def test_cpt_tot_col_avg_random():
    rng = np.random.default_rng(8)
    avgs, ns = rng.uniform(-10, 10, size=(2, 5)), [37, 912]
    expected = (ns[0] * avgs[0] + ns[1] * avgs[1]) / sum(ns)

    def fn(eng):
        return cpt_tot_col_avg(eng, avgs[eng.party_id], ns[eng.party_id], PipelineConfig())
    assert np.max(np.abs(run_local(2, fn)[0].value - expected)) <= 1e-4


def test_shared_eigensystem_matches_jacobi():
    m = _spd(3, [6.0, 4.0, 2.5, 1.5, 0.8, 0.3]) / 16

    def fn(eng):
        M = eng.input(0, m if eng.party_id == 0 else None, m.shape)
        vals, vecs = eigensystem(eng, M, 1.0, PipelineConfig(iters=50))
        return eng.reveal(vals, "v"), eng.reveal(vecs, "V")
    vals, vecs = run_local(2, fn)[0].value
    ref, ref_vecs = oracle_eigen(m)
    assert np.max(np.abs(vals - ref) / ref) <= 1e-3
    assert np.min(np.abs(np.sum(vecs * ref_vecs, axis=0))) >= 0.999


# -- pipelines on analytic data --------------------------------------------------

def test_pca_axis_aligned_data():
    base = np.array([[3, 0, 0], [-3, 0, 0], [0, 2, 0], [0, -2, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    res = run_pipeline("pca", "decomposed", [base, base], FAST)
    model = res[0].value
    np.testing.assert_allclose(np.abs(model.eigenvector_matrix), np.eye(3), atol=1e-3)
    np.testing.assert_allclose(model.eigenvalue_array, np.array([18, 8, 2]) * 2 / 11, rtol=1e-3)
    np.testing.assert_allclose(model.total_avg, 0, atol=1e-4)
    for r in res:
        assert [rec.subtask_label for rec in r.reveal_log] == ["cpt_tot_col_avg", "power_iteration"]


def test_svd_two_rows():
    res = run_pipeline("svd", "decomposed", [np.array([[3.0, 0.0]]), np.array([[0.0, 4.0]])], FAST)
    model = res[0].value
    np.testing.assert_allclose(model.singular_value, [4, 3], rtol=1e-3)
    np.testing.assert_allclose(np.abs(model.right_singular_matrix), [[0, 1], [1, 0]], atol=1e-3)
    assert [(r.subtask_label, r.irreversible) for r in res[0].reveal_log] == [("singular_value_and_matrix", True)]


def test_svd_zero_data():
    model = run_pipeline("svd", "decomposed", [np.zeros((5, 3)), np.zeros((4, 3))], FAST)[0].value
    np.testing.assert_allclose(model.singular_value, 0, atol=1e-3)


def test_fa_independent_columns():
    x = np.array([[2, 3], [2, -3], [-2, 3], [-2, -3]], dtype=float)
    res = run_pipeline("fa", "decomposed", [x, x], FAST)
    model = res[0].value
    np.testing.assert_allclose(model.principal_factors, [1, 1], atol=1e-3)
    L = model.factor_loading_matrix
    # correlation is I: any orthonormal basis is a valid set of loadings
    np.testing.assert_allclose(L @ L.T, np.eye(2), atol=2e-3)
    assert [r.subtask_label for r in res[0].reveal_log] == ["cpt_tot_col_avg", "factor_loading_matrix"]
    assert res[0].reveal_log[1].irreversible


def test_fa_perfectly_correlated_pair():
    x = np.array([[1, 2], [-1, -2], [2, 4], [-2, -4]], dtype=float)
    model = run_pipeline("fa", "decomposed", [x, x], FAST)[0].value
    np.testing.assert_allclose(model.principal_factors, [2, 0], atol=1e-3)
    np.testing.assert_allclose(np.abs(model.factor_loading_matrix[:, 0]), [1, 1], atol=1e-3)
    np.testing.assert_allclose(model.factor_loading_matrix[:, 1], 0, atol=1e-2)


def test_fa_model_invariants():
    x = make_spectrum_data(120, 4, seed=2, spectrum=[3.0, 1.5, 0.8, 0.4])
    model = run_pipeline("fa", "decomposed", [x[:60], x[60:]], FAST)[0].value
    assert abs(model.principal_factors.sum() - 4) <= 1e-2


def test_audit_blocks_tiny_party():
    with pytest.raises(AuditFailure):
        run_pipeline("pca", "decomposed", [np.ones((1, 2)), np.ones((1, 2))], FAST)


def test_data_beyond_max_abs_rejected():
    with pytest.raises(RangeError):
        run_pipeline("svd", "decomposed", [np.full((3, 2), 20.0), np.ones((3, 2))], FAST)


def test_csv_inputs(tmp_path):
    x = make_spectrum_data(60, 3, seed=5)
    paths = []
    for i, part in enumerate((x[:30], x[30:])):
        p = tmp_path / f"p{i}.csv"
        np.savetxt(p, part, delimiter=",", fmt="%.9f")
        paths.append(str(p))
    model = run_pipeline("pca", "decomposed", paths, PipelineConfig(iters=30, chunk_rows=7))[0].value
    ref = oracle_pipeline("pca", x)
    np.testing.assert_allclose(model.eigenvalue_array, ref.eigenvalue_array, rtol=1e-3)


# -- traditional baseline ----------------------------------------------------------

def _cov_stage_bytes(n):
    data = [make_spectrum_data(n, 6, seed=i) for i in range(2)]

    def fn(eng):
        traditional_covariance(eng, data[eng.party_id], PipelineConfig())
        return eng.session.metrics_snapshot().bytes_sent
    return run_local(2, fn)[0].value


def test_traditional_covariance_bytes_linear():
    ratio = _cov_stage_bytes(200) / _cov_stage_bytes(100)
    assert 1.5 <= ratio <= 2.5


def test_traditional_matches_decomposed():
    x = make_spectrum_data(200, 4, seed=6, spectrum=[2.0, 1.2, 0.6, 0.3], mean=[0.5, -0.5, 0.0, 1.0])
    parts = [x[:100], x[100:]]
    dec = run_pipeline("pca", "decomposed", parts, PipelineConfig(iters=50))[0].value
    trad = run_pipeline("pca", "traditional", parts, PipelineConfig(iters=50))[0].value
    assert np.max(np.abs(dec.eigenvalue_array - trad.eigenvalue_array)) <= 1e-3
    np.testing.assert_allclose(dec.total_avg, trad.total_avg, atol=1e-3)


def test_traditional_reveals_once():
    x = make_spectrum_data(40, 3, seed=1)
    for task in ("pca", "svd"):
        log = run_pipeline(task, "traditional", [x[:20], x[20:]], FAST)[0].reveal_log
        assert [r.subtask_label for r in log] == [f"traditional_{task}"]


# resource runs use few iterations on purpose
@pytest.mark.filterwarnings("ignore:factor analysis residuals")
def test_decomposed_bytes_do_not_depend_on_rows():
    cfg = PipelineConfig(iters=3, shift_iters=3)
    for task in ("pca", "svd", "fa"):
        sent = set()
        for n in (20, 80):
            x = make_spectrum_data(2 * n, 3, seed=n)
            res = run_pipeline(task, "decomposed", [x[:n], x[n:]], cfg)
            sent.add((res[0].metrics.bytes_sent, res[0].metrics.rounds))
        assert len(sent) == 1, task


# -- project --------------------------------------------------------------------

def test_project_full_rank_reconstructs():
    x = make_spectrum_data(50, 4, seed=3, mean=[1.0, 2.0, 3.0, 4.0])
    model = oracle_pipeline("pca", x)
    scores = project(model, x, 4)
    np.testing.assert_allclose(scores @ model.eigenvector_matrix.T, x - model.total_avg, atol=1e-10)


def test_project_first_component_of_diag_data():
    model = PcaModel(np.zeros(3), np.array([3.0, 2.0, 1.0]), np.eye(3))
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(project(model, x, 1), x[:, :1])


def test_project_score_variance_is_eigenvalue():
    x = make_spectrum_data(400, 4, seed=4, spectrum=[3.0, 2.0, 1.0, 0.5])
    model = oracle_pipeline("pca", x)
    np.testing.assert_allclose(project(model, x, 4).var(axis=0, ddof=1), model.eigenvalue_array, rtol=1e-9)


def test_project_svd_fa_and_errors():
    x = make_spectrum_data(30, 3, seed=0)
    svd = SvdModel(np.ones(3), np.eye(3))
    np.testing.assert_array_equal(project(svd, x, 2), x[:, :2])
    fa = FaModel(np.array([4.0, 1.0, 1.0]), np.diag([2.0, 1.0, 1.0]))
    np.testing.assert_allclose(project(fa, x, 1), x[:, :1] / 2)
    for k in (0, 4):
        with pytest.raises(RangeError):
            project(svd, x, k)
        with pytest.raises(RangeError):
            project(fa, x, k)


def test_model_dict_roundtrip():
    m = PcaModel(np.zeros(2), np.array([2.0, 1.0]), np.eye(2))
    back = PcaModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.eigenvector_matrix, m.eigenvector_matrix)


def test_fa_diagnostics():
    x = make_spectrum_data(300, 4, seed=8, spectrum=[2.0, 1.2, 0.6, 0.3])
    model = oracle_pipeline("fa", x)
    diag = fa_diagnostics(model)
    assert diag["converged"] and diag["trace_gap"] < 1e-9 and diag["orthogonality"] < 1e-9
    mixed = FaModel(model.principal_factors, model.factor_loading_matrix @ np.diag([1, 1, 1.2, 1]))
    assert not fa_diagnostics(mixed)["converged"]


def test_fa_unconverged_warns():
    x = make_spectrum_data(200, 4, seed=8, spectrum=[2.0, 1.2, 0.6, 0.3])
    with pytest.warns(UserWarning, match="residuals out of tolerance"):
        run_pipeline("fa", "decomposed", [x[:100], x[100:]], PipelineConfig(iters=1, shift_iters=1))
