"""Decomposed PCA, SVD and FA, their monolithic baselines, and projection.

Party-side functions take the party's :class:`Engine` and its own data
(an array or CSV path(s)) and return the revealed model; every party runs
the same function.  ``run_pipeline`` drives all parties in-process.

Fixed-point headroom is kept by working in normalized units: data is
divided by the public ``max_abs`` and counts by the public ``row_bound``
R (which must be at least the total row count).  Secret divisions by the
hidden total count go through Newton inverse square roots.  Inside the
eigensolver each (deflated) matrix is rescaled by the inverse of its own
trace so that its eigenvalues sit in [0, 1].
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ingest
from .errors import AuditFailure, RangeError, ZeroVector
from .mpc import Engine, SecretShareTensor, concatenate, stack
from .planner import audit, fa_plan, pca_plan, svd_plan

TASKS = ("pca", "svd", "fa")
MODES = ("decomposed", "traditional")

# -- models -----------------------------------------------------------------


class _Model:
    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in data.items()})


@dataclass
class PcaModel(_Model):
    total_avg: np.ndarray
    eigenvalue_array: np.ndarray
    eigenvector_matrix: np.ndarray


@dataclass
class SvdModel(_Model):
    singular_value: np.ndarray
    right_singular_matrix: np.ndarray


@dataclass
class FaModel(_Model):
    principal_factors: np.ndarray
    factor_loading_matrix: np.ndarray


MODEL_TYPES = {"pca": PcaModel, "svd": SvdModel, "fa": FaModel}


@dataclass
class PipelineConfig:
    max_abs: float = 16.0
    row_bound: int = 1 << 14
    iters: int = 50
    shift_iters: int = 300
    newton_rounds: int = 15
    init_rounds: int = 30
    chunk_rows: int = ingest.DEFAULT_CHUNK_ROWS
    header: bool = False
    start_eps: float = 0.5
    audit_plan: bool = True


# -- plaintext power iteration ----------------------------------------------

def restart_vector(label: str, i: int, d: int) -> np.ndarray:
    """Public pseudo-random unit vector seeded by (label, i)."""
    seed = int.from_bytes(hashlib.blake2b(f"{label}:{i}".encode(), digest_size=8).digest(), "little")
    r = np.random.default_rng(seed).normal(size=d)
    return r / np.linalg.norm(r)


def _check_square(matrix) -> np.ndarray:
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise RangeError(f"expected a square matrix, got shape {m.shape}")
    return m


def _iterate(B, v, rounds):
    y = v / np.linalg.norm(v)
    for _ in range(rounds):
        y = v / np.linalg.norm(v)
        v = B @ y
        if np.linalg.norm(v) == 0.0:
            break
    return y, v


def _start(matrix, label, i, frac_bits):
    tiny = 2.0 ** (-frac_bits / 2)
    v = matrix[:, 0].copy()
    if np.linalg.norm(v) < tiny:
        # push the restart through the matrix so it stays in its range:
        # under a shift, deflated directions would otherwise tie with the target
        r = restart_vector(label, i, matrix.shape[0])
        v = matrix @ r
        if np.linalg.norm(v) < tiny:
            v = r
    if np.linalg.norm(v) == 0.0:
        raise ZeroVector(f"{label}: zero start vector for eigenpair {i}")
    return v


def power_iteration(matrix, iteration_round: int = 50, label: str = "power_iteration",
                    frac_bits: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs by power iteration with Rayleigh quotient and deflation.

    Each pair starts from column 0 of the deflated matrix; if that column
    is numerically zero a seeded public vector is used instead.
    """
    m = _check_square(matrix)
    d = m.shape[0]
    vals, vecs = np.zeros(d), np.zeros((d, d))
    for i in range(d):
        y, v = _iterate(m, _start(m, label, i, frac_bits), iteration_round)
        lam = float(y @ v)
        m = m - lam * np.outer(y, y)
        vals[i], vecs[:, i] = lam, y
    return vals, vecs


def shift_alpha(last, i: int) -> float:
    return last[i] / 2 if i == len(last) - 1 else last[i + 1] / 2


def shift_power_iteration(matrix, last_eigenvalue_array, iteration_round: int = 300,
                          label: str = "shift_power_iteration", frac_bits: int = 20):
    """Power iteration on M - alp*I with alp from a previous eigenvalue estimate."""
    m = _check_square(matrix)
    d = m.shape[0]
    last = np.asarray(last_eigenvalue_array, dtype=np.float64)
    vals, vecs = np.zeros(d), np.zeros((d, d))
    for i in range(d):
        alp = shift_alpha(last, i)
        y, v = _iterate(m - alp * np.eye(d), _start(m, label, i, frac_bits), iteration_round)
        lam = float(y @ v) + alp
        m = m - lam * np.outer(y, y)
        vals[i], vecs[:, i] = lam, y
    return vals, vecs


def merge_covariances(covs: Sequence[np.ndarray], ns: Sequence[int]) -> np.ndarray:
    """Sum of n_i/(N-1) * cov_i, with cov_i the party's Gram about the global mean / n_i."""
    total = sum(ns)
    return sum((n / (total - 1)) * np.asarray(c) for c, n in zip(covs, ns))


def loadings(vectors, values) -> np.ndarray:
    """Eigenvector columns scaled by the square root of their eigenvalue."""
    return np.asarray(vectors) * np.sqrt(np.clip(values, 0.0, None))[None, :]


def fa_diagnostics(model: FaModel, tol: float = 1e-2) -> dict:
    """Convergence residuals computed from the revealed outputs only.

    A d x d correlation matrix has trace d and orthonormal eigenvectors
    (loading columns divided by sqrt(factor)); a shifted iteration that
    failed to converge shows up as a gap in either.
    """
    vals = np.asarray(model.principal_factors, dtype=np.float64)
    keep = vals > tol
    v = np.asarray(model.factor_loading_matrix)[:, keep] / np.sqrt(vals[keep])
    trace_gap = float(abs(vals.sum() - len(vals)))
    ortho = float(np.max(np.abs(v.T @ v - np.eye(v.shape[1])))) if v.size else 0.0
    return {"trace_gap": trace_gap, "orthogonality": ortho, "converged": trace_gap <= tol and ortho <= tol}


def _fa_model(out: np.ndarray) -> FaModel:
    model = FaModel(out[0], out[1:])
    diag = fa_diagnostics(model)
    if not diag["converged"]:
        warnings.warn(f"factor analysis residuals out of tolerance (trace gap {diag['trace_gap']:.2e}, "
                      f"orthogonality {diag['orthogonality']:.2e}): the shifted iteration did not "
                      "converge or a column has zero variance")
    return model


# -- shared building blocks -------------------------------------------------

def _scalar(x: SecretShareTensor) -> SecretShareTensor:
    return x.reshape(1)


def _dot(eng: Engine, x: SecretShareTensor, y: SecretShareTensor) -> SecretShareTensor:
    return eng.mul(x, y).sum().reshape(1)


def shared_sqrt(eng: Engine, x: SecretShareTensor, bound: float, cfg: PipelineConfig) -> SecretShareTensor:
    """sqrt(x) = x / sqrt(x) for x >= 0 up to fixed-point noise.

    A small floor keeps Newton bounded near zero; two more steps without
    the floor then remove the bias it introduces.
    """
    floor = 4 * eng.codec.ulp
    y = eng.inv_sqrt(x, bound=bound, rounds=cfg.init_rounds, floor=floor)
    y = eng.inv_sqrt(x, bound=bound, rounds=2, guess=y)
    return eng.mul(x, y)


def trace_normalize(eng: Engine, M: SecretShareTensor, bound: float, cfg: PipelineConfig):
    """Return (M / (tr M + eps), tr M + eps) with eps a public floor."""
    tf = M.diagonal().sum().reshape(1) + 2.0 ** -10
    g = eng.inv_sqrt(tf, bound=bound + 2.0 ** -10, rounds=cfg.init_rounds)
    h = eng.mul(g, g)
    return eng.mul(M, h), tf


def shared_power_iteration(eng: Engine, M: SecretShareTensor, iters: int, cfg: PipelineConfig,
                           label: str = "power_iteration", last: SecretShareTensor | None = None):
    """Power iteration (or the shifted variant when ``last`` is given) on a
    shared matrix with trace at most about 1.

    Returns shared (eigenvalues (d,), eigenvectors (d, d) as columns);
    nothing is revealed.  Each pair starts from A p with p a public
    pseudo-random unit vector: that is oblivious and, unlike a data
    dependent restart, never needs a branch.
    """
    d = M.shape[0]
    eye = np.eye(d, dtype=np.int64)
    cur = M
    vals, vecs = [], []
    for i in range(d):
        tf = cur.diagonal().sum().reshape(1) + 2.0 ** -10
        g = eng.inv_sqrt(tf, bound=1.0 + 2.0 ** -10, rounds=cfg.init_rounds)
        h = eng.mul(g, g)
        if last is None:
            A = eng.mul(cur, h)
            B, alp = A, None
        else:
            j = i if i == d - 1 else i + 1
            A, alp = eng.mul_batch([("mul", cur, h), ("mul", last[j:j + 1], h, 1)])
            B = A - alp.mul_int(eye)
        # start inside the range of the deflated matrix: with the last
        # shift, deflated directions tie with the target in B
        p = np.eye(d)[0] + cfg.start_eps * restart_vector(label, i, d)
        v = eng.matmul_public(A, p / np.linalg.norm(p))
        y = v
        for it in range(iters):
            nn = _dot(eng, v, v)
            s = eng.inv_sqrt(nn, bound=1.0, rounds=cfg.init_rounds if it == 0 else cfg.newton_rounds,
                             floor=eng.codec.ulp)
            y = eng.mul(v, s)
            v = eng.matmul(B, y.reshape(d, 1)).reshape(d)
        lam_a = _dot(eng, y, v)
        if alp is not None:
            lam_a = lam_a + alp
        if i < d - 1:
            lam, outer = eng.mul_batch([("mul", lam_a, tf), ("mul", y.reshape(d, 1), y.reshape(1, d))])
            cur = cur - eng.mul(outer, lam)
        else:
            lam = eng.mul(lam_a, tf)
        vals.append(lam)
        vecs.append(y)
    return concatenate(vals), stack(vecs, axis=1)


def eigensystem(eng: Engine, M: SecretShareTensor, trace_bound: float, cfg: PipelineConfig,
                label: str = "power_iteration"):
    Mt, scale = trace_normalize(eng, M, trace_bound, cfg)
    vals, vecs = shared_power_iteration(eng, Mt, cfg.iters, cfg, label)
    return eng.mul(vals, scale), vecs


def fa_core(eng: Engine, cov: SecretShareTensor, cfg: PipelineConfig, label="factor_loading_matrix",
            diag_bound: float = 2.0):
    """Correlation matrix, power pass, shifted pass and loadings (all shared)."""
    d = cov.shape[0]
    # floored start keeps a zero-variance column bounded, the polish steps
    # remove the floor's bias; scaling rows then columns avoids forming
    # sd_inv_i * sd_inv_j, which is huge for such a column
    diag = cov.diagonal()
    sd_inv = eng.inv_sqrt(diag, bound=diag_bound, rounds=cfg.init_rounds, floor=eng.codec.ulp)
    sd_inv = eng.inv_sqrt(diag, bound=diag_bound, rounds=2, guess=sd_inv)
    corr = eng.mul(eng.mul(cov, sd_inv.reshape(d, 1)), sd_inv.reshape(1, d))
    Ct, scale = trace_normalize(eng, corr, float(d), cfg)
    first, _ = shared_power_iteration(eng, Ct, cfg.iters, cfg, label + "/power")
    vals_t, vecs = shared_power_iteration(eng, Ct, cfg.shift_iters, cfg, label + "/shift", last=first)
    vals = eng.mul(vals_t, scale)
    root = shared_sqrt(eng, vals, float(d), cfg)
    return vals, eng.mul(vecs, root.reshape(1, d))


# -- local tasks ------------------------------------------------------------

def _chunks(data, cfg: PipelineConfig):
    if isinstance(data, np.ndarray):
        if data.size and np.max(np.abs(data)) > cfg.max_abs:
            raise RangeError(f"data exceeds max_abs={cfg.max_abs}")
        return ingest.iter_chunks(data, cfg.chunk_rows)
    return ingest.iter_chunks(data, cfg.chunk_rows, header=cfg.header, max_abs=cfg.max_abs)


def _dim(data) -> int:
    if isinstance(data, np.ndarray):
        return data.shape[1]
    first = ingest.ChunkReader(data, chunk_rows=1).read_chunk()
    if first is None:
        raise RangeError("empty dataset")
    return first.shape[1]


def local_pass(data, cfg: PipelineConfig, mode: str, mu=None) -> ingest.Accumulators:
    acc = ingest.Accumulators(_dim(data))
    for chunk in _chunks(data, cfg):
        ingest.accumulate(acc, chunk, "sum")
        if mode != "sum":
            ingest.accumulate(acc, chunk, mode, mu)
    return acc


def _audit_or_raise(plan, eng: Engine, n: int, cfg: PipelineConfig) -> None:
    if not cfg.audit_plan:
        return
    report = audit(plan, eng.m, max(n, 1))
    if not report.verdict:
        raise AuditFailure(report)


# -- SMPC sub-tasks ---------------------------------------------------------

BOOST = 64.0  # power of two: shared Gram inputs use 6 more bits of the ring


def _share_sum(eng: Engine, mine: np.ndarray) -> SecretShareTensor:
    parts = eng.input_all(mine)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def cpt_tot_col_avg(eng: Engine, col_avg, n_i: int, cfg: PipelineConfig) -> np.ndarray:
    """Weighted mean of per-party column averages; reveals only the result.

    Each party shares n_i * avg_i and n_i (normalized); the total count
    stays secret and the division goes through an inverse square root
    applied twice.
    """
    R, mx = cfg.row_bound, cfg.max_abs
    mine = np.append(BOOST * n_i * np.asarray(col_avg, dtype=np.float64) / (R * mx), n_i / R)
    total = _share_sum(eng, mine)
    d = total.shape[0] - 1
    w = eng.inv_sqrt(total[d:], bound=1.0, rounds=cfg.init_rounds + 10)
    mean = eng.mul(eng.mul(total[:d], w), w)
    return eng.reveal(mean, "cpt_tot_col_avg") * (mx / BOOST)


def merged_matrix(eng: Engine, local: np.ndarray, n_i: int, cfg: PipelineConfig):
    """Share a local Gram-type matrix plus the row count and sum them.

    Returns (G, N) with G = BOOST * sum(G_i) / (R max_abs^2) and N = sum(n_i) / R,
    both shared.  Eigenvalues are invariant to the scale of G up to a
    factor, so the 1/(N-1) weight is applied to eigenvalues only.
    """
    R, mx = cfg.row_bound, cfg.max_abs
    d = local.shape[0]
    mine = np.append(BOOST * np.asarray(local, dtype=np.float64).reshape(-1) / (R * mx * mx), n_i / R)
    total = _share_sum(eng, mine)
    return total[:d * d].reshape(d, d), total[d * d:]


def sample_weight(eng: Engine, count: SecretShareTensor, cfg: PipelineConfig) -> SecretShareTensor:
    """Shared sqrt(R / (N - 1)) from the shared N / R."""
    return eng.inv_sqrt(count - 1.0 / cfg.row_bound, bound=1.0, rounds=cfg.init_rounds + 10)


# -- decomposed pipelines ---------------------------------------------------

def pca_decomposed(eng: Engine, data, cfg: PipelineConfig | None = None) -> PcaModel:
    cfg = cfg or PipelineConfig()
    acc = local_pass(data, cfg, "sum")
    d = acc.d
    _audit_or_raise(pca_plan(eng.m, d), eng, acc.total_lines, cfg)
    mean = cpt_tot_col_avg(eng, acc.column_avg, acc.total_lines, cfg)
    acc = local_pass(data, cfg, "centered_gram", mean)
    G, count = merged_matrix(eng, acc.centered_gram, acc.total_lines, cfg)
    vals, vecs = eigensystem(eng, G, BOOST * d, cfg)
    w = sample_weight(eng, count, cfg)
    vals = eng.mul(eng.mul(vals, w), w)
    out = eng.reveal(concatenate([vals.reshape(1, d), vecs]), "power_iteration")
    return PcaModel(mean, out[0] * (cfg.max_abs ** 2 / BOOST), out[1:])


def svd_decomposed(eng: Engine, data, cfg: PipelineConfig | None = None) -> SvdModel:
    cfg = cfg or PipelineConfig()
    acc = local_pass(data, cfg, "gram")
    d = acc.d
    _audit_or_raise(svd_plan(eng.m, d), eng, acc.total_lines, cfg)
    G, _ = merged_matrix(eng, acc.gram, acc.total_lines, cfg)
    vals, vecs = eigensystem(eng, G, BOOST * d, cfg, "singular_value_and_matrix")
    sv = shared_sqrt(eng, vals, BOOST * d, cfg)
    out = eng.reveal(concatenate([sv.reshape(1, d), vecs]), "singular_value_and_matrix", irreversible=True)
    return _svd_model(out, cfg, BOOST)


def _svd_model(out: np.ndarray, cfg: PipelineConfig, boost: float = 1.0) -> SvdModel:
    sv = out[0] * cfg.max_abs * math.sqrt(cfg.row_bound / boost)
    if np.any(sv < 0):
        warnings.warn("negative singular value from fixed-point noise clamped to 0")
        sv = np.clip(sv, 0.0, None)
    return SvdModel(sv, out[1:])


def fa_decomposed(eng: Engine, data, cfg: PipelineConfig | None = None) -> FaModel:
    cfg = cfg or PipelineConfig()
    acc = local_pass(data, cfg, "sum")
    d = acc.d
    _audit_or_raise(fa_plan(eng.m, d), eng, acc.total_lines, cfg)
    mean = cpt_tot_col_avg(eng, acc.column_avg, acc.total_lines, cfg)
    acc = local_pass(data, cfg, "centered_gram", mean)
    # correlation is scale free, so the 1/(N-1) weight drops out
    G, _ = merged_matrix(eng, acc.centered_gram, acc.total_lines, cfg)
    vals, load = fa_core(eng, G, cfg, diag_bound=BOOST)
    out = eng.reveal(concatenate([vals.reshape(1, d), load]), "factor_loading_matrix", irreversible=True)
    return _fa_model(out)


DECOMPOSED = {"pca": pca_decomposed, "svd": svd_decomposed, "fa": fa_decomposed}


# -- traditional baseline ---------------------------------------------------

def _share_rows(eng: Engine, data, cfg: PipelineConfig) -> SecretShareTensor:
    own = np.vstack(list(_chunks(data, cfg))) if not isinstance(data, np.ndarray) else data
    d = own.shape[1]
    parts = [eng.input(j, own / cfg.max_abs if j == eng.party_id else None, shape=(-1, d))
             for j in range(eng.m)]
    return concatenate(parts)


def traditional_covariance(eng: Engine, data, cfg: PipelineConfig):
    """Share every row, then compute the mean and sample covariance under MPC.

    Both come back shared and scaled by 1/max_abs (covariance by its square).
    """
    X = _share_rows(eng, data, cfg)
    N = X.shape[0]
    mu = eng.scale_public(X.sum(axis=0), 1.0 / N)
    Xs = eng.scale_public(X - mu, 1.0 / math.sqrt(N - 1))
    del X
    return mu, eng.matmul(Xs.T, Xs)


def traditional_baseline(eng: Engine, task: str, data, cfg: PipelineConfig | None = None):
    """Monolithic variant: every row is secret-shared and all stages run under MPC."""
    cfg = cfg or PipelineConfig()
    if task == "svd":
        X = _share_rows(eng, data, cfg)
        d = X.shape[1]
        Xs = eng.scale_public(X, 1.0 / math.sqrt(cfg.row_bound))
        del X
        G = eng.matmul(Xs.T, Xs)
        del Xs
        vals, vecs = eigensystem(eng, G, float(d), cfg, "singular_value_and_matrix")
        sv = shared_sqrt(eng, vals, float(d), cfg)
        out = eng.reveal(concatenate([sv.reshape(1, d), vecs]), "traditional_svd", irreversible=True)
        return _svd_model(out, cfg)
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    mu, cov = traditional_covariance(eng, data, cfg)
    d = cov.shape[0]
    if task == "pca":
        vals, vecs = eigensystem(eng, cov, 2.0 * d, cfg)
        out = eng.reveal(concatenate([mu.reshape(1, d), vals.reshape(1, d), vecs]), "traditional_pca")
        return PcaModel(out[0] * cfg.max_abs, out[1] * cfg.max_abs ** 2, out[2:])
    vals, load = fa_core(eng, cov, cfg)
    out = eng.reveal(concatenate([vals.reshape(1, d), load]), "traditional_fa", irreversible=True)
    return _fa_model(out)


def party_main(eng: Engine, task: str, mode: str, data, cfg: PipelineConfig | None = None):
    if mode == "decomposed":
        return DECOMPOSED[task](eng, data, cfg)
    if mode == "traditional":
        return traditional_baseline(eng, task, data, cfg)
    raise ValueError(f"unknown mode {mode!r}")


def run_pipeline(task: str, mode: str, datasets: Sequence, cfg: PipelineConfig | None = None,
                 frac_bits: int = 20, seed: int = 0):
    """Run one pipeline with len(datasets) in-process parties.

    Returns the list of per-party :class:`~smpctd.runner.PartyResult`.
    """
    from .runner import run_local

    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    return run_local(len(datasets), lambda eng: party_main(eng, task, mode, datasets[eng.party_id], cfg),
                     frac_bits=frac_bits, seed=seed, session_id=f"{task}-{mode}")


# -- applying a model -------------------------------------------------------

def project(model, data, k: int) -> np.ndarray:
    """Reduce local data to k dimensions.

    PCA: (A - mean) V_k.  SVD: A V_k.  FA: least-squares factor scores
    A pinv(L_k)^T, i.e. A V_k / sqrt(lambda_k) for orthogonal loadings.
    """
    A = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if isinstance(model, PcaModel):
        V = model.eigenvector_matrix
        A = A - model.total_avg
    elif isinstance(model, SvdModel):
        V = model.right_singular_matrix
    elif isinstance(model, FaModel):
        V = np.linalg.pinv(model.factor_loading_matrix[:, :k]).T if 1 <= k <= model.factor_loading_matrix.shape[1] else None
    else:
        raise TypeError(f"not a model: {type(model).__name__}")
    d = A.shape[1]
    if not 1 <= k <= d:
        raise RangeError(f"k must be in [1, {d}], got {k}")
    return A @ V[:, :k]
