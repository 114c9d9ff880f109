"""Plaintext reference models and the comparison report.

The eigensolver here is cyclic Jacobi, chosen because it shares nothing
with power iteration; agreement between the two is a real cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotSymmetric, ShapeMismatch, ZeroVariance
from .pipelines import FaModel, PcaModel, SvdModel, loadings


def oracle_eigen(matrix, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.

    Sweeps continue until the off-diagonal Frobenius norm is at most
    ``tol * max(1, ||M||_F)``.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"not a square matrix: shape {a.shape}")
    scale = max(1.0, float(np.linalg.norm(a)))
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * scale):
        raise NotSymmetric("matrix is not symmetric")
    a = (a + a.T) / 2
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[~np.eye(n, dtype=bool)])
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                if abs(theta) > 1e150:
                    t = 1 / (2 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                idx = [p, q]
                a[:, idx] = a[:, idx] @ rot
                a[idx, :] = rot.T @ a[idx, :]
                v[:, idx] = v[:, idx] @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def correlation(cov: np.ndarray, frac_bits: int = 20) -> np.ndarray:
    sd = np.sqrt(np.diag(cov))
    if np.any(np.diag(cov) < 2.0 ** (-frac_bits / 2)):
        raise ZeroVariance(f"zero variance in column(s) {np.flatnonzero(np.diag(cov) < 2.0 ** (-frac_bits / 2)).tolist()}")
    return cov / np.outer(sd, sd)


def oracle_pipeline(task: str, data) -> PcaModel | SvdModel | FaModel:
    """Reference model from the pooled data."""
    a = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if task == "svd":
        vals, vecs = oracle_eigen(a.T @ a)
        return SvdModel(np.sqrt(np.clip(vals, 0.0, None)), vecs)
    mean = a.mean(axis=0)
    cov = (a - mean).T @ (a - mean) / (a.shape[0] - 1)
    if task == "pca":
        vals, vecs = oracle_eigen(cov)
        return PcaModel(mean, vals, vecs)
    if task == "fa":
        vals, vecs = oracle_eigen(correlation(cov))
        return FaModel(vals, loadings(vecs, vals))
    raise ValueError(f"unknown task {task!r}")


@dataclass
class Tolerances:
    values_rel: float = 1e-3
    vectors_cos: float = 0.999
    loadings_abs: float = 1e-2
    mean_abs: float = 1e-3


@dataclass
class OracleReport:
    errors: dict[str, float] = field(default_factory=dict)
    cosines: list[float] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e} {'ok' if self.checks.get(k, True) else 'FAIL'}" for k, v in self.errors.items()]
        if self.cosines:
            lines.append("min |cos|: " + f"{min(self.cosines):.6f} {'ok' if self.checks.get('vectors', True) else 'FAIL'}")
        return "\n".join(lines)


def _rel(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor))) if a.size else 0.0


def _cosines(a, b) -> list[float]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    num = np.abs(np.sum(a * b, axis=0))
    den = np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)
    return (num / np.maximum(den, 1e-300)).tolist()


def _signed_abs_err(a, b) -> float:
    """Largest entry error after matching each column's sign."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    signs = np.where(np.sum(a * b, axis=0) < 0, -1.0, 1.0)
    return float(np.max(np.abs(a * signs - b))) if a.size else 0.0


def compare(model, reference, tolerances: Tolerances | None = None) -> OracleReport:
    tol = tolerances or Tolerances()
    if type(model) is not type(reference):
        raise ShapeMismatch(f"cannot compare {type(model).__name__} with {type(reference).__name__}")
    rep = OracleReport()
    if isinstance(model, PcaModel):
        rep.errors["total_avg"] = float(np.max(np.abs(model.total_avg - reference.total_avg)))
        rep.checks["total_avg"] = rep.errors["total_avg"] <= tol.mean_abs
        rep.errors["eigenvalue_array"] = _rel(model.eigenvalue_array, reference.eigenvalue_array)
        rep.checks["eigenvalue_array"] = rep.errors["eigenvalue_array"] <= tol.values_rel
        rep.cosines = _cosines(model.eigenvector_matrix, reference.eigenvector_matrix)
    elif isinstance(model, SvdModel):
        rep.errors["singular_value"] = _rel(model.singular_value, reference.singular_value)
        rep.checks["singular_value"] = rep.errors["singular_value"] <= tol.values_rel
        rep.cosines = _cosines(model.right_singular_matrix, reference.right_singular_matrix)
    elif isinstance(model, FaModel):
        rep.errors["principal_factors"] = _rel(model.principal_factors, reference.principal_factors)
        rep.checks["principal_factors"] = rep.errors["principal_factors"] <= tol.values_rel
        rep.errors["factor_loading_matrix"] = _signed_abs_err(model.factor_loading_matrix,
                                                             reference.factor_loading_matrix)
        rep.checks["factor_loading_matrix"] = rep.errors["factor_loading_matrix"] <= tol.loadings_abs
        return rep
    else:
        raise TypeError(f"not a model: {type(model).__name__}")
    rep.checks["vectors"] = min(rep.cosines, default=1.0) >= tol.vectors_cos
    return rep
