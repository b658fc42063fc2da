"""Per-class confidence solves: (L + lambda*E) alpha = lambda * s_target.

E = diag(union of markups). The shared system matrix is symmetric positive
definite once the graph is connected and anything is marked, so each class
reduces to one Jacobi-preconditioned conjugate-gradient solve. Summing the
per-class right-hand sides shows the solutions add up to the all-ones
vector, which is what keeps the field a distribution over classes.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import SolverError, ValidationError
from .graph import LaplacianMatrix

CFLD_MAGIC = b"CFLD"
CFLD_VERSION = 1

IGNORED = 255


@dataclass(frozen=True)
class CoarseAnnotation:
    """Disjoint per-class binary maps over the pixels of one image."""

    classes: list[int]
    maps: dict[int, np.ndarray]  # class id -> (n,) bool
    width: int
    height: int

    def __post_init__(self):
        n = self.width * self.height
        if not self.classes:
            raise ValidationError("annotation has no classes")
        if sorted(set(self.classes)) != sorted(self.classes):
            raise ValidationError("duplicate class ids")
        total = np.zeros(n, dtype=np.int64)
        for cid in self.classes:
            m = self.maps[cid]
            if m.shape != (n,) or m.dtype != np.bool_:
                raise ValidationError(f"class {cid}: map must be (n,) bool")
            if not 0 <= cid < IGNORED:
                raise ValidationError(f"class id {cid} out of range [0, 254]")
            total += m
        if total.max(initial=0) > 1:
            raise ValidationError("class maps overlap")
        if total.sum() == 0:
            raise ValidationError("no markups")

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def union(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        for cid in self.classes:
            out |= self.maps[cid]
        return out

    @classmethod
    def from_labels(cls, labels: np.ndarray, width: int, height: int,
                    allowed_ids=None) -> "CoarseAnnotation":
        """Split a flat or (h, w) label array (255 = unmarked) into maps."""
        flat = np.asarray(labels).ravel()
        if flat.shape != (width * height,):
            raise ValidationError("label array does not match dimensions")
        ids = sorted(int(v) for v in np.unique(flat) if v != IGNORED)
        if not ids:
            raise ValidationError("no markups")
        if allowed_ids is not None:
            missing = [i for i in ids if i not in set(allowed_ids)]
            if missing:
                raise ValidationError(f"mask ids {missing} not in the class table")
        maps = {cid: flat == cid for cid in ids}
        return cls(classes=ids, maps=maps, width=width, height=height)

    def to_labels(self) -> np.ndarray:
        """Back to an (h, w) uint8 array with 255 for unmarked pixels."""
        out = np.full(self.n, IGNORED, dtype=np.uint8)
        for cid in self.classes:
            out[self.maps[cid]] = cid
        return out.reshape(self.height, self.width)


@dataclass(frozen=True)
class ConfidenceField:
    """Per-class confidence maps; at each pixel the values sum to one."""

    classes: list[int]
    alphas: dict[int, np.ndarray]  # class id -> (n,) float64
    width: int
    height: int

    @property
    def n(self) -> int:
        return self.width * self.height

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(sorted class ids, (c, n) array) in ascending-id order."""
        ids = np.array(sorted(self.classes), dtype=np.int64)
        return ids, np.stack([self.alphas[int(c)] for c in ids])


class ClassSolveStats(NamedTuple):
    class_id: int
    iterations: int
    residual: float
    converged: bool
    seconds: float


@dataclass
class SolverReport:
    """Per-class solver outcomes plus field-level diagnostics."""

    classes: list[ClassSolveStats] = field(default_factory=list)
    total_seconds: float = 0.0
    sum_to_one_dev: float = 0.0
    range_min: float = 0.0
    range_max: float = 1.0

    def to_text(self) -> str:
        lines = []
        for st in self.classes:
            lines.append(
                f"class {st.class_id}: iterations={st.iterations} "
                f"residual={st.residual:.3e} converged={st.converged} "
                f"time={st.seconds:.3f}s"
            )
        lines.append(f"total_seconds: {self.total_seconds:.3f}")
        lines.append(f"sum_to_one_dev: {self.sum_to_one_dev:.3e}")
        lines.append(f"range_pre_clamp: [{self.range_min:.6f}, {self.range_max:.6f}]")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "classes": [st._asdict() for st in self.classes],
                "total_seconds": self.total_seconds,
                "sum_to_one_dev": self.sum_to_one_dev,
                "range_min": self.range_min,
                "range_max": self.range_max,
            }
        )


class PcgResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def _check_symmetric_sample(A):
    """Spot-check symmetry on a handful of stored entries."""
    if sp.issparse(A):
        coo = A.tocoo()
        if coo.nnz == 0:
            return
        step = max(1, coo.nnz // 8)
        csr = A.tocsr()
        for k in range(0, coo.nnz, step):
            i, j, v = int(coo.row[k]), int(coo.col[k]), coo.data[k]
            if abs(csr[j, i] - v) > 1e-8 * max(1.0, abs(v)):
                raise ValidationError("system matrix is not symmetric")
    else:
        A = np.asarray(A)
        if not np.allclose(A, A.T, atol=1e-10):
            raise ValidationError("system matrix is not symmetric")


def pcg_solve(A, b: np.ndarray, tol: float = 1e-6, maxiter: int = 2000,
              x0: np.ndarray | None = None) -> PcgResult:
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Stops when ||Ax - b|| <= tol * ||b||. On maxiter exhaustion returns the
    best iterate seen with converged=False.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    _check_symmetric_sample(A)
    diag = A.diagonal() if sp.issparse(A) else np.diagonal(np.asarray(A))
    if np.any(diag <= 0):
        raise SolverError("system diagonal must be strictly positive")
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return PcgResult(np.zeros_like(b), 0, 0.0, True)
    inv_diag = 1.0 / diag
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x if x0 is not None else b.copy()
    best_x, best_res = x.copy(), np.linalg.norm(r) / norm_b
    if best_res <= tol:
        return PcgResult(x, 0, best_res, True)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite along a search direction")
        step = rz / pAp
        x += step * p
        r -= step * Ap
        res = np.linalg.norm(r) / norm_b
        if res < best_res:
            best_res = res
            best_x = x.copy()
        if res <= tol:
            return PcgResult(x, it, res, True)
        z = inv_diag * r
        rz_next = r @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    return PcgResult(best_x, maxiter, best_res, False)


def dense_solve_oracle(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct dense solve (pivoted elimination); reference for the PCG path."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    if n > 4096:
        raise ValidationError("dense oracle capped at n=4096")
    if A.shape != (n, n) or b.shape != (n,):
        raise ValidationError("shape mismatch")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValidationError("dense oracle expects a symmetric matrix")
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular matrix: {exc}") from exc
    norm_b = np.linalg.norm(b)
    if norm_b > 0:
        rel = np.linalg.norm(A @ x - b) / norm_b
        if rel > 1e-9:
            raise SolverError(f"dense solve residual too large ({rel:.2e})")
    return x


def system_matrix(L: LaplacianMatrix, s_union: np.ndarray, lam: float) -> sp.csr_matrix:
    """L + lambda * diag(union markup)."""
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    s = np.asarray(s_union, dtype=np.float64).ravel()
    if s.shape != (L.n,):
        raise ValidationError("markup vector length mismatch")
    if s.sum() == 0:
        raise ValidationError("no markups")
    return (L.matrix + lam * sp.diags(s)).tocsr()


def solve_class(L: LaplacianMatrix, s_target: np.ndarray, s_union: np.ndarray,
                lam: float, tol: float = 1e-6, maxiter: int = 2000,
                system: sp.csr_matrix | None = None) -> tuple[np.ndarray, PcgResult]:
    """Confidence map of one class: solve (L + lambda E) alpha = lambda s_target."""
    s_target = np.asarray(s_target, dtype=np.float64).ravel()
    s_union = np.asarray(s_union, dtype=np.float64).ravel()
    if np.any((s_target > 0) & (s_union == 0)):
        raise ValidationError("target markups must be a subset of the union")
    A = system if system is not None else system_matrix(L, s_union, lam)
    result = pcg_solve(A, lam * s_target, tol=tol, maxiter=maxiter)
    return result.x, result


def quadratic_objective(L: LaplacianMatrix, s_target: np.ndarray,
                        s_union: np.ndarray, lam: float,
                        alpha: np.ndarray) -> float:
    """Value of the relaxed per-class loss at alpha (constant term included)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    target = np.asarray(s_target, dtype=bool)
    others = np.asarray(s_union, dtype=bool) & ~target
    smooth = float(alpha @ (L.matrix @ alpha))
    return (smooth + lam * float(np.sum(alpha[others] ** 2))
            + lam * float(np.sum((alpha[target] - 1.0) ** 2)))


def objective_gradient(L: LaplacianMatrix, s_target: np.ndarray,
                       s_union: np.ndarray, lam: float,
                       alpha: np.ndarray) -> np.ndarray:
    """Gradient 2(L + lambda E) alpha - 2 lambda s_target."""
    alpha = np.asarray(alpha, dtype=np.float64)
    s_t = np.asarray(s_target, dtype=np.float64)
    s_u = np.asarray(s_union, dtype=np.float64)
    return 2.0 * (L.matrix @ alpha + lam * s_u * alpha - lam * s_t)


def propagate_all(L: LaplacianMatrix, ann: CoarseAnnotation, lam: float,
                  tol: float = 1e-6, maxiter: int = 2000
                  ) -> tuple[ConfidenceField, SolverReport]:
    """Solve every class against the shared system and clamp to [0, 1].

    Raises SolverError (with the partial report attached) if any class
    fails to converge.
    """
    if L.n != ann.n:
        raise ValidationError("Laplacian size does not match annotation")
    union = ann.union.astype(np.float64)
    A = system_matrix(L, union, lam)
    report = SolverReport()
    t_start = time.perf_counter()
    raw = {}
    for cid in ann.classes:
        t0 = time.perf_counter()
        alpha, res = solve_class(L, ann.maps[cid].astype(np.float64), union,
                                 lam, tol=tol, maxiter=maxiter, system=A)
        report.classes.append(ClassSolveStats(
            class_id=cid, iterations=res.iterations, residual=res.residual,
            converged=res.converged, seconds=time.perf_counter() - t0))
        if not res.converged:
            report.total_seconds = time.perf_counter() - t_start
            raise SolverError(
                f"class {cid} did not converge within {maxiter} iterations "
                f"(residual {res.residual:.3e})",
                report=report,
            )
        raw[cid] = alpha
    stack = np.stack([raw[cid] for cid in ann.classes])
    report.sum_to_one_dev = float(np.abs(stack.sum(axis=0) - 1.0).max())
    report.range_min = float(stack.min())
    report.range_max = float(stack.max())
    report.total_seconds = time.perf_counter() - t_start
    alphas = {cid: np.clip(raw[cid], 0.0, 1.0) for cid in ann.classes}
    field_out = ConfidenceField(classes=list(ann.classes), alphas=alphas,
                                width=ann.width, height=ann.height)
    return field_out, report


def write_confidence_field(field_in: ConfidenceField, path):
    """CFLD dump: u32 version, n, c, class-id table, then c f32 planes."""
    ids, stack = field_in.stacked()
    with open(path, "wb") as fh:
        fh.write(CFLD_MAGIC)
        fh.write(struct.pack("<III", CFLD_VERSION, field_in.n, len(ids)))
        fh.write(np.asarray(ids, dtype="<u4").tobytes())
        fh.write(stack.astype("<f4").tobytes())


def read_confidence_planes(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a CFLD dump back as (class ids, (c, n) float32 planes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CFLD_MAGIC:
        raise ValidationError(f"{path}: not a CFLD file")
    version, n, c = struct.unpack("<III", blob[4:16])
    if version != CFLD_VERSION:
        raise ValidationError(f"{path}: unsupported CFLD version {version}")
    expected = 16 + 4 * c + 4 * c * n
    if len(blob) != expected:
        raise ValidationError(f"{path}: CFLD body has wrong length")
    ids = np.frombuffer(blob, dtype="<u4", count=c, offset=16)
    planes = np.frombuffer(blob, dtype="<f4", count=c * n, offset=16 + 4 * c)
    return ids.astype(np.int64), planes.reshape(c, n)
