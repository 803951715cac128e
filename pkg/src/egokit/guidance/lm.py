"""Levenberg-Marquardt over block-structured variables.

A problem exposes ``num_blocks`` variable blocks of equal tangent size and
returns its residuals as batches.  Each batch row references a few blocks
and carries the dense Jacobian against each of them, so J^T J is assembled
as a sparse matrix of dense blocks and solved with preconditioned CG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteResidualError(FloatingPointError):
    pass


@dataclass
class ResidualBatch:
    """``n`` residual rows of size ``r``, each referencing ``k`` variable blocks.

    blocks (n, k) int, residual (n, r), jacobian (n, k, r, block_dim).  With
    ``diagonal=True`` the Jacobian against each block is block-diagonal and
    stored compactly as (n, k, m, s, s) with r = block_dim = m * s.
    """

    name: str
    blocks: np.ndarray
    residual: np.ndarray
    jacobian: np.ndarray
    diagonal: bool = False

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.int64)
        n, k = self.blocks.shape
        if self.diagonal:
            m, s = self.jacobian.shape[2], self.jacobian.shape[3]
            ok = self.jacobian.shape[:2] == (n, k) and self.residual.shape == (n, m * s)
        else:
            ok = self.residual.shape[0] == n and self.jacobian.shape[:3] == (n, k, self.residual.shape[1])
        if not ok:
            raise ValueError(f"inconsistent shapes in residual batch {self.name!r}")
        if k < 1:
            raise ValueError(f"residual batch {self.name!r} references no variable blocks")

    def dense_jacobian(self) -> np.ndarray:
        if not self.diagonal:
            return self.jacobian
        n, k, m, s, _ = self.jacobian.shape
        out = np.zeros((n, k, m, s, m, s))
        idx = np.arange(m)
        out[:, :, idx, :, idx, :] = np.moveaxis(self.jacobian, 2, 0)
        return out.reshape(n, k, m * s, m * s)


class ResidualProblem:
    """Interface: subclasses set ``num_blocks``/``block_dim`` and implement evaluate and retract."""

    num_blocks: int
    block_dim: int

    def evaluate(self, x) -> list[ResidualBatch]:
        raise NotImplementedError

    def retract(self, x, delta: np.ndarray):
        """Apply a tangent step of shape (num_blocks, block_dim)."""
        raise NotImplementedError


class EuclideanProblem(ResidualProblem):
    """Single-block problem from a residual function and its Jacobian; x is a flat vector."""

    def __init__(self, fun, jac, dim: int):
        self.fun, self.jac = fun, jac
        self.num_blocks, self.block_dim = 1, dim

    def evaluate(self, x):
        r = np.atleast_1d(np.asarray(self.fun(x), dtype=np.float64))
        j = np.asarray(self.jac(x), dtype=np.float64).reshape(len(r), self.block_dim)
        return [ResidualBatch("residual", np.zeros((1, 1)), r[None], j[None, None])]

    def retract(self, x, delta):
        return np.asarray(x, dtype=np.float64) + delta.reshape(-1)


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-4
    rel_decrease_tol: float = 1e-8
    grad_tol: float = 1e-10
    cg_tol: float = 1e-12
    cg_max_iterations: int | None = None
    dense: bool = False


@dataclass
class LMResult:
    x: object
    cost: float
    trace: list = field(default_factory=list)  # cost after init and after each accepted step
    iterations: int = 0
    accepted: int = 0
    status: str = ""


def check_finite(batches):
    for b in batches:
        bad_r = ~np.isfinite(b.residual).all(axis=1)
        bad_j = ~np.isfinite(b.jacobian.reshape(len(b.jacobian), -1)).all(axis=1)
        bad = np.flatnonzero(bad_r | bad_j)
        if bad.size:
            i = bad[0]
            what = "residual" if bad_r[i] else "Jacobian"
            raise NonFiniteResidualError(
                f"non-finite {what} in {b.name!r} row {i} (variable blocks {b.blocks[i].tolist()})")


def total_cost(batches) -> float:
    return float(sum((b.residual**2).sum() for b in batches))


class BlockSparseMatrix:
    """Symmetric matrix stored as dense (d, d) blocks at (row, col) block coordinates."""

    def __init__(self, rows, cols, blocks, num_blocks, block_dim):
        self.rows, self.cols, self.blocks = rows, cols, blocks
        self.num_blocks, self.block_dim = num_blocks, block_dim

    @classmethod
    def normal_equations(cls, batches, num_blocks, block_dim):
        """Assemble J^T J and J^T r from residual batches."""
        chunks = []
        grad = np.zeros((num_blocks, block_dim))
        for b in batches:
            k = b.blocks.shape[1]
            jt = np.swapaxes(b.jacobian, -1, -2)
            if b.diagonal:
                n, _, m, sb, _ = b.jacobian.shape
                r = b.residual.reshape(n, 1, m, sb, 1)
                np.add.at(grad, b.blocks, (jt @ r).reshape(n, k, m * sb))
            else:
                np.add.at(grad, b.blocks, (jt @ b.residual[:, None, :, None])[..., 0])
            for i in range(k):
                for j in range(k):
                    chunks.append((b.blocks[:, i] * num_blocks + b.blocks[:, j], jt[:, i], b.jacobian[:, j], b.diagonal))
        uniq = np.unique(np.concatenate([c[0] for c in chunks]))
        summed = np.zeros((len(uniq), block_dim, block_dim))
        for keys, a, bj, diagonal in chunks:
            idx = np.searchsorted(uniq, keys)
            prod = a @ bj
            if diagonal:
                prod = ResidualBatch("", np.zeros((len(prod), 1)), np.zeros((len(prod), block_dim)),
                                     prod[:, None], diagonal=True).dense_jacobian()[:, 0]
            if len(np.unique(idx)) == len(idx):
                summed[idx] += prod
            else:
                np.add.at(summed, idx, prod)
        return cls(uniq // num_blocks, uniq % num_blocks, summed, num_blocks, block_dim), grad

    def diagonal(self) -> np.ndarray:
        out = np.zeros((self.num_blocks, self.block_dim))
        on = self.rows == self.cols
        out[self.rows[on]] = np.einsum("nii->ni", self.blocks[on])
        return out

    def diagonal_blocks(self) -> np.ndarray:
        out = np.zeros((self.num_blocks, self.block_dim, self.block_dim))
        on = self.rows == self.cols
        out[self.rows[on]] = self.blocks[on]
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v)
        prod = (self.blocks @ v[self.cols][..., None])[..., 0]
        np.add.at(out, self.rows, prod)
        return out

    def to_dense(self) -> np.ndarray:
        n, d = self.num_blocks, self.block_dim
        dense = np.zeros((n * d, n * d))
        for r, c, m in zip(self.rows, self.cols, self.blocks):
            dense[r * d:(r + 1) * d, c * d:(c + 1) * d] += m
        return dense


def conjugate_gradient(matvec, b: np.ndarray, tol: float = 1e-10, max_iterations: int | None = None,
                       precondition=None):
    """Preconditioned CG for SPD systems; stops when ||r|| <= tol * max(||b||, 1).

    Returns (x, iterations, residual norm).
    """
    x = np.zeros_like(b)
    r = b.copy()
    limit = max_iterations if max_iterations is not None else b.size
    thresh = tol * max(float(np.linalg.norm(b)), 1.0)
    rnorm = float(np.linalg.norm(r))
    if rnorm <= thresh:
        return x, 0, rnorm
    z = precondition(r) if precondition is not None else r
    p = z.copy()
    rz = float(np.vdot(r, z))
    it = 0
    for it in range(1, limit + 1):
        ap = matvec(p)
        pap = float(np.vdot(p, ap))
        if pap <= 0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rnorm = float(np.linalg.norm(r))
        if rnorm <= thresh:
            break
        z = precondition(r) if precondition is not None else r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, rnorm


def _solve_step(batches, problem, mu, config):
    nb, d = problem.num_blocks, problem.block_dim
    h, g = BlockSparseMatrix.normal_equations(batches, nb, d)
    diag = h.diagonal()
    # Columns with an all-zero diagonal are decoupled and have zero gradient;
    # a tiny floor keeps the preconditioner invertible without moving iterates.
    damp = mu * np.maximum(diag, 1e-300)
    if config.dense:
        a = h.to_dense() + np.diag(damp.reshape(-1))
        zero = np.flatnonzero(np.diag(a) <= 1e-300)
        a[zero, zero] = 1.0
        step = np.linalg.solve(a, -g.reshape(-1)).reshape(nb, d)
        return step, g
    pre = h.diagonal_blocks()
    idx = np.arange(d)
    pre[:, idx, idx] += damp
    bad = np.abs(pre[:, idx, idx]) <= 1e-300
    pre[:, idx, idx] = np.where(bad, 1.0, pre[:, idx, idx])
    pre_inv = np.linalg.inv(pre)

    def matvec(v):
        return h.matvec(v) + damp * v

    step, _, _ = conjugate_gradient(matvec, -g, tol=config.cg_tol, max_iterations=config.cg_max_iterations,
                                    precondition=lambda r: (pre_inv @ r[..., None])[..., 0])
    return step, g


def lm_solve(problem: ResidualProblem, x0, config: LMConfig = LMConfig()) -> LMResult:
    """Minimize the sum of squared residuals from ``x0``."""
    x = x0
    batches = problem.evaluate(x)
    check_finite(batches)
    cost = total_cost(batches)
    result = LMResult(x=x, cost=cost, trace=[cost])
    mu = config.initial_damping
    for it in range(config.max_iterations):
        result.iterations = it + 1
        step, g = _solve_step(batches, problem, mu, config)
        if float(np.linalg.norm(g)) < config.grad_tol:
            result.status = "gradient"
            result.iterations = it
            break
        candidate = problem.retract(x, step)
        new_batches = problem.evaluate(candidate)
        check_finite(new_batches)
        new_cost = total_cost(new_batches)
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            x, batches, cost = candidate, new_batches, new_cost
            result.trace.append(cost)
            result.accepted += 1
            mu /= 3.0
            if rel < config.rel_decrease_tol:
                result.status = "converged"
                break
        else:
            mu *= 3.0
    else:
        result.status = "max_iterations"
    result.x, result.cost = x, cost
    return result
