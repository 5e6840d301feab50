"""Matrix-free generalized Schur complement operator and the K_nn solve
service.

Eliminating the nonconducting block of the partitioned system through a
pseudo-inverse of K_nn turns the DAE into an ODE for the conducting DoFs:

    M_cc da_c/dt + (K_cc(a_c) - K_S) a_c = -K_cn pinv(K_nn) j_sn,
    K_S = K_cn pinv(K_nn) K_cn^T,
    a_n = pinv(K_nn) (j_sn - K_cn^T a_c).

K_S is never assembled; every use is an operator application backed by a
PCG solve on K_nn. Those solves share one constant matrix, so each solve
purpose (Schur apply, source term, a_n recovery) keeps its own recycling
history: histories from different right-hand-side families would be poor
extrapolation data for each other.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import SystemBlocks
from .errors import Ic0Breakdown, SolverError
from .linalg import LinearOperator, jacobi_preconditioner, ic0_preconditioner, pcg
from .startvec import make_provider

PURPOSES = ("schur_apply", "source_term", "recovery")


@dataclass
class SolveRecord:
    step: int
    purpose: str
    strategy: str
    iterations: int
    residual: float


@dataclass
class IterationStats:
    """Per-solve PCG iteration counts plus running aggregates."""

    records: list[SolveRecord] = field(default_factory=list)
    _totals: dict = field(default_factory=dict)

    def record(self, step: int, purpose: str, strategy: str, iterations: int,
               residual: float) -> None:
        self.records.append(SolveRecord(step, purpose, strategy, iterations, residual))
        count, total = self._totals.get(purpose, (0, 0))
        self._totals[purpose] = (count + 1, total + iterations)

    @property
    def n_solves(self) -> int:
        return sum(c for c, _ in self._totals.values())

    @property
    def total_iterations(self) -> int:
        return sum(t for _, t in self._totals.values())

    def mean_iterations(self, purpose: str | None = None) -> float:
        if purpose is None:
            n = self.n_solves
            return self.total_iterations / n if n else 0.0
        count, total = self._totals.get(purpose, (0, 0))
        return total / count if count else 0.0

    def write_csv(self, fh) -> None:
        fh.write("step,purpose,strategy,iterations,residual\n")
        for r in self.records:
            fh.write(f"{r.step},{r.purpose},{r.strategy},{r.iterations},{r.residual!r}\n")


def knn_preconditioner(blocks: SystemBlocks):
    """IC(0) on K_nn, falling back to Jacobi on breakdown."""
    if blocks.n_n == 0:
        return None
    try:
        return ic0_preconditioner(blocks.K_nn)
    except Ic0Breakdown:
        return jacobi_preconditioner(blocks.K_nn)


class SchurContext:
    """Owns the K_nn preconditioner (built once per assembly; K_nn never
    changes during a run), the per-purpose start-vector histories and the
    iteration statistics. Single-owner mutable; not shared across threads."""

    def __init__(self, blocks: SystemBlocks, tol: float = 1e-6,
                 max_iter: int | None = None, strategy: str = "previous",
                 cspe_window: int = 5, pod_window: int = 10, tol_pod: float = 1e4,
                 combined_recovery: bool = True, preconditioner=None):
        self.blocks = blocks
        self.tol = tol
        self.max_iter = max_iter
        self.strategy = strategy
        self.combined_recovery = combined_recovery
        self.precond = preconditioner if preconditioner is not None \
            else knn_preconditioner(blocks)
        self._provider_args = dict(cspe_window=cspe_window, pod_window=pod_window,
                                   tol_pod=tol_pod)
        self.providers = {
            purpose: make_provider(strategy, blocks.K_nn, **self._provider_args)
            for purpose in PURPOSES
        }
        self.stats = IterationStats()
        self.step = 0
        self.wall_time = 0.0
        self._estimation: "SchurContext | None" = None

    def estimation_context(self) -> "SchurContext":
        """Context for eigenvalue estimation: shares the blocks and the
        preconditioner but keeps separate histories and statistics, so the
        estimate is identical across start-vector strategies and the run's
        recycling histories stay clean. Cached: successive re-estimations
        recycle each other's solves."""
        if self._estimation is None:
            self._estimation = SchurContext(
                self.blocks, tol=self.tol, max_iter=self.max_iter,
                strategy="previous", combined_recovery=self.combined_recovery,
                preconditioner=self.precond)
        return self._estimation


def solve_knn(ctx: SchurContext, rhs: np.ndarray, purpose: str) -> np.ndarray:
    """x = pinv(K_nn) rhs via PCG with the configured start-vector strategy.

    The start vector is taken from (and the solution pushed into) the
    history keyed by ``purpose``. Non-convergence is a hard error: the time
    stepper cannot proceed on an unconverged constraint solve.
    """
    if purpose not in PURPOSES:
        raise SolverError(f"unknown solve purpose {purpose!r}")
    if ctx.blocks.n_n == 0:
        return np.zeros(0)
    rhs = np.asarray(rhs, dtype=float)
    if float(np.linalg.norm(rhs)) == 0.0:
        # zero rhs has the zero pseudo-solution; leave the history alone
        ctx.stats.record(ctx.step, purpose, ctx.strategy, 0, 0.0)
        return np.zeros(ctx.blocks.n_n)
    t0 = time.perf_counter()
    provider = ctx.providers[purpose]
    x0 = provider.start(rhs)
    report = pcg(ctx.blocks.K_nn, rhs, x0=x0, precond=ctx.precond, tol=ctx.tol,
                 max_iter=ctx.max_iter)
    if not report.converged:
        raise SolverError(
            f"K_nn solve ({purpose}) did not converge: {report.iterations} iterations, "
            f"relative residual {report.final_relative_residual:.3e}"
        )
    provider.push(report.solution)
    ctx.stats.record(ctx.step, purpose, ctx.strategy, report.iterations,
                     report.final_relative_residual)
    ctx.wall_time += time.perf_counter() - t0
    return report.solution


def apply_ks(ctx: SchurContext, a_c: np.ndarray) -> np.ndarray:
    """K_S a_c = K_cn pinv(K_nn) K_cn^T a_c, evaluated matrix-free."""
    rhs = ctx.blocks.K_nc.matvec(np.asarray(a_c, dtype=float))
    y = solve_knn(ctx, rhs, "schur_apply")
    return ctx.blocks.K_cn.matvec(y)


def schur_rhs(ctx: SchurContext, j_sn: np.ndarray) -> np.ndarray:
    """Source contribution -K_cn pinv(K_nn) j_sn of the Schur ODE."""
    y = solve_knn(ctx, np.asarray(j_sn, dtype=float), "source_term")
    return -ctx.blocks.K_cn.matvec(y)


def recover_an(ctx: SchurContext, a_c: np.ndarray, j_sn: np.ndarray) -> np.ndarray:
    """a_n = pinv(K_nn) j_sn - pinv(K_nn) K_cn^T a_c.

    By default the two terms are combined into one solve on
    (j_sn - K_cn^T a_c); the literal two-solve form is available for
    verification via ``combined_recovery=False`` (results agree by
    linearity within solver tolerance).
    """
    a_c = np.asarray(a_c, dtype=float)
    j_sn = np.asarray(j_sn, dtype=float)
    if ctx.combined_recovery:
        return solve_knn(ctx, j_sn - ctx.blocks.K_nc.matvec(a_c), "recovery")
    x1 = solve_knn(ctx, j_sn, "recovery")
    x2 = solve_knn(ctx, ctx.blocks.K_nc.matvec(a_c), "recovery")
    return x1 - x2


def ks_operator(ctx: SchurContext) -> LinearOperator:
    """K_S as a LinearOperator on the conducting DoFs."""
    return LinearOperator(ctx.blocks.n_c, lambda x: apply_ks(ctx, x))
