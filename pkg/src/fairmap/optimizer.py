"""Assembly and solution of the kernel-learning optimization.

The optimization variable is the randomized mapping from each
positive-mass input cell (d, x, y) to a transformed cell (x_hat, y_hat).
The objective is the divergence between the original (x, y) distribution
and its image under the mapping; discrimination and distortion enter as
linear constraints.  Zero-mass input cells are not variables; they get
deterministic identity rows in the returned kernel so that unseen inputs
pass through undistorted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .constants import DEFAULT_MAX_ITERS, DEFAULT_TOL, ROW_ATOL, TIE_BREAK_WEIGHT
from .constraints import (
    DiscriminationSpec,
    LinearConstraintSet,
    VariableLayout,
    build_discrimination_constraints,
    build_distortion_constraints,
)
from .distortion import DistortionBudget, DistortionMetric, distortion_matrix
from .domain import JointPMF, Schema, cond_y_given_x, kl_divergence, l1_distance
from .errors import InvalidParamsError
from .solver import (
    STATUS_INFEASIBLE,
    STATUS_ITERATION_LIMIT,
    STATUS_OPTIMAL,
    SimplexImageProgram,
    SolveOutcome,
    phase1_violation,
    solve_kl,
    solve_tv,
)

OBJECTIVE_KL = "kl"
OBJECTIVE_L1 = "l1"

SOF_FIX_CONDITIONAL = "fix_conditional"
SOF_ALTERNATING = "alternating"


@dataclass(frozen=True)
class TransformKernel:
    """The learned randomized mapping, one probability row per input cell.

    ``probs[d, x, y]`` is the distribution of (x_hat, y_hat) flattened as
    x_hat * ny + y_hat.  Rows are row-stochastic within 1e-9.
    """

    schema: Schema
    probs: np.ndarray
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        shape = (self.schema.nd, self.schema.nx, self.schema.ny,
                 self.schema.nx * self.schema.ny)
        if probs.shape != shape:
            raise InvalidParamsError(f"kernel must have shape {shape}")
        if probs.min() < -1e-15:
            raise InvalidParamsError("kernel has negative probabilities")
        sums = probs.sum(axis=3)
        if np.abs(sums - 1.0).max() > ROW_ATOL:
            raise InvalidParamsError("kernel rows must sum to 1")
        probs = np.maximum(probs, 0.0)
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def row(self, d: int, x: int, y: int) -> np.ndarray:
        """Row as an (nx, ny) array over transformed cells."""
        return self.probs[d, x, y].reshape(self.schema.nx, self.schema.ny)


def identity_kernel(schema: Schema, provenance: Optional[Mapping] = None) -> TransformKernel:
    nd, nx, ny = schema.nd, schema.nx, schema.ny
    probs = np.zeros((nd, nx, ny, nx * ny))
    for x in range(nx):
        for y in range(ny):
            probs[:, x, y, x * ny + y] = 1.0
    return TransformKernel(schema, probs, provenance or {})


def replacement_kernel(pmf: JointPMF) -> TransformKernel:
    """Every row resamples from the original (x, y) marginal; the
    distortion-free-utility / zero-discrimination reference point."""
    schema = pmf.schema
    row = pmf.p_xy().ravel()
    probs = np.broadcast_to(
        row, (schema.nd, schema.nx, schema.ny, row.size)
    ).copy()
    return TransformKernel(schema, probs)


@dataclass(frozen=True)
class Problem:
    """A fully assembled instance: data, specs, and the compiled program."""

    pmf: JointPMF
    objective: str
    disc_spec: Optional[DiscriminationSpec]
    metric: Optional[DistortionMetric]
    budget: Optional[DistortionBudget]
    layout: VariableLayout
    program: SimplexImageProgram
    disc_constraints: LinearConstraintSet
    dist_constraints: LinearConstraintSet

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    @property
    def warnings(self) -> tuple[str, ...]:
        return self.disc_constraints.warnings + self.dist_constraints.warnings

    def fingerprint(self) -> str:
        """Hash of everything that determines the optimum (seed-free)."""
        h = hashlib.sha256()
        h.update(self.pmf.mass.tobytes())
        h.update(self.objective.encode())
        if self.disc_spec is not None:
            spec = self.disc_spec
            eps = (
                spec.epsilon
                if np.isscalar(spec.epsilon)
                else sorted((str(k), v) for k, v in spec.epsilon.items())
            )
            h.update(
                json.dumps(
                    {
                        "mode": spec.mode,
                        "eps": eps,
                        "target": None if spec.target is None else spec.target.tolist(),
                        "condition_on": list(spec.condition_on),
                        "min_cell_count": spec.min_cell_count,
                    },
                    sort_keys=True,
                ).encode()
            )
        if self.metric is not None:
            h.update(distortion_matrix(self.metric, self.pmf.schema).tobytes())
        if self.budget is not None:
            h.update(self.budget.mode.encode())
            if self.budget.mode == "expected":
                h.update(np.asarray(self.budget.c, dtype=np.float64).tobytes())
            else:
                for t, b in self.budget.pairs:
                    h.update(np.float64(t).tobytes())
                    h.update(np.asarray(b, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def with_epsilon(self, epsilon) -> "Problem":
        if self.disc_spec is None:
            raise InvalidParamsError("problem has no discrimination spec to vary")
        return assemble(
            self.pmf,
            self.disc_spec.with_epsilon(epsilon),
            self.metric,
            self.budget,
            self.objective,
            _dist_cache=(self.dist_constraints, self.layout),
        )

    # -- evaluation helpers used by solver wrappers, audits, and tests -------
    def kernel_vec(self, kernel: TransformKernel) -> np.ndarray:
        rows = [kernel.probs[cell] for cell in self.layout.cells]
        return np.concatenate(rows) if rows else np.zeros(0)

    def objective_value(self, kernel) -> float:
        kvec = kernel if isinstance(kernel, np.ndarray) else self.kernel_vec(kernel)
        q = self.program.image(kvec)
        if self.objective == OBJECTIVE_KL:
            return kl_divergence(self.program.p_ref, q)
        return l1_distance(self.program.p_ref, q)

    def max_residual(self, kernel) -> float:
        kvec = kernel if isinstance(kernel, np.ndarray) else self.kernel_vec(kernel)
        return self.program.residual(kvec)

    def pushforward(self, kernel) -> np.ndarray:
        """Transformed (x_hat, y_hat) distribution as an (nx, ny) array."""
        kvec = kernel if isinstance(kernel, np.ndarray) else self.kernel_vec(kernel)
        schema = self.pmf.schema
        return self.program.image(kvec).reshape(schema.nx, schema.ny)


@dataclass(frozen=True)
class Solution:
    """Solver outcome plus the deployable kernel.

    ``certificate`` is the duality gap (optimal), the minimum total
    constraint violation (infeasible), or the last gap seen (iteration
    limit).  ``objective`` is NaN for infeasible problems.
    """

    status: str
    kernel: TransformKernel
    objective: float
    residual: float
    certificate: float
    iterations: int
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))


def _image_map(layout: VariableLayout) -> sp.csr_matrix:
    """A with (A k)_j = sum_r p(r) k_r(j): one nonzero per variable."""
    n_img = layout.row_dim
    cols = np.arange(layout.n_vars)
    rows = np.tile(np.arange(n_img), layout.n_rows)
    data = np.repeat(layout.weights, n_img)
    return sp.csr_matrix((data, (rows, cols)), shape=(n_img, layout.n_vars))


def _identity_anchor(layout: VariableLayout) -> np.ndarray:
    anchor = np.zeros(layout.n_vars)
    for row in range(layout.n_rows):
        anchor[row * layout.row_dim + layout.input_cell_index(row)] = 1.0
    return anchor


def assemble(
    pmf: JointPMF,
    disc_spec: Optional[DiscriminationSpec],
    metric: Optional[DistortionMetric] = None,
    budget: Optional[DistortionBudget] = None,
    objective: str = OBJECTIVE_KL,
    _dist_cache=None,
) -> Problem:
    """Compile data and specs into a solvable program.

    ``disc_spec`` or the distortion pair may be omitted (useful for
    studying one force in isolation); omitted parts contribute no
    constraints.
    """
    if objective not in (OBJECTIVE_KL, OBJECTIVE_L1):
        raise InvalidParamsError(f"unknown objective {objective!r}")
    if (metric is None) != (budget is None):
        raise InvalidParamsError("metric and budget must be given together")
    if _dist_cache is not None:
        dist, layout = _dist_cache
    else:
        layout = VariableLayout.from_pmf(pmf)
        if metric is not None:
            dist = build_distortion_constraints(metric, budget, pmf, layout)
        else:
            dist = LinearConstraintSet.empty(layout.n_vars)
    if disc_spec is not None:
        disc = build_discrimination_constraints(disc_spec, pmf, layout)
    else:
        disc = LinearConstraintSet.empty(layout.n_vars)
    merged = LinearConstraintSet.concat([disc, dist], layout.n_vars)
    program = SimplexImageProgram(
        n_rows=layout.n_rows,
        row_dim=layout.row_dim,
        A=_image_map(layout),
        p_ref=pmf.p_xy().ravel(),
        G=merged.G,
        h=merged.h,
        labels=merged.labels,
        anchor=_identity_anchor(layout),
        fixed_zero=merged.fixed_zero,
        tie_weight=TIE_BREAK_WEIGHT,
    )
    return Problem(
        pmf=pmf,
        objective=objective,
        disc_spec=disc_spec,
        metric=metric,
        budget=budget,
        layout=layout,
        program=program,
        disc_constraints=disc,
        dist_constraints=dist,
    )


def _kernel_from_vec(problem: Problem, kvec: np.ndarray,
                     provenance: Mapping) -> TransformKernel:
    schema = problem.pmf.schema
    nd, nx, ny = schema.nd, schema.nx, schema.ny
    probs = np.zeros((nd, nx, ny, nx * ny))
    for x in range(nx):
        for y in range(ny):
            probs[:, x, y, x * ny + y] = 1.0  # identity fallback rows
    for row, cell in enumerate(problem.layout.cells):
        probs[cell] = np.maximum(
            kvec[row * problem.layout.row_dim : (row + 1) * problem.layout.row_dim],
            0.0,
        )
    return TransformKernel(schema, probs, provenance)


def _provenance(problem: Problem, tol: float, extra: Optional[Mapping] = None) -> dict:
    prov = {
        "fingerprint": problem.fingerprint(),
        "objective": problem.objective,
        "tol": tol,
    }
    if extra:
        prov.update(extra)
    return prov


def solve(problem: Problem, tol: float = DEFAULT_TOL,
          max_iters: int = DEFAULT_MAX_ITERS) -> Solution:
    """Solve the assembled program to a certified tolerance.

    The total-variation objective goes through an exact LP; the KL
    objective through fully-corrective Frank-Wolfe.  Infeasible problems
    come back with a phase-1 certificate (minimum total violation) and a
    pointer at the most violated constraint.
    """
    path = solve_kl if problem.objective == OBJECTIVE_KL else solve_tv
    out = path(problem.program, tol=tol, max_iters=max_iters)
    kernel = _kernel_from_vec(problem, out.kvec, _provenance(problem, tol))
    return Solution(
        status=out.status,
        kernel=kernel,
        objective=out.objective,
        residual=out.residual,
        certificate=out.certificate,
        iterations=out.iterations,
        diagnostics=out.diagnostics,
    )


@dataclass(frozen=True)
class SweepEntry:
    epsilon: float
    status: str
    objective: float


@dataclass(frozen=True)
class SweepResult:
    """Objective as a function of the discrimination budget."""

    entries: tuple[SweepEntry, ...]
    tol: float

    def objectives(self) -> list[float]:
        return [e.objective for e in self.entries]

    @property
    def monotone_nonincreasing(self) -> bool:
        prev = None
        for e in self.entries:
            if e.status != STATUS_OPTIMAL:
                continue
            if prev is not None and e.objective > prev + self.tol:
                return False
            prev = e.objective
        return True

    @property
    def infeasible_boundary(self) -> Optional[float]:
        """Largest epsilon that still came back infeasible."""
        infeas = [e.epsilon for e in self.entries if e.status == STATUS_INFEASIBLE]
        return max(infeas) if infeas else None

    @property
    def zero_boundary(self) -> Optional[float]:
        """Smallest epsilon whose objective is indistinguishable from 0."""
        zeros = [
            e.epsilon
            for e in self.entries
            if e.status == STATUS_OPTIMAL and e.objective <= self.tol
        ]
        return min(zeros) if zeros else None


def sweep_epsilon(problem: Problem, eps_grid: Sequence[float],
                  tol: float = DEFAULT_TOL,
                  max_iters: int = DEFAULT_MAX_ITERS) -> SweepResult:
    """Independent solves across an ascending epsilon grid."""
    eps_grid = [float(e) for e in eps_grid]
    if eps_grid != sorted(eps_grid):
        raise InvalidParamsError("epsilon grid must be ascending")
    entries = []
    for eps in eps_grid:
        sol = solve(problem.with_epsilon(eps), tol=tol, max_iters=max_iters)
        entries.append(SweepEntry(eps, sol.status, sol.objective))
    return SweepResult(tuple(entries), tol)


# ---------------------------------------------------------------------------
# suppressed-variable solving
# ---------------------------------------------------------------------------


def _w_extended(pmf: JointPMF) -> np.ndarray:
    """p(y | x) rows, with the overall outcome marginal standing in for
    feature values never seen in the data."""
    cond, present = cond_y_given_x(pmf)
    w = cond.copy()
    w[~present] = pmf.p_y()
    return w


def _substitution_for_w(layout: VariableLayout, w: np.ndarray) -> sp.csr_matrix:
    """S with (S m)[(r, xh, yh)] = w[xh, yh] * m[(r, xh)]."""
    ny = layout.schema.ny
    nx = layout.schema.nx
    idx = np.arange(layout.n_vars)
    r = idx // layout.row_dim
    j = idx % layout.row_dim
    xh = j // ny
    yh = j % ny
    cols = r * nx + xh
    data = w[xh, yh]
    return sp.csr_matrix(
        (data, (idx, cols)), shape=(layout.n_vars, layout.n_rows * nx)
    )


def _substitution_for_m(layout: VariableLayout, m: np.ndarray) -> sp.csr_matrix:
    """S with (S w)[(r, xh, yh)] = m[r, xh] * w[(xh, yh)]."""
    ny = layout.schema.ny
    idx = np.arange(layout.n_vars)
    r = idx // layout.row_dim
    j = idx % layout.row_dim
    xh = j // ny
    cols = j
    data = m[r, xh]
    return sp.csr_matrix(
        (data, (idx, cols)), shape=(layout.n_vars, layout.row_dim)
    )


def _solve_block(program: SimplexImageProgram, objective: str, tol: float,
                 max_iters: int) -> SolveOutcome:
    path = solve_kl if objective == OBJECTIVE_KL else solve_tv
    return path(program, tol=tol, max_iters=max_iters)


def _f_divergence_lower_bound(problem: Problem, kvec: np.ndarray) -> float:
    """D_f(p_X || p_Xhat): the data-processing floor for the objective."""
    schema = problem.pmf.schema
    q_x = problem.program.image(kvec).reshape(schema.nx, schema.ny).sum(axis=1)
    p_x = problem.pmf.p_x()
    if problem.objective == OBJECTIVE_KL:
        return kl_divergence(p_x, q_x)
    return l1_distance(p_x, q_x)


def sof_solve(problem: Problem, strategy: str = SOF_FIX_CONDITIONAL,
              tol: float = DEFAULT_TOL, max_outer: int = 100,
              max_iters: int = DEFAULT_MAX_ITERS) -> Solution:
    """Solve under the Markov factorization that survives suppressing the
    protected variables at classification time.

    The returned kernel is k(xh, yh | d, x, y) =
    w(yh | xh) * m(xh | d, x, y) exactly by construction.

    strategy "fix_conditional": pin w to the original outcome-given-
    features conditional (objective-optimal but possibly infeasible) and
    solve the remaining convex program in m.
    strategy "alternating": alternate exact convex solves in each factor;
    the objective sequence is non-increasing but may stop at a local
    minimum.
    """
    if strategy not in (SOF_FIX_CONDITIONAL, SOF_ALTERNATING):
        raise InvalidParamsError(f"unknown SOF strategy {strategy!r}")
    layout = problem.layout
    schema = problem.pmf.schema
    nx = schema.nx
    prog_full = replace_fixed(problem.program)
    w = _w_extended(problem.pmf)

    def m_program(w_cur: np.ndarray) -> SimplexImageProgram:
        return prog_full.substitute(
            _substitution_for_w(layout, w_cur), layout.n_rows, nx
        )

    def w_program(m_cur: np.ndarray) -> SimplexImageProgram:
        return prog_full.substitute(
            _substitution_for_m(layout, m_cur), nx, schema.ny
        )

    def finish(out: SolveOutcome, m_cur, w_cur, extra: dict) -> Solution:
        kvec = _substitution_for_w(layout, w_cur) @ m_cur.ravel()
        diag = dict(out.diagnostics)
        diag.update(extra)
        diag["sof_y_given_xhat"] = w_cur
        diag["sof_xhat_given_dxy"] = m_cur
        diag["f_divergence_lower_bound"] = _f_divergence_lower_bound(problem, kvec)
        kernel = _kernel_from_vec(
            problem, kvec, _provenance(problem, tol, {"sof": strategy})
        )
        objective = problem.objective_value(kvec)
        return Solution(
            status=out.status,
            kernel=kernel,
            objective=objective if out.status != STATUS_INFEASIBLE else float("nan"),
            residual=prog_full.residual(kvec),
            certificate=out.certificate,
            iterations=out.iterations,
            diagnostics=diag,
        )

    if strategy == SOF_FIX_CONDITIONAL:
        out = _solve_block(m_program(w), problem.objective, tol, max_iters)
        m = out.kvec.reshape(layout.n_rows, nx)
        return finish(out, m, w, {"strategy": strategy})

    # alternating minimization; find a jointly feasible start first
    m_out = _solve_block(m_program(w), problem.objective, tol, max_iters)
    if m_out.status == STATUS_INFEASIBLE:
        m = m_out.kvec.reshape(layout.n_rows, nx)
        best = m_out.certificate
        for _ in range(max_outer):
            vw, wvec, diag_w = phase1_violation(w_program(m))
            w = wvec.reshape(nx, schema.ny)
            if vw <= tol:
                break
            vm, mvec, diag_m = phase1_violation(m_program(w))
            m = mvec.reshape(layout.n_rows, nx)
            if vm <= tol:
                break
            if min(vw, vm) >= best - 1e-12:
                out = SolveOutcome(
                    STATUS_INFEASIBLE, mvec, float("nan"), min(vw, vm, best),
                    0.0, 0, diag_m,
                )
                return finish(out, m, w, {"strategy": strategy})
            best = min(vw, vm, best)
        m_out = _solve_block(m_program(w), problem.objective, tol, max_iters)
        if m_out.status == STATUS_INFEASIBLE:
            m = m_out.kvec.reshape(layout.n_rows, nx)
            return finish(m_out, m, w, {"strategy": strategy})
    m = m_out.kvec.reshape(layout.n_rows, nx)

    def product_objective(m_cur, w_cur):
        return problem.objective_value(
            _substitution_for_w(layout, w_cur) @ m_cur.ravel()
        )

    trace = [product_objective(m, w)]
    out = m_out
    iterations = 1
    converged = False
    for _ in range(max_outer):
        before = trace[-1]
        # a block update is only taken when it does not increase the
        # recorded objective, so the trace is non-increasing exactly
        w_out = _solve_block(w_program(m), problem.objective, tol, max_iters)
        cand_w = w_out.kvec.reshape(nx, schema.ny)
        val = product_objective(m, cand_w)
        if val <= trace[-1]:
            w = cand_w
            trace.append(val)
        m_out = _solve_block(m_program(w), problem.objective, tol, max_iters)
        cand_m = m_out.kvec.reshape(layout.n_rows, nx)
        val = product_objective(cand_m, w)
        if val <= trace[-1]:
            m = cand_m
            out = m_out
            trace.append(val)
        iterations += 1
        if before - trace[-1] < tol:
            converged = True
            break
    if not converged:
        out = SolveOutcome(
            STATUS_ITERATION_LIMIT, out.kvec, out.objective, out.certificate,
            out.residual, iterations, dict(out.diagnostics),
        )
    return finish(
        out, m, w, {"strategy": strategy, "objective_trace": tuple(trace),
                    "outer_iterations": iterations},
    )


def replace_fixed(program: SimplexImageProgram) -> SimplexImageProgram:
    """Same program without entry pinning (restricted reformulations rely
    on the raw inequalities instead, which substitution preserves)."""
    if program.fixed_zero is None or not program.fixed_zero.any():
        return program
    return SimplexImageProgram(
        n_rows=program.n_rows,
        row_dim=program.row_dim,
        A=program.A,
        p_ref=program.p_ref,
        G=program.G,
        h=program.h,
        labels=program.labels,
        anchor=program.anchor,
        fixed_zero=None,
        tie_weight=program.tie_weight,
    )
