"""One space-time slab solve: Picard linearization around sparse direct solves.

The convection term is linearized with the previous iterate's velocity
(starting from the constant-in-time extension of the incoming trace); every
other block of the slab system is assembled once and reused.  After the
first factorization, subsequent Picard updates are solved by GMRES
preconditioned with that factorization, falling back to a fresh one if the
update is too large.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import DofMap, SlabOperators, SlabSystem, assemble_conv
from .fields import PhaseVelocity


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


class SlabSolution:
    """Coefficients of one slab: velocity/pressure per fluid per time power.

    The field at time t in the slab is sum_j coeff_j * tau^j with
    tau = (t - t_start) / dt; tau = 1 gives the outgoing trace.
    """

    def __init__(self, slab, r, dofs, vel, pres, mult, report):
        self.slab = slab
        self.r = r
        self.dofs = dofs
        self.vel = vel    # vel[j][phase] -> (n_nodes_phase, 2)
        self.pres = pres  # pres[j][phase] -> (n_nodes_phase,)
        self.mult = mult
        self.report = report
        self.t_start = slab.t_start
        self.dt = slab.t_end - slab.t_start

    def velocity_at_tau(self, tau):
        mesh = self.slab.fine
        values = np.zeros((2, mesh.num_vertices, 2))
        for i in (0, 1):
            nodes = self.dofs.vnodes[i]
            acc = np.zeros((len(nodes), 2))
            for j in range(self.r + 1):
                acc += self.vel[j][i] * tau ** j
            values[i][nodes] = acc
        valid = np.stack([self.slab.active_fine[0], self.slab.active_fine[1]])
        return PhaseVelocity(mesh, values, valid)

    def velocity_at_time(self, t):
        return self.velocity_at_tau((t - self.t_start) / self.dt)

    def end_velocity(self):
        return self.velocity_at_tau(1.0)

    def pressure_at_tau(self, tau):
        """Dense per-phase nodal pressure on the coarse mesh (zero off-band)."""
        coarse = self.slab.coarse
        values = np.zeros((2, coarse.num_vertices))
        for i in (0, 1):
            nodes = self.dofs.pnodes[i]
            acc = np.zeros(len(nodes))
            for j in range(self.r + 1):
                acc += self.pres[j][i] * tau ** j
            values[i][nodes] = acc
        return values

    def velocity_coefficient_vector(self):
        return np.concatenate([self.vel[j][i].reshape(-1)
                               for j in range(self.r + 1) for i in (0, 1)])


def solve_slab(slab, params, quad, r, u_prev, bc, nitsche_mode="viscosity",
               nitsche_consts=(2.0, 1.0, 10.0, 10.0), b_variant="b2",
               C_p=0.1, C_u=0.01, tol=1e-8, max_iter=50):
    """Solve one slab; returns the SlabSolution with a convergence report."""
    if r not in (0, 1):
        raise ValueError("time polynomial degree r must be 0 or 1")
    if len(quad.points) < r + 1:
        raise ValueError("time quadrature must have at least r+1 points")
    dofs = DofMap(slab, r)
    ops = SlabOperators(slab, params, nitsche_mode, nitsche_consts, dofs, bc,
                        quad, r, b_variant, C_p, C_u, u_prev)

    def lin_fields(solution):
        if solution is None:
            return [u_prev for _ in quad.points]
        return [solution.velocity_at_tau(tau) for tau in ops.taus]

    def build_solution(x, report):
        vel, pres, mult = SlabSystem(None, None, dofs, quad, r).split(x)
        return SlabSolution(slab, r, dofs, vel, pres, mult, report)

    inertial = params.inertial
    residuals = []
    lu = None
    x = None
    solution = None
    n_sweeps = 1 if not inertial else max_iter
    for it in range(n_sweeps):
        if inertial:
            fields = lin_fields(solution)
            conv = [assemble_conv(g, params, dofs, f)
                    for g, f in zip(ops.geoms, fields)]
        else:
            conv = None
        A, b = ops.compose(conv)
        x_new, lu = _linear_solve(A, b, lu, x)
        new_solution = build_solution(x_new, None)
        if solution is not None:
            du = new_solution.velocity_coefficient_vector() - \
                solution.velocity_coefficient_vector()
            scale = max(np.linalg.norm(new_solution.velocity_coefficient_vector()),
                        1e-300)
            residuals.append(np.linalg.norm(du) / scale)
        solution = new_solution
        x = x_new
        if not inertial:
            break
        if residuals and residuals[-1] <= tol:
            break
    else:
        if inertial:
            raise SolverError(
                f"Picard iteration did not reach tol={tol} in {max_iter} sweeps "
                f"(last residuals {residuals[-3:]})", residuals)

    iterations = 1 if not inertial else len(residuals) + 1
    solution.report = {"iterations": iterations, "residuals": residuals}
    return solution


def _linear_solve(A, b, lu_prev, x_prev, gmres_tol=1e-12, gmres_maxiter=40):
    """Direct solve, reusing the previous factorization as a preconditioner."""
    if lu_prev is not None and x_prev is not None:
        M = spla.LinearOperator(A.shape, lu_prev.solve)
        x, info = spla.gmres(A, b, x0=x_prev, M=M, rtol=gmres_tol,
                             maxiter=gmres_maxiter, restart=gmres_maxiter)
        if info == 0 and np.all(np.isfinite(x)):
            return x, lu_prev
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError as exc:
        raise SolverError(
            "sparse factorization of the slab system failed (check the ghost "
            f"penalty and pressure-mean constraint configuration): {exc}") from exc
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("slab solve produced non-finite values")
    return x, lu
