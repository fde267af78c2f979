"""March the coupled flow / level-set system one space-time slab at a time.

Each slab: extrapolate the velocity from the previous slab, transport the
level set to the slab's collocation times (reinitializing after every
transport step), rebuild the cut geometry and the interface curvature,
then solve the slab.  The end-of-slab geometry and curvature are reused as
the next slab's starting snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import BoundaryConditions, FluidParams
from .cutgeom import GeomAtTime, SlabGeometry
from .curvature import build_theta_map, solve_curvature
from .fields import PhaseVelocity
from .levelset import advect, init_levelset, p1_interpolate, reinitialize
from .mesh import build_structured_mesh, refine_uniform
from .solver import solve_slab


class TimeQuadrature:
    """Quadrature rule on a time slab, given by points in [0, 1] and weights
    summing to the slab length."""

    RULES = {
        "single": (np.array([0.0]), np.array([1.0]), 0),
        "trapezoidal": (np.array([0.0, 1.0]), np.array([0.5, 0.5]), 1),
        "simpson": (np.array([0.0, 0.5, 1.0]), np.array([1, 4, 1]) / 6.0, 3),
    }

    def __init__(self, name, t_start, dt):
        if name not in self.RULES:
            raise ValueError(f"unknown time quadrature {name!r}")
        taus, wref, prec = self.RULES[name]
        self.name = name
        self.points = (t_start + taus * dt).tolist()
        self.weights = (wref * dt).tolist()
        self.degree_of_precision = prec
        self.t_start = t_start
        self.dt = dt

    def integrate(self, fn):
        return sum(w * fn(t) for t, w in zip(self.points, self.weights))


@dataclass
class RunConfig:
    """Everything needed to march a simulation."""
    domain: tuple
    nx: int
    ny: int
    shape: tuple                      # level-set shape spec
    params: FluidParams
    bc: BoundaryConditions = field(default_factory=BoundaryConditions)
    T: float = 1.0
    dt: Optional[float] = None        # default: dt_over_h * h_axis
    dt_over_h: float = 0.25
    r: int = 1
    quad: str = "simpson"
    b_variant: str = "b2"
    C_p: float = 0.1
    C_u: float = 0.01
    nitsche_mode: str = "viscosity"
    nitsche_consts: tuple = (2.0, 1.0, 10.0, 10.0)
    curvature_m: int = 2
    c_F: float = 1e-2
    c_Gamma: float = 1e-2
    coupling_iters: int = 1
    picard_tol: float = 1e-8
    picard_max_iter: int = 50
    reinit_steps: int = 5
    reinit_every: int = 1             # reinitialize after every n-th transport step
    cut_order: int = 2
    u0: Optional[Callable] = None     # initial velocity (points) -> (n, 2)
    steady_stop: Optional[float] = None  # stop when max |u.n| on interface drops below
    max_steps: Optional[int] = None
    observer: Optional[Callable] = None  # observer(state) -> dict per slab end


@dataclass
class SimulationState:
    step: int
    t: float
    phi: object
    geom: GeomAtTime
    velocity: PhaseVelocity
    solution: object = None
    series: list = field(default_factory=list)


class SimulationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def _extrapolated_velocity(prev_solution, u_prev, t):
    if prev_solution is None:
        return u_prev
    return prev_solution.velocity_at_time(t)


def _make_geom(phi2, coarse, order):
    phi1 = p1_interpolate(phi2)
    return GeomAtTime(phi1, phi2, order).attach_coarse(coarse)


def _attach_curvature(geom, cfg):
    if cfg.params.sigma > 0.0 and geom.curvature is None:
        mmap = build_theta_map(geom.phi1, geom.phiq)
        geom.curvature = solve_curvature(mmap, geom.phiq, m=cfg.curvature_m,
                                         c_F=cfg.c_F, c_Gamma=cfg.c_Gamma)
    return geom


def run_simulation(cfg):
    """March slabs to T; returns the final SimulationState (with series)."""
    coarse = build_structured_mesh(cfg.domain, cfg.nx, cfg.ny)
    fine = refine_uniform(coarse)
    h_axis = max(coarse.dx, coarse.dy)
    dt = cfg.dt if cfg.dt is not None else cfg.dt_over_h * h_axis
    n_steps = int(round(cfg.T / dt))
    if cfg.max_steps is not None:
        n_steps = min(n_steps, cfg.max_steps)

    phi = init_levelset(cfg.shape, fine, q=2, time=0.0)
    phi = reinitialize(phi, cfg.reinit_steps)
    if cfg.u0 is not None:
        u_prev = PhaseVelocity.from_callable(fine, cfg.u0)
    else:
        u_prev = PhaseVelocity.zero(fine)
    geom_start = _attach_curvature(_make_geom(phi, coarse, cfg.cut_order), cfg)
    state = SimulationState(0, 0.0, phi, geom_start, u_prev)
    prev_solution = None
    observer = cfg.observer or _default_observer

    for n in range(n_steps):
        t_n = state.t
        quad = TimeQuadrature(cfg.quad, t_n, dt)
        slab_times = sorted(set(quad.points) | {t_n, t_n + dt})
        try:
            solution, phi_end, geom_end = _advance_one_slab(
                state, prev_solution, slab_times, quad, dt, cfg, coarse, fine)
        except Exception as exc:
            raise SimulationError(
                f"slab {n} (t = {t_n:.6g} .. {t_n + dt:.6g}) failed: {exc}",
                state) from exc

        state = SimulationState(n + 1, t_n + dt, phi_end, geom_end,
                                solution.end_velocity(), solution, state.series)
        row = observer(state)
        if row is not None:
            state.series.append(row)
        if cfg.steady_stop is not None and row and \
                row.get("normal_velocity", np.inf) < cfg.steady_stop:
            break
        prev_solution = solution
    return state


def _advance_one_slab(state, prev_solution, slab_times, quad, dt, cfg,
                      coarse, fine):
    phi_n = state.phi
    geom_n = state.geom
    u_prev = state.velocity
    transport_with = None  # None: extrapolate; else solved slab

    for sweep in range(max(1, cfg.coupling_iters)):
        phis = {slab_times[0]: phi_n}
        geoms = [geom_n]
        phi_cur = phi_n
        for k in range(1, len(slab_times)):
            ta, tb = slab_times[k - 1], slab_times[k]
            if transport_with is None:
                beta_a = _extrapolated_velocity(prev_solution, u_prev, ta)
                beta_b = _extrapolated_velocity(prev_solution, u_prev, tb)
            else:
                beta_a = transport_with.velocity_at_time(ta)
                beta_b = transport_with.velocity_at_time(tb)
            phi_cur = advect(phi_cur, beta_a, beta_b, tb - ta)
            if cfg.reinit_steps > 0 and (k % cfg.reinit_every == 0):
                phi_cur = reinitialize(phi_cur, cfg.reinit_steps)
            phis[tb] = phi_cur
            geoms.append(_attach_curvature(_make_geom(phi_cur, coarse,
                                                      cfg.cut_order), cfg))
        slab = SlabGeometry(geoms, fine, coarse)
        solution = solve_slab(slab, cfg.params, quad, cfg.r, u_prev, cfg.bc,
                              nitsche_mode=cfg.nitsche_mode,
                              nitsche_consts=cfg.nitsche_consts,
                              b_variant=cfg.b_variant, C_p=cfg.C_p, C_u=cfg.C_u,
                              tol=cfg.picard_tol, max_iter=cfg.picard_max_iter)
        transport_with = solution
    return solution, phi_cur, geoms[-1]


def _default_observer(state):
    from .bench import compute_quantities
    try:
        return compute_quantities(state.geom, state.velocity, state.t,
                                  solution=state.solution)
    except Exception:
        return {"t": state.t}
