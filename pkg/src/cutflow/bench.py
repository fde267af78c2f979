"""Benchmark quantities, error norms, scenario presets and the CLI driver.

Outputs per run: series.csv (one row per slab end), interface_<step>.csv
polyline dumps, legacy-ASCII VTK snapshots of velocity/pressure/level set,
and a summary.json with the run parameters and timings.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .assembly import BoundaryConditions, FluidParams
from .cutgeom import GeometryError
from .levelset import init_levelset, p1_interpolate
from .mesh import build_structured_mesh, refine_uniform
from .solver import SolverError
from .timeloop import RunConfig, SimulationError, run_simulation

SERIES_HEADER = "t,xc,c,uc,D,area"


# ---------------------------------------------------------------------------
# benchmark quantities


def compute_quantities(geom, velocity, t, solution=None):
    """Center of mass, circularity, rise velocity, deformation, area.

    All integrals over the enclosed fluid use the cut quadrature; the
    perimeter is the reconstructed polyline length.
    """
    from .assembly import _phase_batches  # shared quadrature batching
    mesh = geom.fine
    area = 0.0
    cx = np.zeros(2)
    cu = np.zeros(2)
    for elems, pts, wts in _phase_batches(geom, 1):
        npts = pts.shape[1]
        area += wts.sum()
        cx += np.einsum("nq,nqd->d", wts, pts)
        if velocity is not None:
            flat = pts.reshape(-1, 2)
            rep = np.repeat(elems, npts)
            bary = mesh.barycentric(rep, flat)
            uv = velocity.sample_phase(1, rep, bary).reshape(len(elems), npts, 2)
            cu += np.einsum("nq,nqd->d", wts, uv)
    if area <= 0.0:
        raise GeometryError("enclosed fluid region is empty")
    xc = cx / area
    uc = cu / area

    perim = geom.iface.total_length()
    p_equiv = 2.0 * np.sqrt(np.pi * area)
    circ = p_equiv / perim if perim > 0 else np.nan

    verts = geom.iface.endpoints.reshape(-1, 2)
    radii = np.linalg.norm(verts - xc, axis=1)
    rmin, rmax = radii.min(), radii.max()
    deform = (rmax - rmin) / (rmax + rmin)

    return {
        "t": t,
        "xc": xc[1],
        "c": circ,
        "uc": uc[1],
        "D": deform,
        "area": area,
        "xc1": xc[0],
        "normal_velocity": steady_state_monitor(geom, velocity),
    }


def steady_state_monitor(geom, velocity):
    """Max |u . n| over interface quadrature points (enclosed-fluid side)."""
    if velocity is None or geom.iface.num_segments == 0:
        return 0.0
    mesh = geom.fine
    pts, _ = geom.iface.gauss_points(2)
    own = np.repeat(geom.iface.owner, 2)
    flat = pts.reshape(-1, 2)
    bary = mesh.barycentric(own, flat)
    uv = velocity.sample_phase(1, own, bary)
    nrm = np.repeat(geom.iface.normals, 2, axis=0)
    return float(np.abs(np.einsum("nd,nd->n", uv, nrm)).max())


def error_norms(series, reference):
    """Relative l1, l2, linf errors of a series against a reference series
    at identical time stamps."""
    series = np.asarray(series, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if series.shape != reference.shape:
        raise ValueError("series must be aligned on identical time stamps")
    diff = np.abs(reference - series)
    l1 = diff.sum() / np.abs(reference).sum()
    l2 = np.sqrt((diff ** 2).sum() / (reference ** 2).sum())
    linf = diff.max() / np.abs(reference).max()
    return l1, l2, linf


def align_series(times_coarse, times_fine, values_fine, tol=1e-9):
    """Subsample a finer-run series at the coarse run's time stamps."""
    times_fine = np.asarray(times_fine)
    idx = []
    for t in times_coarse:
        j = np.argmin(np.abs(times_fine - t))
        if abs(times_fine[j] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"no matching reference stamp for t={t}")
        idx.append(j)
    return np.asarray(values_fine)[idx]


# ---------------------------------------------------------------------------
# output writers


def write_series_csv(path, series):
    with open(path, "w") as f:
        f.write(SERIES_HEADER + "\n")
        for row in series:
            f.write(",".join(_fmt(row[k]) for k in ("t", "xc", "c", "uc", "D", "area"))
                    + "\n")


def _fmt(x):
    return f"{x:.17g}"


def write_interface_csv(path, iface):
    with open(path, "w") as f:
        f.write("segment,x,y\n")
        for s in range(iface.num_segments):
            for p in iface.endpoints[s]:
                f.write(f"{s},{_fmt(p[0])},{_fmt(p[1])}\n")


def write_vtk(path, fine, coarse, phi, velocity, pressure):
    """Legacy VTK 2.0 ASCII snapshot on the fine mesh.

    The per-fluid pressure is written as two point arrays so the jump at
    the interface stays visible; fine midpoint vertices get the exact P1
    interpolant of the coarse pressure.
    """
    nv = fine.num_vertices
    ncv = coarse.num_vertices
    p_fine = []
    for i in (0, 1):
        arr = np.zeros(nv)
        arr[:ncv] = pressure[i]
        mid = 0.5 * (pressure[i][coarse.faces[:, 0]] + pressure[i][coarse.faces[:, 1]])
        arr[ncv:ncv + coarse.num_faces] = mid
        p_fine.append(arr)

    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\ntwo-phase flow snapshot\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {nv} double\n")
        for p in fine.vertices:
            f.write(f"{_fmt(p[0])} {_fmt(p[1])} 0\n")
        nt = fine.num_triangles
        f.write(f"CELLS {nt} {4 * nt}\n")
        for tri in fine.triangles:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        f.write(f"CELL_TYPES {nt}\n")
        f.write("5\n" * nt)
        f.write(f"POINT_DATA {nv}\n")
        for i in (0, 1):
            f.write(f"VECTORS velocity{i + 1} double\n")
            for v in velocity.values[i]:
                f.write(f"{_fmt(v[0])} {_fmt(v[1])} 0\n")
        for i in (0, 1):
            f.write(f"SCALARS pressure{i + 1} double 1\nLOOKUP_TABLE default\n")
            for x in p_fine[i]:
                f.write(f"{_fmt(x)}\n")
        f.write("SCALARS levelset double 1\nLOOKUP_TABLE default\n")
        for x in phi.vertex_values:
            f.write(f"{_fmt(x)}\n")


# ---------------------------------------------------------------------------
# presets


def _bubble_params(rho, mu, sigma, gravity=-0.98):
    if gravity:
        def f(t, pts, phase):
            out = np.zeros((len(pts), 2))
            out[:, 1] = rho[phase] * gravity
            return out
    else:
        f = None
    return FluidParams(mu1=mu[0], mu2=mu[1], rho1=rho[0], rho2=rho[1],
                       sigma=sigma, f=f, g=None)


def preset_config(name, h=None, **kw):
    if name in ("rising-bubble-1", "rising-bubble-2"):
        h = h or 1.0 / 40.0
        nx = int(round(1.0 / h))
        if name == "rising-bubble-1":
            params = _bubble_params((1000.0, 100.0), (10.0, 1.0), 24.5)
        else:
            params = _bubble_params((1000.0, 1.0), (10.0, 0.1), 1.96)
        return RunConfig(
            domain=(0.0, 1.0, 0.0, 2.0), nx=nx, ny=2 * nx,
            shape=("circle", (0.5, 0.5), 0.25), params=params,
            bc=BoundaryConditions(left="slip", right="slip",
                                  bottom="dirichlet", top="dirichlet"),
            T=3.0, picard_tol=1e-6, **kw)
    if name == "static-bubble":
        h = h or 1.0 / 40.0
        nx = int(round(1.0 / h))
        params = _bubble_params((1000.0, 100.0), (10.0, 1.0), 24.5, gravity=0.0)
        return RunConfig(domain=(0.0, 1.0, 0.0, 1.0), nx=nx, ny=nx,
                         shape=("circle", (0.5, 0.5), 0.25), params=params,
                         T=kw.pop("T", 10 * 0.25 * h), picard_tol=1e-6, **kw)
    if name == "straining-flow":
        L = kw.pop("L", 4.0)
        Q = kw.pop("Q", 0.2)
        h = h or L / 60.0
        nx = int(round(2 * L / h))

        def g(t, pts):
            return np.stack([Q * pts[:, 0], -Q * pts[:, 1]], axis=1)

        params = FluidParams(mu1=1.0, mu2=1.0, rho1=0.0, rho2=0.0, sigma=1.0,
                             f=None, g=g)
        return RunConfig(domain=(-L, L, -L, L), nx=nx, ny=nx,
                         shape=("circle", (0.0, 0.0), 0.5), params=params,
                         T=kw.pop("T", 10.0), r=kw.pop("r", 0),
                         quad=kw.pop("quad", "single"),
                         u0=lambda pts: np.stack([Q * pts[:, 0], -Q * pts[:, 1]],
                                                 axis=1),
                         steady_stop=kw.pop("steady_stop", 1e-5), **kw)
    raise ValueError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# curvature convergence study


def curvature_convergence(q=2, m=None, levels=4, n0=10, domain=2.4):
    """Ellipse curvature study: relative L2 errors and pairwise orders."""
    from .curvature import build_theta_map, solve_curvature
    from .cutgeom import reconstruct_interface
    from .quadrature import segment_rule

    m = m if m is not None else q
    half = domain / 2.0

    def level_set(p):
        return p[:, 0] ** 2 / 0.64 + p[:, 1] ** 2 - 0.25

    def exact_H(p):
        x, y = p[:, 0], p[:, 1]
        gx, gy = 2 * x / 0.64, 2 * y
        ng = np.hypot(gx, gy)
        kappa = ((2 / 0.64) * gy ** 2 + 2.0 * gx ** 2) / ng ** 3
        return -kappa[:, None] * np.stack([gx, gy], axis=1) / ng[:, None]

    errors, hs = [], []
    for lvl in range(levels):
        n = n0 * 2 ** lvl
        coarse = build_structured_mesh((-half, half, -half, half), n, n)
        fine = refine_uniform(coarse)
        phiq = init_levelset(("analytic", level_set), fine, q=q)
        phi1 = p1_interpolate(phiq)
        mmap = build_theta_map(phi1, phiq)
        H = solve_curvature(mmap, phiq, m=m)
        iface = reconstruct_interface(phi1)
        xr, wr = segment_rule(3)
        own = np.repeat(iface.owner, 3)
        p0 = iface.endpoints[:, 0][:, None, :]
        p1 = iface.endpoints[:, 1][:, None, :]
        pts = (p0 + xr[None, :, None] * (p1 - p0)).reshape(-1, 2)
        wts = (iface.lengths[:, None] * wr[None, :]).reshape(-1)
        bary = fine.barycentric(own, pts)
        mapped = mmap.map_points(own, pts, bary)
        Hh = H.eval_at(own, bary)
        He = exact_H(mapped)
        num = np.sum(wts * np.sum((Hh - He) ** 2, axis=1))
        den = np.sum(wts * np.sum(He ** 2, axis=1))
        errors.append(float(np.sqrt(num / den)))
        hs.append(domain / n)
    orders = [float(np.log2(errors[i] / errors[i + 1])) for i in range(levels - 1)]
    slope = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    return {"h": hs, "errors": errors, "orders": orders, "ls_slope": slope}


# ---------------------------------------------------------------------------
# CLI


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _read_config_file(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def run_scenario(cfg, out_dir, vtk_stride=0):
    """Run a configured simulation, writing the standard output files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    dumps = {"count": 0}

    base_observer = cfg.observer

    def observer(state):
        row = (base_observer or _series_observer)(state)
        if vtk_stride and state.step % vtk_stride == 0:
            write_vtk(out / f"snapshot_{state.step:05d}.vtk", state.geom.fine,
                      state.geom.coarse, state.phi, state.velocity,
                      state.solution.pressure_at_tau(1.0))
            write_interface_csv(out / f"interface_{state.step:05d}.csv",
                                state.geom.iface)
            dumps["count"] += 1
        return row

    cfg.observer = observer
    state = run_simulation(cfg)
    elapsed = time.time() - t0
    write_series_csv(out / "series.csv", state.series)
    write_interface_csv(out / "interface_final.csv", state.geom.iface)
    summary = {
        "steps": state.step,
        "t_end": state.t,
        "wall_seconds": elapsed,
        "rows": len(state.series),
        "snapshots": dumps["count"],
        "params": {
            "mu": cfg.params.mu, "rho": cfg.params.rho, "sigma": cfg.params.sigma,
            "nx": cfg.nx, "ny": cfg.ny, "T": cfg.T, "r": cfg.r, "quad": cfg.quad,
            "b_variant": cfg.b_variant, "C_p": cfg.C_p, "C_u": cfg.C_u,
        },
    }
    if state.series:
        summary["final"] = {k: state.series[-1][k] for k in
                            ("t", "xc", "c", "uc", "D", "area")}
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return state


def _series_observer(state):
    return compute_quantities(state.geom, state.velocity, state.t,
                              solution=state.solution)


def build_parser():
    p = argparse.ArgumentParser(
        prog="cutflow",
        description="Two-phase incompressible flow benchmarks on a fixed "
                    "background mesh with an unfitted interface.")
    p.add_argument("preset", nargs="?",
                   choices=["straining-flow", "rising-bubble-1", "rising-bubble-2",
                            "static-bubble", "curvature-convergence"])
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--h", type=float, help="target cell size")
    p.add_argument("--dt-over-h", type=float, default=None)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--r", type=int, choices=(0, 1), default=None)
    p.add_argument("--quad", choices=("trapezoidal", "simpson", "single"),
                   default=None)
    p.add_argument("--b-form", choices=("b1", "b2"), default=None)
    p.add_argument("--Cp", type=float, default=None)
    p.add_argument("--Cu", type=float, default=None)
    p.add_argument("--coupling-iters", type=int, default=None)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--vtk-stride", type=int, default=0)
    p.add_argument("--q", type=int, default=2, help="curvature study: level-set degree")
    p.add_argument("--m", type=int, default=None, help="curvature study: field degree")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="extra config overrides (repeatable)")
    return p


def cli_main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage()
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    try:
        if args.preset == "curvature-convergence":
            res = curvature_convergence(q=args.q, m=args.m)
            print("h:      " + "  ".join(f"{h:.4f}" for h in res["h"]))
            print("errors: " + "  ".join(f"{e:.4e}" for e in res["errors"]))
            print("orders: " + "  ".join(f"{o:.2f}" for o in res["orders"])
                  + f"   (ls slope {res['ls_slope']:.2f})")
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "summary.json", "w") as f:
                json.dump(res, f, indent=2)
            return 0

        overrides = _parse_overrides(args.set)
        if args.config:
            overrides.update(_read_config_file(args.config))
        if args.preset is None:
            print("error: no preset or config given", file=sys.stderr)
            return 2
        kw = {}
        if args.dt_over_h is not None:
            kw["dt_over_h"] = args.dt_over_h
        if args.T is not None:
            kw["T"] = args.T
        if args.r is not None:
            kw["r"] = args.r
        if args.quad is not None:
            kw["quad"] = args.quad
        if args.b_form is not None:
            kw["b_variant"] = args.b_form
        if args.Cp is not None:
            kw["C_p"] = args.Cp
        if args.Cu is not None:
            kw["C_u"] = args.Cu
        if args.coupling_iters is not None:
            kw["coupling_iters"] = args.coupling_iters
        kw.update(overrides)
        cfg = preset_config(args.preset, h=args.h, **kw)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        state = run_scenario(cfg, args.out_dir, args.vtk_stride)
    except (SimulationError, SolverError, GeometryError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    print(f"done: {state.step} steps to t={state.t:.6g}, "
          f"series rows {len(state.series)}, outputs in {args.out_dir}")
    return 0


def main():
    raise SystemExit(cli_main())
