"""Command-line front end: ``imhd-vem {run,study,mesh-gen,demo-cylinder}``.

Configs are JSON objects. Recognized keys (all optional):

``problem``      ``"smooth"``, ``"robustness"`` or ``"lshape"``
``s1``, ``s2``   robustness scale factors (default 0 and 1)
``mesh``         path to a mesh JSON file (``run`` only; overrides ``family``)
``family``       ``voronoi``, ``remapped``, ``nonconvex`` or ``lshape``
``n``            cell count (refinement level for ``lshape``) for ``run``
``sizes``        list of such counts for ``study``
``seed``         Voronoi seed
``k1``, ``k2``   velocity and current orders (``k1 >= 2``, ``k2 >= 1``)
``nu``, ``Sc``, ``B3``  physics (default 1)
``scheme``       ``oseen``, ``stokes`` or ``newton``
``tol``, ``max_iters``  nonlinear stopping rule (default 1e-6, 50)
``workers``      concurrent meshes in a study
``nu_values``, ``n_theta``, ``n_radial``, ``grid``, ``u_max``  cylinder demo

Command-line flags override config values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import mesh as meshmod
from .system import (
    SCHEMES,
    FluxError,
    LinearSolveError,
    MethodOrder,
    NonlinearSolveError,
)
from .verify import (
    CylinderConfig,
    builtin_problem,
    convergence_study,
    conservation_report,
    cylinder_demo,
    error_norms,
    make_mesh,
    solve_problem,
)

logger = logging.getLogger("imhd_vem")

FAMILIES = ("voronoi", "remapped", "nonconvex", "lshape")
PROBLEMS = ("smooth", "robustness", "lshape")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "smooth"
    s1: float = 0.0
    s2: float = 1.0
    mesh: str | None = None
    family: str = "remapped"
    n: int = 100
    sizes: list = field(default_factory=lambda: [25, 100, 225, 400, 625])
    seed: int = 0
    k1: int = 2
    k2: int = 1
    nu: float = 1.0
    Sc: float = 1.0
    B3: float = 1.0
    scheme: str = "oseen"
    tol: float = 1e-6
    max_iters: int = 50
    workers: int = 1
    nu_values: list = field(default_factory=lambda: [1.0, 0.01])
    n_theta: int = 48
    n_radial: int = 12
    grid: int = 41
    u_max: float = 1.0

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"field 'problem': expected one of {PROBLEMS}, got {self.problem!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"field 'family': expected one of {FAMILIES}, got {self.family!r}")
        if self.k1 < 2:
            raise ConfigError(f"field 'k1': velocity order must satisfy k1 >= 2, got {self.k1}")
        if self.k2 < 1:
            raise ConfigError(f"field 'k2': current order must satisfy k2 >= 1, got {self.k2}")
        if not self.tol > 0:
            raise ConfigError(f"field 'tol': must be positive, got {self.tol}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"field 'scheme': expected one of {SCHEMES}, got {self.scheme!r}")
        if self.max_iters < 1:
            raise ConfigError(f"field 'max_iters': must be >= 1, got {self.max_iters}")
        if self.nu <= 0:
            raise ConfigError(f"field 'nu': must be positive, got {self.nu}")

    def make_problem(self):
        kw = dict(nu=self.nu, Sc=self.Sc, B3=self.B3)
        if self.problem == "robustness":
            kw.update(s1=self.s1, s2=self.s2)
        return builtin_problem(self.problem, **kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "list":
            if not isinstance(value, list):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "str | None":
            if value is not None and not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"field {key!r}: expected {kind}, got {value!r}") from None
    return value


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown field {key!r}")
        setattr(cfg, key, _coerce(key, value))
    cfg.validate()
    return cfg


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key in _TYPES:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, _coerce(key, val))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


# --------------------------------------------------------------- commands


def cmd_run(cfg: RunConfig, out: Path, quiet: bool = False) -> int:
    if cfg.mesh:
        mesh = meshmod.load_mesh(cfg.mesh)
    else:
        mesh = make_mesh(cfg.family, cfg.n, cfg.seed)
    problem = cfg.make_problem()
    orders = MethodOrder(cfg.k1, cfg.k2)
    out.mkdir(parents=True, exist_ok=True)
    status = 0
    try:
        state, disc = solve_problem(mesh, problem, orders, cfg.scheme, cfg.tol, cfg.max_iters)
    except NonlinearSolveError as exc:
        _write_history(out / "iterations.csv", exc.history)
        logger.error("%s", exc)
        return 2
    _write_history(out / "iterations.csv", state.history)
    np.savez(out / "solution.npz", u=state.u, p=state.p, J=state.J, phi=state.phi,
             multipliers=state.multipliers)
    rec = error_norms(mesh, orders, state, problem, disc)
    rec.family = "file" if cfg.mesh else cfg.family
    (out / "errors.json").write_text(json.dumps(asdict(rec), indent=2) + "\n")
    if not quiet:
        print(f"N_t={rec.N_t} ndof={rec.ndof} iterations={rec.iters}")
        print(f"|u-u_h|_1={rec.err_u_H1:.4e}  ||p-p_h||={rec.err_p_L2:.4e}  "
              f"||J-J_h||={rec.err_J_L2:.4e}  ||phi-phi_h||={rec.err_phi_L2:.4e}")
        print(f"||div u_h||={rec.div_u:.3e}  ||div J_h||={rec.div_J:.3e}")
    return status


def _write_history(path: Path, history) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,step_norm\n")
        for i, s in enumerate(history, 1):
            fh.write(f"{i},{s:.6e}\n")


def cmd_study(cfg: RunConfig, out: Path, quiet: bool = False) -> int:
    orders = MethodOrder(cfg.k1, cfg.k2)
    out.mkdir(parents=True, exist_ok=True)
    name = f"study_{cfg.problem}_{cfg.family}_k{cfg.k1}{cfg.k2}.csv"
    table = convergence_study(
        cfg.make_problem(), cfg.family, cfg.sizes, orders, cfg.scheme, cfg.tol,
        cfg.max_iters, cfg.seed, out / name, cfg.workers,
    )
    if not quiet:
        print(table.format())
        print()
        print(conservation_report({cfg.family: table}))
    return 0 if all(r.status == "ok" for r in table.records) else 2


def cmd_mesh_gen(family: str, n: int, seed: int, out: Path) -> int:
    mesh = make_mesh(family, n, seed)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{family}_{n}_seed{seed}.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    meshmod.save_mesh(mesh, out)
    print(f"wrote {out} ({mesh.n_cells} cells)")
    return 0


def cmd_demo_cylinder(cfg: RunConfig, out: Path, quiet: bool = False) -> int:
    cc = CylinderConfig(
        nu_values=tuple(cfg.nu_values), Sc=cfg.Sc, B3=cfg.B3, k1=cfg.k1, k2=cfg.k2,
        u_max=cfg.u_max, n_theta=cfg.n_theta, n_radial=cfg.n_radial, grid=cfg.grid,
        scheme=cfg.scheme, tol=cfg.tol, max_iters=max(cfg.max_iters, 100),
    )
    res = cylinder_demo(cc, out)
    summary = {f"{nu:g}": v for nu, v in res.items()}
    (out / "cylinder_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not quiet:
        for nu, v in summary.items():
            print(f"nu={nu}: symmetry defect {v['symmetry_defect']:.2e}, "
                  f"min wake u1 {v['min_wake_u1']:.3e}, recirculation {v['recirculation']}, "
                  f"iterations {v['iterations']}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="random seed for Voronoi meshes")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    p.add_argument("--k1", type=int, help="velocity order (>= 2)")
    p.add_argument("--k2", type=int, help="current order (>= 1)")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--Sc", type=float)
    p.add_argument("--B3", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imhd-vem", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single solve with error report")
    _add_common(p)
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--mesh", help="mesh JSON file")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--n", type=int, help="cell count (level for lshape)")

    p = sub.add_parser("study", help="convergence study over a mesh family")
    _add_common(p)
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--sizes", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated cell counts (levels for lshape)")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("mesh-gen", help="write a generated mesh as JSON")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--n", type=int, required=True, help="cell count (level for lshape)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output .json file or directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("demo-cylinder", help="channel flow past a cylinder")
    _add_common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    out = Path(args.out)
    try:
        if args.command == "mesh-gen":
            return cmd_mesh_gen(args.family, args.n, args.seed, out)
        cfg = _build_config(args)
        if args.command == "run":
            return cmd_run(cfg, out, args.quiet)
        if args.command == "study":
            return cmd_study(cfg, out, args.quiet)
        return cmd_demo_cylinder(cfg, out, args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except meshmod.MeshError as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return 1
    except (LinearSolveError, NonlinearSolveError, FluxError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
