"""Command-line front end.

Examples
--------
    eigbounds --preset dumbbell --index 1,2 --ereltol 0.01 --out results
    eigbounds --config run.json --dump-fields
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    CONVERGED,
    MACHINE_CONVERGED,
    AdaptConfig,
    ConfigError,
    RunHistory,
    backfill_closeness,
    run_adaptive,
)
from .eigensolve import RESIDUAL_RTOL, EigenSolveError
from .fem import CoefficientError, ProblemCoefficients, SUPPORTED_DEGREES
from .flux import FluxError
from .mesh import Mesh, MeshError, load_mesh
from .presets import PRESETS, PresetError, preset_domain
from .quadrature import triangle_rule

log = logging.getLogger("eigbounds")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_UNCONVERGED = 3

HEADER = ["step", "ndof", "index", "upper", "eta", "lower", "erel_est", "closeness_pass"]
DIAG_HEADER = ["step", "n_elements", "max_aspect", "eta_r", "equilibration", "efficiency_ratio", "n_marked"]
FIELD_HEADER = ["element", "x", "y", "u", "grad_u_x", "grad_u_y", "q_x", "q_y"]

_CONFIG_KEYS = {
    "mesh", "preset", "coefficients", "degree", "indices", "theta", "ereltol",
    "max_steps", "max_dofs", "output", "dump_fields",
}


@dataclass
class RunConfig:
    """A complete run description; see :func:`load_config` for the document form."""

    mesh: str | None = None
    preset: str | None = None
    coefficients: dict | None = None
    degree: int = 1
    indices: list[int] = field(default_factory=lambda: [1])
    theta: float = 0.5
    ereltol: float = 0.01
    max_steps: int = 60
    max_dofs: int = 400_000
    output: str = "eigbounds-out"
    dump_fields: bool = False

    def validate(self) -> None:
        if (self.mesh is None) == (self.preset is None):
            raise ConfigError("give exactly one of a mesh path and a preset")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose one of {', '.join(PRESETS)}")
        if self.degree not in SUPPORTED_DEGREES:
            raise ConfigError(f"degree must be one of {SUPPORTED_DEGREES}")
        if not self.indices or any(int(i) != i or i < 1 for i in self.indices):
            raise ConfigError("indices must be a nonempty list of positive integers")
        if list(self.indices) != sorted(set(self.indices)):
            raise ConfigError("indices must be sorted and distinct")
        for i in self.indices:
            self.adapt_config(i)

    def adapt_config(self, index: int) -> AdaptConfig:
        return AdaptConfig(
            target_index=index,
            theta=self.theta,
            ereltol=self.ereltol,
            max_steps=self.max_steps,
            max_dofs=self.max_dofs,
        )

    def problem(self) -> tuple[Mesh, ProblemCoefficients]:
        if self.preset is not None:
            mesh, coeffs = preset_domain(self.preset)
        else:
            mesh = load_mesh(Path(self.mesh))
            coeffs = ProblemCoefficients.laplace()
        if self.coefficients is not None:
            coeffs = ProblemCoefficients.from_dict(self.coefficients)
        # resolve every lookup once so that missing labels fail early
        coeffs.element_diffusion(mesh)
        coeffs.element_reaction(mesh)
        coeffs.element_weight(mesh)
        coeffs.edge_robin(mesh)
        coeffs.edge_weight(mesh)
        return mesh, coeffs


def load_config(path) -> RunConfig:
    """Read a JSON run document.

    Keys: ``mesh`` or ``preset``, ``coefficients`` (``A``, ``c``, ``alpha``,
    ``beta1``, ``beta2``), ``degree``, ``indices``, ``theta``, ``ereltol``,
    ``max_steps``, ``max_dofs``, ``output``, ``dump_fields``.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mesh" in doc and doc["mesh"] is not None:
        mesh = Path(doc["mesh"])
        if not mesh.is_absolute():
            doc["mesh"] = str(Path(path).resolve().parent / mesh)
    return RunConfig(**doc)


def _parse_indices(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse indices {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="eigbounds",
        description="Adaptive two-sided bounds for eigenvalues of symmetric elliptic operators.",
    )
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON run document")
    src.add_argument("--preset", help=f"built-in domain: {', '.join(PRESETS)}")
    p.add_argument("--mesh", help="JSON mesh document (instead of a preset)")
    p.add_argument("--index", help="eigenvalue indices, e.g. 1 or 1,2")
    p.add_argument("--ereltol", type=float, help="relative tolerance of the stopping test")
    p.add_argument("--theta", type=float, help="bulk marking parameter in (0, 1]")
    p.add_argument("--degree", type=int, help="polynomial degree (1 or 2)")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="maximal number of refinements")
    p.add_argument("--max-dofs", type=int, dest="max_dofs", help="stop once the space has this many DOFs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-fields", action="store_true", default=None, help="write meshes and field samples per step")
    p.add_argument("-v", "--verbose", action="store_true", help="log every adaptive step")
    p.add_argument("--version", action="version", version=__version__)
    return p


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.preset is not None:
        cfg.preset, cfg.mesh = args.preset, None
    if args.mesh is not None:
        cfg.mesh, cfg.preset = args.mesh, None
    if args.index is not None:
        cfg.indices = _parse_indices(args.index)
    for name in ("ereltol", "theta", "degree", "max_steps", "max_dofs", "dump_fields"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.out is not None:
        cfg.output = args.out
    return cfg


# ---------------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


def _row(rec) -> list[str]:
    return [_fmt(v) for v in (rec.step, rec.ndof, rec.eigen_index, rec.upper, rec.eta, rec.lower, rec.erel_est, rec.closeness_pass)]


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


class _StepWriter:
    """Appends one history row per step and optional field dumps."""

    def __init__(self, out: Path, index: int, dump_fields: bool):
        self.path = out / f"history_{index}.csv"
        self.field_dir = out / f"fields_{index}" if dump_fields else None
        _write_csv(self.path, HEADER, [])
        if self.field_dir is not None:
            self.field_dir.mkdir(exist_ok=True)

    def __call__(self, hist: RunHistory, ctx: dict) -> None:
        rec = hist.records[-1]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_row(rec))
        if self.field_dir is not None:
            ctx["mesh"].save(self.field_dir / f"mesh_{rec.step}.txt")
            _write_csv(self.field_dir / f"field_{rec.step}.csv", FIELD_HEADER, _field_rows(ctx))


def _field_rows(ctx):
    space, pair, flux = ctx["space"], ctx["pair"], ctx["flux"]
    mesh = space.mesh
    ref, _ = triangle_rule(2 * space.degree)
    x = space.map_points(np.arange(mesh.n_triangles), ref)
    u, gu = space.element_values(pair.vector, ref)
    q, _ = flux.evaluate_reference(ref)
    rows = []
    for k in range(mesh.n_triangles):
        for j in range(len(ref)):
            rows.append([str(k)] + [_fmt(v) for v in (x[k, j, 0], x[k, j, 1], u[k, j], gu[k, j, 0], gu[k, j, 1], q[k, j, 0], q[k, j, 1])])
    return rows


def _diagnostic_rows(hist: RunHistory):
    return [
        [_fmt(v) for v in (s.step, s.n_elements, s.max_aspect, s.eta_r, s.equilibration, s.efficiency_ratio, s.n_marked)]
        for s in hist.stats
    ]


# ---------------------------------------------------------------------- driver


def execute(cfg: RunConfig) -> tuple[int, dict[int, RunHistory]]:
    """Validate and run a configuration; returns the exit code and the histories."""
    try:
        cfg.validate()
        mesh0, coeffs = cfg.problem()
    except (ConfigError, CoefficientError, MeshError, PresetError, OSError, ValueError, KeyError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_VALIDATION, {}

    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    order = sorted(set(cfg.indices) | ({1} if max(cfg.indices) > 1 else set()))
    histories: dict[int, RunHistory] = {}
    lower1 = None
    try:
        for i in order:
            writer = _StepWriter(out, i, cfg.dump_fields)
            hist = run_adaptive(mesh0, coeffs, cfg.adapt_config(i), degree=cfg.degree, lower1=lower1, callback=writer)
            histories[i] = hist
            if i == 1:
                lower1 = hist.final.lower
    except (FluxError, EigenSolveError, np.linalg.LinAlgError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        _write_outputs(out, cfg, histories)
        return EXIT_NUMERICAL, histories
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_VALIDATION, histories

    _closeness_across_runs(histories)
    _write_outputs(out, cfg, histories)
    _print_summary(histories)
    ok = all(h.status in (CONVERGED, MACHINE_CONVERGED) for h in histories.values())
    return (EXIT_OK if ok else EXIT_UNCONVERGED), histories


def _closeness_across_runs(histories: dict[int, RunHistory]) -> None:
    """Prefer final lower bounds of dedicated runs of the following indices."""
    for i, hist in histories.items():
        following = [histories[j].final.lower for j in sorted(histories) if j > i]
        if following:
            backfill_closeness(hist, following + hist.final_next_lowers[len(following):])


def _write_outputs(out: Path, cfg: RunConfig, histories: dict[int, RunHistory]) -> None:
    rows = []
    meta = {
        "version": __version__,
        "eigen_residual_rtol": RESIDUAL_RTOL,
        "degree": cfg.degree,
        "theta": cfg.theta,
        "ereltol": cfg.ereltol,
        "runs": {},
    }
    for i, hist in sorted(histories.items()):
        _write_csv(out / f"history_{i}.csv", HEADER, [_row(r) for r in hist.records])
        _write_csv(out / f"diagnostics_{i}.csv", DIAG_HEADER, _diagnostic_rows(hist))
        rows.append(_row(hist.final))
        meta["runs"][str(i)] = {
            "status": hist.status,
            "steps": hist.n_steps,
            "lower1_source": hist.final.lower1_source,
            "cluster_substituted": hist.final.cluster_substituted,
            "final_next_lowers": hist.final_next_lowers,
            "warnings": hist.warnings,
        }
    _write_csv(out / "bounds.csv", HEADER, rows)
    (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n")


def _print_summary(histories: dict[int, RunHistory]) -> None:
    print(f"{'eigenvalue':>10} {'lower':>14} {'upper':>14} {'N_DOF':>8} {'N_AS':>5}  status")
    for i, hist in sorted(histories.items()):
        r = hist.final
        flag = " (closeness test failed)" if r.closeness_pass is False else ""
        if r.cluster_substituted:
            flag += " (cluster: next distinct lower bound used)"
        print(f"{'lambda_' + str(i):>10} {r.lower:14.6f} {r.upper:14.6f} {r.ndof:8d} {r.step:5d}  {hist.status}{flag}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, TypeError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_VALIDATION
    code, _ = execute(cfg)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
