"""Command-line front end: ``laplace-gmrf run | validate | oracle``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .engine import CONSTANT_CONVENTION, GRID_STEP, GRID_THRESHOLD, LatentGaussianModel, inla
from .errors import LaplaceGMRFError, SchemaError
from .modelio import load_data, parse_model_spec
from .oracle import QuadratureSpec, brute_posterior

log = logging.getLogger("laplace_gmrf")

OUTPUT_FILES = ("summary.csv", "marginals.json", "diagnostics.json")
SUMMARY_HEADER = ("block", "name", "index", "mean", "sd", "q025", "q500", "q975")
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_OTHER = 1


@dataclass(frozen=True)
class RunConfig:
    model_file: Path
    data_file: Path
    output_dir: Path
    graph_files: dict = field(default_factory=dict)
    strategy: str = "gaussian"
    grid_step: float = GRID_STEP
    grid_threshold: float = GRID_THRESHOLD
    seed: int = 0
    verbosity: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.strategy not in ("gaussian", "laplace"):
            raise SchemaError(f"strategy must be 'gaussian' or 'laplace', got {self.strategy!r}", path="strategy")
        if not self.grid_step > 0:
            raise SchemaError("grid step must be positive", path="grid_step")
        if not self.grid_threshold > 0:
            raise SchemaError("grid threshold must be positive", path="grid_threshold")

    def check_paths(self):
        if not Path(self.model_file).is_file():
            raise SchemaError(f"model file not found: {self.model_file}", path="model_file")
        if not Path(self.data_file).is_file():
            raise SchemaError(f"data file not found: {self.data_file}", path="data_file")
        for name, p in self.graph_files.items():
            if not Path(p).is_file():
                raise SchemaError(f"graph file not found: {p}", path=f"graph_files.{name}")


def _fmt(v) -> str:
    return repr(float(v))


def latent_labels(latent) -> list:
    """``(component name, 1-based index)`` for every latent variable in layout order."""
    out = []
    for c in latent.components:
        if c.copy_of is None:
            out.extend((c.name, k + 1) for k in range(c.dim))
    return out


def _summary_rows(result, labels) -> list:
    rows = []
    for (name, k), m in zip(labels, result.latent):
        rows.append(("latent", name, k, *m.summary()))
    for hm in result.hyper:
        rows.append(("hyper", hm.hyper.natural_name, 1, *hm.natural.summary()))
    for hm in result.hyper:
        rows.append(("theta", hm.hyper.name, 1, *hm.internal.summary()))
    return rows


def write_summary(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for block, name, k, *vals in rows:
            w.writerow([block, name, k, *map(_fmt, vals)])


def _density_record(name, index, m, scale=None):
    rec = {"name": name, "index": index}
    if scale:
        rec["scale"] = scale
    rec["x"] = [float(v) for v in m.support]
    rec["density"] = [float(v) for v in m.density]
    return rec


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=False)
        fh.write("\n")


def _diagnostics(result, config: RunConfig, bin_edges) -> dict:
    grid = result.grid
    return {
        "strategy": result.strategy,
        "seed": config.seed,
        "grid_step": config.grid_step,
        "grid_threshold": config.grid_threshold,
        "theta_names": [h.name for h in result.model.free_hypers],
        "theta_star": [float(v) for v in result.optim.theta],
        "hessian": [[float(v) for v in row] for row in np.atleast_2d(result.optim.hessian)] if result.optim.theta.size else [],
        "hessian_fallback": bool(result.optim.hessian_fallback),
        "log_post_at_mode": float(result.optim.log_post),
        "grid_size": len(grid.points),
        "grid": [
            {"z": list(p.z), "theta": [float(t) for t in p.theta], "log_post": float(p.log_post), "weight": float(p.weight),
             "newton_iterations": int(f.n_iter), "step_halvings": int(f.halvings)}
            for p, f in zip(grid.points, grid.fits)
        ],
        "warnings": list(result.warnings),
        "bin_edges": bin_edges,
        "constant_convention": CONSTANT_CONVENTION,
    }


def _load(config: RunConfig):
    config.check_paths()
    model_path = Path(config.model_file)
    parsed = parse_model_spec(model_path.read_text(encoding="utf-8"), base_dir=model_path.parent, graph_files=config.graph_files)
    data = load_data(config.data_file, parsed)
    return parsed, data


def _commit(tmp: Path, out: Path, names):
    for n in names:
        os.replace(tmp / n, out / n)


def _clean(out: Path, names):
    for n in names:
        p = out / n
        if p.exists():
            p.unlink()


def run(config: RunConfig) -> int:
    """Run inference and write ``summary.csv``, ``marginals.json`` and ``diagnostics.json``.

    Outputs are written to a scratch directory and moved into place only when
    all three are complete; on failure none of them is left behind.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _clean(out, OUTPUT_FILES)
    parsed, data = _load(config)
    model = LatentGaussianModel(parsed.latent, data.obs)
    result = inla(model, strategy=config.strategy, step=config.grid_step, threshold=config.grid_threshold, n_jobs=config.n_jobs)
    labels = latent_labels(parsed.latent)
    marginals = {
        "latent": [_density_record(n, k, m) for (n, k), m in zip(labels, result.latent)],
        "hyper": [_density_record(hm.hyper.natural_name, 1, hm.natural, "natural") for hm in result.hyper]
        + [_density_record(hm.hyper.name, 1, hm.internal, "internal") for hm in result.hyper],
    }
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        tmp = Path(tmp)
        write_summary(tmp / "summary.csv", _summary_rows(result, labels))
        _write_json(tmp / "marginals.json", marginals)
        _write_json(tmp / "diagnostics.json", _diagnostics(result, config, data.bin_edges))
        _commit(tmp, out, OUTPUT_FILES)
    for w in result.warnings:
        log.warning(w)
    return 0


def run_oracle(config: RunConfig, points: int = 61, width: float = 8.0) -> int:
    """Brute-force quadrature posterior for tiny models, written as ``summary.csv``.

    The quadrature box is centred on an engine fit: each latent axis spans the
    engine mean plus or minus ``width`` sd, each hyperparameter axis the same
    on the internal scale.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _clean(out, ("summary.csv",))
    parsed, data = _load(config)
    model = LatentGaussianModel(parsed.latent, data.obs)
    fit = inla(model, step=config.grid_step, threshold=config.grid_threshold)
    lat_r = tuple((m.mean - width * m.sd, m.mean + width * m.sd, points) for m in fit.latent)
    th_r = tuple((hm.internal.mean - width * hm.internal.sd, hm.internal.mean + width * hm.internal.sd, points) for hm in fit.hyper)
    bp = brute_posterior(parsed.latent, data.obs, QuadratureSpec(lat_r, th_r))
    rows = [("latent", n, k, *m.summary()) for (n, k), m in zip(latent_labels(parsed.latent), bp.latent)]
    for h, m, nat_mean in zip(model.free_hypers, bp.hyper, bp.hyper_natural_mean):
        nat = h.to_natural(m.support)
        sd = math.sqrt(max(float(trapezoid((nat - nat_mean) ** 2 * m.density, m.support)), 0.0))
        q = [float(h.to_natural(m.quantiles[p])) for p in (0.025, 0.5, 0.975)]
        rows.append(("hyper", h.natural_name, 1, nat_mean, sd, *q))
    for h, m in zip(model.free_hypers, bp.hyper):
        rows.append(("theta", h.name, 1, *m.summary()))
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        write_summary(Path(tmp) / "summary.csv", rows)
        _commit(Path(tmp), out, ("summary.csv",))
    print(json.dumps({"log_evidence": bp.log_evidence}))
    return 0


def validate(model_file, graph_files=None) -> dict:
    path = Path(model_file)
    if not path.is_file():
        raise SchemaError(f"model file not found: {path}", path="model_file")
    parsed = parse_model_spec(path.read_text(encoding="utf-8"), base_dir=path.parent, graph_files=graph_files)
    lat = parsed.latent
    return {
        "valid": True,
        "total_dim": lat.total_dim,
        "components": [{"name": c.name, "model": c.kind, "dim": c.dim, "copy_of": c.copy_of.source if c.copy_of else None}
                       for c in lat.components],
        "families": [f.family for f in parsed.template.families],
        "hyperparameters": [h.name for h in lat.hypers + parsed.template.hypers if not h.fixed],
    }


def _error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "row", "column"):
        v = getattr(exc, attr, None)
        if v is not None:
            payload[attr] = v
    return payload


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, SchemaError) or isinstance(exc, LaplaceGMRFError) and isinstance(exc, ValueError):
        return EXIT_INPUT
    if isinstance(exc, LaplaceGMRFError):
        return EXIT_NUMERIC
    return EXIT_OTHER


def _graph_arg(text):
    name, sep, path = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError("expected NAME=PATH")
    return name, path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laplace-gmrf", description="Approximate Bayesian inference for latent Gaussian models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--model", required=True, type=Path, help="model document (JSON)")
        p.add_argument("--graph", action="append", type=_graph_arg, default=[], metavar="NAME=PATH",
                       help="graph file for a named graph (repeatable)")
        if data:
            p.add_argument("--data", required=True, type=Path, help="data file (CSV)")
            p.add_argument("--out", required=True, type=Path, help="output directory")
            p.add_argument("--grid-step", type=float, default=GRID_STEP)
            p.add_argument("--grid-threshold", type=float, default=GRID_THRESHOLD)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--verbose", "-v", action="count", default=0)

    p_run = sub.add_parser("run", help="run inference")
    common(p_run)
    p_run.add_argument("--strategy", choices=("gaussian", "laplace"), default="gaussian")
    p_run.add_argument("--jobs", type=int, default=1, help="threads for grid evaluation")
    common(sub.add_parser("validate", help="check a model document"), data=False)
    common(sub.add_parser("oracle", help="brute-force quadrature posterior (tiny models only)"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2), format="%(levelname)s %(message)s")
    graphs = dict(args.graph)
    try:
        if args.command == "validate":
            print(json.dumps(validate(args.model, graphs)))
            return 0
        config = RunConfig(args.model, args.data, args.out, graphs, getattr(args, "strategy", "gaussian"),
                           args.grid_step, args.grid_threshold, args.seed, args.verbose, getattr(args, "jobs", 1))
        if args.command == "run":
            return run(config)
        return run_oracle(config)
    except Exception as exc:  # surfaced as a machine-readable record
        if getattr(args, "out", None) is not None and Path(args.out).is_dir():
            _clean(Path(args.out), OUTPUT_FILES)
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        log.debug("failure", exc_info=True)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
