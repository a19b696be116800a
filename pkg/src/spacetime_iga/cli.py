"""Command-line runner for the benchmark studies.

Configurations are flat key = value text files (diff-friendly experiment
provenance).  ``run`` executes the refinement loop and writes a CSV report,
a JSON metadata file, per-step mesh figures, a convergence figure, and
optionally per-step VTK mesh files into the output directory.
"""

import argparse
import os
import sys
import traceback

from . import __version__

CONFIG_DEFAULTS = {
    "example": "ex1",
    "k1": 1,
    "k2": 1,
    "lam": 0.5,
    "p": 2,
    "q": 3,
    "r": None,
    "M": 5,
    "sigma": 0.4,
    "n_ref0": 1,
    "n_ref": 8,
    "theta": 0.1,
    "stabilization": "local",
    "paper_bound": True,
    "marking": "majorant",
    "uniform": False,
    "dim_cap": 200_000,
    "majorant_iters": 3,
    "majorant": True,
    "advanced": True,
    "identity": True,
    "exact": True,
    "vtk": False,
    "figures": True,
    "strict": False,
    "out_dir": "results",
}

_BOOL_KEYS = {"paper_bound", "uniform", "majorant", "advanced", "identity",
              "exact", "vtk", "figures", "strict"}
_INT_KEYS = {"k1", "k2", "p", "q", "M", "n_ref0", "n_ref", "dim_cap",
             "majorant_iters"}
_FLOAT_KEYS = {"lam", "sigma", "theta"}


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_config(path):
    """Read a flat key = value configuration file."""
    cfg = dict(CONFIG_DEFAULTS)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cfg:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in _BOOL_KEYS:
                cfg[key] = _parse_bool(value)
            elif key in _INT_KEYS:
                cfg[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(value)
            elif key == "r":
                cfg[key] = int(value)
            else:
                cfg[key] = value
    if cfg["r"] is None:
        cfg["r"] = cfg["q"]
    return cfg


def build_problem(cfg):
    """Problem case and loop configuration from a parsed config dict."""
    from .adaptivity import LoopConfig, MarkingConfig
    from .assembly import StabilizationConfig
    from .benchmarks import example_case

    ex = cfg["example"]
    if ex == "ex2":
        case = example_case("ex2", k1=cfg["k1"], k2=cfg["k2"])
    elif ex == "ex4":
        case = example_case("ex4", lam=cfg["lam"])
    else:
        case = example_case(ex)
    stab = StabilizationConfig(
        mode=cfg["stabilization"],
        theta=cfg["theta"],
        use_paper_bound=cfg["paper_bound"],
        d=case.d,
        degree=cfg["p"],
    )
    loop = LoopConfig(
        p=cfg["p"], q=cfg["q"], r=cfg["r"], flux_coarsening=cfg["M"],
        n_ref0=cfg["n_ref0"], n_ref=cfg["n_ref"],
        marking=MarkingConfig(sigma=cfg["sigma"], source=cfg["marking"]),
        stabilization=stab, uniform=cfg["uniform"], dim_cap=cfg["dim_cap"],
        majorant_iters=cfg["majorant_iters"],
        with_majorant=cfg["majorant"], with_advanced=cfg["advanced"],
        with_identity=cfg["identity"], with_exact=cfg["exact"],
    )
    return case, loop


def cmd_run(args):
    from .adaptivity import adaptive_loop
    from .benchmarks import example_case  # noqa: F401  (import check)
    from .figures import convergence_figure, mesh_figure
    from .reporting import export_mesh, export_report, report_rows, write_metadata

    cfg = parse_config(args.config)
    case, loop = build_problem(cfg)
    geo = case.make_patch()
    case.validate(geo)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    records = adaptive_loop(case, loop)
    rows = report_rows(records, case.d, cfg["uniform"], strict=cfg["strict"])
    csv_path = os.path.join(out_dir, "report.csv")
    export_report(rows, csv_path)
    write_metadata(
        os.path.join(out_dir, "run.json"), cfg, records,
        extra={"version": __version__, "example": case.id,
               "friedrichs": case.C_F},
    )
    if cfg["vtk"]:
        for rec in records:
            export_mesh(rec.snapshot, rec.eta2, geo,
                        os.path.join(out_dir, f"mesh_{rec.step:03d}.vtk"))
    if cfg["figures"]:
        for rec in records:
            mesh_figure(rec.snapshot, rec.eta2, geo,
                        os.path.join(out_dir, f"mesh_{rec.step:03d}.png"))
        convergence_figure(records, os.path.join(out_dir, "convergence.png"))
    print(f"{case.id}: {len(records)} steps -> {csv_path}")
    return 0


def cmd_list_examples(args):
    from .benchmarks import EXAMPLE_IDS, example_case

    for ex in EXAMPLE_IDS:
        case = example_case(ex) if ex not in ("ex2", "ex4") else (
            example_case(ex) if ex == "ex2" else example_case(ex, lam=0.5)
        )
        params = f" params={case.params}" if case.params else ""
        print(f"{ex}: patch={case.patch_id} T={case.T}{params}")
    return 0


def cmd_validate(args):
    cfg = parse_config(args.config)
    case, loop = build_problem(cfg)
    geo = case.make_patch()
    case.validate(geo)
    print(f"config OK: example={case.id} p={loop.p} q={loop.q} "
          f"M={loop.flux_coarsening} sigma={loop.marking.sigma}")
    return 0


def main(argv=None):
    threads = os.environ.get("SPACETIME_IGA_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = argparse.ArgumentParser(
        prog="spacetime-iga",
        description="adaptive space-time isogeometric benchmark runner",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a benchmark configuration")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)
    p_list = sub.add_parser("list-examples", help="list the problem catalog")
    p_list.set_defaults(func=cmd_list_examples)
    p_val = sub.add_parser("validate", help="check a configuration file")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        traceback.print_exc(limit=1, file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
