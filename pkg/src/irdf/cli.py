"""Command-line runner: ``irdf gen-data | sweep | oracle | plot | replay | sample-reproductions``.

Exit codes: 0 success, 1 usage or invalid input, 2 numerical failure, 3 I/O.
Outputs go to ``--out`` or, failing that, ``$IRDF_OUTPUT_DIR`` (default
``./irdf-out``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, nn, oracle, plotting, results
from .errors import ConfigurationError, DimensionError, InfeasibleError, NumericalError
from .mapping import BasisSpec, MappingModel, map_reproductions, sample_basis, write_reproductions_csv
from .neird import LagrangianPoint, TrainConfig, distortion_spec_for, log_spaced_lambdas, sweep_lambda
from .presets import PRESETS, get_preset

log = logging.getLogger("irdf")

OUTPUT_ENV = "IRDF_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
LN2 = math.log(2.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def output_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or "irdf-out")


def load_config_file(path) -> dict:
    """Read a JSON or YAML mapping."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        cfg = yaml.safe_load(text)
    else:
        cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return cfg


def parse_overrides(pairs) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def gaussian_spec_from(args) -> data.GaussianModelSpec:
    if getattr(args, "model_config", None):
        cfg = load_config_file(args.model_config)
        return data.GaussianModelSpec(np.array(cfg["K_X"], float), np.array(cfg["H"], float), np.array(cfg["K_W"], float))
    return data.paper_gaussian_spec()


def make_dataset(spec: dict, model_config=None) -> data.Dataset:
    kind = spec.get("kind")
    if kind == "gaussian":
        gspec = data.paper_gaussian_spec()
        if model_config:
            cfg = load_config_file(model_config)
            gspec = data.GaussianModelSpec(np.array(cfg["K_X"], float), np.array(cfg["H"], float), np.array(cfg["K_W"], float))
        return data.gen_gaussian(gspec, int(spec["n"]), int(spec["seed"]))
    if kind == "highdim":
        return data.gen_highdim_sparse(int(spec.get("seed_H", 0)), int(spec["seed"]), int(spec["n"]))[0]
    if kind == "binary":
        return data.gen_binary(float(spec["A"]), float(spec["sigma"]), int(spec["n"]), int(spec["seed"]))
    if kind == "digits":
        return data.load_digits_dataset()
    if kind == "mnist":
        return data.load_mnist_idx(spec["images"], spec["labels"])
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def reference_rows(ds: data.Dataset, kind: str, D_lo: float, D_hi: float, count: int = 200) -> list[dict]:
    """Oracle curve or bounds appropriate to the dataset, over ``[D_lo, D_hi]``."""
    meta = ds.metadata
    gen = meta.get("generator")
    if kind == "squared_error" and gen in ("gaussian", "highdim_sparse"):
        spec = data.GaussianModelSpec.from_dict(meta["params"])
        v = oracle.effective_variances(spec)
        floor = float(np.trace(spec.K_W))
        D = np.linspace(max(D_lo, floor * (1 + 1e-6)), min(max(D_hi, floor * 1.01), floor + v.sum()), count)
        return results.oracle_rows(D, oracle.gaussian_irdf(spec, D), name="water_filling")
    if kind == "hamming" and gen == "binary":
        p = meta["params"]
        return binary_oracle_rows(p["A"], p["sigma"])
    if kind in ("hamming", "log_loss", "cross_entropy"):
        H_bits = data.empirical_entropy(ds.s, 2.0)
        if kind == "hamming":
            k = int(ds.s.max()) + 1
            D = np.linspace(0.0, (k - 1) / k, count)
            return results.oracle_rows(D, oracle.hamming_rdf_closed_form(H_bits, k, D) * LN2, name="hamming_rdf")
        H_nats = H_bits * LN2
        D = np.linspace(0.0, max(H_nats, D_hi), count)
        rows = results.oracle_rows(D, oracle.ib_linear_bound(H_nats, D), name="ib_linear")
        for r in rows:
            r["source"] = "bound:ib_linear"
        return rows
    return []


def binary_oracle_rows(A: float, sigma: float, bins: int = 1024, count: int = 60) -> list[dict]:
    grid = oracle.binary_grid_spec(A, sigma, bins)
    lams = np.geomspace(0.05, 60.0, count)
    res = oracle.ba_curve(grid.spec, lams)
    return results.oracle_rows([r.distortion for r in res], [r.rate for r in res], lams, name="ba_grid")


def _save_checkpoints(folder: Path, index: int, point: LagrangianPoint, models) -> dict:
    if models is None:
        return {}
    folder.mkdir(parents=True, exist_ok=True)
    T = models.mapping
    t_path = folder / f"lam{index:02d}_T.npz"
    nn.save_network(t_path, T.params, seed=point.seed, meta={
        "role": "mapping", "lambda": point.lam, "head": T.head,
        "basis": {"kind": T.basis.kind, "dim": T.basis.dim, "seed": T.basis.seed},
    })
    refs = {"T": t_path.name}
    red = models.reduced
    if getattr(red, "trainable", False):
        g = red.model
        g_path = folder / f"lam{index:02d}_g.npz"
        nn.save_network(g_path, g.params, seed=point.seed, meta={
            "role": "reduced_distortion", "lambda": point.lam, "x_dim": g.x_dim, "y_dim": g.y_dim,
            "in_shift": g.in_shift.tolist(), "in_scale": g.in_scale.tolist(),
            "out_shift": g.out_shift, "out_scale": g.out_scale,
        })
        refs["g"] = g_path.name
    return refs


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = {"kind": args.kind, "n": args.n, "seed": args.seed, "seed_H": args.seed_h,
            "A": args.A, "sigma": args.sigma, "images": args.images, "labels": args.labels}
    if args.kind == "mnist" and not (args.images and args.labels):
        raise UsageError("mnist needs --images and --labels")
    ds = make_dataset(spec, args.model_config)
    path = Path(args.output) if args.output else output_dir(None) / f"{args.kind}.irdf"
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(path, ds)
    print(f"wrote {path} ({len(ds)} samples, x_dim={ds.x_dim}, sha256={results.sha256_file(path)[:16]})")
    return EXIT_OK


def _resolve_sweep(args) -> tuple[dict, TrainConfig, list[float], bool, int | None]:
    dataset_spec = None
    train: dict = {}
    lams: list[float] = []
    warm, warm_epochs = False, None
    if args.preset:
        pre = get_preset(args.preset)
        dataset_spec = dict(pre.data)
        train.update(pre.train)
        lams = list(pre.lams)
        warm = pre.warm_start
    if args.config:
        cfg = load_config_file(args.config)
        unknown = set(cfg) - {"train", "lams", "warm_start", "warm_epochs", "data"}
        if unknown:
            raise ConfigurationError(f"unknown top-level config keys {sorted(unknown)}")
        train.update(cfg.get("train", {}))
        lams = list(cfg.get("lams", lams))
        warm = bool(cfg.get("warm_start", warm))
        warm_epochs = cfg.get("warm_epochs", warm_epochs)
        dataset_spec = cfg.get("data", dataset_spec)
    train.update(parse_overrides(args.set))
    if args.lams:
        lams = list(args.lams)
    if args.lam_range:
        lo, hi, count = args.lam_range
        lams = log_spaced_lambdas(float(lo), float(hi), int(count))
    if args.warm_start is not None:
        warm = args.warm_start
    if args.warm_epochs is not None:
        warm_epochs = args.warm_epochs
    if not lams:
        raise UsageError("no lambda values: use --lams, --lam-range, --preset or a config file")
    if args.data:
        dataset_spec = {"kind": "file", "path": str(args.data)}
    if dataset_spec is None:
        raise UsageError("no dataset: use --data or --preset")
    return dataset_spec, TrainConfig.from_dict(train), lams, warm, warm_epochs


def _load_sweep_data(dataset_spec: dict) -> tuple[data.Dataset, dict]:
    if dataset_spec.get("kind") == "file":
        path = Path(dataset_spec["path"])
        ds = data.load_dataset(path)
        return ds, {"path": str(path.resolve()), "sha256": results.sha256_file(path), "metadata": ds.metadata}
    ds = make_dataset(dataset_spec)
    return ds, {"spec": dataset_spec, "sha256": hashlib.sha256(data.dataset_bytes(ds)).hexdigest(), "metadata": ds.metadata}


def run_sweep(out: Path, dataset_spec: dict, config: TrainConfig, lams, warm: bool, warm_epochs,
              plot: bool = True, origin: str | None = None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    ds, ds_info = _load_sweep_data(dataset_spec)
    dspec = distortion_spec_for(config, ds)
    manifest = {
        "format": "irdf-manifest", "version": 1, "status": "running",
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"), "environment": results.environment_info(),
        "config": config.to_dict(), "lams": sorted(float(v) for v in lams), "warm_start": warm,
        "warm_epochs": warm_epochs, "seed": config.seed, "dataset_spec": dataset_spec, "dataset": ds_info,
        "distortion": {"kind": dspec.kind, "y_dim": dspec.y_dim}, "replay_of": origin,
        "csv_schema": {"version": results.SCHEMA_VERSION, "columns": list(results.COLUMNS)},
        "points": [],
    }
    manifest_path = out / "manifest.json"
    results.write_manifest(manifest_path, manifest)

    started = time.perf_counter()
    ckpt_dir = out / "checkpoints"
    counter = iter(range(len(lams)))

    def record(point, models):
        i = next(counter)
        refs = _save_checkpoints(ckpt_dir, i, point, models)
        manifest["points"].append({
            "lambda": point.lam, "status": point.status, "message": point.message,
            "seconds": point.diagnostics.get("seconds"), "checkpoints": refs,
        })
        results.write_manifest(manifest_path, manifest)
        print(f"lambda={point.lam:g}  D={point.D_hat:.5f}  R={point.R_hat / LN2:.5f} bits  [{point.status}]", flush=True)

    curve = sweep_lambda(config, lams, ds, warm_start=warm, warm_epochs=warm_epochs, on_point=record)
    rows = results.curve_rows(curve.points, "neird")
    csv_path = results.write_curve_csv(out / "curve.csv", rows)

    series = [("NEIRD", rows)]
    ok = curve.ok_points
    if ok:
        D = [p.D_hat for p in ok]
        ref = reference_rows(ds, dspec.kind, 0.9 * min(D), 1.1 * max(D))
        if ref:
            results.write_curve_csv(out / "reference.csv", ref)
            series.append((ref[0]["source"].split(":", 1)[1].replace("_", " "), ref))
    if plot:
        plotting.save_curves(out / "curve.svg", series)

    diverged = [p.lam for p in curve.points if not p.ok]
    manifest.update({
        "status": "complete" if not diverged else "diverged", "diverged": diverged,
        "wall_seconds": time.perf_counter() - started, "outputs": {"csv": csv_path.name},
    })
    results.write_manifest(manifest_path, manifest)
    if diverged:
        print(f"diverged at lambda = {diverged}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_sweep(args) -> int:
    dataset_spec, config, lams, warm, warm_epochs = _resolve_sweep(args)
    return run_sweep(output_dir(args.out), dataset_spec, config, lams, warm, warm_epochs, plot=not args.no_plot)


def cmd_replay(args) -> int:
    src = Path(args.manifest)
    m = results.read_manifest(src)
    config = TrainConfig.from_dict(m["config"])
    spec = m["dataset_spec"]
    if spec.get("kind") == "file":
        path = Path(spec["path"])
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} named in the manifest is missing")
        if results.sha256_file(path) != m["dataset"]["sha256"]:
            raise ConfigurationError(f"dataset {path} has changed since the original run")
    out = output_dir(args.out)
    if out.resolve() == src.parent.resolve():
        raise UsageError("replay output directory must differ from the original run")
    code = run_sweep(out, spec, config, m["lams"], m["warm_start"], m["warm_epochs"],
                     plot=not args.no_plot, origin=str(src.resolve()))
    if args.check:
        original = src.parent / m.get("outputs", {}).get("csv", "curve.csv")
        same = original.read_bytes() == (out / "curve.csv").read_bytes()
        print("replay identical" if same else "replay DIFFERS from original curve")
        if not same:
            return EXIT_NUMERICAL
    return code


def cmd_oracle(args) -> int:
    model = args.model
    if args.D is None and args.lams is None:
        raise UsageError("give a distortion grid (--D lo hi count) or --lams")
    D_grid = np.linspace(args.D[0], args.D[1], int(args.D[2])) if args.D is not None else None
    lams = np.asarray(args.lams, float) if args.lams is not None else None

    if model in ("gaussian", "highdim", "scalar"):
        if model == "gaussian":
            spec = gaussian_spec_from(args)
        elif model == "highdim":
            spec = data.highdim_sparse_spec(args.seed_h)
        else:
            spec = data.GaussianModelSpec(np.array([[args.variance]]), np.array([[1.0]]), np.array([[0.0]]))
        if D_grid is not None:
            floor = float(np.trace(spec.K_W))
            if np.any(D_grid <= floor):
                raise InfeasibleError(f"distortion grid reaches tr(K_W) = {floor:g}; the rate is infinite there")
            rows = results.oracle_rows(D_grid, oracle.gaussian_irdf(spec, D_grid), name="water_filling")
        else:
            pts = [oracle.gaussian_irdf_at_slope(spec, lam) for lam in lams]
            rows = results.oracle_rows([p[0] for p in pts], [p[1] for p in pts], lams, name="water_filling")
    elif model in ("bsc", "binary"):
        if model == "bsc":
            spec = oracle.bsc_indirect_spec(args.p)
            name = "bsc_ba"
        else:
            spec = oracle.binary_grid_spec(args.A, args.sigma, args.bins).spec
            name = "ba_grid"
        if lams is not None:
            res = oracle.ba_curve(spec, lams)
            rows = results.oracle_rows([r.distortion for r in res], [r.rate for r in res], lams, name=name)
        else:
            rows = results.oracle_rows(D_grid, [oracle.ba_rate_at_distortion(spec, d) for d in D_grid], name=name)
    elif model in ("hamming", "ib"):
        if D_grid is None:
            raise UsageError(f"{model} needs --D")
        if model == "hamming":
            R = oracle.hamming_rdf_closed_form(args.entropy, args.alphabet, D_grid) * LN2
        else:
            R = oracle.ib_linear_bound(args.entropy * LN2, D_grid)
        rows = results.oracle_rows(D_grid, R, name=model)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown model {model}")

    path = Path(args.output) if args.output else output_dir(None) / f"oracle_{model}.csv"
    results.write_curve_csv(path, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.curves:
        raise UsageError("plot needs at least one curve CSV")
    series = []
    for path in args.curves:
        rows = results.read_curve_csv(path)
        if not rows:
            continue
        src = rows[0]["source"]
        label = Path(path).stem if src == "neird" else src.split(":", 1)[-1].replace("_", " ")
        series.append((label, rows))
    out = Path(args.output) if args.output else output_dir(None) / "curves.svg"
    plotting.save_curves(out, series, units=args.units, title=args.title)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sample_reproductions(args) -> int:
    params, header = nn.load_network(args.checkpoint)
    meta = header.get("meta", {})
    if meta.get("role") != "mapping":
        raise ConfigurationError(f"{args.checkpoint} is not a mapping checkpoint")
    b = meta["basis"]
    model = MappingModel(params, BasisSpec(b["kind"], b["dim"], b["seed"]), meta["head"])
    y = map_reproductions(model, sample_basis(model.basis, args.count, np.random.default_rng(args.seed)))
    out = Path(args.output) if args.output else output_dir(None) / "reproductions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reproductions_csv(out, y)
    print(f"wrote {out} ({len(y)} rows)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="irdf", description="Estimate indirect rate-distortion curves from samples.")
    p.add_argument("--version", action="version", version=f"irdf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate or ingest a dataset")
    g.add_argument("--kind", required=True, choices=["gaussian", "highdim", "binary", "digits", "mnist"])
    g.add_argument("--n", type=int, default=20000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seed-h", type=int, default=0, help="seed of the sparse observation matrix (highdim)")
    g.add_argument("--A", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--model-config", help="JSON/YAML file with K_X, H, K_W (gaussian)")
    g.add_argument("--images", help="IDX image file (mnist)")
    g.add_argument("--labels", help="IDX label file (mnist)")
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sweep", help="estimate one tangent point per lambda")
    s.add_argument("--data", help="dataset file written by gen-data")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--config", help="JSON/YAML with keys train, lams, warm_start, warm_epochs, data")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training setting")
    s.add_argument("--lams", type=float, nargs="+")
    s.add_argument("--lam-range", nargs=3, metavar=("LO", "HI", "COUNT"))
    s.add_argument("--warm-start", dest="warm_start", action="store_true", default=None)
    s.add_argument("--no-warm-start", dest="warm_start", action="store_false")
    s.add_argument("--warm-epochs", type=int)
    s.add_argument("--no-plot", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("oracle", help="reference curves and bounds")
    o.add_argument("--model", required=True, choices=["gaussian", "highdim", "scalar", "bsc", "binary", "hamming", "ib"])
    o.add_argument("--D", type=float, nargs=3, metavar=("LO", "HI", "COUNT"))
    o.add_argument("--lams", type=float, nargs="+")
    o.add_argument("--model-config")
    o.add_argument("--seed-h", type=int, default=0)
    o.add_argument("--variance", type=float, default=1.0, help="source variance (scalar)")
    o.add_argument("--p", type=float, default=0.1, help="crossover probability (bsc)")
    o.add_argument("--A", type=float, default=1.0)
    o.add_argument("--sigma", type=float, default=1.0)
    o.add_argument("--bins", type=int, default=1024)
    o.add_argument("--entropy", type=float, default=math.log2(10), help="source entropy in bits (hamming, ib)")
    o.add_argument("--alphabet", type=int, default=10)
    o.add_argument("-o", "--output")
    o.set_defaults(func=cmd_oracle)

    pl = sub.add_parser("plot", help="overlay curve CSVs in one SVG")
    pl.add_argument("curves", nargs="*")
    pl.add_argument("--units", choices=["bits", "nats"], default="bits")
    pl.add_argument("--title")
    pl.add_argument("-o", "--output")
    pl.set_defaults(func=cmd_plot)

    r = sub.add_parser("replay", help="rerun a sweep from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    r.add_argument("--check", action="store_true", help="compare the new CSV byte-for-byte with the original")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=cmd_replay)

    sr = sub.add_parser("sample-reproductions", help="draw reproductions from a saved mapping")
    sr.add_argument("--checkpoint", required=True)
    sr.add_argument("--count", type=int, default=1000)
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("-o", "--output")
    sr.set_defaults(func=cmd_sample_reproductions)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"irdf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DimensionError, InfeasibleError) as exc:
        print(f"irdf: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"irdf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"irdf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
