"""Command-line pipeline: fit, sample, mean, intervals, diagnose, oos,
simulate, bench, and manifest replay.

Every run that writes files can record a manifest (fit always does);
`replay` reruns the recorded command and verifies the outputs hash to
the recorded values. Failures print one machine-readable JSON record to
stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FableError
from .inference import (
    credible_intervals,
    fitted_loglik,
    oos_loglik,
    predictive_coverage,
    variance_explained,
)
from .io import (
    RunManifest,
    file_sha256,
    load_manifest,
    load_matrix,
    load_model,
    preprocess,
    save_manifest,
    save_matrix,
    save_model,
    save_samples,
    write_benchmark_table,
    write_config_summaries,
    write_intervals,
    write_metric_records,
)
from .linalg import DataMatrix
from .model import RHO_STRATEGIES, fit
from .sampler import RngSpec, draw_samples, posterior_mean
from .simharness import SimulationConfig, run_study, runtime_benchmark

# the four (n, p) cells of the headline study, all at rank 10
PAPER_TABLE1_CELLS = ((500, 1000), (1000, 1000), (500, 5000), (1000, 5000))


def _default_threads() -> int:
    env = os.environ.get("FABLE_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"FABLE_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def parse_indices(text: str) -> list[int]:
    """Parse "0,5,10-12" into [0, 5, 10, 11, 12]."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo_s, hi_s = part.split("-", 1)
            lo, hi = int(lo_s), int(hi_s)
            if hi < lo:
                raise ValueError(f"decreasing range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"no indices in {text!r}")
    return out


def _parse_p_grid(text: str) -> list[int]:
    """Either "500:5000:500" (inclusive stop) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must be start:stop:step, got {text!r}")
        start, stop, step = (int(x) for x in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad grid bounds {text!r}")
        return list(range(start, stop + 1, step))
    return [int(x) for x in text.split(",") if x.strip()]


def _add_pipeline_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--input", required=True, help="matrix file (text or FABLEMAT1)")
    sub.add_argument(
        "--format",
        choices=("auto", "delimited_text", "raw_binary"),
        default="auto",
    )
    sub.add_argument(
        "--transform", choices=("none", "log2_plus_one"), default="none"
    )
    sub.add_argument(
        "--filter-fraction",
        type=float,
        default=1.0,
        metavar="F",
        help="keep the top ceil(F * p) columns by variance",
    )
    sub.add_argument(
        "--no-center",
        dest="center",
        action="store_false",
        help="skip column centering (fitting will then refuse the data)",
    )


def _add_fit_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--k", type=int, default=None, help="factor count; default selects by information criterion")
    sub.add_argument("--S0", type=float, default=0.75, dest="s0",
                     help="cumulative spectrum fraction bounding the rank grid")
    sub.add_argument("--gamma0", type=float, default=1.0)
    sub.add_argument("--delta0-sq", type=float, default=1.0)
    sub.add_argument("--tau-sq", type=float, default=None,
                     help="prior loading scale; default is moment-matched")
    sub.add_argument("--rho-strategy", choices=RHO_STRATEGIES, default="mean_b")
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--svd-method", choices=("exact", "randomized"), default="exact")
    sub.add_argument("--seed", type=int, default=0,
                     help="seed for the randomized SVD sketch")


def _fit_options(args) -> dict:
    return {
        "k": args.k,
        "S0": args.s0,
        "gamma0": args.gamma0,
        "delta0_sq": args.delta0_sq,
        "tau_sq": args.tau_sq,
        "rho_strategy": args.rho_strategy,
        "coverage_alpha": args.alpha,
        "svd_method": args.svd_method,
        "seed": args.seed,
    }


def _load_and_preprocess(args) -> tuple[DataMatrix, np.ndarray, str]:
    loaded = load_matrix(args.input, format=args.format)
    dm, kept = preprocess(
        loaded.values,
        transform=args.transform,
        filter_top_variance_fraction=args.filter_fraction,
        center=getattr(args, "center", True),
    )
    return dm, kept, file_sha256(args.input)


def _manifest(args, command: str, *, seed=None, input_sha256=None, resolved=None):
    config = {"argv": list(args._argv)}
    return RunManifest(
        command=command,
        config=config,
        software_version=__version__,
        seed=seed,
        input_sha256=input_sha256,
        resolved=resolved or {},
        created_unix=time.time(),
    )


def _record_outputs(
    manifest: RunManifest, measured: dict | None = None, **paths: str | None
) -> RunManifest:
    def hashed(entries):
        return {
            role: {"path": str(path), "sha256": file_sha256(path)}
            for role, path in entries.items()
            if path is not None
        }

    return RunManifest(
        command=manifest.command,
        config=manifest.config,
        software_version=manifest.software_version,
        seed=manifest.seed,
        input_sha256=manifest.input_sha256,
        resolved=manifest.resolved,
        outputs=hashed(paths),
        measured=hashed(measured or {}),
        created_unix=manifest.created_unix,
    )


def _emit_json(payload: dict, output: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text)


def _cmd_fit(args) -> int:
    dm, kept, checksum = _load_and_preprocess(args)
    model = fit(dm, **_fit_options(args))
    save_model(args.output, model)
    if args.output_columns is not None:
        Path(args.output_columns).write_text(
            "\n".join(str(int(i)) for i in kept) + "\n"
        )
    resolved = {
        "k": model.k,
        "tau_sq": model.tau_sq,
        "rho": model.rho,
        "gamma_n": model.gamma_n,
        "columns_kept": int(len(kept)),
    }
    manifest = _manifest(
        args, "fit", seed=args.seed, input_sha256=checksum, resolved=resolved
    )
    manifest = _record_outputs(
        manifest, model=args.output, columns=args.output_columns
    )
    manifest_path = args.manifest or args.output + ".manifest.json"
    save_manifest(manifest_path, manifest)
    print(f"fit: k={model.k} tau_sq={model.tau_sq:.6g} rho={model.rho:.6g} "
          f"-> {args.output}")
    return 0


def _cmd_sample(args) -> int:
    model = load_model(args.model)
    draws = draw_samples(
        model,
        args.n_samples,
        RngSpec(args.seed),
        rho=args.rho,
        threads=args.threads,
        start=args.start,
    )
    count = save_samples(args.output, draws, format=args.sample_format)
    if args.manifest is not None:
        manifest = _manifest(
            args, "sample", seed=args.seed,
            resolved={"n_samples": count, "rho": args.rho if args.rho is not None else model.rho},
        )
        save_manifest(args.manifest, _record_outputs(manifest, samples=args.output))
    print(f"sample: {count} draws -> {args.output}")
    return 0


def _cmd_mean(args) -> int:
    model = load_model(args.model)
    if args.form == "factored":
        est = posterior_mean(model)
        save_matrix(args.output_loadings, est.loadings)
        save_matrix(args.output_noise, est.diag.reshape(1, -1))
        written = {"loadings": args.output_loadings, "noise": args.output_noise}
        print(f"mean: factored ({model.p}x{model.k} + diagonal) -> "
              f"{args.output_loadings}, {args.output_noise}")
    else:
        idx = parse_indices(args.indices)
        pairs = [(u, v) for i, u in enumerate(idx) for v in idx[i:]]
        entries = posterior_mean(model, form="dense_entrywise", indices=pairs)
        with open(args.output, "w") as fh:
            fh.write("u,v,mean\n")
            for (u, v) in pairs:
                fh.write(f"{u},{v},{float(entries[(u, v)])!r}\n")
        written = {"entries": args.output}
        print(f"mean: {len(pairs)} entrywise means -> {args.output}")
    if args.manifest is not None:
        manifest = _manifest(args, "mean", resolved={"form": args.form})
        save_manifest(args.manifest, _record_outputs(manifest, **written))
    return 0


def _cmd_intervals(args) -> int:
    model = load_model(args.model)
    idx = parse_indices(args.indices)
    pairs = [(u, v) for i, u in enumerate(idx) for v in idx[i:]]
    rng = None if args.seed is None else RngSpec(args.seed)
    grid = credible_intervals(
        model,
        pairs,
        alpha=args.alpha,
        method=args.method,
        n_samples=args.n_samples,
        rng=rng,
        threads=args.threads,
    )
    write_intervals(args.output, grid)
    if args.manifest is not None:
        manifest = _manifest(
            args, "intervals", seed=args.seed,
            resolved={"method": args.method, "alpha": args.alpha, "pairs": len(pairs)},
        )
        save_manifest(args.manifest, _record_outputs(manifest, intervals=args.output))
    print(f"intervals: {len(pairs)} entries ({args.method}) -> {args.output}")
    return 0


def _cmd_diagnose(args) -> int:
    model = load_model(args.model)
    dm, kept, checksum = _load_and_preprocess(args)
    pve = variance_explained(model)
    result = {
        "fitted_loglik": float(fitted_loglik(model, dm)),
        "variance_explained_mean": float(pve.mean()),
        "variance_explained_median": float(np.median(pve)),
        "predictive_coverage": float(predictive_coverage(model, dm, alpha=args.alpha)),
        "alpha": args.alpha,
        "n": dm.n,
        "p": dm.p,
        "k": model.k,
    }
    _emit_json(result, args.output)
    if args.manifest is not None:
        keys = ("fitted_loglik", "variance_explained_mean", "predictive_coverage")
        manifest = _manifest(
            args, "diagnose", input_sha256=checksum,
            resolved={key: result[key] for key in keys},
        )
        if args.output is not None:
            manifest = _record_outputs(manifest, report=args.output)
        save_manifest(args.manifest, manifest)
    return 0


def _cmd_oos(args) -> int:
    train_loaded = load_matrix(args.input, format=args.format)
    test_loaded = load_matrix(args.test, format=args.format)
    if test_loaded.values.shape[1] != train_loaded.values.shape[1]:
        raise ValueError(
            f"train and test column counts differ "
            f"({train_loaded.values.shape[1]} vs {test_loaded.values.shape[1]})"
        )
    train_dm, kept = preprocess(
        train_loaded.values,
        transform=args.transform,
        filter_top_variance_fraction=args.filter_fraction,
        center=args.center,
    )
    checksum = file_sha256(args.input)
    # the test rows get the train-chosen transform and columns; target
    # indices refer to post-filter positions, so slice test the same way
    test_all, _ = preprocess(
        test_loaded.values,
        transform=args.transform,
        filter_top_variance_fraction=1.0,
        center=False,
    )
    targets = parse_indices(args.targets)
    extras = parse_indices(args.extras) if args.extras else []
    test_block = DataMatrix(test_all.values[:, kept][:, targets])
    value = oos_loglik(train_dm, test_block, targets, extras, **_fit_options(args))
    result = {
        "oos_loglik": value,
        "targets": len(targets),
        "extras": len(extras),
        "n_train": train_dm.n,
        "n_test": test_block.n,
    }
    _emit_json(result, args.output)
    if args.manifest is not None:
        manifest = _manifest(
            args, "oos", seed=args.seed, input_sha256=checksum,
            resolved={"oos_loglik": value},
        )
        if args.output is not None:
            manifest = _record_outputs(manifest, report=args.output)
        save_manifest(args.manifest, manifest)
    return 0


def _simulate_configs(args) -> list[SimulationConfig]:
    common = dict(
        k_true=args.k,
        replicates=args.replicates,
        seed=args.seed,
        tracked=args.tracked,
        alpha=args.alpha,
        interval_method=args.interval_method,
        n_samples=args.n_samples,
    )
    if args.preset == "paper-table1":
        return [SimulationConfig(n=n, p=p, **common) for n, p in PAPER_TABLE1_CELLS]
    if args.n is None or args.p is None:
        raise ValueError("simulate needs either --preset or both --n and --p")
    return [SimulationConfig(n=args.n, p=args.p, **common)]


def _cmd_simulate(args) -> int:
    configs = _simulate_configs(args)
    result = run_study(configs, threads=args.threads)
    if args.output_records is not None:
        write_metric_records(args.output_records, result.records)
    if args.output_summaries is not None:
        write_config_summaries(args.output_summaries, result.summaries)
    header = (
        f"{'config':>18} {'reps':>5} {'fail':>5} {'rel_err':>8} "
        f"{'coverage':>9} {'width':>7}"
    )
    print(header)
    for s in result.summaries:
        print(
            f"{s.config_id:>18} {s.replicates_done:>5} {s.failures:>5} "
            f"{s.mean_rel_error:>8.3f} {s.mean_coverage:>9.3f} {s.mean_width:>7.3f}"
        )
    if args.manifest is not None:
        manifest = _manifest(
            args, "simulate", seed=args.seed,
            resolved={
                s.config_id: {
                    "mean_rel_error": s.mean_rel_error,
                    "mean_coverage": s.mean_coverage,
                    "mean_width": s.mean_width,
                    "failures": s.failures,
                }
                for s in result.summaries
            },
        )
        # per-replicate records embed wall-clock timings, so they are
        # measured files; summaries hold only deterministic aggregates
        manifest = _record_outputs(
            manifest,
            measured={"records": args.output_records},
            summaries=args.output_summaries,
        )
        save_manifest(args.manifest, manifest)
    return 0


def _cmd_bench(args) -> int:
    grid = _parse_p_grid(args.p_grid)
    rows = runtime_benchmark(
        grid,
        n=args.n,
        k_true=args.k,
        n_samples=args.n_samples,
        repeats=args.repeats,
        seed=args.seed,
    )
    if args.output is not None:
        write_benchmark_table(args.output, rows)
    print(f"{'p':>6} {'fit_s':>10} {'sample_s':>10} {'mean_s':>10}")
    for row in rows:
        print(
            f"{row.p:>6} {row.fit_seconds:>10.4f} {row.sample_seconds:>10.4f} "
            f"{row.mean_seconds:>10.4f}"
        )
    if args.manifest is not None:
        manifest = _manifest(args, "bench", seed=args.seed)
        manifest = _record_outputs(manifest, measured={"table": args.output})
        save_manifest(args.manifest, manifest)
    return 0


def _cmd_replay(args) -> int:
    manifest = load_manifest(args.manifest)
    argv = list(manifest.config.get("argv", []))
    if not argv:
        raise ValueError(f"{args.manifest}: manifest records no argv to replay")
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mapping = {
        record["path"]: str(outdir / Path(record["path"]).name)
        for record in {**manifest.outputs, **manifest.measured}.values()
    }
    new_argv = [mapping.get(arg, arg) for arg in argv]
    code = main(new_argv)
    if code != 0:
        return code
    mismatched = []
    for role, record in manifest.outputs.items():
        replayed = mapping[record["path"]]
        if file_sha256(replayed) != record["sha256"]:
            mismatched.append(role)
    if mismatched:
        raise ValueError(
            f"replay outputs differ from manifest for: {', '.join(sorted(mismatched))}"
        )
    missing = [
        role
        for role, record in manifest.measured.items()
        if not Path(mapping[record["path"]]).exists()
    ]
    if missing:
        raise ValueError(f"replay did not rewrite measured file(s): {', '.join(sorted(missing))}")
    print(
        f"replay: {manifest.command} reproduced {len(manifest.outputs)} "
        f"output(s) bit-identically"
        + (f", rewrote {len(manifest.measured)} measured file(s)" if manifest.measured else "")
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fable",
        description="Factor-based covariance estimation with sampling-light "
        "uncertainty quantification.",
    )
    parser.add_argument("--version", action="version", version=f"fable {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit a model and write its artifact")
    _add_pipeline_flags(p_fit)
    _add_fit_flags(p_fit)
    p_fit.add_argument("--output", required=True, help="model artifact path")
    p_fit.add_argument("--output-columns", default=None,
                       help="write kept column indices, one per line")
    p_fit.add_argument("--manifest", default=None,
                       help="manifest path (default: <output>.manifest.json)")
    p_fit.set_defaults(func=_cmd_fit)

    p_sample = subs.add_parser("sample", help="draw posterior covariance samples")
    p_sample.add_argument("--model", required=True)
    p_sample.add_argument("--n-samples", type=int, required=True)
    p_sample.add_argument("--seed", type=int, required=True,
                          help="sampling is never seeded from the clock")
    p_sample.add_argument("--rho", type=float, default=None,
                          help="override the model's variance inflation")
    p_sample.add_argument("--start", type=int, default=1,
                          help="index of the first draw")
    p_sample.add_argument("--threads", type=int, default=None)
    p_sample.add_argument("--sample-format", choices=("binary", "text"),
                          default="binary")
    p_sample.add_argument("--output", required=True)
    p_sample.add_argument("--manifest", default=None)
    p_sample.set_defaults(func=_cmd_sample)

    p_mean = subs.add_parser("mean", help="posterior mean of the covariance")
    p_mean.add_argument("--model", required=True)
    p_mean.add_argument("--form", choices=("factored", "dense_entrywise"),
                        default="factored")
    p_mean.add_argument("--output-loadings", default=None,
                        help="factored form: loadings matrix file")
    p_mean.add_argument("--output-noise", default=None,
                        help="factored form: noise variance file")
    p_mean.add_argument("--indices", default=None,
                        help="dense form: index set, e.g. 0,5,10-12")
    p_mean.add_argument("--output", default=None,
                        help="dense form: entrywise CSV path")
    p_mean.add_argument("--manifest", default=None)
    p_mean.set_defaults(func=_cmd_mean)

    p_int = subs.add_parser("intervals", help="entrywise credible intervals")
    p_int.add_argument("--model", required=True)
    p_int.add_argument("--indices", required=True,
                       help="index set; intervals cover all its pairs")
    p_int.add_argument("--alpha", type=float, default=0.05)
    p_int.add_argument("--method", choices=("asymptotic", "sample_quantile"),
                       default="asymptotic")
    p_int.add_argument("--n-samples", type=int, default=None)
    p_int.add_argument("--seed", type=int, default=None,
                       help="required for sample_quantile")
    p_int.add_argument("--threads", type=int, default=None)
    p_int.add_argument("--output", required=True)
    p_int.add_argument("--manifest", default=None)
    p_int.set_defaults(func=_cmd_intervals)

    p_diag = subs.add_parser("diagnose", help="fit quality diagnostics")
    p_diag.add_argument("--model", required=True)
    _add_pipeline_flags(p_diag)
    p_diag.add_argument("--alpha", type=float, default=0.05)
    p_diag.add_argument("--output", default=None, help="default: stdout")
    p_diag.add_argument("--manifest", default=None)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_oos = subs.add_parser("oos", help="out-of-sample log-likelihood")
    _add_pipeline_flags(p_oos)
    _add_fit_flags(p_oos)
    p_oos.add_argument("--test", required=True, help="held-out rows, same columns")
    p_oos.add_argument("--targets", required=True,
                       help="scored columns (post-filter indices)")
    p_oos.add_argument("--extras", default=None,
                       help="extra columns that sharpen the factors")
    p_oos.add_argument("--output", default=None, help="default: stdout")
    p_oos.add_argument("--manifest", default=None)
    p_oos.set_defaults(func=_cmd_oos)

    p_sim = subs.add_parser("simulate", help="synthetic-truth study")
    p_sim.add_argument("--preset", choices=("paper-table1",), default=None,
                       help="bundled four-cell (n, p) study grid")
    p_sim.add_argument("--n", type=int, default=None)
    p_sim.add_argument("--p", type=int, default=None)
    p_sim.add_argument("--k", type=int, default=10)
    p_sim.add_argument("--replicates", type=int, default=100)
    p_sim.add_argument("--seed", type=int, required=True,
                       help="studies are never seeded from the clock")
    p_sim.add_argument("--tracked", type=int, default=100)
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--interval-method",
                       choices=("asymptotic", "sample_quantile"),
                       default="asymptotic")
    p_sim.add_argument("--n-samples", type=int, default=1000)
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.add_argument("--output-records", default=None)
    p_sim.add_argument("--output-summaries", default=None)
    p_sim.add_argument("--manifest", default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_bench = subs.add_parser("bench", help="runtime scaling table")
    p_bench.add_argument("--p-grid", required=True,
                         help="comma list or start:stop:step (inclusive)")
    p_bench.add_argument("--n", type=int, default=500)
    p_bench.add_argument("--k", type=int, default=10)
    p_bench.add_argument("--n-samples", type=int, default=1000)
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--output", default=None)
    p_bench.add_argument("--manifest", default=None)
    p_bench.set_defaults(func=_cmd_bench)

    p_replay = subs.add_parser("replay", help="rerun a manifest and verify outputs")
    p_replay.add_argument("--manifest", required=True)
    p_replay.add_argument("--outdir", required=True,
                          help="directory for the replayed outputs")
    p_replay.set_defaults(func=_cmd_replay)

    return parser


def _validate(args) -> None:
    if getattr(args, "threads", None) is None and hasattr(args, "threads"):
        args.threads = _default_threads()
    if getattr(args, "command", None) == "mean":
        if args.form == "factored":
            if args.output_loadings is None or args.output_noise is None:
                raise ValueError(
                    "factored mean needs --output-loadings and --output-noise"
                )
        else:
            if args.indices is None or args.output is None:
                raise ValueError("dense_entrywise mean needs --indices and --output")
    if getattr(args, "command", None) == "intervals":
        if args.method == "sample_quantile" and args.seed is None:
            raise ValueError("sample_quantile intervals need --seed")


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = list(argv)
    try:
        _validate(args)
        return args.func(args)
    except (FableError, ValueError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
