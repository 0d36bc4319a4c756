"""Command-line surface: generate, train, predict, benchmark, check-gradients.

Every command resolves its settings from three layers -- built-in defaults,
an optional ``--config`` JSON file, then explicit flags (flags win) -- and
writes the fully resolved configuration to a ``manifest.json`` next to its
outputs, so any result can be reproduced by pointing ``--config`` at the
manifest. Nothing time- or host-dependent goes into result files except the
explicitly labelled ``seconds`` column.

Errors deriving from the package hierarchy print one ``Category: message``
line to stderr and exit 1.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import baseline, checkpoint, numerics, pdegen, predict, svi
from .errors import ConvergenceFailure, InvalidCounts, IoFailure, MfhogpError
from .mfmodel import MultiFidelityDataset, init_model
from .svi import TrainConfig

# canonical spellings; matching is case-insensitive
METHODS = ("mfhogp", "pcagp-f1", "pcagp-fTop", "pcagp-all")
_METHOD_BY_LOWER = {m.lower(): m for m in METHODS}
_BASELINE_MODES = {"pcagp-f1": "f1", "pcagp-fTop": "ftop", "pcagp-all": "all"}

CSV_COLUMNS = ("method", "K", "seed", "rmse", "n_rmse", "loglik", "seconds")

# float64 budget for one prediction chunk: s_samples * rows * output_dim
_CHUNK_BUDGET = 32_000_000

_DEFAULTS = {
    "generate": {"preset": None, "equation": None, "meshes": None,
                 "counts": None, "test_count": None, "seed": 0,
                 "output_grid": None, "input_ranges": None,
                 "time_horizon": None},
    "train": {"dataset": None, "bases": 10, "factors": 2, "epochs": None,
              "learning_rate": 1e-3, "seed": 0, "baseline": "off",
              "mc_samples": 1, "analytic_kl_level1": False, "log_every": 100,
              "gradient_clip": None, "noise_variance": None, "restarts": 3},
    "predict": {"dataset": None, "model": None, "samples": predict.DEFAULT_SAMPLES,
                "seed": 0},
    "benchmark": {"dataset": None, "bases": [10], "factors": 2, "epochs": None,
                  "learning_rate": 1e-3, "seed": 0, "repeats": 5,
                  "samples": predict.DEFAULT_SAMPLES, "methods": list(METHODS),
                  "mc_samples": 1, "analytic_kl_level1": False,
                  "noise_variance": None, "restarts": 3},
    "check-gradients": {"dataset": None, "bases": 2, "factors": 1, "seed": 0,
                        "step_size": 1e-5, "tolerance": 1e-3,
                        "max_parameters": 5000},
}

# epochs default depends on what is being trained
_MODEL_EPOCHS = 5000
_BASELINE_ITERS = 200


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="mfhogp",
        description="Multi-fidelity high-order Gaussian process toolkit",
    )
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="synthesize a simulation dataset")
    common(g)
    g.add_argument("--preset", help=f"one of: {', '.join(sorted(pdegen.PRESETS))}")
    g.add_argument("--equation", help="burgers | poisson | heat (with --meshes/--counts)")
    g.add_argument("--meshes", help="comma-separated mesh ladder, e.g. 16,32")
    g.add_argument("--counts", help="comma-separated per-fidelity counts, e.g. 400,4")
    g.add_argument("--test-count", type=int, dest="test_count")

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    common(t)
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--bases", type=int, help="number of bases K")
    t.add_argument("--factors", type=int, help="CP order R")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--baseline", choices=("off", "f1", "ftop", "all"),
                   help="train the PCA-GP baseline on this fidelity slice instead")

    p = sub.add_parser("predict", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--samples", type=int, help="posterior samples S")

    b = sub.add_parser("benchmark", help="compare methods over repeated seeds")
    common(b)
    b.add_argument("--dataset", help="dataset directory")
    b.add_argument("--bases", help="comma-separated K values, e.g. 5,10,15,20")
    b.add_argument("--factors", type=int)
    b.add_argument("--epochs", type=int)
    b.add_argument("--lr", type=float, dest="learning_rate")
    b.add_argument("--samples", type=int)
    b.add_argument("--repeats", type=int, help="seeds per (method, K) cell")
    b.add_argument("--methods", help=f"comma-separated subset of: {', '.join(METHODS)}")

    c = sub.add_parser("check-gradients", help="finite-difference gradient audit")
    common(c, out_required=False)
    c.add_argument("--dataset", help="dataset directory (default: tiny synthetic)")
    c.add_argument("--bases", type=int)
    c.add_argument("--factors", type=int)
    c.add_argument("--step-size", type=float, dest="step_size")
    c.add_argument("--tolerance", type=float)
    c.add_argument("--max-parameters", type=int, dest="max_parameters")
    return top


def _resolve(args) -> dict:
    """defaults <- config file <- explicit flags; returns the full RunConfig."""
    resolved = dict(_DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise IoFailure(f"no config file at {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise IoFailure(f"{path} is not valid JSON: {exc}") from exc
        for key, value in file_cfg.items():
            if key in resolved:
                resolved[key] = value
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    resolved["command"] = args.command
    return resolved


def _int_list(value, flag) -> list:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(part) for part in str(value).split(",") if part.strip()]
    except ValueError as exc:
        raise InvalidCounts(f"{flag} expects comma-separated integers") from exc


def _write_manifest(directory: Path, payload: dict) -> None:
    # the output path is where the manifest lives; keeping it out of the
    # payload lets reruns from the manifest target a fresh directory
    payload = {k: v for k, v in payload.items() if k != "out"}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (directory / "manifest.json").write_text(text)


def _load_dataset(config) -> tuple:
    if not config.get("dataset"):
        raise IoFailure("--dataset is required")
    return pdegen.load_dataset(config["dataset"])


def _require_test_split(data: MultiFidelityDataset) -> None:
    if data.x_test is None or data.y_test is None:
        raise IoFailure("dataset has no held-out test split")


def cmd_generate(config) -> int:
    if config.get("preset"):
        name = str(config["preset"])
        if name not in pdegen.PRESETS:
            raise InvalidCounts(
                f"unknown preset {name!r}; choose from "
                f"{', '.join(sorted(pdegen.PRESETS))}"
            )
        preset = pdegen.PRESETS[name]
        spec, counts = preset.spec, preset.counts
        test_count = preset.test_count
    elif config.get("equation"):
        if not (config.get("meshes") and config.get("counts")):
            raise InvalidCounts("--equation requires --meshes and --counts")
        ranges = config.get("input_ranges")
        spec = pdegen.make_spec(
            config["equation"],
            _int_list(config["meshes"], "--meshes"),
            output_grid=(
                tuple(_int_list(config["output_grid"], "output_grid"))
                if config.get("output_grid")
                else None
            ),
            input_ranges=(
                tuple(tuple(float(v) for v in pair) for pair in ranges)
                if ranges
                else None
            ),
            time_horizon=config.get("time_horizon"),
        )
        counts = tuple(_int_list(config["counts"], "--counts"))
        test_count = 112
    else:
        raise InvalidCounts("generate needs --preset or --equation")
    if config.get("test_count") is not None:
        test_count = int(config["test_count"])
    seed = int(config["seed"])
    data = pdegen.generate_dataset(
        spec, counts, numerics.RngStream(seed), test_count=test_count
    )
    out = Path(config["out"])
    pdegen.save_dataset(out, data, spec, seed)
    print(
        f"wrote {out}: {spec.equation}, levels {tuple(data.counts)}, "
        f"test {test_count}, output dim {data.output_dim}"
    )
    return 0


def _trace_lines(trace) -> str:
    rows = [
        {"step": r.step, "elbo": r.elbo, "train_rmse": list(r.train_rmse),
         "seconds": r.seconds}
        for r in trace
    ]
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)


def cmd_train(config) -> int:
    data, _ = _load_dataset(config)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    mode = str(config.get("baseline") or "off").lower()
    started = time.perf_counter()
    if mode == "off":
        epochs = _MODEL_EPOCHS if config["epochs"] is None else int(config["epochs"])
        config["epochs"] = epochs
        state = init_model(
            data, int(config["bases"]), int(config["factors"]), int(config["seed"])
        )
        train_cfg = TrainConfig(
            epochs=epochs,
            learning_rate=float(config["learning_rate"]),
            mc_samples_per_step=int(config["mc_samples"]),
            seed=int(config["seed"]),
            gradient_clip=config["gradient_clip"],
            log_every=int(config["log_every"]),
            analytic_kl_level1=bool(config["analytic_kl_level1"]),
        )
        state, trace = svi.fit(state, data, train_cfg)
        wall = time.perf_counter() - started
        checkpoint.save_model(out / "model.mfhg", state)
        (out / "trace.jsonl").write_text(_trace_lines(trace))
        summary = {
            "elbo": trace[-1].elbo if trace else None,
            "train_rmse": list(svi.train_rmse(state, data)),
            "epochs": epochs,
            "wall_time_seconds": wall,
        }
    else:
        iters = _BASELINE_ITERS if config["epochs"] is None else int(config["epochs"])
        config["epochs"] = iters
        x, y = baseline.training_slice(data, mode)
        model = baseline.fit_pca_gp(
            x,
            y,
            int(config["bases"]),
            noise_variance=config["noise_variance"],
            restarts=int(config["restarts"]),
            iters=iters,
            learning_rate=float(config["learning_rate"]),
            seed=int(config["seed"]),
        )
        wall = time.perf_counter() - started
        checkpoint.save_baseline(out / "model.mfhg", model)
        summary = {
            "log_marginal_likelihoods": [
                gp.log_marginal_likelihood for gp in model.gps
            ],
            "epochs": iters,
            "wall_time_seconds": wall,
        }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, config)
    print(f"wrote {out / 'model.mfhg'} in {wall:.1f} s")
    return 0


def _chunk_rows(s_samples: int, output_dim: int) -> int:
    return max(1, _CHUNK_BUDGET // max(1, s_samples * output_dim))


def _evaluate_model(state, data, x_test, y_test, s_samples, seed) -> dict:
    """Chunked test-set evaluation of a multi-fidelity checkpoint."""
    root = numerics.RngStream(seed)
    chunk = _chunk_rows(s_samples, state.config.output_dim)
    means, variances, logliks = [], [], []
    sq_err = sq_truth = 0.0
    for index, start in enumerate(range(0, x_test.shape[0], chunk)):
        rows = slice(start, start + chunk)
        ensembles = predict.predict_many(
            state, data, x_test[rows], s_samples, root.child(index)
        )
        for ensemble, truth in zip(ensembles, y_test[rows]):
            means.append(ensemble.empirical_mean)
            variances.append(ensemble.empirical_var)
            logliks.append(predict.test_log_likelihood(ensemble, truth))
            sq_err += float(np.sum((ensemble.empirical_mean - truth) ** 2))
            sq_truth += float(np.sum(truth**2))
    rmse = np.sqrt(sq_err / y_test.size)
    return {
        "mean": np.vstack(means),
        "var": np.vstack(variances),
        "rmse": float(rmse),
        "n_rmse": float(rmse / np.sqrt(sq_truth / y_test.size)),
        "loglik": float(np.mean(logliks)),
    }


def _evaluate_baseline(model, x_test, y_test) -> dict:
    mean, var = baseline.predict_pca_gp(model, x_test)
    logliks = [
        baseline.gaussian_log_likelihood(m, v, t)
        for m, v, t in zip(mean, var, y_test)
    ]
    rmse = float(np.sqrt(np.mean((mean - y_test) ** 2)))
    return {
        "mean": mean,
        "var": var,
        "rmse": rmse,
        "n_rmse": float(rmse / np.sqrt(np.mean(y_test**2))),
        "loglik": float(np.mean(logliks)),
    }


def cmd_predict(config) -> int:
    data, _ = _load_dataset(config)
    _require_test_split(data)
    if not config.get("model"):
        raise IoFailure("--model is required")
    kind, _, _ = checkpoint.load_blob(config["model"])
    if kind == checkpoint.MODEL_KIND:
        state = checkpoint.load_model(config["model"])
        result = _evaluate_model(
            state, data, data.x_test, data.y_test,
            int(config["samples"]), int(config["seed"]),
        )
    else:
        model = checkpoint.load_baseline(config["model"])
        result = _evaluate_baseline(model, data.x_test, data.y_test)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "mean.f64").write_bytes(result["mean"].astype("<f8").tobytes())
    (out / "var.f64").write_bytes(result["var"].astype("<f8").tobytes())
    summary = {
        "rmse": result["rmse"],
        "n_rmse": result["n_rmse"],
        "loglik": result["loglik"],
        "test_count": int(data.x_test.shape[0]),
        "output_dim": int(data.y_test.shape[1]),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, config)
    print(
        f"rmse {result['rmse']:.6g}  n_rmse {result['n_rmse']:.6g}  "
        f"loglik {result['loglik']:.6g}"
    )
    return 0


def _run_cell(dataset_dir, method, k, seed, options) -> dict:
    """One benchmark row: train `method` with `k` bases at `seed`, score it."""
    data, _ = pdegen.load_dataset(dataset_dir)
    _require_test_split(data)
    started = time.perf_counter()
    if method == "mfhogp":
        state = init_model(data, k, int(options["factors"]), seed)
        epochs = options["epochs"]
        train_cfg = TrainConfig(
            epochs=_MODEL_EPOCHS if epochs is None else int(epochs),
            learning_rate=float(options["learning_rate"]),
            mc_samples_per_step=int(options["mc_samples"]),
            seed=seed,
            analytic_kl_level1=bool(options["analytic_kl_level1"]),
            log_every=10**9,
        )
        state, _ = svi.fit(state, data, train_cfg)
        result = _evaluate_model(
            state, data, data.x_test, data.y_test, int(options["samples"]), seed
        )
    else:
        x, y = baseline.training_slice(data, _BASELINE_MODES[method])
        epochs = options["epochs"]
        model = baseline.fit_pca_gp(
            x,
            y,
            k,
            noise_variance=options["noise_variance"],
            restarts=int(options["restarts"]),
            iters=_BASELINE_ITERS if epochs is None else int(epochs),
            learning_rate=0.05,
            seed=seed,
        )
        result = _evaluate_baseline(model, data.x_test, data.y_test)
    return {
        "method": method,
        "K": k,
        "seed": seed,
        "rmse": result["rmse"],
        "n_rmse": result["n_rmse"],
        "loglik": result["loglik"],
        "seconds": time.perf_counter() - started,
    }


def _worker(task):
    return _run_cell(*task)


def _format_row(row) -> list:
    return [
        row["method"],
        str(row["K"]),
        str(row["seed"]),
        repr(float(row["rmse"])),
        repr(float(row["n_rmse"])),
        repr(float(row["loglik"])),
        repr(float(row["seconds"])),
    ]


def _summary_table(rows) -> str:
    cells = {}
    for row in rows:
        cells.setdefault((row["method"], row["K"]), []).append(row)
    lines = [
        f"{'method':<12} {'K':>4} {'rmse (mean±std)':>22} "
        f"{'loglik (mean±std)':>24} {'runs':>5}"
    ]
    for (method, k) in sorted(cells, key=lambda c: (METHODS.index(c[0]), c[1])):
        group = cells[(method, k)]
        rmse = np.array([r["rmse"] for r in group])
        loglik = np.array([r["loglik"] for r in group])
        lines.append(
            f"{method:<12} {k:>4} "
            f"{rmse.mean():>12.5g} ±{rmse.std():>8.3g} "
            f"{loglik.mean():>13.6g} ±{loglik.std():>8.3g} {len(group):>5}"
        )
    return "\n".join(lines)


def cmd_benchmark(config) -> int:
    dataset_dir = config.get("dataset")
    data, _ = _load_dataset(config)
    _require_test_split(data)
    bases = _int_list(config["bases"], "--bases")
    raw_methods = config["methods"]
    if isinstance(raw_methods, str):
        raw_methods = [p for p in raw_methods.split(",") if p.strip()]
    methods = []
    for name in raw_methods:
        canon = _METHOD_BY_LOWER.get(str(name).strip().lower())
        if canon is None:
            raise InvalidCounts(
                f"unknown method {name!r}; choose from {', '.join(METHODS)}"
            )
        methods.append(canon)
    config["methods"] = methods
    config["bases"] = bases
    repeats = int(config["repeats"])
    base_seed = int(config["seed"])
    options = {
        key: config[key]
        for key in (
            "factors", "epochs", "learning_rate", "samples", "mc_samples",
            "analytic_kl_level1", "noise_variance", "restarts",
        )
    }
    tasks = [
        (dataset_dir, method, k, base_seed + rep, options)
        for method in methods
        for k in bases
        for rep in range(repeats)
    ]
    workers = int(os.environ.get("MFHOGP_THREADS", os.cpu_count() or 1))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_worker, tasks))
    else:
        rows = [_run_cell(*task) for task in tasks]
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(_format_row(row))
    (out / "results.csv").write_text(buffer.getvalue())
    table = _summary_table(rows)
    (out / "table.txt").write_text(table + "\n")
    config["test_outputs_sha256"] = hashlib.sha256(
        data.y_test.astype("<f8").tobytes()
    ).hexdigest()
    _write_manifest(out, config)
    print(table)
    return 0


def _synthetic_check_instance(seed):
    """Tiny two-level dataset for the default gradient audit."""
    rng = numerics.RngStream(seed)
    x1 = rng.child(0).uniform(0.0, 1.0, size=(6, 2))
    pmap = rng.child(1).choice_without_replacement(6, 3)
    ys = [rng.child(2).standard_normal(6, 4), rng.child(3).standard_normal(3, 4)]
    return MultiFidelityDataset([x1, x1[pmap]], ys, [None, pmap])


def cmd_check_gradients(config) -> int:
    if config.get("dataset"):
        data, _ = pdegen.load_dataset(config["dataset"])
    else:
        data = _synthetic_check_instance(int(config["seed"]))
    state = init_model(
        data, int(config["bases"]), int(config["factors"]), int(config["seed"])
    )
    report = svi.check_gradients(
        state,
        data,
        seed=int(config["seed"]),
        step_size=float(config["step_size"]),
        rel_tol=float(config["tolerance"]),
        max_parameters=int(config["max_parameters"]),
    )
    print(report.format_table())
    worst = max((e.rel_error for e in report.entries), default=0.0)
    print(
        f"{report.num_parameters} parameters, worst relative error {worst:.3e}"
    )
    if config.get("out"):
        out = Path(config["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradient_check.json").write_text(
            json.dumps(
                {"passed": report.passed, "entries": [asdict(e) for e in report.entries]},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        _write_manifest(out, config)
    if not report.passed:
        raise ConvergenceFailure(
            f"gradient check failed: worst relative error {worst:.3e} "
            f"exceeds {config['tolerance']}"
        )
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "check-gradients": cmd_check_gradients,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = _resolve(args)
        if "out" in vars(args) and args.out:
            config["out"] = args.out
        return _COMMANDS[args.command](config)
    except MfhogpError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
