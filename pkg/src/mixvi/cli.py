"""Experiment runner.

Subcommands (CSV columns noted per command in its --help):

    twod     2-D target fits: mixture | ensemble | iwvi | iaf
    train    one cookbook model on an IDX image archive
    eval     NLL / bits-per-dim / diversity for a finished train run
    sweep-s  train+eval across component counts and seeds
    probe    latent-representation probing and clustering comparison
    dmpmc    population Monte Carlo with mixture weighting

Every run writes its fully resolved configuration (including the seed)
next to its outputs; re-running with the same config and seed reproduces
every reported number bit-exactly (wall-clock fields aside). Exit codes:
0 ok, 2 usage/config, 3 data/format, 4 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import adaptation as adapt
from . import metrics as met
from . import objectives as obj
from .data import desk_mnist_splits
from .densities import BimodalTarget, RingTarget
from .errors import (CheckpointError, ConfigError, ContractError, FormatError,
                     NumericalError, UsageError)
from .models import ModelConfig, build_model, count_parameters, load_checkpoint, save_checkpoint

# ------------------------------------------------------------------ config


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


_MODEL_SCHEMA = {
    "model": (str, "vanilla"),
    "s": (int, 1),
    "d_z": (int, 40),
    "d_z2": (int, 40),
    "hidden": (_ints, (300, 300)),
    "t": (int, 0),
    "k": (int, 0),
    "made_hidden": (_ints, (64, 64)),
    "prior_hidden": (_ints, (64,)),
}

_TRAIN_SCHEMA = {
    **_MODEL_SCHEMA,
    "epochs": (int, 40),
    "batch_size": (int, 100),
    "lr": (float, 3e-4),
    "warmup_epochs": (int, 100),
    "patience": (int, 20),
    "eval_l": (int, 1),
    "n_train": (int, 10000),
    "n_val": (int, 1000),
    "n_test": (int, 1000),
}

_EVAL_SCHEMA = {
    "run": (str, ""),
    "l": (int, 100),
    "mode": (str, "mixture"),
    "l_cap": (int, 5000),
    "jsd_points": (int, 500),
    "jsd_samples": (int, 64),
}

_SWEEP_SCHEMA = {
    **_TRAIN_SCHEMA,
    "s_list": (_ints, (1, 2, 3, 4)),
    "seeds": (_ints, (0, 1, 2)),
    "l": (int, 100),
    "l_cap": (int, 5000),
}

_TWOD_SCHEMA = {
    "mode": (str, "mixture"),
    "target": (str, "bimodal"),
    "s": (int, 30),
    "l": (int, 1),
    "steps": (int, 2000),
    "lr": (float, 0.1),
    "mc_draws": (int, 32),
    "sigma_init": (float, 1.0),
    "t": (int, 8),
    "made_hidden": (_ints, (10, 10)),
    "trace_every": (int, 50),
    "cloud_points": (int, 3000),
}

_PROBE_SCHEMA = {
    "mixture_run": (str, ""),
    "vanilla_run": (str, ""),
    "n_probe_train": (int, 2000),
    "kmeans_k": (int, 10),
    "probe_l2": (float, 1e-4),
    "probe_tol": (float, 1e-6),
    "probe_iters": (int, 5000),
    "jsd_points": (int, 500),
    "jsd_samples": (int, 64),
}

_DMPMC_SCHEMA = {
    "target": (str, "bimodal"),
    "s": (int, 50),
    "k": (int, 20),
    "iterations": (int, 200),
    "scale": (float, 0.3),
    "box": (float, 4.0),
    "variance_reps": (int, 50),
}


def _read_config_file(path):
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_config(schema, args):
    raw = {}
    if args.config:
        raw.update(_read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key] = value
    resolved = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} (known: {sorted(schema)})")
        conv = schema[key][0]
        try:
            resolved[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    for key, (_, default) in schema.items():
        resolved.setdefault(key, default)
    resolved["seed"] = args.seed
    if args.data is not None:
        resolved["data"] = args.data
    return resolved


def _config_text(resolved):
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in sorted(resolved.items()))


def _write_run(outdir, resolved, results, t0):
    os.makedirs(outdir, exist_ok=True)
    text = _config_text(resolved)
    with open(os.path.join(outdir, "resolved_config.txt"), "w") as fh:
        fh.write(text)
    report = {
        "version": __version__,
        "config_hash": hashlib.sha256(text.encode()).hexdigest()[:16],
        "seed": resolved["seed"],
        "results": results,
        "wall_seconds": time.perf_counter() - t0,
    }
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.12g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _target_from_name(name):
    if name == "bimodal":
        return BimodalTarget()
    if name == "ring":
        return RingTarget()
    raise UsageError(f"target must be bimodal|ring, got {name!r}")


def _model_config_from(resolved, d_x):
    return ModelConfig(resolved["model"], d_x=d_x, S=resolved["s"],
                       d_z=resolved["d_z"], d_z2=resolved["d_z2"],
                       hidden=resolved["hidden"], T=resolved["t"], K=resolved["k"],
                       made_hidden=resolved["made_hidden"],
                       prior_hidden=resolved["prior_hidden"])


def _load_splits(resolved):
    data_dir = resolved.get("data")
    if not data_dir:
        raise UsageError("this subcommand needs --data DIR with IDX archives")
    return desk_mnist_splits(data_dir, resolved["n_train"], resolved["n_val"],
                             resolved["n_test"])


# ------------------------------------------------------------- subcommands


def cmd_twod(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_TWOD_SCHEMA, args)
    if resolved["mode"] not in adapt.VI2D_MODES:
        raise UsageError(f"mode must be one of {adapt.VI2D_MODES}")
    target = _target_from_name(resolved["target"])
    rng = np.random.default_rng(resolved["seed"])
    cfg = adapt.Vi2DConfig(mode=resolved["mode"], S=resolved["s"], L=resolved["l"],
                           steps=resolved["steps"], lr=resolved["lr"],
                           mc_draws=resolved["mc_draws"], sigma_init=resolved["sigma_init"],
                           T=resolved["t"], made_hidden=resolved["made_hidden"],
                           trace_every=resolved["trace_every"])
    fit = adapt.fit_2d(cfg, target, rng)
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)

    _write_csv(os.path.join(outdir, "trace.csv"), ["step", "component", "mean_x", "mean_y"],
               [(step, s, m[s, 0], m[s, 1]) for step, m in fit.trace for s in range(len(m))])

    n_cloud = resolved["cloud_points"]
    rows = []
    if fit.mode == "iaf":
        pts = fit.approx.sample(rng, n_cloud)
        rows = [(float(p[0]), float(p[1]), 0) for p in pts]
    else:
        per = max(1, n_cloud // len(fit.means))
        for s, (m, lv) in enumerate(zip(fit.means, fit.log_vars)):
            pts = m + np.exp(0.5 * lv) * rng.standard_normal((per, 2))
            rows += [(float(p[0]), float(p[1]), s) for p in pts]
    _write_csv(os.path.join(outdir, "cloud.csv"), ["x", "y", "component"], rows)

    # target visualization: uniform square, keep density > 0.1
    grid = rng.uniform(-4, 4, size=(20000, 2))
    dens = np.exp(target.log_prob(grid).data)
    keep = grid[dens > 0.1]
    _write_csv(os.path.join(outdir, "target_cloud.csv"), ["x", "y"],
               [(float(p[0]), float(p[1])) for p in keep])

    results = {"mode": fit.mode, "final_loss": fit.losses[-1] if fit.losses else None}
    if resolved["target"] == "bimodal" and fit.mode in ("mixture", "ensemble"):
        split = adapt.mode_mass_split(fit.means, target.modes)
        _write_csv(os.path.join(outdir, "mass_split.csv"), ["mode_x", "mode_y", "fraction"],
                   [(float(mx), float(my), float(f))
                    for (mx, my), f in zip(target.modes, split)])
        results["heavy_mode_fraction"] = float(split[0])
        results["light_mode_fraction"] = float(split[1])
    report = _write_run(outdir, resolved, results, t0)
    print(json.dumps(report["results"], indent=2, sort_keys=True))
    return 0


def cmd_train(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_TRAIN_SCHEMA, args)
    train, val, _ = _load_splits(resolved)
    model = build_model(_model_config_from(resolved, train.d_x),
                        np.random.default_rng([resolved["seed"], 17]))
    cfg = adapt.TrainConfig(epochs=resolved["epochs"], batch_size=resolved["batch_size"],
                            lr=resolved["lr"], warmup_epochs=resolved["warmup_epochs"],
                            patience=resolved["patience"], seed=resolved["seed"],
                            eval_l=resolved["eval_l"])
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    report = adapt.train_vae(model, train.images, val.images, cfg,
                             csv_path=os.path.join(outdir, "epochs.csv"))
    save_checkpoint(os.path.join(outdir, "checkpoint.mixvi"), model)
    counts = count_parameters(model)
    results = {
        "epochs_run": len(report.records),
        "best_epoch": report.best_epoch,
        "best_val_miselbo": report.best_val,
        "stopped_early": report.stopped_early,
        "encoder_params": counts["encoder_params"],
        "total_params": counts["total_params"],
    }
    out = _write_run(outdir, resolved, results, t0)
    print(json.dumps(out["results"], indent=2, sort_keys=True))
    return 0


def _rebuild_run(run_dir, data_dir):
    cfg_path = os.path.join(run_dir, "resolved_config.txt")
    if not os.path.exists(cfg_path):
        raise UsageError(f"{run_dir} has no resolved_config.txt (not a train run?)")
    raw = _read_config_file(cfg_path)
    resolved = {}
    for key, (conv, default) in _TRAIN_SCHEMA.items():
        resolved[key] = conv(raw[key]) if key in raw else default
    resolved["seed"] = int(raw.get("seed", 0))
    resolved["data"] = data_dir or raw.get("data")
    splits = _load_splits(resolved)
    model = build_model(_model_config_from(resolved, splits[0].d_x),
                        np.random.default_rng([resolved["seed"], 17]))
    ckpt = os.path.join(run_dir, "checkpoint.mixvi")
    if not os.path.exists(ckpt):
        raise UsageError(f"missing checkpoint {ckpt}")
    load_checkpoint(ckpt, model)
    return model, resolved, splits


def cmd_eval(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_EVAL_SCHEMA, args)
    if not resolved["run"]:
        raise UsageError("eval needs --set run=TRAIN_RUN_DIR")
    model, train_cfg, (train, val, test) = _rebuild_run(resolved["run"], resolved.get("data"))
    rng = np.random.default_rng([resolved["seed"], 29])
    from .data import binarize_dynamic

    x_test = binarize_dynamic(test.images, np.random.default_rng([resolved["seed"], 31]))
    mode = resolved["mode"]
    s_arg = model.S if mode == "mixture" else train_cfg["s"]
    nll = obj.estimate_nll(x_test, model, s_arg, resolved["l"], mode, rng,
                           l_cap=resolved["l_cap"])
    results = {
        "nll_nats": nll,
        "bits_per_dim": obj.bits_per_dim(nll, test.d_x),
        "l": resolved["l"],
        "mode": mode,
        "n_test": test.n,
    }
    jsd, jsd_se = met.jsd_over_dataset(model, test.images, rng,
                                       n_points=resolved["jsd_points"],
                                       n_samples=resolved["jsd_samples"])
    results["jsd"] = jsd
    results["jsd_se"] = jsd_se
    results["jsd_upper_bound"] = float(np.log(max(model.S, 1)))
    outdir = args.out
    report = _write_run(outdir, resolved, results, t0)
    print(json.dumps(report["results"], indent=2, sort_keys=True))
    return 0


def cmd_sweep_s(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_SWEEP_SCHEMA, args)
    train, val, test = _load_splits(resolved)
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    from .data import binarize_dynamic

    rows = []
    for S in resolved["s_list"]:
        for seed in resolved["seeds"]:
            sub = dict(resolved)
            sub["s"] = S
            model = build_model(_model_config_from(sub, train.d_x),
                                np.random.default_rng([seed, 17]))
            cfg = adapt.TrainConfig(epochs=resolved["epochs"],
                                    batch_size=resolved["batch_size"], lr=resolved["lr"],
                                    warmup_epochs=resolved["warmup_epochs"],
                                    patience=resolved["patience"], seed=seed,
                                    eval_l=resolved["eval_l"])
            run_dir = os.path.join(outdir, f"S{S}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            adapt.train_vae(model, train.images, val.images, cfg,
                            csv_path=os.path.join(run_dir, "epochs.csv"))
            save_checkpoint(os.path.join(run_dir, "checkpoint.mixvi"), model)
            with open(os.path.join(run_dir, "resolved_config.txt"), "w") as fh:
                fh.write(_config_text({**sub, "seed": seed}))
            x_test = binarize_dynamic(test.images, np.random.default_rng([seed, 31]))
            nll = obj.estimate_nll(x_test, model, S, resolved["l"], "mixture",
                                   np.random.default_rng([seed, 29]),
                                   l_cap=resolved["l_cap"])
            rows.append((resolved["model"], S, seed, nll, obj.bits_per_dim(nll, test.d_x)))

    _write_csv(os.path.join(outdir, "sweep.csv"), ["model", "S", "seed", "nll", "bpd"], rows)
    medians = {}
    for S in resolved["s_list"]:
        vals = [r[3] for r in rows if r[1] == S]
        medians[str(S)] = float(np.median(vals))
    s_sorted = sorted(resolved["s_list"])
    deltas = {f"{a}->{b}": medians[str(b)] - medians[str(a)]
              for a, b in zip(s_sorted[:-1], s_sorted[1:])}
    results = {"median_nll": medians, "adjacent_deltas": deltas}
    report = _write_run(outdir, resolved, results, t0)
    print(json.dumps(report["results"], indent=2, sort_keys=True))
    return 0


def cmd_probe(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_PROBE_SCHEMA, args)
    if not resolved["mixture_run"] or not resolved["vanilla_run"]:
        raise UsageError("probe needs --set mixture_run=DIR and --set vanilla_run=DIR")
    mix_model, mix_cfg, (train, val, test) = _rebuild_run(resolved["mixture_run"],
                                                          resolved.get("data"))
    van_model, van_cfg, _ = _rebuild_run(resolved["vanilla_run"], resolved.get("data"))
    if train.labels is None or test.labels is None:
        raise FormatError("probing needs labeled data")
    rng = np.random.default_rng([resolved["seed"], 41])
    n_tr = min(resolved["n_probe_train"], train.n)
    Xtr_img, ytr = train.images[:n_tr], train.labels[:n_tr]
    Xte_img, yte = test.images, test.labels

    mix_train = met.mixture_parameter_features(mix_model, Xtr_img)
    mix_test = met.mixture_parameter_features(mix_model, Xte_img)
    n_draws = 2 * mix_model.S
    base_train = met.baseline_features_by_sampling(van_model, Xtr_img, n_draws, rng,
                                                   expected_len=mix_train.shape[1])
    base_test = met.baseline_features_by_sampling(van_model, Xte_img, n_draws, rng,
                                                  expected_len=mix_test.shape[1])

    def probe(a, b):
        res = met.linear_probe(a, ytr, b, yte, l2=resolved["probe_l2"],
                               tol=resolved["probe_tol"], max_iter=resolved["probe_iters"])
        return res.accuracy

    acc_mix = probe(mix_train, mix_test)
    acc_van = probe(base_train, base_test)
    km = met.kmeans(mix_test, resolved["kmeans_k"], rng)
    results = {
        "probe_accuracy_mixture": acc_mix,
        "probe_accuracy_vanilla_baseline": acc_van,
        "kmeans_ari": met.ari(km.labels, yte),
        "kmeans_nmi": met.nmi(km.labels, yte),
        "feature_length": int(mix_train.shape[1]),
        "mixture_S": mix_model.S,
    }
    jsd, jsd_se = met.jsd_over_dataset(mix_model, test.images, rng,
                                       n_points=resolved["jsd_points"],
                                       n_samples=resolved["jsd_samples"])
    results["jsd_mixture"] = jsd
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    _write_csv(os.path.join(outdir, "probe.csv"),
               ["representation", "accuracy"],
               [("mixture_params", acc_mix), ("vanilla_sampling", acc_van)])
    report = _write_run(outdir, resolved, results, t0)
    print(json.dumps(report["results"], indent=2, sort_keys=True))
    return 0


def cmd_dmpmc(args):
    t0 = time.perf_counter()
    resolved = resolve_config(_DMPMC_SCHEMA, args)
    target = _target_from_name(resolved["target"])
    rng = np.random.default_rng(resolved["seed"])
    ps = adapt.init_particles(resolved["s"], resolved["k"], rng,
                              box=resolved["box"], scale=resolved["scale"])
    result = adapt.dmpmc_iterate(ps, target, resolved["iterations"], rng)
    dm_vars, naive_vars = adapt.weight_variance_comparison(
        target, resolved["s"], resolved["k"], resolved["variance_reps"], rng,
        box=resolved["box"], scale=resolved["scale"])
    diff = naive_vars - dm_vars
    results = {
        "mean_estimate": [float(v) for v in result.mean_estimate],
        "mean_se": [float(v) for v in result.mean_se],
        "z_estimate": result.z_estimate,
        "z_se": result.z_se,
        "final_ess": result.ess_trace[-1],
        "dm_weight_variance_mean": float(dm_vars.mean()),
        "naive_weight_variance_mean": float(naive_vars.mean()),
        "variance_gap_sigmas": float(diff.mean() / (diff.std(ddof=1) / np.sqrt(len(diff))))
        if len(diff) > 1 else None,
    }
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    _write_csv(os.path.join(outdir, "particles.csv"),
               ["iteration", "proposal", "x", "y"],
               [(it, i, float(loc[i, 0]), float(loc[i, 1]))
                for it, loc in enumerate(result.location_trace)
                for i in range(len(loc))])
    report = _write_run(outdir, resolved, results, t0)
    print(json.dumps(report["results"], indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ driver

_CSV_DOC = {
    "twod": "trace.csv: step,component,mean_x,mean_y | cloud.csv: x,y,component | "
            "target_cloud.csv: x,y (density>0.1) | mass_split.csv: mode_x,mode_y,fraction",
    "train": "epochs.csv: epoch,beta,train_objective,val_miselbo,wall_seconds",
    "eval": "report.json only",
    "sweep-s": "sweep.csv: model,S,seed,nll,bpd (+ per-run epochs.csv)",
    "probe": "probe.csv: representation,accuracy",
    "dmpmc": "particles.csv: iteration,proposal,x,y",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mixvi", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    handlers = {
        "twod": cmd_twod,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep-s": cmd_sweep_s,
        "probe": cmd_probe,
        "dmpmc": cmd_dmpmc,
    }
    for name, fn in handlers.items():
        p = sub.add_parser(name, help=_CSV_DOC[name],
                           description=f"Outputs: {_CSV_DOC[name]}")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--data", default=None, help="directory with IDX archives")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
