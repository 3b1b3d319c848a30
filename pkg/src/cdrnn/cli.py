"""Command-line interface.

Usage::

    cdrnn synth --config run.ini
    cdrnn fit --config run.ini
    cdrnn eval --config run.ini --model out/model.npz --partition test
    cdrnn irf --config run.ini --model out/model.npz --kind curve [--svg]
    cdrnn ensemble-fit --config run.ini [-E 10]
    cdrnn test --config run.ini --a out/ensA --b out/ensB

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical or
training error.
"""
import argparse
import configparser
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._perf import tune_allocator
from .exceptions import CDRNNError, ConfigError, DataError
from .model import (Hyperparameters, IrfBlockSpec, ModelSpec, RandomFactor, Standardization,
                    assemble_inputs, validate_spec)
from .query import (interaction_surface, irf_curve, irf_surface, nonstationarity_slice,
                    reference_config)
from .stats import ensemble_fit, eval_loglik, LikelihoodMatrix, permutation_test, split_data
from .storage import (load_checkpoint, read_events, read_json, read_responses, save_checkpoint,
                      write_events, write_json, write_responses, write_table)
from .synth import FAMILIES, KernelSpec, SynthConfig, generate
from .trainer import TrainConfig, fit

logger = logging.getLogger("cdrnn")
_REQUIRED = object()

QUERY_KINDS = ("curve", "surface", "interaction", "nonstationarity")


class RunConfig:
    """Parsed INI configuration with typed accessors.

    Relative paths resolve against the directory holding the config file.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise ConfigError(f"{self.path}: config file not found")
        self.raw = self.path.read_bytes()
        self.cp = configparser.ConfigParser(interpolation=None)
        try:
            self.cp.read_string(self.raw.decode("utf-8"), source=str(self.path))
        except (configparser.Error, UnicodeDecodeError) as e:
            raise ConfigError(f"{self.path}: {e}") from None
        self.base = self.path.parent
        self.output_override = None

    @property
    def sha256(self):
        return hashlib.sha256(self.raw).hexdigest()

    def get(self, section, key, default=None, kind=str):
        if not self.cp.has_option(section, key):
            if default is _REQUIRED:
                raise ConfigError(f"{self.path}: [{section}] {key} is required")
            return default
        text = self.cp.get(section, key).strip()
        try:
            if kind is bool:
                return self.cp.getboolean(section, key)
            if kind is list:
                return [v.strip() for v in text.split(",") if v.strip()]
            if kind == "floats":
                return [float(v) for v in text.split(",") if v.strip()]
            if kind == "optional_float":
                return None if text.lower() in ("", "none") else float(text)
            return kind(text)
        except ValueError:
            raise ConfigError(f"{self.path}: [{section}] {key} = {text!r} is not a valid "
                              f"{getattr(kind, '__name__', kind)}") from None

    def path_of(self, section, key, required=True):
        value = self.get(section, key, _REQUIRED if required else None)
        return None if value is None else (self.base / value)

    @property
    def output(self):
        if self.output_override:
            return Path(self.output_override)
        return self.path_of("data", "output", required=False) or (self.base / "output")


def _hyper(cfg):
    d = Hyperparameters()
    return Hyperparameters(
        n_layers=cfg.get("model", "n_layers", d.n_layers, int),
        n_units=cfg.get("model", "n_units", d.n_units, int),
        weight_l2=cfg.get("model", "weight_l2", d.weight_l2, float),
        ranef_l2=cfg.get("model", "ranef_l2", d.ranef_l2, float),
        dropout=cfg.get("model", "dropout", d.dropout, float),
        learning_rate=cfg.get("model", "learning_rate", d.learning_rate, float),
        batch_size=cfg.get("model", "batch_size", d.batch_size, int),
        inference=cfg.get("model", "inference", d.inference),
    )


def _blocks(cfg):
    blocks = []
    for section in cfg.cp.sections():
        if not section.startswith("block"):
            continue
        tuple_or_none = lambda key: (tuple(cfg.get(section, key, kind=list))
                                     if cfg.cp.has_option(section, key) else None)
        blocks.append(IrfBlockSpec(
            convolved=tuple_or_none("convolved"),
            conditioning=tuple_or_none("conditioning"),
            include_offset=cfg.get(section, "include_offset", True, bool),
            include_timestamp=cfg.get(section, "include_timestamp", True, bool),
            targets=tuple(cfg.get(section, "targets", ["mu", "sigma"], list)),
            dirac_delta=cfg.get(section, "dirac_delta", False, bool),
        ))
    return tuple(blocks) or (IrfBlockSpec(),)


def build_spec(cfg, events, responses):
    """Model spec from ``[model]`` and ``[block*]`` sections; violations raise ConfigError verbatim."""
    f_in = cfg.get("model", "f_in", "identity")
    if f_in != "identity":
        try:
            f_in = tuple(int(v) for v in f_in.split(","))
        except ValueError:
            raise ConfigError(f"{cfg.path}: [model] f_in must be 'identity' or layer widths") from None
    factors = []
    for name in cfg.get("model", "random_factors", [], list):
        if name not in responses.factors:
            raise DataError(f"random factor {name!r} is not a column of the responses file")
        factors.append(RandomFactor(name, tuple(np.unique(responses.factors[name]))))
    spec = ModelSpec(
        predictor_names=tuple(events.predictor_names),
        irf_blocks=_blocks(cfg),
        f_in=f_in,
        history_length=cfg.get("model", "history_length", 32, int),
        max_lookback=cfg.get("model", "max_lookback", None, "optional_float"),
        random_factors=tuple(factors),
        hyper=_hyper(cfg),
    )
    problems = validate_spec(spec)
    if problems:
        raise ConfigError("invalid model specification:\n" + "\n".join(f"  - {p}" for p in problems))
    return spec


def train_config(cfg):
    d = TrainConfig()
    return TrainConfig(
        max_epochs=cfg.get("train", "max_epochs", d.max_epochs, int),
        min_epochs=cfg.get("train", "min_epochs", d.min_epochs, int),
        checkpoint_every=cfg.get("train", "checkpoint_every", d.checkpoint_every, int),
        convergence_window=cfg.get("train", "convergence_window", d.convergence_window, int),
        convergence_alpha=cfg.get("train", "convergence_alpha", d.convergence_alpha, float),
        diagnostic=cfg.get("train", "diagnostic", d.diagnostic),
        diagnostic_every=cfg.get("train", "diagnostic_every", d.diagnostic_every, int),
    )


class Dataset:
    """Events, responses, spec and the seeded partition, all derived from a config."""

    def __init__(self, cfg, spec=None):
        predictors = cfg.get("model", "predictors", None, list)
        self.events = read_events(cfg.path_of("data", "events"), predictors)
        self.responses = read_responses(cfg.path_of("data", "responses"))
        self.spec = spec or build_spec(cfg, self.events, self.responses)
        ratios = cfg.get("data", "split", [0.5, 0.25, 0.25], "floats")
        self.partition_seed = cfg.get("data", "partition_seed", 0, int)
        self.parts = split_data(len(self.responses), ratios, self.partition_seed)
        self._std = None

    def batch(self, partition):
        if partition == "all":
            idx = np.arange(len(self.responses))
        elif partition in self.parts:
            idx = self.parts[partition]
        else:
            raise ConfigError(f"unknown partition {partition!r}")
        return idx, assemble_inputs(self.events, self.responses.subset(idx), self.spec)

    def standardization(self, partition):
        if self._std is None:
            self._std = Standardization.from_data(self.events, self.batch(partition)[1])
        return self._std


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _manifest(cfg, command, started, artifacts, **extra):
    return dict(command=command, config=str(cfg.path), config_sha256=cfg.sha256,
                code_version=__version__, started=started, finished=_now(),
                artifacts={k: str(v) for k, v in artifacts.items()}, **extra)


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_synth(cfg, args):
    started = _now()
    sec = "synth"
    family = cfg.get(sec, "kernel", "exponential")
    if family not in FAMILIES:
        raise ConfigError(f"[synth] kernel must be one of {FAMILIES}")
    K = cfg.get(sec, "n_predictors", 3, int)
    params = {k[len("kernel_"):]: cfg.get(sec, k, kind=float) for k in cfg.cp.options(sec)
              if k.startswith("kernel_")} if cfg.cp.has_section(sec) else {}
    sp = cfg.get(sec, "sigma_predictor", None, str)
    sc = SynthConfig(
        n_predictors=K,
        correlation=cfg.get(sec, "correlation", 0.0, float),
        noise_sd=cfg.get(sec, "noise_sd", 0.1, float),
        timing=cfg.get(sec, "timing", "random"),
        interval=cfg.get(sec, "interval", 0.2, float),
        n_events=cfg.get(sec, "n_events", 10000, int),
        n_responses=cfg.get(sec, "n_responses", None, int),
        kernels=[KernelSpec(family, params, cfg.get(sec, "coefficient", 1.0, float)) for _ in range(K)],
        sigma_predictor=None if sp in (None, "", "none") else int(sp),
        sigma_strength=cfg.get(sec, "sigma_strength", 0.0, float),
        seed=cfg.get(sec, "seed", 0, int),
    )
    events, responses, truth = generate(sc)
    out = cfg.output
    paths = dict(events=out / "events.csv", responses=out / "responses.csv",
                 ground_truth=out / "ground_truth.json")
    write_events(paths["events"], events)
    write_responses(paths["responses"], responses)
    write_json(paths["ground_truth"], truth)
    write_json(out / "synth_manifest.json", _manifest(cfg, "synth", started, paths, seeds=dict(synth=sc.seed)))
    return paths


def cmd_fit(cfg, args):
    started = _now()
    ds = Dataset(cfg)
    part = cfg.get("data", "fit_partition", "train")
    _, train = ds.batch(part)
    std = ds.standardization(part)
    explore = ds.batch("exploratory")[1] if cfg.get("train", "diagnostic", "train") == "explore" else None
    seed = cfg.get("train", "seed", 0, int)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    paths = dict(checkpoint=out / "model.npz", log=out / "train_log.jsonl")
    res = fit(ds.spec, train, std, seed, train_config(cfg), explore=explore, log_path=paths["log"])
    meta = dict(seed=seed, epochs=res.epochs, converged=res.converged, restores=res.restores,
                final_loss=res.final_loss)
    save_checkpoint(paths["checkpoint"], res.model, res.state, meta)
    write_json(out / "manifest.json", _manifest(cfg, "fit", started, paths,
                                                seeds=dict(train=seed, partition=ds.partition_seed),
                                                result=meta))
    logger.info("fit: %d epochs, converged=%s, final loss %.6g", res.epochs, res.converged,
                res.final_loss)
    return paths


def cmd_ensemble_fit(cfg, args):
    started = _now()
    ds = Dataset(cfg)
    part = cfg.get("data", "fit_partition", "train")
    _, train = ds.batch(part)
    std = ds.standardization(part)
    E = args.E if args.E is not None else cfg.get("ensemble", "size", 10, int)
    root = cfg.get("ensemble", "root_seed", 0, int)
    ens = ensemble_fit(ds.spec, train, std, E, root, train_config(cfg),
                       n_jobs=cfg.get("ensemble", "n_jobs", 1, int))
    out = Path(args.out) if args.out else cfg.output / "ensemble"
    paths = {}
    for i, comp in enumerate(ens.components):
        p = out / f"component_{i:02d}.npz"
        save_checkpoint(p, comp.model, comp.state, dict(seed=ens.seeds[i], epochs=comp.epochs,
                                                       converged=comp.converged))
        paths[f"component_{i:02d}"] = p.name
        logp = out / f"component_{i:02d}_log.jsonl"
        with open(logp, "w") as fh:
            fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in comp.log)
    man = _manifest(cfg, "ensemble-fit", started, paths, seeds=dict(root=root, components=ens.seeds,
                                                                      partition=ds.partition_seed),
                    components=[paths[f"component_{i:02d}"] for i in range(E)],
                    ensemble=ens.manifest)
    write_json(out / "manifest.json", man)
    return dict(manifest=out / "manifest.json")


def load_models(path):
    """A checkpoint file, or an ensemble directory (or its manifest) listing components."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if path.suffix == ".json":
        man = read_json(path)
        if "components" not in man:
            raise ConfigError(f"{path}: not an ensemble manifest")
        return [load_checkpoint(path.parent / c) for c in man["components"]], file_sha256(path)
    return [load_checkpoint(path)], file_sha256(path)


def cmd_eval(cfg, args):
    started = _now()
    models, _ = load_models(args.model)
    ds = Dataset(cfg, spec=models[0].spec)
    idx, batch = ds.batch(args.partition)
    out = cfg.output
    rows = []
    ll = np.stack([eval_loglik(m, batch) for m in models], axis=1)
    pp = models[0].predict(batch)
    for j, i in enumerate(idx):
        rows.append([int(i), ds.responses.series[i], repr(float(ds.responses.time[i])),
                     repr(float(ds.responses.y[i])), repr(float(pp.mu[j])), repr(float(pp.sigma[j]))]
                    + [repr(float(v)) for v in ll[j]])
    ll_cols = ["loglik"] if len(models) == 1 else [f"loglik_{e}" for e in range(len(models))]
    paths = dict(loglik=out / f"loglik_{args.partition}.csv", summary=out / f"eval_{args.partition}.json")
    write_table(paths["loglik"], ["item", "series_id", "time", "y", "mu", "sigma"] + ll_cols, rows)
    summary = dict(partition=args.partition, n=int(len(idx)),
                   total_loglik=float(ll.mean(axis=1).sum()),
                   mean_loglik=float(ll.mean()) if ll.size else float("nan"),
                   component_totals=[float(v) for v in ll.sum(axis=0)])
    write_json(paths["summary"], summary)
    write_json(out / f"eval_{args.partition}_manifest.json",
               _manifest(cfg, "eval", started, paths, model=str(args.model),
                         seeds=dict(partition=ds.partition_seed)))
    print(json.dumps(summary, sort_keys=True))
    return paths


def _grid(std, k, n):
    lo, hi = std.predictor_min[k], std.predictor_max[k]
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = std.predictor_mean[k] - 2 * std.predictor_sd[k], std.predictor_mean[k] + 2 * std.predictor_sd[k]
    return np.linspace(lo, hi, n)


def cmd_irf(cfg, args):
    started = _now()
    models, _ = load_models(args.model)
    kind = args.kind or cfg.get("query", "kind", "curve")
    if kind not in QUERY_KINDS:
        raise ConfigError(f"query kind must be one of {QUERY_KINDS}")
    m0 = models[0]
    std = m0.standardization
    names = m0.spec.predictor_names
    pred = args.predictor or cfg.get("query", "predictor", names[0])
    if pred not in names:
        raise ConfigError(f"unknown predictor {pred!r}")
    k = names.index(pred)
    n_samples = cfg.get("query", "n_samples", 0, int) or None
    kw = dict(statistic=cfg.get("query", "statistic", "mu"), n_samples=n_samples,
              rng=cfg.get("query", "seed", 0, int))
    ref = reference_config(m0, horizon=cfg.get("query", "horizon", None, "optional_float"),
                           n_delays=cfg.get("query", "n_delays", 101, int))
    n_values = cfg.get("query", "n_values", 21, int)
    delay = cfg.get("query", "delay", 0.0, float)
    target = models if len(models) > 1 else m0
    if kind == "curve":
        res = irf_curve(target, k, ref=ref, step=cfg.get("query", "step", None, "optional_float"), **kw)
    elif kind == "surface":
        res = irf_surface(target, k, _grid(std, k, n_values), ref=ref, **kw)
    elif kind == "interaction":
        pred2 = cfg.get("query", "predictor2", names[min(1, len(names) - 1)])
        if pred2 not in names:
            raise ConfigError(f"unknown predictor {pred2!r}")
        k2 = names.index(pred2)
        res = interaction_surface(target, k, k2, _grid(std, k, n_values), _grid(std, k2, n_values),
                                  delay=delay, ref=ref, **kw)
    else:
        lo, hi = std.time_min, std.time_max
        times = np.linspace(lo, hi, cfg.get("query", "n_times", 21, int))
        res = nonstationarity_slice(target, k, times, delay=delay, ref=ref, **kw)
    out = cfg.output
    stem = f"irf_{kind}_{pred}"
    paths = dict(csv=out / f"{stem}.csv", json=out / f"{stem}.json")
    rows = res.rows()
    write_table(paths["csv"], list(rows[0]), [[r[c] for c in rows[0]] for r in rows])
    write_json(paths["json"], res.to_dict())
    if args.svg:
        from .plotting import save_svg
        paths["svg"] = out / f"{stem}.svg"
        save_svg(res, paths["svg"], title=f"{kind}: {pred}")
    write_json(out / f"{stem}_manifest.json",
               _manifest(cfg, "irf", started, paths, model=str(args.model), seeds=dict(query=kw["rng"])))
    return paths


def cmd_test(cfg, args):
    started = _now()
    models_a, hash_a = load_models(args.a)
    models_b, hash_b = load_models(args.b)
    ds = Dataset(cfg, spec=models_a[0].spec)
    part = args.partition or cfg.get("test", "partition", "test")
    idx = ds.parts[part] if part != "all" else np.arange(len(ds.responses))
    resp = ds.responses.subset(idx)
    L = []
    for models in (models_a, models_b):
        batch = assemble_inputs(ds.events, resp, models[0].spec)
        L.append(LikelihoodMatrix(np.stack([eval_loglik(m, batch) for m in models], axis=1), idx))
    B = cfg.get("test", "n_iter", 10000, int)
    seed = cfg.get("test", "seed", 0, int)
    res = permutation_test(L[0], L[1], B, seed)
    report = dict(res.to_dict(), partition=part, n_items=int(len(idx)), ensemble_size=L[0].values.shape[1],
                  ensemble_a=str(args.a), ensemble_b=str(args.b),
                  manifest_sha256_a=hash_a, manifest_sha256_b=hash_b, seed=seed)
    out = cfg.output
    paths = dict(report=out / "test_report.json")
    write_json(paths["report"], report)
    write_json(out / "test_manifest.json", _manifest(cfg, "test", started, paths, seeds=dict(test=seed)))
    print(json.dumps(report, sort_keys=True))
    return paths


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "irf": cmd_irf,
    "test": cmd_test,
    "ensemble-fit": cmd_ensemble_fit,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cdrnn", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", "-c", required=True, help="INI run configuration")
        sp.add_argument("--out", help="output directory (default: [data] output)")
        return sp

    add("synth", "generate a synthetic dataset with known kernels")
    add("fit", "fit one model")
    sp = add("eval", "per-item out-of-sample log-likelihood")
    sp.add_argument("--model", required=True, help="checkpoint or ensemble directory")
    sp.add_argument("--partition", default="test", choices=("train", "exploratory", "test", "all"))
    sp = add("irf", "export IRF query results")
    sp.add_argument("--model", required=True, help="checkpoint or ensemble directory")
    sp.add_argument("--kind", choices=QUERY_KINDS)
    sp.add_argument("--predictor")
    sp.add_argument("--svg", action="store_true", help="also render an SVG figure")
    sp = add("test", "ensemble paired permutation test")
    sp.add_argument("--a", required=True, help="ensemble A (directory or manifest)")
    sp.add_argument("--b", required=True, help="ensemble B (directory or manifest)")
    sp.add_argument("--partition", choices=("train", "exploratory", "test", "all"))
    sp = add("ensemble-fit", "fit an ensemble of replicates")
    sp.add_argument("-E", type=int, help="ensemble size (default: [ensemble] size)")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        cfg = RunConfig(args.config)
        cfg.output_override = args.out
        COMMANDS[args.command](cfg, args)
    except CDRNNError as e:
        print(json.dumps(dict(error=type(e).__name__, exit_code=e.exit_code, message=str(e))),
              file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
