"""``agp`` command line: train, eval, generate, sincheck, compare-trainers.

Every command is a function of (config, seed) and rewrites its output
directory with identical bytes on a rerun.  Exit codes: 0 success, 2 config
or schema error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import ConditioningError, DomainError, ShapeError
from .config import ConfigError, ExperimentConfig, dump, load
from .data import DataError, GenerationError, NormalizationRecord, gen_sin, normalize
from .evaluation import (FeatureCache, coverage_2sigma, evaluate, nrmse, predict,
                         write_metrics_csv, write_sequence_csv)
from .model import AttentiveGP, ModelConfig
from .trainer import (RoundError, TrainTrace, baseline_predict, baseline_train, blockwise_train,
                      epochs_to_reach, fullbatch_train, write_trace_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
FINAL_WINDOW = 10   # rounds pooled (median) into a run's final loss


def final_loss(trace: TrainTrace, window: int = FINAL_WINDOW) -> float:
    """Median loss over the last ``window`` rounds; one noisy round cannot decide it."""
    return float(np.median(trace.losses[-window:]))


# -- shared plumbing ---------------------------------------------------------


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def prepare_data(cfg: ExperimentConfig):
    """Build, check against the model config, and normalize on the train split."""
    ds = cfg.dataset.build(cfg.model.L)
    if ds.input_dim != cfg.model.input_dim:
        raise ConfigError(f"dataset has {ds.input_dim} input channels but model.input_dim = "
                          f"{cfg.model.input_dim}", None, "model.input_dim")
    if ds.train.n_seq == 0 or ds.test.n_seq == 0:
        raise ConfigError("dataset yields an empty train or test split; add data or reduce model.L",
                          None, "dataset")
    return normalize(ds)


def _init_model(cfg: ExperimentConfig, model_cfg: ModelConfig | None = None, seed: int | None = None):
    return AttentiveGP.init(model_cfg or cfg.model, seed=cfg.seed if seed is None else seed,
                            lengthscale=cfg.gp.lengthscale, noise=cfg.gp.noise)


def _run_trainer(name: str, model, data, tcfg):
    fn = blockwise_train if name == "blockwise" else fullbatch_train
    return fn(model, data, tcfg)


def _save_checkpoint(path: Path, model: AttentiveGP, record: NormalizationRecord,
                     cfg: ExperimentConfig) -> None:
    arrays = dict(model.state_dict())
    arrays["norm.x_min"] = record.x_min
    arrays["norm.x_max"] = record.x_max
    arrays["norm.y"] = np.array([record.y_min, record.y_max, record.y_mean])
    meta = {"model": asdict(model.cfg), "constant_channels": list(map(int, record.constant_channels)),
            "config": dump(cfg)}
    checkpoint.save(path, arrays, meta)


def _load_checkpoint(path: Path, cfg: ExperimentConfig) -> tuple[AttentiveGP, NormalizationRecord]:
    arrays, meta = checkpoint.load(path)
    stored = meta.get("model")
    if stored != asdict(cfg.model):
        raise ShapeError(f"checkpoint model {stored} does not match config model {asdict(cfg.model)}")
    model = AttentiveGP.from_state_dict(cfg.model, arrays)
    y_min, y_max, y_mean = (float(v) for v in arrays["norm.y"])
    record = NormalizationRecord(arrays["norm.x_min"], arrays["norm.x_max"], y_min, y_max, y_mean,
                                 list(meta.get("constant_channels", [])))
    return model, record


# -- commands ----------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, record = prepare_data(cfg)
    tcfg = cfg.train_config()
    try:
        tcfg.validate(ds.train.n_seq)
    except ValueError as e:
        raise ConfigError(str(e), None, "train") from None
    model, trace = _run_trainer(cfg.trainer, _init_model(cfg), ds.train, tcfg)
    write_trace_csv(trace, out / "trace.csv")
    _save_checkpoint(out / "checkpoint.agp", model, record, cfg)
    (out / "config.resolved").write_text(dump(cfg), encoding="utf-8")
    return out


def cmd_eval(cfg: ExperimentConfig, mode: str = "prediction", ckpt: str | None = None) -> Path:
    out = Path(cfg.out)
    path = Path(ckpt) if ckpt else out / "checkpoint.agp"
    model, record = _load_checkpoint(path, cfg)
    ds, _ = normalize(cfg.dataset.build(cfg.model.L), record)
    test = ds.test
    cache = FeatureCache(model, ds.train)
    res, total_nrmse, total_cov = evaluate(cache, test, mode)
    seq_dir = out / f"eval_{mode}"
    seq_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    name = cfg.dataset.name
    for i in range(test.n_seq):
        one = type(res)(res.mean[i], res.std[i], res.mode)
        write_sequence_csv(seq_dir / f"seq{i:03d}.csv", test.targets[i], one, record)
        rows.append({"dataset": f"{name}/seq{i:03d}", "mode": mode, "seed": cfg.seed,
                     "nrmse": nrmse(one.mean, test.targets[i]),
                     "coverage": coverage_2sigma(one, test.targets[i])})
    rows.append({"dataset": f"{name}/all", "mode": mode, "seed": cfg.seed,
                 "nrmse": total_nrmse, "coverage": total_cov})
    write_metrics_csv(out / f"metrics_{mode}.csv", rows)
    return out


def sincheck_data(cfg: ExperimentConfig):
    s = cfg.sincheck
    return normalize(gen_sin(s.n_points, s.noise_sd, seed=cfg.dataset.seed, L=1))


def sincheck_fit(cfg: ExperimentConfig, ds):
    """Best-of-``restarts`` GP-head model by training NLL, plus the Gaussian-head baseline."""
    s = cfg.sincheck
    mcfg = replace(cfg.model, F=s.F, L=1, input_dim=1)
    tcfg = replace(cfg.train_config(), epochs=s.epochs, warmup=s.warmup,
                   batch_size=min(s.batch_size, ds.train.n_seq))
    runs = []
    for r in range(s.restarts):
        seed = cfg.seed + r
        model, trace = blockwise_train(_init_model(cfg, mcfg, seed), ds.train, replace(tcfg, seed=seed))
        runs.append((trace.final_loss, seed, model))
    best = min(runs, key=lambda t: t[0])
    bcfg = replace(tcfg, lr_W=s.baseline_lr, epochs=s.baseline_epochs, batch_size=ds.train.n_seq)
    bparams, bhead, _ = baseline_train(_init_model(cfg, mcfg, best[1]), ds.train, bcfg)
    return best[2], (bparams, bhead, mcfg), [(seed, loss) for loss, seed, _ in runs]


def sincheck_report(gp_model, baseline, ds, record) -> list[list]:
    """Rows of ``region,model,mean_sigma,nrmse`` in raw target units."""
    cache = FeatureCache(gp_model, ds.train)
    rows = []
    for region, split in (("in_sample", "train"), ("oos", "oos")):
        d = ds.subset(split)
        pr = predict(cache, d.inputs, d.targets)
        bm, bs = baseline_predict(*baseline[:2], baseline[2], d.inputs, d.targets)
        rows.append([region, "gp_head", float(np.mean(record.invert_scale(pr.std))),
                     nrmse(pr.mean, d.targets)])
        rows.append([region, "gaussian_head", float(np.mean(record.invert_scale(bs))),
                     nrmse(bm, d.targets)])
    return rows


def sigma_ratio(rows: list[list], model: str = "gp_head") -> float:
    sig = {r[0]: r[2] for r in rows if r[1] == model}
    return sig["oos"] / sig["in_sample"]


def cmd_sincheck(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, record = sincheck_data(cfg)
    gp_model, baseline, restarts = sincheck_fit(cfg, ds)
    rows = sincheck_report(gp_model, baseline, ds, record)
    _write_rows(out / "sincheck_report.csv", ["region", "model", "mean_sigma", "nrmse"], rows)
    _write_rows(out / "sincheck_restarts.csv", ["seed", "final_loss"], restarts)
    # plot data over every generated point, sorted by x
    order = np.argsort(ds.inputs[:, 0, 0])
    x, y, split = ds.inputs[order], ds.targets[order], ds.split[order]
    pr = predict(FeatureCache(gp_model, ds.train), x, y)
    bm, bs = baseline_predict(*baseline[:2], baseline[2], x, y)
    x_raw = record.invert_inputs(x)[:, 0, 0]
    for name, mean, std in (("gp_head", pr.mean, pr.std), ("gaussian_head", bm, bs)):
        plot = [[float(x_raw[i]), split[i], float(record.invert_targets(y[i, 0])),
                 float(record.invert_targets(mean[i, 0])),
                 float(record.invert_targets(mean[i, 0] - 2 * std[i, 0])),
                 float(record.invert_targets(mean[i, 0] + 2 * std[i, 0]))] for i in range(len(x))]
        _write_rows(out / f"sincheck_curve_{name}.csv", ["x", "split", "target", "mean", "lo", "hi"], plot)
    (out / "config.resolved").write_text(dump(cfg), encoding="utf-8")
    return out


def compare_trainers(cfg: ExperimentConfig):
    """Both trainers from the same initialization for each seed; returns per-seed traces."""
    ds, _ = prepare_data(cfg)
    rows = ds.train.n_seq * cfg.model.L
    if rows > cfg.compare.max_rows:
        raise ConfigError(f"full-batch GP would factor {rows} rows (limit {cfg.compare.max_rows}); "
                          "use fewer or shorter training windows, or set gp.kind = kiss",
                          None, "compare.max_rows")
    tcfg = replace(cfg.train_config(), T1=None, T2=1)
    try:
        tcfg.validate(ds.train.n_seq)
    except ValueError as e:
        raise ConfigError(str(e), None, "train") from None
    results = []
    for i in range(cfg.compare.seeds):
        seed = cfg.seed + i
        init = _init_model(cfg, seed=seed)
        t = replace(tcfg, seed=seed)
        _, tb = blockwise_train(init, ds.train, t)
        _, tf = fullbatch_train(init, ds.train, t)
        results.append((seed, tb, tf))
    return results


def summarize_comparison(results) -> list[list]:
    """Per seed and trainer: final loss and the first round reaching full-batch's final loss."""
    rows = []
    for seed, tb, tf in results:
        target = final_loss(tf)
        for trace in (tb, tf):
            reach = epochs_to_reach(trace, target)
            rows.append([trace.trainer, seed, final_loss(trace), "" if reach is None else reach])
    return rows


def cmd_compare_trainers(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    results = compare_trainers(cfg)
    for seed, tb, tf in results:
        write_trace_csv(tb, out / "traces" / f"blockwise_seed{seed}.csv")
        write_trace_csv(tf, out / "traces" / f"fullbatch_seed{seed}.csv")
    _write_rows(out / "summary.csv", ["trainer", "seed", "final_loss", "epochs_to_reach"],
                summarize_comparison(results))
    mb = np.mean([tb.losses for _, tb, _ in results], axis=0)
    mf = np.mean([tf.losses for _, _, tf in results], axis=0)
    _write_rows(out / "mean_curves.csv", ["round", "blockwise", "fullbatch"],
                [[k + 1, float(mb[k]), float(mf[k])] for k in range(len(mb))])
    (out / "config.resolved").write_text(dump(cfg), encoding="utf-8")
    return out


# -- entry point -------------------------------------------------------------


COMMANDS = ("train", "eval", "generate", "sincheck", "compare-trainers")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agp", description="Attention encoder-decoder with a GP output layer.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="flat section.key = value config file")
    ap.add_argument("--seed", type=int, default=None, help="overrides experiment.seed")
    ap.add_argument("--out", default=None, help="overrides output.dir")
    ap.add_argument("--checkpoint", default=None, help="eval/generate: checkpoint path")
    ap.add_argument("--mode", choices=("prediction", "generation"), default="prediction",
                    help="eval: decoding protocol")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config).with_overrides(args.seed, args.out)
        if args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.mode, args.checkpoint)
        elif args.command == "generate":
            out = cmd_eval(cfg, "generation", args.checkpoint)
        elif args.command == "sincheck":
            out = cmd_sincheck(cfg)
        else:
            out = cmd_compare_trainers(cfg)
    except (ConfigError, ShapeError, checkpoint.CheckpointError) as e:
        print(f"agp: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundError, ConditioningError, DomainError, GenerationError, FloatingPointError) as e:
        print(f"agp: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError) as e:
        print(f"agp: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"agp: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"agp {args.command}: wrote {out}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
