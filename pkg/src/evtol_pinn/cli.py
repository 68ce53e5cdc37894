"""Command-line entry point: ``evtol-pinn <subcommand>``.

Exit codes: 0 success, 1 config error, 2 data error, 3 a grid cell failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import read_samples_csv, write_samples_csv, write_truth_csv, synthesize
from .ecm import EcmParams, EcmState, PulseTrace, RelaxationTrace, fit_params, simulate
from .errors import ConfigError, DataError, FitError, SchemaError
from .experiment import load_config, predict_volts, run_experiment
from .features import Mode, build_features, normalize_row
from .metrics import evaluate, time_inference
from .nn import load_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CELL = 0, 1, 2, 3


def _config_path(args) -> str:
    path = args.config_opt or args.config
    if not path:
        raise ConfigError("a config path is required (positional or --config)")
    return path


def cmd_run(args) -> int:
    cfg = load_config(_config_path(args))
    if args.seed is not None:
        cfg.seed = args.seed
    summary = run_experiment(cfg, args.out, jobs=args.jobs, tag_filter=args.filter)
    print((summary.out_dir / "results.csv").read_text(), end="")
    for r in summary.failed:
        print(f"FAILED {r.cell.tag}: {r.error}", file=sys.stderr)
    return EXIT_CELL if summary.failed else EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(_config_path(args))
    if cfg.synthetic is None:
        raise ConfigError("synth needs a [synthetic] section")
    if args.seed is not None:
        cfg.seed = args.seed
    syn = cfg.synthetic
    data = synthesize(
        syn.profile, syn.truth or cfg.ecm, syn.k, syn.noise_std_v, syn.n_missions,
        cfg.seed if syn.seed is None else syn.seed,
        initial_soc=cfg.initial_soc, temp_c=syn.temp_c, temp_spread_c=syn.temp_spread_c,
        level_jitter=syn.level_jitter, cycle_start=syn.cycle_start, cycle_step=syn.cycle_step,
        emit_soc=syn.emit_soc,
    )
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(out / "synthetic.csv", data.samples)
    write_truth_csv(out / "truth.csv", data)
    print(f"wrote {len(data.samples)} samples to {out / 'synthetic.csv'}")
    return EXIT_OK


def _synthetic_pulse_test(truth: EcmParams, soc0: float, noise: float, seed: int,
                          current: float = 10.0, pulse_s: int = 60, rest_s: int = 900):
    profile = [(1.0, 0.0)] * 5 + [(1.0, current)] * pulse_s + [(1.0, 0.0)] * rest_s
    traj = simulate(truth, EcmState((0.0, 0.0), soc0), profile)
    rng = np.random.default_rng(seed)
    v = traj.v_phy + (rng.normal(0.0, noise, len(profile)) if noise > 0 else 0.0)
    cur = np.array([c for _, c in profile])
    cut = 5 + pulse_s
    pulse = PulseTrace(cur[: cut], v[: cut])
    relax = RelaxationTrace(np.arange(1.0, rest_s + 1.0), v[cut:], current, float(pulse_s))
    return [relax], [pulse]


def _load_fit_traces(fit: dict, base: Path):
    unknown = set(fit) - {"pulses", "relaxation"}
    if unknown:
        raise ConfigError(f"fit: unknown keys {sorted(unknown)}")
    pulses = []
    for p in fit.get("pulses", []):
        df = pd.read_csv(base / p)
        for col in ("current_a", "voltage_v"):
            if col not in df.columns:
                raise SchemaError(f"{p}: missing column {col!r}")
        pulses.append(PulseTrace(df["current_a"].to_numpy(float), df["voltage_v"].to_numpy(float)))
    relax = []
    for r in fit.get("relaxation", []):
        if not {"path", "current_a"} <= set(r) or set(r) - {"path", "current_a", "pulse_duration_s"}:
            raise ConfigError(f"fit.relaxation entries need path, current_a[, pulse_duration_s]; got {r!r}")
        df = pd.read_csv(base / r["path"])
        for col in ("t_s", "voltage_v"):
            if col not in df.columns:
                raise SchemaError(f"{r['path']}: missing column {col!r}")
        relax.append(RelaxationTrace(df["t_s"].to_numpy(float), df["voltage_v"].to_numpy(float),
                                     float(r["current_a"]), r.get("pulse_duration_s")))
    return relax, pulses


def cmd_fit_ecm(args) -> int:
    path = Path(_config_path(args))
    cfg = load_config(path)
    if cfg.fit is not None:
        relax, pulses = _load_fit_traces(cfg.fit, path.parent)
    elif cfg.synthetic is not None:
        syn = cfg.synthetic
        relax, pulses = _synthetic_pulse_test(syn.truth or cfg.ecm, cfg.initial_soc, syn.noise_std_v, cfg.seed)
    else:
        raise ConfigError("fit-ecm needs a [fit] section or a [synthetic] ground truth")
    try:
        fit = fit_params(relax, pulses, cfg.ecm.capacity_ah, cfg.ecm.ocv)
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_DATA
    doc = {"ecm": fit.params.to_dict(), "residual_norm": fit.residual_norm, "r0_estimates": fit.r0_estimates}
    text = json.dumps(doc, indent=1)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ecm_fit.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.weights)
    if "mode" not in meta or "ecm" not in meta:
        raise ConfigError(f"{args.weights}: weight file lacks mode/ecm metadata")
    mode = Mode(meta["mode"])
    samples = read_samples_csv(args.data)
    feats = build_features(samples, mode, EcmParams.from_dict(meta["ecm"]), meta.get("initial_soc", 1.0))
    pred = predict_volts(model, mode, normalize_row(model.normalizer, feats.x), feats.v_phy)
    rep = evaluate(pred, feats.voltage)
    rep.model_tag = mode.value
    rep.hidden_layers = model.spec.hidden_layers
    rep.neurons = model.spec.neurons_per_layer
    rep.param_count = model.n_parameters()
    print(",".join(("model", "hidden_layers", "neurons", "max_error_mv", "mae_mv", "rmse_mv", "r2_pct",
                    "param_count")))
    print(",".join(rep.csv_row(timing=False)))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = load_model(args.weights)
    rows = np.random.default_rng(0).standard_normal((args.rows, model.spec.input_dim))
    t = time_inference(model, rows, args.repetitions)
    print(f"param_count={model.n_parameters()} rows={t.n_rows} repetitions={t.repetitions} "
          f"mean_us_per_row={t.mean_us:.4f} std_us_per_row={t.std_us:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evtol-pinn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?")
        sp.add_argument("--config", dest="config_opt")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        return sp

    run = with_config(sub.add_parser("run", help="train and evaluate the architecture grid"))
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--filter", help="glob over model tags, e.g. 'PINN-*'")
    run.set_defaults(func=cmd_run)

    with_config(sub.add_parser("fit-ecm", help="identify 2RC parameters")).set_defaults(func=cmd_fit_ecm)
    with_config(sub.add_parser("synth", help="write the synthetic mission dataset")).set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="score a saved model on a canonical CSV")
    ev.add_argument("weights")
    ev.add_argument("data")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="time inference of a saved model")
    bench.add_argument("weights")
    bench.add_argument("--rows", type=int, default=1)
    bench.add_argument("--repetitions", type=int, default=1000)
    bench.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
