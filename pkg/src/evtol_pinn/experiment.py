"""Config loading and the FNN/PINN architecture grid."""

from __future__ import annotations

import csv
import fnmatch
import hashlib
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ColumnMap, MissionProfile, SplitSpec, ingest, split_by_cell, synthesize
from .ecm import EcmParams
from .errors import ConfigError
from .features import FeatureSet, Mode, Sample, build_features, fit_normalizer, normalize_row, \
    normalize_target, denormalize_target
from .metrics import RESULT_COLUMNS, TIMING_COLUMNS, EvalReport, evaluate, time_inference
from .nn import MlpModel, MlpSpec, TrainConfig, forward, init_model, param_count, save_model, train

log = logging.getLogger(__name__)

# The eight reference architectures, FNN rows then PINN rows.
REFERENCE_GRID = (
    ("FNN", 1, 32), ("FNN", 2, 64), ("FNN", 2, 128), ("FNN", 4, 128),
    ("PINN", 1, 32), ("PINN", 2, 64), ("PINN", 2, 128), ("PINN", 4, 128),
)
FULL_GRID = tuple((m, l, n) for m in ("FNN", "PINN") for l in (1, 2, 4) for n in (32, 64, 128))


@dataclass(frozen=True)
class GridCell:
    mode: Mode
    hidden_layers: int
    neurons: int

    @property
    def tag(self) -> str:
        return f"{self.mode.value}-L{self.hidden_layers}-N{self.neurons}"

    def sort_key(self):
        return (0 if self.mode is Mode.FNN else 1, self.hidden_layers, self.neurons)


@dataclass
class SyntheticConfig:
    profile: MissionProfile = field(default_factory=MissionProfile)
    truth: EcmParams | None = None
    k: float = 2e-4
    noise_std_v: float = 0.005
    n_missions: int = 20
    seed: int | None = None
    test_every: int = 5
    temp_c: float = 25.0
    temp_spread_c: float = 5.0
    level_jitter: float = 0.1
    cycle_start: int = 1
    cycle_step: int = 50
    emit_soc: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"synthetic: unknown keys {sorted(unknown)}")
        if "profile" in d:
            d["profile"] = MissionProfile.from_dict(d["profile"])
        if "truth" in d:
            d["truth"] = EcmParams.from_dict(d["truth"])
        cfg = cls(**d)
        if cfg.test_every < 2 or cfg.test_every > cfg.n_missions:
            raise ConfigError(f"synthetic.test_every must be in [2, n_missions], got {cfg.test_every}")
        return cfg


@dataclass
class DataConfig:
    path: str
    columns: ColumnMap = field(default_factory=ColumnMap)
    split: SplitSpec = field(default_factory=SplitSpec.reference_default)
    file_pattern: str = "{cell}.csv"
    initial_dt: float | None = None
    cycle_fallback: str = "error"

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "DataConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"data: unknown keys {sorted(unknown)}")
        if "path" not in d:
            raise ConfigError("data.path is required")
        d["path"] = str((base / d["path"]).resolve())
        if "columns" in d:
            d["columns"] = ColumnMap.from_dict(d["columns"])
        if "split" in d:
            d["split"] = SplitSpec.from_dict(d["split"])
        return cls(**d)


@dataclass
class TimingConfig:
    enabled: bool = True
    repetitions: int = 1000
    rows: int = 1


@dataclass
class ExperimentConfig:
    ecm: EcmParams
    grid: list[GridCell]
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig | None = None
    data: DataConfig | None = None
    seed: int = 0
    output_dir: str = "results"
    initial_soc: float = 1.0
    normalization: str = "zscore"
    timing: TimingConfig = field(default_factory=TimingConfig)
    fit: dict | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.data is None):
            raise ConfigError("exactly one of [synthetic] or [data] must be present")
        if not self.grid:
            raise ConfigError("grid must not be empty")
        if self.normalization not in ("zscore", "minmax"):
            raise ConfigError(f"normalization must be 'zscore' or 'minmax', got {self.normalization!r}")
        if not 0.0 <= self.initial_soc <= 1.0:
            raise ConfigError(f"initial_soc must be in [0, 1], got {self.initial_soc}")


def _parse_grid(raw) -> list[GridCell]:
    if raw is None or raw == "reference":
        entries = REFERENCE_GRID
    elif raw == "full":
        entries = FULL_GRID
    elif isinstance(raw, list):
        entries = []
        for e in raw:
            if not isinstance(e, dict) or set(e) != {"mode", "hidden_layers", "neurons"}:
                raise ConfigError(f"grid entries need exactly mode, hidden_layers, neurons; got {e!r}")
            entries.append((e["mode"], e["hidden_layers"], e["neurons"]))
    else:
        raise ConfigError(f"grid must be 'reference', 'full' or a list of tables, got {raw!r}")
    cells = []
    for mode, layers, neurons in entries:
        try:
            m = Mode(mode)
        except ValueError:
            raise ConfigError(f"grid mode must be FNN or PINN, got {mode!r}") from None
        if int(layers) < 1 or int(neurons) < 1:
            raise ConfigError(f"grid cell {mode}-L{layers}-N{neurons}: sizes must be >= 1")
        cells.append(GridCell(m, int(layers), int(neurons)))
    tags = [c.tag for c in cells]
    if len(set(tags)) != len(tags):
        raise ConfigError("grid contains duplicate cells")
    return cells


def config_from_dict(d: dict, base: Path = Path(".")) -> ExperimentConfig:
    top = {"seed", "output_dir", "initial_soc", "normalization", "ecm", "grid", "train",
           "synthetic", "data", "timing", "fit"}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "ecm" not in d:
        raise ConfigError("[ecm] section is required")
    timing = d.get("timing", {})
    unknown_t = set(timing) - set(TimingConfig.__dataclass_fields__)
    if unknown_t:
        raise ConfigError(f"timing: unknown keys {sorted(unknown_t)}")
    try:
        return ExperimentConfig(
            ecm=EcmParams.from_dict(d["ecm"]),
            grid=_parse_grid(d.get("grid")),
            train=TrainConfig.from_dict(d.get("train", {})),
            synthetic=SyntheticConfig.from_dict(d["synthetic"]) if "synthetic" in d else None,
            data=DataConfig.from_dict(d["data"], base) if "data" in d else None,
            seed=int(d.get("seed", 0)),
            output_dir=str(d.get("output_dir", "results")),
            initial_soc=float(d.get("initial_soc", 1.0)),
            normalization=d.get("normalization", "zscore"),
            timing=TimingConfig(**timing),
            fit=d.get("fit"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base=path.parent)


def derive_seed(global_seed: int, cell: GridCell) -> int:
    """Stable per-cell seed from the global seed and the cell identity."""
    key = f"{global_seed}:{cell.mode.value}:{cell.hidden_layers}:{cell.neurons}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


# --------------------------------------------------------------------------
# Data preparation


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    dropped_rows: int = 0


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synthetic is not None:
        syn = cfg.synthetic
        data = synthesize(
            syn.profile, syn.truth or cfg.ecm, syn.k, syn.noise_std_v, syn.n_missions,
            cfg.seed if syn.seed is None else syn.seed,
            initial_soc=cfg.initial_soc, temp_c=syn.temp_c, temp_spread_c=syn.temp_spread_c,
            level_jitter=syn.level_jitter, cycle_start=syn.cycle_start, cycle_step=syn.cycle_step,
            emit_soc=syn.emit_soc,
        )
        cells = data.mission_cells()
        test_cells = cells[syn.test_every - 1::syn.test_every]
        train, test = split_by_cell(data.samples, test_cells)
        return Dataset(train, test)
    dc = cfg.data
    res = ingest(dc.path, dc.columns, dc.split, dc.initial_dt, dc.cycle_fallback, dc.file_pattern)
    for (cell, want), got in sorted(res.cycle_substitutions.items()):
        log.warning("cell %s: cycle %d unavailable, using nearest cycle %d", cell, want, got)
    if res.dropped_rows:
        log.warning("dropped %d rows with non-finite values", res.dropped_rows)
    return Dataset(res.train, res.test, res.dropped_rows)


@dataclass
class PreparedMode:
    """Normalized train/test matrices for one input mode."""

    mode: Mode
    train: FeatureSet
    test: FeatureSet
    normalizer: object
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray


def prepare(cfg: ExperimentConfig, ds: Dataset, mode: Mode) -> PreparedMode:
    ftr = build_features(ds.train, mode, cfg.ecm, cfg.initial_soc)
    fte = build_features(ds.test, mode, cfg.ecm, cfg.initial_soc)
    norm = fit_normalizer(ftr.x, ftr.voltage, cfg.normalization, mode.feature_names)
    y = normalize_target(norm, ftr.voltage) if mode is Mode.FNN else ftr.target
    return PreparedMode(mode, ftr, fte, norm, normalize_row(norm, ftr.x), y, normalize_row(norm, fte.x))


def predict_volts(model: MlpModel, mode: Mode, x_norm: np.ndarray, v_phy: np.ndarray) -> np.ndarray:
    out = forward(model, x_norm)
    if mode is Mode.PINN:
        return v_phy + out
    return denormalize_target(model.normalizer, out)


# --------------------------------------------------------------------------
# Grid execution


@dataclass
class CellResult:
    cell: GridCell
    report: EvalReport | None = None
    timing: tuple[float, float, int] | None = None
    error: str | None = None


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _trace_csv(prep: PreparedMode, ds: Dataset, pred: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["cell", "cycle", "t_s", "v_actual", "v_pred", "error_v"]
    if prep.mode is Mode.PINN:
        header.append("v_phy")
    w.writerow(header)
    for i, s in enumerate(ds.test):
        row = [s.cell, s.cycle, repr(s.t_s), repr(s.voltage_v), repr(float(pred[i])),
               repr(float(pred[i] - s.voltage_v))]
        if prep.mode is Mode.PINN:
            row.append(repr(float(prep.test.v_phy[i])))
        w.writerow(row)
    return buf.getvalue()


def run_cell(cfg: ExperimentConfig, prep: PreparedMode, ds: Dataset, cell: GridCell, out_dir: Path) -> CellResult:
    """Train, evaluate and export one grid cell. Never raises."""
    try:
        with threadpool_limits(1):
            seed = derive_seed(cfg.seed, cell)
            spec = MlpSpec(cell.mode.input_dim, cell.hidden_layers, cell.neurons)
            model = init_model(spec, seed, zero_output=cell.mode is Mode.PINN)
            model.normalizer = prep.normalizer
            tcfg = replace(cfg.train, seed=seed)
            model, hist = train(model, prep.x_train, prep.y_train, tcfg)
            pred = predict_volts(model, cell.mode, prep.x_test, prep.test.v_phy)
            rep = evaluate(pred, prep.test.voltage)
            rep.model_tag = cell.mode.value
            rep.hidden_layers = cell.hidden_layers
            rep.neurons = cell.neurons
            rep.param_count = param_count(spec)
            timing = None
            if cfg.timing.enabled:
                rows = prep.x_test[: max(1, cfg.timing.rows)]
                t = time_inference(model, rows, cfg.timing.repetitions)
                rep.mean_inference_us = t.mean_us
                timing = (t.mean_us, t.std_us, t.repetitions)
        extra = {
            "mode": cell.mode.value,
            "tag": cell.tag,
            "feature_names": list(cell.mode.feature_names),
            "ecm": cfg.ecm.to_dict(),
            "initial_soc": cfg.initial_soc,
            "training": {
                "epochs_run": len(hist.loss),
                "best_epoch": hist.best_epoch,
                "initial_loss": hist.initial_loss,
                "final_loss": hist.loss[-1] if hist.loss else hist.initial_loss,
            },
        }
        save_model(out_dir / f"{cell.tag}.json", model, extra)
        _write_atomic(out_dir / f"{cell.tag}_trace.csv", _trace_csv(prep, ds, pred))
        return CellResult(cell, rep, timing)
    except Exception as exc:  # a failed cell must not abort the grid
        log.exception("grid cell %s failed", cell.tag)
        return CellResult(cell, error=f"{type(exc).__name__}: {exc}")


@dataclass
class RunSummary:
    results: list[CellResult]
    out_dir: Path

    @property
    def failed(self) -> list[CellResult]:
        return [r for r in self.results if r.error is not None]


def results_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in sorted(results, key=lambda r: r.cell.sort_key()):
        if r.report is not None:
            w.writerow(r.report.csv_row(timing=False))
    return buf.getvalue()


def timing_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in sorted(results, key=lambda r: r.cell.sort_key()):
        if r.timing is not None:
            mean, std, reps = r.timing
            w.writerow([r.cell.tag, r.report.param_count, f"{mean:.4f}", f"{std:.4f}", reps])
    return buf.getvalue()


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    tag_filter: str | None = None,
) -> RunSummary:
    """Run every selected grid cell and write the aggregate tables.

    Per cell: ``<tag>.json`` weights and ``<tag>_trace.csv``. Aggregates:
    ``results.csv`` (accuracy, FNN block then PINN block, deterministic) and
    ``timing.csv`` (machine-dependent latency), plus ``failures.csv`` when a
    cell failed.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [c for c in cfg.grid if tag_filter is None or fnmatch.fnmatch(c.tag, tag_filter)]
    if not cells:
        raise ConfigError(f"filter {tag_filter!r} matches no grid cell")
    ds = load_dataset(cfg)
    preps = {m: prepare(cfg, ds, m) for m in sorted({c.mode for c in cells}, key=lambda m: m.value)}

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, preps[c.mode], ds, c, out) for c in cells]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(cfg, preps[c.mode], ds, c, out) for c in cells]

    _write_atomic(out / "results.csv", results_csv(results))
    if cfg.timing.enabled:
        _write_atomic(out / "timing.csv", timing_csv(results))
    failed = [r for r in results if r.error is not None]
    fail_path = out / "failures.csv"
    if failed:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model", "error"))
        for r in failed:
            w.writerow((r.cell.tag, r.error))
        _write_atomic(fail_path, buf.getvalue())
    elif fail_path.exists():
        fail_path.unlink()
    return RunSummary(results, out)

