"""Dataset ingestion and synthetic mission-profile generation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd

from .ecm import EcmParams, EcmState, simulate
from .errors import ConfigError, DataError, SchemaError
from .features import Sample

CANONICAL_COLUMNS = ("cell", "time_s", "dt_s", "current_a", "voltage_v", "temp_c", "soc", "cycle")

REFERENCE_TRAIN_CELLS = ("VAH05", "VAH10", "VAH12", "VAH26")
REFERENCE_TRAIN_CYCLES = (1, 50, 1000)
REFERENCE_TEST_CELL = "VAH11"
REFERENCE_TEST_CYCLE = 600


@dataclass(frozen=True)
class ColumnMap:
    """Source column names and unit conversions onto the canonical schema.

    Values are multiplied by the ``*_scale`` factors; ``current_sign`` flips
    sources that report discharge as negative current.
    """

    time_s: str = "time_s"
    current_a: str = "current_a"
    voltage_v: str = "voltage_v"
    temp_c: str = "temp_c"
    cycle: str = "cycle"
    soc: str | None = None
    dt_s: str | None = None
    cell: str | None = None
    time_scale: float = 1.0
    current_scale: float = 1.0
    voltage_scale: float = 1.0
    soc_scale: float = 1.0
    current_sign: float = 1.0

    def __post_init__(self):
        names = [n for n in self.mapped().values()]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"data.columns: source column(s) {dupes} mapped more than once")
        if self.current_sign not in (1.0, -1.0):
            raise ConfigError(f"data.columns.current_sign must be +1 or -1, got {self.current_sign}")

    def mapped(self) -> dict[str, str]:
        out = {
            "time_s": self.time_s,
            "current_a": self.current_a,
            "voltage_v": self.voltage_v,
            "temp_c": self.temp_c,
            "cycle": self.cycle,
        }
        for opt in ("soc", "dt_s", "cell"):
            if getattr(self, opt) is not None:
                out[opt] = getattr(self, opt)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMap":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"data.columns: unknown keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def canonical(cls) -> "ColumnMap":
        return cls(soc="soc", dt_s="dt_s", cell="cell")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[tuple[str, tuple[int, ...]], ...]
    test: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        overlap = {c for c, _ in self.train} & {c for c, _ in self.test}
        if overlap:
            raise ConfigError(f"split: cells {sorted(overlap)} appear in both train and test")
        if not self.train or not self.test:
            raise ConfigError("split: train and test must both be non-empty")

    @classmethod
    def reference_default(cls) -> "SplitSpec":
        return cls(
            train=tuple((c, REFERENCE_TRAIN_CYCLES) for c in REFERENCE_TRAIN_CELLS),
            test=((REFERENCE_TEST_CELL, (REFERENCE_TEST_CYCLE,)),),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        unknown = set(d) - {"train", "test"}
        if unknown:
            raise ConfigError(f"data.split: unknown keys {sorted(unknown)}")

        def part(m):
            return tuple((str(c), tuple(int(x) for x in cyc)) for c, cyc in m.items())

        return cls(train=part(d.get("train", {})), test=part(d.get("test", {})))


@dataclass
class IngestResult:
    train: list[Sample]
    test: list[Sample]
    dropped_rows: int = 0
    # (cell, requested cycle) -> cycle actually used
    cycle_substitutions: dict[tuple[str, int], int] = field(default_factory=dict)


def _read_table(path: Path, cmap: ColumnMap) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    except Exception as exc:  # pandas raises a zoo of parser errors
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    for field_name, col in cmap.mapped().items():
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column {col!r} (mapped to {field_name})")
    return df


def _cycle_samples(df: pd.DataFrame, cell: str, cycle: int, cmap: ColumnMap,
                   initial_dt: float | None, where: str) -> tuple[list[Sample], int]:
    cols = cmap.mapped()
    numeric = {k: pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
               for k, c in cols.items() if k != "cell"}
    finite = np.ones(len(df), dtype=bool)
    for k in ("time_s", "current_a", "voltage_v", "temp_c") + (("soc",) if "soc" in numeric else ()) \
            + (("dt_s",) if "dt_s" in numeric else ()):
        finite &= np.isfinite(numeric[k])
    dropped = int(np.count_nonzero(~finite))
    keep = np.flatnonzero(finite)
    row_index = df.index.to_numpy()[keep]

    t = numeric["time_s"][keep] * cmap.time_scale
    steps = np.diff(t)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        r = int(row_index[bad[0] + 1])
        raise DataError(f"{where}: time is not strictly increasing at data row {r} "
                        f"(cell {cell}, cycle {cycle})", row=r)
    if "dt_s" in numeric:
        dt = numeric["dt_s"][keep] * cmap.time_scale
    else:
        if initial_dt is not None:
            first = float(initial_dt)
        elif steps.size:
            first = float(np.median(steps))
        else:
            raise DataError(f"{where}: cell {cell} cycle {cycle} has one row and no initial dt configured")
        dt = np.concatenate(([first], steps))
    cur = numeric["current_a"][keep] * cmap.current_scale * cmap.current_sign
    volt = numeric["voltage_v"][keep] * cmap.voltage_scale
    temp = numeric["temp_c"][keep]
    soc = numeric["soc"][keep] * cmap.soc_scale if "soc" in numeric else None
    out = []
    for i in range(len(keep)):
        try:
            out.append(Sample(
                t_s=float(t[i]), dt_s=float(dt[i]), current_a=float(cur[i]), voltage_v=float(volt[i]),
                temp_c=float(temp[i]), soc=None if soc is None else float(soc[i]), cycle=int(cycle), cell=cell,
            ))
        except ValueError as exc:
            raise DataError(f"{where}: data row {int(row_index[i])}: {exc}", row=int(row_index[i])) from exc
    return out, dropped


def ingest(
    path: str | Path,
    cmap: ColumnMap,
    split: SplitSpec,
    initial_dt: float | None = None,
    cycle_fallback: str = "error",
    file_pattern: str = "{cell}.csv",
) -> IngestResult:
    """Load the train and test (cell, cycle) selections.

    ``path`` is either a directory holding one CSV per cell (named by
    ``file_pattern``) or a single CSV with a mapped ``cell`` column. Rows with
    non-finite mapped values are dropped and counted. With
    ``cycle_fallback="nearest"`` a missing cycle is replaced by the closest
    one present in the file and the substitution is recorded.
    """
    if cycle_fallback not in ("error", "nearest"):
        raise ConfigError(f"data.cycle_fallback must be 'error' or 'nearest', got {cycle_fallback!r}")
    path = Path(path)
    single = None
    if path.is_file():
        if cmap.cell is None:
            raise ConfigError("data.columns.cell must be mapped when data.path is a single file")
        single = _read_table(path, cmap)
    elif not path.is_dir():
        raise DataError(f"data path {path} does not exist")

    result = IngestResult(train=[], test=[])
    for part, selection in (("train", split.train), ("test", split.test)):
        for cell, cycles in selection:
            if single is not None:
                df = single[single[cmap.cell].astype(str) == cell]
                where = str(path)
                if df.empty:
                    raise DataError(f"{path}: no rows for cell {cell!r}")
            else:
                fpath = path / file_pattern.format(cell=cell)
                if not fpath.exists():
                    raise DataError(f"missing data file {fpath} for cell {cell}")
                df = _read_table(fpath, cmap)
                where = str(fpath)
            cyc_col = pd.to_numeric(df[cmap.cycle], errors="coerce")
            available = np.unique(cyc_col.dropna().to_numpy()).astype(int)
            for cycle in cycles:
                use = cycle
                if cycle not in available:
                    if cycle_fallback == "error" or available.size == 0:
                        raise DataError(f"{where}: cell {cell} has no cycle {cycle}")
                    use = int(available[np.argmin(np.abs(available - cycle))])
                    result.cycle_substitutions[(cell, cycle)] = use
                rows = df[cyc_col == use]
                samples, dropped = _cycle_samples(rows, cell, use, cmap, initial_dt, where)
                getattr(result, part).extend(samples)
                result.dropped_rows += dropped
    return result


def write_samples_csv(path: str | Path, samples: Iterable[Sample]) -> None:
    """Write samples in the canonical schema; floats use round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for s in samples:
            w.writerow([s.cell, repr(s.t_s), repr(s.dt_s), repr(s.current_a), repr(s.voltage_v),
                        repr(s.temp_c), "" if s.soc is None else repr(s.soc), s.cycle])


def read_samples_csv(path: str | Path) -> list[Sample]:
    """Read a canonical-schema CSV back, keeping every row in file order."""
    df = _read_table(Path(path), ColumnMap.canonical())
    out = []
    for i, r in enumerate(df.itertuples(index=False)):
        soc = None if pd.isna(r.soc) else float(r.soc)
        try:
            out.append(Sample(float(r.time_s), float(r.dt_s), float(r.current_a), float(r.voltage_v),
                              float(r.temp_c), soc, int(r.cycle), str(r.cell)))
        except ValueError as exc:
            raise DataError(f"{path}: data row {i}: {exc}", row=i) from exc
    return out


# --------------------------------------------------------------------------
# Synthetic missions


@dataclass(frozen=True)
class MissionProfile:
    """Takeoff pulse, cruise, landing pulse, rest.

    Phase levels are discharge currents in amperes; ``power_reduction``
    scales all of them down by that fraction. Steps are nominally ``dt_s``
    long with uniform relative jitter ``dt_jitter``.
    """

    takeoff: tuple[float, float] = (15.0, 75.0)
    cruise: tuple[float, float] = (4.5, 400.0)
    landing: tuple[float, float] = (15.0, 105.0)
    rest: float = 420.0
    power_reduction: float = 0.0
    dt_s: float = 1.0
    dt_jitter: float = 0.1

    def __post_init__(self):
        for name in ("takeoff", "cruise", "landing"):
            level, dur = getattr(self, name)
            if not dur > 0:
                raise ConfigError(f"profile.{name} duration must be > 0, got {dur}")
            if not math.isfinite(level):
                raise ConfigError(f"profile.{name} level must be finite")
        if not self.rest > 0:
            raise ConfigError(f"profile.rest must be > 0, got {self.rest}")
        if not 0.0 <= self.power_reduction < 1.0:
            raise ConfigError(f"profile.power_reduction must be in [0, 1), got {self.power_reduction}")
        if not self.dt_s > 0:
            raise ConfigError(f"profile.dt_s must be > 0, got {self.dt_s}")
        if not 0.0 <= self.dt_jitter < 1.0:
            raise ConfigError(f"profile.dt_jitter must be in [0, 1), got {self.dt_jitter}")

    @classmethod
    def from_dict(cls, d: dict) -> "MissionProfile":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"synthetic.profile: unknown keys {sorted(unknown)}")
        d = dict(d)
        for k in ("takeoff", "cruise", "landing"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def phases(self) -> list[tuple[float, float]]:
        scale = 1.0 - self.power_reduction
        return [
            (self.takeoff[0] * scale, self.takeoff[1]),
            (self.cruise[0] * scale, self.cruise[1]),
            (self.landing[0] * scale, self.landing[1]),
            (0.0, self.rest),
        ]


def quadratic_nonlinearity(k: float) -> Callable[[np.ndarray], np.ndarray]:
    """nu(I) = k * I * |I|: odd in current, growing with C-rate."""
    return lambda i: k * i * np.abs(i)


@dataclass
class SyntheticData:
    samples: list[Sample]
    v_phy: np.ndarray
    nonlinear_v: np.ndarray
    noise_v: np.ndarray

    def mission_cells(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.cell)
        return list(seen)


def synthesize(
    profile: MissionProfile,
    truth: EcmParams,
    nonlinearity: Callable[[np.ndarray], np.ndarray] | float = 0.0,
    noise_std_v: float = 0.0,
    n_missions: int = 1,
    seed: int = 0,
    *,
    initial_soc: float = 1.0,
    temp_c: float = 25.0,
    temp_spread_c: float = 5.0,
    level_jitter: float = 0.1,
    cycle_start: int = 1,
    cycle_step: int = 50,
    cell_prefix: str = "SYN",
    emit_soc: bool = True,
) -> SyntheticData:
    """Generate missions from a known 2RC ground truth.

    Each mission starts from rest at ``initial_soc`` and becomes its own cell
    ``{cell_prefix}{m:03d}`` with cycle number ``cycle_start + m*cycle_step``.
    Voltage is the ``truth`` model output plus ``nonlinearity(I)`` plus
    Gaussian noise. A float ``nonlinearity`` is the ``k`` of
    :func:`quadratic_nonlinearity`.
    """
    if n_missions < 1:
        raise ConfigError(f"synthetic.n_missions must be >= 1, got {n_missions}")
    if noise_std_v < 0:
        raise ConfigError(f"synthetic.noise_std_v must be >= 0, got {noise_std_v}")
    nu = quadratic_nonlinearity(nonlinearity) if isinstance(nonlinearity, (int, float)) else nonlinearity
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    v_phy_all, nl_all, noise_all = [], [], []
    for m in range(n_missions):
        ambient = temp_c + rng.uniform(-temp_spread_c, temp_spread_c)
        gain = 1.0 + rng.uniform(-level_jitter, level_jitter)
        dts, currents = [], []
        for level, duration in profile.phases():
            n_steps = max(1, int(round(duration / profile.dt_s)))
            jitter = rng.uniform(-profile.dt_jitter, profile.dt_jitter, size=n_steps)
            dts.extend(profile.dt_s * (1.0 + jitter))
            currents.extend([level * gain] * n_steps)
        traj = simulate(truth, EcmState((0.0, 0.0), initial_soc), list(zip(dts, currents)))
        cur = np.asarray(currents)
        nl = np.asarray(nu(cur), dtype=float)
        noise = rng.normal(0.0, noise_std_v, size=len(cur)) if noise_std_v > 0 else np.zeros(len(cur))
        volts = traj.v_phy + nl + noise
        t = np.cumsum(dts)
        cell = f"{cell_prefix}{m:03d}"
        cycle = cycle_start + m * cycle_step
        for i in range(len(cur)):
            samples.append(Sample(
                t_s=float(t[i]), dt_s=float(dts[i]), current_a=float(cur[i]), voltage_v=float(volts[i]),
                temp_c=float(ambient), soc=float(traj.soc[i]) if emit_soc else None, cycle=cycle, cell=cell,
            ))
        v_phy_all.append(traj.v_phy)
        nl_all.append(nl)
        noise_all.append(noise)
    return SyntheticData(samples, np.concatenate(v_phy_all), np.concatenate(nl_all), np.concatenate(noise_all))


def split_by_cell(samples: Sequence[Sample], test_cells: Iterable[str]) -> tuple[list[Sample], list[Sample]]:
    test_cells = set(test_cells)
    train = [s for s in samples if s.cell not in test_cells]
    test = [s for s in samples if s.cell in test_cells]
    return train, test


def write_truth_csv(path: str | Path, data: SyntheticData) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cell", "time_s", "v_phy_truth", "nonlinear_v", "noise_v"))
        for s, a, b, c in zip(data.samples, data.v_phy, data.nonlinear_v, data.noise_v):
            w.writerow((s.cell, repr(s.t_s), repr(float(a)), repr(float(b)), repr(float(c))))
