"""Sweeps over strategies x criteria x seeds, model selection, and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import lottery as L
from . import tasks
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("task", "strategy", "criterion", "scope", "seed", "iteration", "remaining_fraction", "params",
                 "flops", "memory_bytes", "disk_bytes", "train_err", "val_err", "test_err", "seconds")
SMALLEST_RATIO = 1.5
OPTIMAL_RATIO = 1.1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "pitch"
    strategies: tuple = ("trim",)
    criteria: tuple = ("magnitude",)
    scope: str = "local"
    prune_rate: float = 0.3
    iterations: int = 15
    repetitions: int = 5
    rewind_epoch_fraction: float = 0.5
    base_seed: int = 0
    data_seed: int = 0
    out: str = "runs/default"
    epochs: int | None = None
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 2e-4
    plateau_patience: int = 10
    dataset_size: int | None = None
    timing: bool = True

    def validate(self):
        if self.task not in tasks.TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        for s in self.strategies:
            if s not in L.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        for c in self.criteria:
            if c not in L.CRITERIA:
                raise ConfigError(f"unknown criterion {c!r}")
        if not self.strategies or not self.criteria:
            raise ConfigError("strategies and criteria must be non-empty")
        if self.scope not in L.SCOPES:
            raise ConfigError(f"unknown scope {self.scope!r}")
        if not 0 < self.prune_rate < 1:
            raise ConfigError(f"prune_rate out of range (0, 1): {self.prune_rate}")
        if not 0 <= self.rewind_epoch_fraction <= 1:
            raise ConfigError(f"rewind_epoch_fraction out of range [0, 1]: {self.rewind_epoch_fraction}")
        for name in ("iterations", "repetitions", "batch_size", "plateau_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} out of range (must be >= 1): {getattr(self, name)}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs out of range (must be >= 1): {self.epochs}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        return self

    def lottery_config(self, strategy, criterion) -> L.LotteryConfig:
        return L.LotteryConfig(strategy, criterion, self.scope, self.prune_rate, self.iterations,
                               self.rewind_epoch_fraction, self.repetitions)

    def train_config(self) -> TrainConfig:
        task = tasks.get_task(self.task)
        return TrainConfig(self.batch_size, self.learning_rate, self.weight_decay, self.plateau_patience,
                           self.epochs if self.epochs is not None else task.epochs, self.base_seed)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def emit_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def _coerce(key, raw):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "tuple":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if typ == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ.endswith("| None") and raw.lower() == "none":
            return None
        if typ.startswith("int"):
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(path=None, text=None, overrides=None) -> ExperimentConfig:
    """Read ``key = value`` lines (``#`` comments allowed), then apply ``overrides``."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
    for lineno, line in enumerate((text or "").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val) if isinstance(val, str) else val
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------------------
# sweep


def _run_id(strategy, criterion, seed):
    return f"{strategy}-{criterion}-s{seed}"


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def record_row(rec: L.RunRecord):
    return [_fmt(getattr(rec, c)) for c in CURVE_COLUMNS]


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(L.RunRecord(
                task=row["task"], strategy=row["strategy"], criterion=row["criterion"], scope=row["scope"],
                seed=int(row["seed"]), iteration=int(row["iteration"]),
                remaining_fraction=float(row["remaining_fraction"]), params=int(row["params"]),
                flops=int(row["flops"]), memory_bytes=int(row["memory_bytes"]), disk_bytes=int(row["disk_bytes"]),
                train_err=float(row["train_err"]), val_err=float(row["val_err"]), test_err=float(row["test_err"]),
                seconds=float(row["seconds"]),
            ))
    return out


def write_records(path, records):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for rec in records:
            w.writerow(record_row(rec))


class _RecordWriter:
    """Single appender for the sweep's records file; flushes every row."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self.fh = self.path.open("a", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.w.writerow(CURVE_COLUMNS)
            self.fh.flush()

    def write(self, rec):
        self.w.writerow(record_row(rec))
        self.fh.flush()

    def close(self):
        self.fh.close()


def _save_state(state_dir: Path, st: L.RunState):
    state_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(st.model, state_dir / "model.trim")
    save_checkpoint(st.snapshot.model, state_dir / "snapshot.trim", role="rewind", epoch=st.snapshot.epoch)
    (state_dir / "meta.json").write_text(json.dumps({"iteration": st.iteration, "final_lr": st.final_lr}))


def _load_state(state_dir: Path, seed) -> L.RunState | None:
    meta = state_dir / "meta.json"
    if not meta.exists():
        return None
    info = json.loads(meta.read_text())
    model = load_checkpoint(state_dir / "model.trim")
    snap, snap_meta = load_checkpoint(state_dir / "snapshot.trim", return_meta=True)
    return L.RunState(info["iteration"], model, L.RewindSnapshot(snap, snap_meta["epoch"], seed), info["final_lr"])


def run_sweep(cfg: ExperimentConfig, dataset=None) -> list:
    """Run every (strategy, criterion, repetition); rows are appended as they finish.

    Re-running with the same output directory resumes: finished runs are skipped and
    an interrupted run continues after its last completed iteration.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg))
    task = tasks.get_task(cfg.task)
    tconfig = cfg.train_config()
    if dataset is None:
        kwargs = {}
        if cfg.dataset_size is not None:
            key = {"audio-class": "n_per_class", "pitch": "n", "onset": "n_tracks"}[cfg.task]
            kwargs[key] = cfg.dataset_size
        dataset = tasks.make_dataset(cfg.task, cfg.data_seed, **kwargs)

    records_path = out / "records.csv"
    done = {}
    for rec in read_records(records_path):
        done.setdefault(_run_id(rec.strategy, rec.criterion, rec.seed), {})[rec.iteration] = rec
    writer = _RecordWriter(records_path)
    events_fh = (out / "events.jsonl").open("a")
    references = {}
    try:
        for strategy in cfg.strategies:
            for criterion in cfg.criteria:
                lconfig = cfg.lottery_config(strategy, criterion)
                for r in range(cfg.repetitions):
                    seed = cfg.base_seed + r
                    rid = _run_id(strategy, criterion, seed)
                    have = done.get(rid, {})
                    if len(have) == cfg.iterations + 1:
                        continue
                    state_dir = out / "state" / rid
                    resume = _load_state(state_dir, seed) if have else None
                    if resume is not None and resume.iteration != max(have):
                        resume = None
                    if resume is None and have:
                        log.warning("run %s has rows but no matching state; skipping it", rid)
                        continue

                    def on_record(rec, event):
                        writer.write(rec)
                        events_fh.write(json.dumps({"run": rid, **event}, sort_keys=True) + "\n")
                        events_fh.flush()

                    ref = None
                    if resume is None:
                        if seed not in references:
                            references[seed] = L.train_reference(task, dataset, lconfig, tconfig, seed)
                        ref = references[seed]
                    try:
                        L.lottery_repetition(task, dataset, lconfig, tconfig, seed, reference=ref,
                                             on_record=on_record, on_state=lambda st: _save_state(state_dir, st),
                                             resume=resume, timing=cfg.timing)
                    except Exception:
                        log.error("run %s failed:\n%s", rid, traceback.format_exc())
                        with (out / "failures.log").open("a") as fh:
                            fh.write(f"{rid}\n{traceback.format_exc()}\n")
    finally:
        writer.close()
        events_fh.close()
    records = read_records(records_path)
    emit_reports(records, select_models(records), out)
    return records


# ---------------------------------------------------------------------------
# selection


def error_ratio(err, ref):
    if ref > 0:
        return err / ref
    return 1.0 if err == 0 else math.inf


@dataclass
class Selection:
    reference: L.RunRecord | None = None
    best: L.RunRecord | None = None
    smallest: L.RunRecord | None = None
    optimal: L.RunRecord | None = None
    per_seed: dict = field(default_factory=dict)


def select_seed(rows):
    """best / smallest / optimal for one seed's rows (iteration 0 is the reference)."""
    rows = sorted(rows, key=lambda r: r.iteration)
    ref = next((r for r in rows if r.iteration == 0), None)
    if ref is None:
        raise ValueError("selection needs the iteration-0 reference row")
    best = min(rows, key=lambda r: (r.test_err, r.iteration))

    def smallest_within(limit):
        ok = [r for r in rows if error_ratio(r.test_err, ref.test_err) <= limit]
        return min(ok, key=lambda r: (r.remaining_fraction, r.iteration)) if ok else None

    return {"reference": ref, "best": best, "smallest": smallest_within(SMALLEST_RATIO),
            "optimal": smallest_within(OPTIMAL_RATIO)}


def _median_pick(recs, key):
    recs = [r for r in recs if r is not None]
    if not recs:
        return None
    recs = sorted(recs, key=lambda r: (key(r), r.seed))
    return recs[(len(recs) - 1) // 2]


def select_models(records) -> dict:
    """SelectionReport: (task, strategy, criterion, scope) -> Selection of median-seed picks."""
    groups = {}
    for r in records:
        groups.setdefault((r.task, r.strategy, r.criterion, r.scope), {}).setdefault(r.seed, []).append(r)
    report = {}
    for key, by_seed in sorted(groups.items()):
        per_seed = {s: select_seed(rows) for s, rows in sorted(by_seed.items())}
        sel = Selection(per_seed=per_seed)
        sel.reference = _median_pick([p["reference"] for p in per_seed.values()], lambda r: r.test_err)
        sel.best = _median_pick([p["best"] for p in per_seed.values()], lambda r: r.test_err)
        sel.smallest = _median_pick([p["smallest"] for p in per_seed.values()], lambda r: r.remaining_fraction)
        sel.optimal = _median_pick([p["optimal"] for p in per_seed.values()], lambda r: r.remaining_fraction)
        report[key] = sel
    return report


# ---------------------------------------------------------------------------
# reports


def iteration_medians(records):
    """(task, strategy, criterion, scope) -> {iteration: (median remaining, median/min/max test error)}."""
    out = {}
    for r in records:
        out.setdefault((r.task, r.strategy, r.criterion, r.scope), {}).setdefault(r.iteration, []).append(r)
    table = {}
    for key, its in out.items():
        table[key] = {
            it: (float(np.median([r.remaining_fraction for r in rs])),
                 float(np.median([r.test_err for r in rs])),
                 float(np.min([r.test_err for r in rs])),
                 float(np.max([r.test_err for r in rs])))
            for it, rs in sorted(its.items())
        }
    return table


TABLE_COLUMNS = ("task", "strategy", "criterion", "scope", "model", "seed", "iteration", "test_err",
                 "normalized_err", "remaining_fraction", "params", "disk_bytes", "flops", "memory_bytes",
                 "param_ratio", "flops_ratio", "memory_ratio")


def emit_reports(records, report, out):
    """Write curves.csv, table.csv and summary.txt into ``out``."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: (r.task, r.strategy, r.criterion, r.scope, r.seed, r.iteration))
    write_records(out / "curves.csv", ordered)

    with (out / "table.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for key, sel in report.items():
            ref_by_seed = {s: p["reference"] for s, p in sel.per_seed.items()}
            for name in ("reference", "optimal", "smallest", "best"):
                rec = getattr(sel, name)
                if rec is None:
                    w.writerow(list(key) + [name] + ["absent"] * (len(TABLE_COLUMNS) - 5))
                    continue
                ref = ref_by_seed[rec.seed]
                w.writerow(list(key) + [
                    name, rec.seed, rec.iteration, _fmt(rec.test_err), _fmt(error_ratio(rec.test_err, ref.test_err)),
                    _fmt(rec.remaining_fraction), rec.params, rec.disk_bytes, rec.flops, rec.memory_bytes,
                    _fmt(ref.params / rec.params), _fmt(ref.flops / rec.flops),
                    _fmt(ref.memory_bytes / rec.memory_bytes),
                ])

    lines = []
    for key, its in iteration_medians(records).items():
        ref_err = its[0][1] if 0 in its else float("nan")
        lines.append("task={} strategy={} criterion={} scope={}".format(*key))
        if key[0] == "onset":
            lines.append("  (onset error is 1 - F-measure, ±1 frame tolerance)")
        lines.append("  iter  remaining  log10_remaining  median_err  normalized  min_err  max_err")
        for it, (rem, med, lo, hi) in its.items():
            norm = error_ratio(med, ref_err)
            lines.append(f"  {it:4d}  {rem:9.4f}  {math.log10(rem):15.3f}  {med:10.4f}  {norm:10.3f}"
                         f"  {lo:7.4f}  {hi:7.4f}")
        sel = report.get(key)
        if sel is not None:
            for name in ("best", "smallest", "optimal"):
                rec = getattr(sel, name)
                desc = "absent" if rec is None else (
                    f"seed {rec.seed} iter {rec.iteration} remaining {rec.remaining_fraction:.4f} "
                    f"test_err {rec.test_err:.4f}")
                lines.append(f"  {name}: {desc}")
        lines.append("")
    (out / "summary.txt").write_text("\n".join(lines))
    return [out / "curves.csv", out / "table.csv", out / "summary.txt"]
