"""Experiment grid orchestration, append-only result records and report tables."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, load_cifar10, load_synthetic, save_synthetic
from .errors import ConfigError
from .kd import KDConfig, train_kd, train_plain, train_teacher
from .match import MatchConfig, distill
from .models import DISPLAY_NAMES, FAMILIES, spec_for
from .pool import PRESETS

log = logging.getLogger(__name__)

METHODS = ("baseline", "model_pool", "kd", "model_pool_kd")
METHOD_LABELS = {"baseline": "baseline", "model_pool": "w/ model pool", "kd": "w/ KD",
                 "model_pool_kd": "w/ model pool & KD"}
PRESET_LABELS = {"uniform-heterogeneous": "total random", "heterogeneous-main": "w/ main model",
                 "main-plus-similar": "w/ main model & similar other models", "baseline": "baseline"}
APPENDIX_PRESETS = ("uniform-heterogeneous", "heterogeneous-main", "main-plus-similar")

PROFILES = {
    "paper": {
        "ipc": [1, 10], "iterations": [1000, 2000, 3000], "methods": list(METHODS),
        "pool_presets": ["main-plus-similar"], "eval_archs": list(FAMILIES),
        "match": {}, "kd": {"eval_reps": 5}, "train_subset": None,
    },
    "desk": {
        "ipc": [1], "iterations": [100], "methods": list(METHODS),
        "pool_presets": ["main-plus-similar"], "eval_archs": list(FAMILIES),
        "match": {"real_batch_per_class": 64},
        "kd": {"eval_reps": 3, "test_subset": 2000},
        "train_subset": None,
    },
}


@dataclass
class ExperimentConfig:
    dataset_root: str = "data/cifar-10-batches-bin"
    ipc: list[int] = field(default_factory=lambda: [1])
    iterations: list[int] = field(default_factory=lambda: [1000])
    methods: list[str] = field(default_factory=lambda: ["baseline"])
    pool_presets: list[str] = field(default_factory=lambda: ["main-plus-similar"])
    eval_archs: list[str] = field(default_factory=lambda: list(FAMILIES))
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "results"
    match: dict = field(default_factory=dict)
    kd: dict = field(default_factory=dict)
    train_subset: int | None = None
    workers: int = 1
    profile: str | None = None

    def validate(self) -> "ExperimentConfig":
        for axis in ("ipc", "iterations", "methods", "eval_archs", "seeds", "pool_presets"):
            if not getattr(self, axis):
                raise ConfigError(f"axis {axis!r} is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        bad = set(self.pool_presets) - set(PRESETS)
        if bad:
            raise ConfigError(f"unknown pool presets {sorted(bad)}")
        bad = {a.lower() for a in self.eval_archs} - set(FAMILIES)
        if bad:
            raise ConfigError(f"unknown eval architectures {sorted(bad)}")
        self.eval_archs = [a.lower() for a in self.eval_archs]
        self.match_config(self.ipc[0], self.iterations[0], self.pool_presets[0], self.seeds[0])
        self.kd_config()
        return self

    def match_config(self, ipc, iterations, preset, seed) -> MatchConfig:
        unknown = set(self.match) - {f.name for f in dataclasses.fields(MatchConfig)}
        if unknown:
            raise ConfigError(f"unknown match overrides {sorted(unknown)}")
        base = {k: v for k, v in self.match.items() if k not in ("ipc", "iterations", "pool_preset", "seed")}
        return MatchConfig(**base, ipc=ipc, iterations=iterations, pool_preset=preset, seed=seed).resolved()

    def kd_config(self) -> KDConfig:
        unknown = set(self.kd) - {f.name for f in dataclasses.fields(KDConfig)}
        if unknown:
            raise ConfigError(f"unknown kd overrides {sorted(unknown)}")
        return KDConfig(**self.kd).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
        base = json.loads(json.dumps(PROFILES[profile]))
        for key in ("match", "kd"):
            base[key].update(overrides.pop(key, {}) or {})
        base.update(overrides)
        return cls(**base, profile=profile).validate()


_EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"match", "kd"}
_MATCH_KEYS = {f.name for f in dataclasses.fields(MatchConfig)} - {"ipc", "iterations", "pool_preset", "seed"}
_KD_KEYS = {f.name for f in dataclasses.fields(KDConfig)}


def split_flat(flat: dict) -> dict:
    """Route keys of a flat config document to experiment / match / kd sections."""
    top, match, kd = {}, {}, {}
    for key, value in flat.items():
        if key in _EXPERIMENT_KEYS:
            top[key] = value
        elif key in _MATCH_KEYS:
            match[key] = value
        elif key in _KD_KEYS:
            kd[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    top["match"], top["kd"] = match, kd
    return top


def load_config(path, profile: str | None = None, **overrides) -> ExperimentConfig:
    """Read a flat JSON config; keys absent from it fall back to ``profile`` (or dataclass defaults)."""
    flat = json.loads(Path(path).read_text()) if path else {}
    profile = flat.pop("profile", None) or profile
    sections = split_flat(flat)
    for key in ("match", "kd"):
        sections[key].update(overrides.pop(key, {}) or {})
    sections.update(overrides)
    if profile:
        return ExperimentConfig.from_profile(profile, **sections)
    return ExperimentConfig(**sections).validate()


def config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ResultRecord:
    method: str
    pool_preset: str
    ipc: int
    iterations: int
    eval_arch: str
    seed: int
    accuracy: float | None
    per_rep: list[float | None]
    started: str
    finished: str
    config_hash: str
    archive_path: str
    status: str = "ok"
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.method, self.pool_preset, self.ipc, self.iterations, self.eval_arch, self.seed)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)


def append_record(path, record: ResultRecord) -> None:
    """Append one self-delimited line and flush it to disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+b") as f:
        # isolate a torn fragment from an interrupted write so it cannot swallow this record
        prefix = b""
        if f.tell() > 0:
            f.seek(-1, os.SEEK_END)
            prefix = b"" if f.read(1) == b"\n" else b"\n"
        f.write(prefix + (record.to_json() + "\n").encode())
        f.flush()
        os.fsync(f.fileno())


def load_records(path) -> list[ResultRecord]:
    """Read a records file, discarding an unterminated or unparsable trailing line."""
    path = Path(path)
    if not path.exists():
        return []
    text = path.read_text()
    lines = text.split("\n")
    if not text.endswith("\n"):
        lines = lines[:-1]  # partial last line from an interrupted write
    out = []
    for line in lines:
        if not line.strip():
            continue
        try:
            out.append(ResultRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError):
            log.warning("skipping malformed record line in %s", path)
    return out


def timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _eval_seed(seed: int, arch: str) -> int:
    return seed * 1_000_003 + zlib.crc32(arch.encode())


def _methods_for_preset(methods, preset):
    if preset == "baseline":
        return [m for m in methods if m in ("baseline", "kd")]
    return [m for m in methods if m in ("model_pool", "model_pool_kd")]


def plan_cells(cfg: ExperimentConfig) -> list[tuple]:
    """All (method, preset, ipc, iterations, arch, seed) cells of the grid."""
    cells = []
    for preset in _presets(cfg):
        for method in _methods_for_preset(cfg.methods, preset):
            for ipc in cfg.ipc:
                for k in cfg.iterations:
                    for seed in cfg.seeds:
                        for arch in cfg.eval_archs:
                            cells.append((method, preset, ipc, k, arch, seed))
    return cells


def _presets(cfg: ExperimentConfig) -> list[str]:
    presets = []
    if {"baseline", "kd"} & set(cfg.methods):
        presets.append("baseline")
    if {"model_pool", "model_pool_kd"} & set(cfg.methods):
        presets += [p for p in cfg.pool_presets if p not in presets]
    return presets


def _cell_snapshot(cfg, mcfg: MatchConfig, kcfg: KDConfig, method, arch) -> dict:
    return {"match": mcfg.to_dict(), "kd": kcfg.to_dict(), "method": method, "eval_arch": arch,
            "train_subset": cfg.train_subset}


def _run_unit(cfg: ExperimentConfig, preset: str, ipc: int, seed: int, pending: set,
              train: LabeledDataset, test: LabeledDataset, emit) -> None:
    """Distill one (preset, ipc, seed) run through every requested episode count and evaluate it."""
    out = Path(cfg.out)
    kcfg = cfg.kd_config()
    for k in sorted(cfg.iterations):
        cells = [c for c in pending if c[1] == preset and c[2] == ipc and c[3] == k and c[5] == seed]
        if not cells:
            continue
        mcfg = cfg.match_config(ipc, k, preset, seed)
        run_dir = out / "runs" / f"{preset}_ipc{ipc}_seed{seed}_{mcfg.run_hash()}"
        archive = out / "archives" / f"{preset}_ipc{ipc}_K{k}_seed{seed}_{mcfg.hash()}"
        started = timestamp()
        try:
            if (archive / "manifest.json").exists():
                syn = load_synthetic(archive)
            else:
                syn, trace = distill(train, mcfg, checkpoint_dir=run_dir / "ckpt")
                save_synthetic(syn, archive)
                (archive / "trace.csv").write_bytes((run_dir / "ckpt" / "trace.csv").read_bytes())
        except Exception as err:  # noqa: BLE001 - recorded, run continues
            log.exception("distillation failed for %s ipc=%d K=%d seed=%d", preset, ipc, k, seed)
            for method, _, _, _, arch, _ in cells:
                snap = _cell_snapshot(cfg, mcfg, kcfg, method, arch)
                emit(ResultRecord(method, preset, ipc, k, arch, seed, None, [], started, timestamp(),
                                  config_hash(snap), str(archive), "failed", repr(err)), snap)
            continue

        teacher = None
        for method, _, _, _, arch, _ in sorted(cells, key=lambda c: (c[0], FAMILIES.index(c[4]))):
            snap = _cell_snapshot(cfg, mcfg, kcfg, method, arch)
            started = timestamp()
            try:
                spec = spec_for(arch)
                eseed = _eval_seed(seed, arch)
                if method.endswith("kd"):
                    if teacher is None:
                        teacher = train_teacher(syn, test, kcfg, _eval_seed(seed, "teacher")).model
                    res = train_kd(spec, teacher, syn, test, kcfg, eseed)
                else:
                    res = train_plain(spec, syn, test, kcfg, eseed)
                rec = ResultRecord(method, preset, ipc, k, arch, seed, round(res.accuracy, 4),
                                   [None if math.isnan(a) else round(a, 4) for a in res.per_rep],
                                   started, timestamp(), config_hash(snap), str(archive))
            except Exception as err:  # noqa: BLE001
                log.exception("evaluation failed for %s/%s/%s", method, preset, arch)
                rec = ResultRecord(method, preset, ipc, k, arch, seed, None, [], started, timestamp(),
                                   config_hash(snap), str(archive), "failed", repr(err))
            emit(rec, snap)


def _unit_worker(args):
    cfg, preset, ipc, seed, pending = args
    train, test = _WORKER_DATA
    results = []
    _run_unit(cfg, preset, ipc, seed, pending, train, test, lambda rec, snap: results.append((rec, snap)))
    return results


_WORKER_DATA: tuple | None = None


def run_experiment(cfg: ExperimentConfig, train: LabeledDataset | None = None,
                   test: LabeledDataset | None = None) -> list[ResultRecord]:
    """Run every missing cell of the grid; returns all records of the grid (old and new).

    Cells already present in ``<out>/records.jsonl`` with status ``ok`` are skipped.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    records_path = out / "records.jsonl"
    done = {r.key for r in load_records(records_path) if r.status == "ok"}
    cells = plan_cells(cfg)
    pending = {c for c in cells if c not in done}
    log.info("%d cells planned, %d pending", len(cells), len(pending))

    if pending:
        if train is None or test is None:
            train, test = load_cifar10(cfg.dataset_root)
        if cfg.train_subset:
            train = train.stratified_subset(cfg.train_subset)

    configs_dir = out / "configs"

    def emit(rec: ResultRecord, snap: dict) -> None:
        configs_dir.mkdir(exist_ok=True)
        (configs_dir / f"{rec.config_hash}.json").write_text(json.dumps(snap, indent=1, sort_keys=True))
        append_record(records_path, rec)
        log.info("record %s -> %s", rec.key, rec.accuracy if rec.status == "ok" else rec.status)

    units = sorted({(c[1], c[2], c[5]) for c in pending})
    if cfg.workers > 1 and len(units) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        global _WORKER_DATA
        _WORKER_DATA = (train, test)
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(cfg.workers, mp_context=ctx) as ex:
            jobs = [(cfg, p, i, s, {c for c in pending if (c[1], c[2], c[5]) == (p, i, s)}) for p, i, s in units]
            for results in ex.map(_unit_worker, jobs):
                for rec, snap in results:
                    emit(rec, snap)
        _WORKER_DATA = None
    else:
        for preset, ipc, seed in units:
            _run_unit(cfg, preset, ipc, seed, pending, train, test, emit)

    wanted = set(cells)
    latest = {}
    for r in load_records(records_path):
        if r.key in wanted and (r.status == "ok" or r.key not in latest or latest[r.key].status != "ok"):
            latest[r.key] = r
    return [latest[c] for c in cells if c in latest]


# ---------------------------------------------------------------- reports

def _mean_cells(records, row_key):
    acc = defaultdict(list)
    for r in records:
        if r.status == "ok" and r.accuracy is not None:
            acc[(row_key(r), r.eval_arch)].append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def _table_rows(records, layout):
    if layout == "table5":
        recs = [r for r in records if r.method == "model_pool"]
        order = {p: i for i, p in enumerate(APPENDIX_PRESETS)}
        row_key = lambda r: (r.ipc, r.iterations, r.pool_preset)  # noqa: E731
        label = lambda key: PRESET_LABELS.get(key[2], key[2])  # noqa: E731
        sort_key = lambda key: (key[0], key[1], order.get(key[2], 99), key[2])  # noqa: E731
    else:
        recs = list(records)
        order = {m: i for i, m in enumerate(METHODS)}
        default_preset = {"baseline": "baseline", "kd": "baseline"}

        def row_key(r):
            return (r.ipc, r.iterations, r.method, r.pool_preset)

        def label(key):
            text = METHOD_LABELS.get(key[2], key[2])
            if key[3] != default_preset.get(key[2], "main-plus-similar"):
                text += f" [{key[3]}]"
            return text

        sort_key = lambda key: (key[0], key[1], order.get(key[2], 99), key[3])  # noqa: E731
    means = _mean_cells(recs, row_key)
    rows = sorted({k[0] for k in means} | {row_key(r) for r in recs}, key=sort_key)
    archs = [a for a in FAMILIES if any(r.eval_arch == a for r in recs)]
    return rows, archs, means, label


def report(records, layout: str = "table4") -> str:
    """Render records as a markdown table (``table4``/``table5``) or CSV (``csv``).

    Cells are seed means with two decimals; missing cells are ``-``; within each
    (ipc, iterations) block the best value of every column is bold.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    if layout not in ("table4", "table5", "csv"):
        raise ValueError(f"unknown layout {layout!r}")
    rows, archs, means, label = _table_rows(records, "table5" if layout == "table5" else "table4")
    if layout == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ipc", "iteration", "method", "pool_preset", *[DISPLAY_NAMES[a] for a in archs]])
        for row in rows:
            vals = [f"{means[(row, a)]:.2f}" if (row, a) in means else "-" for a in archs]
            w.writerow([row[0], row[1], row[2], row[3], *vals])
        return buf.getvalue()

    best = {}
    for row in rows:
        for a in archs:
            if (row, a) in means:
                block = (row[0], row[1], a)
                best[block] = max(best.get(block, -1.0), round(means[(row, a)], 2))
    block_sizes = defaultdict(int)
    for row in rows:
        block_sizes[(row[0], row[1])] += 1

    header = ["ipc", "iteration", "method", *[DISPLAY_NAMES[a] for a in archs]]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = []
        for a in archs:
            if (row, a) not in means:
                cells.append("-")
                continue
            text = f"{means[(row, a)]:.2f}"
            if block_sizes[(row[0], row[1])] > 1 and round(means[(row, a)], 2) == best[(row[0], row[1], a)]:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join([str(row[0]), str(row[1]), label(row), *cells]) + " |")
    return "\n".join(lines) + "\n"


def plot_bars(records, out_dir, layout: str = "table4") -> list[Path]:
    """One grouped bar chart per (ipc, iterations) block; returns the written PNG paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, archs, means, label = _table_rows(list(records), layout)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for block in sorted({(r[0], r[1]) for r in rows}):
        block_rows = [r for r in rows if (r[0], r[1]) == block]
        fig, ax = plt.subplots(figsize=(1.4 * len(archs) + 2, 3.5))
        width = 0.8 / len(block_rows)
        x = np.arange(len(archs))
        for i, row in enumerate(block_rows):
            vals = [means.get((row, a), np.nan) for a in archs]
            ax.bar(x + i * width, vals, width, label=label(row))
        ax.set_xticks(x + width * (len(block_rows) - 1) / 2, [DISPLAY_NAMES[a] for a in archs])
        ax.set_ylabel("test accuracy (%)")
        ax.set_title(f"ipc={block[0]}, iterations={block[1]}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{layout}_ipc{block[0]}_it{block[1]}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
