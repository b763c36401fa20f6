"""Command-line entry point: ``distillpool <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from .data import load_cifar10, load_synthetic, save_synthetic
from .errors import DistillPoolError
from .harness import (METHODS, ResultRecord, timestamp, append_record, config_hash, load_config, load_records,
                      plot_bars, report, run_experiment)
from .kd import KDConfig, train_kd, train_plain, train_teacher
from .match import MatchConfig, distill
from .models import FAMILIES, ModelInstance, ModelSpec, build_model, spec_for
from .pool import PRESETS, make_pool, sample_spec

DEFAULT_DATA = "data/cifar-10-batches-bin"


def _flag_type(f: dataclasses.Field):
    t = str(f.type)
    if "tuple" in t:
        return lambda s: tuple(int(x) for x in s.split(",") if x)
    if "float" in t:
        return float
    if "int" in t:
        return int
    return str


def _add_dataclass_flags(parser, cls, skip=()):
    group = parser.add_argument_group(cls.__name__)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"{cls.__name__}.{f.name}",
                           type=_flag_type(f), default=None)


def _collect(args, cls) -> dict:
    prefix = cls.__name__ + "."
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def _save_teacher(model: ModelInstance, path) -> None:
    torch.save({"spec": model.spec.to_dict(), "init_seed": model.init_seed,
                "state_dict": model.module.state_dict()}, path)


def _load_teacher(path) -> ModelInstance:
    state = torch.load(path, weights_only=True)
    model = build_model(ModelSpec.from_dict(state["spec"]), state["init_seed"])
    model.module.load_state_dict(state["state_dict"])
    return model


def cmd_distill(args) -> int:
    train, _ = load_cifar10(args.data)
    if args.train_subset:
        train = train.stratified_subset(args.train_subset)
    cfg = MatchConfig(**_collect(args, MatchConfig)).resolved()
    syn, trace = distill(train, cfg, checkpoint_dir=args.checkpoint_dir)
    out = save_synthetic(syn, args.out)
    (out / "trace.csv").write_text("episode,sampled_spec,match_loss\n" + "".join(
        f"{t.episode},{t.sampled_spec},{t.match_loss!r}\n" for t in trace))
    print(json.dumps({"archive": str(out), "config_hash": cfg.hash(),
                      "final_match_loss": trace[-1].match_loss}))
    return 0


def _eval_records(args, kd_mode: bool) -> int:
    syn = load_synthetic(args.archive)
    _, test = load_cifar10(args.data)
    kcfg = KDConfig(**_collect(args, KDConfig)).validate()
    prov = syn.provenance
    preset = prov.get("pool_preset", "baseline")
    teacher = None
    if kd_mode:
        if args.teacher == "train":
            res = train_teacher(syn, test, kcfg, args.seed)
            teacher = res.model
            print(json.dumps({"teacher_accuracy": res.accuracy}))
            if args.save_teacher:
                _save_teacher(teacher, args.save_teacher)
        else:
            teacher = _load_teacher(args.teacher)
    method = args.method or ("model_pool_kd" if kd_mode and preset != "baseline" else
                             "kd" if kd_mode else "model_pool" if preset != "baseline" else "baseline")
    failed = False
    for arch in args.archs:
        spec = spec_for(arch)
        snap = {"kd": kcfg.to_dict(), "method": method, "eval_arch": arch, "archive_provenance": prov}
        started = timestamp()
        try:
            res = (train_kd(spec, teacher, syn, test, kcfg, args.seed) if kd_mode
                   else train_plain(spec, syn, test, kcfg, args.seed))
            acc, per_rep, status, error = (round(res.accuracy, 4),
                                           [None if np.isnan(a) else round(a, 4) for a in res.per_rep], "ok", None)
        except DistillPoolError as err:
            acc, per_rep, status, error = None, [], "failed", repr(err)
            failed = True
        rec = ResultRecord(method, preset, syn.ipc, int(prov.get("iterations", 0)), arch, args.seed, acc, per_rep,
                           started, timestamp(), config_hash(snap), str(args.archive), status, error)
        print(rec.to_json())
        if args.records:
            append_record(args.records, rec)
    return 1 if failed else 0


def cmd_eval(args) -> int:
    return _eval_records(args, kd_mode=False)


def cmd_kd_eval(args) -> int:
    return _eval_records(args, kd_mode=True)


def cmd_sweep(args) -> int:
    overrides = {"seeds": args.seed, "out": args.out,
                 "match": _collect(args, MatchConfig), "kd": _collect(args, KDConfig)}
    for key in ("dataset_root", "ipc", "iterations", "methods", "pool_presets", "eval_archs",
                "train_subset", "workers"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, profile=args.profile, **overrides)
    records = run_experiment(cfg)
    print(report(records, "table4"))
    failed = [r for r in records if r.status != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        records += load_records(path)
    text = report(records, args.layout)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    if args.plots:
        for p in plot_bars(records, args.plots, "table5" if args.layout == "table5" else "table4"):
            print(f"wrote {p}", file=sys.stderr)
    return 0


def cmd_pool_sample(args) -> int:
    pool = make_pool(args.preset, args.main_prob)
    rng = np.random.default_rng(args.seed)
    counts = Counter(sample_spec(pool, rng).label for _ in range(args.n))
    summary = {"preset": args.preset, "n": args.n,
               "frequencies": {k: v / args.n for k, v in counts.most_common()},
               "pool": pool.to_dict()}
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distillpool", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="run one distillation and write an archive")
    d.add_argument("--data", default=DEFAULT_DATA)
    d.add_argument("--out", required=True, help="archive directory")
    d.add_argument("--checkpoint-dir", default=None)
    d.add_argument("--train-subset", type=int, default=None)
    _add_dataclass_flags(d, MatchConfig)
    d.set_defaults(func=cmd_distill)

    for name, func, helptext in (("eval", cmd_eval, "retrain architectures on an archive"),
                                 ("kd-eval", cmd_kd_eval, "retrain students against a ConvNet teacher")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--archive", required=True)
        e.add_argument("--data", default=DEFAULT_DATA)
        e.add_argument("--archs", nargs="+", default=[f for f in FAMILIES if f != "convnet"], choices=FAMILIES)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--method", choices=METHODS, default=None)
        e.add_argument("--records", default=None, help="append records to this JSONL file")
        if name == "kd-eval":
            e.add_argument("--teacher", default="train", help="teacher checkpoint path, or 'train'")
            e.add_argument("--save-teacher", default=None)
        _add_dataclass_flags(e, KDConfig)
        e.set_defaults(func=func)

    s = sub.add_parser("sweep", help="run the full experiment grid")
    s.add_argument("--config", default=None, help="flat JSON config file")
    s.add_argument("--profile", choices=("desk", "paper"), required=True)
    s.add_argument("--seed", type=int, nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset-root", default=None)
    s.add_argument("--ipc", type=int, nargs="+", default=None)
    s.add_argument("--iterations", type=int, nargs="+", default=None)
    s.add_argument("--methods", nargs="+", choices=METHODS, default=None)
    s.add_argument("--pool-presets", nargs="+", choices=PRESETS, default=None)
    s.add_argument("--eval-archs", nargs="+", choices=FAMILIES, default=None)
    s.add_argument("--train-subset", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    _add_dataclass_flags(s, MatchConfig, skip=("ipc", "iterations", "pool_preset", "seed"))
    _add_dataclass_flags(s, KDConfig)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="render records as tables and plots")
    r.add_argument("--records", nargs="+", required=True)
    r.add_argument("--layout", choices=("table4", "table5", "csv"), default="table4")
    r.add_argument("--out", default=None)
    r.add_argument("--plots", default=None, help="directory for bar charts")
    r.set_defaults(func=cmd_report)

    ps = sub.add_parser("pool-sample", help="empirical selection frequencies of a pool preset")
    ps.add_argument("--preset", choices=PRESETS, required=True)
    ps.add_argument("-n", type=int, default=10000)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--main-prob", type=float, default=0.9)
    ps.set_defaults(func=cmd_pool_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
