"""Command-line interface.

Artifacts live in the ``--out`` directory and are picked up by later steps::

    tlguard train-teacher  --config exp.toml --out run/   # run/teacher.tlga
    tlguard make-student   --config exp.toml --out run/   # run/student.tlga
    tlguard build-registry --config exp.toml --out run/   # run/registry.tlga
    tlguard attack         --config exp.toml --out run/   # run/attacks.json, run/attacks.npz
    tlguard defend-eval    --config exp.toml --out run/   # run/report.{csv,json,svg}
    tlguard adaptive-eval  --config exp.toml --out run/   # run/adaptive.{csv,json,svg}
    tlguard report         --out run/ [--input run/report.json]

Missing upstream artifacts are built on the fly.  Exit codes: 0 success,
2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import store
from .config import ConfigError, load_config
from .data import ingest_dataset
from .defense import VerdictTable
from .experiment import (Artifacts, Corpus, StageError, adaptive_eval, build_registry, build_student,
                         build_teacher, load_task, nontargeted_corpus, run_experiment, targeted_corpus)
from .report import emit_report, load_report, write_records

log = logging.getLogger("tlguard")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

TEACHER, STUDENT, REGISTRY = "teacher.tlga", "student.tlga", "registry.tlga"


def _artifacts(cfg, out, need=("teacher", "student", "registry")):
    """Load whatever exists in ``out`` and build (and save) what is missing."""
    art = Artifacts()
    art.dataset, art.subset = load_task(cfg)
    paths = {"teacher": out / TEACHER, "student": out / STUDENT, "registry": out / REGISTRY}
    for name in need:
        p = paths[name]
        if p.exists():
            log.info("loading %s", p)
            setattr(art, name, store.load(p))
            continue
        log.info("building %s", name)
        if name == "teacher":
            art.teacher = build_teacher(cfg, art.dataset)
        elif name == "student":
            art.student = build_student(cfg, art.teacher, art.subset)
        else:
            art.registry = build_registry(cfg, art.teacher, art.subset,
                                          snapshots=cfg.sweep.axis == "iteration_count")
        store.save(getattr(art, name), p, teacher=art.teacher)
    return art


def cmd_train_teacher(cfg, out, args):
    ds, _ = load_task(cfg)
    teacher = build_teacher(cfg, ds)
    n = store.save(teacher, out / TEACHER)
    test = ds.test
    acc = float(np.mean(teacher.predict(test.images) == test.labels))
    print(json.dumps({"teacher": str(out / TEACHER), "bytes": n, "test_accuracy": acc}))


def cmd_make_student(cfg, out, args):
    art = _artifacts(cfg, out, ("teacher",))
    student = build_student(cfg, art.teacher, art.subset)
    store.save(student, out / STUDENT)
    test = art.subset.test
    print(json.dumps({"student": str(out / STUDENT),
                      "test_accuracy": float(np.mean(student.predict(test.images) == test.labels))}))


def cmd_build_registry(cfg, out, args):
    art = _artifacts(cfg, out, ("teacher",))
    reg = build_registry(cfg, art.teacher, art.subset, snapshots=cfg.sweep.axis == "iteration_count")
    n = store.save(reg, out / REGISTRY, teacher=art.teacher)
    mem = store.memory_report(reg, art.teacher)
    print(json.dumps({"registry": str(out / REGISTRY), "bytes": n, "differentiators": len(reg),
                      "coverage": reg.coverage, "memory": mem}))


def _imported_corpus(directory, label_space):
    """PNG folders named after the source class; success means leaving that class."""
    ds = ingest_dataset(directory)
    names = list(label_space)
    try:
        src = np.array([names.index(ds.class_names[l - 1]) + 1 for l in ds.labels])
    except ValueError as e:
        raise ConfigError(f"imported class folder not in the student's label space: {e}") from e
    n = len(src)
    nan = np.full(n, np.nan)
    return Corpus(ds.images, src, np.zeros(n, int), np.arange(n), np.full(n, -1), nan, nan,
                  np.ones(n, bool), False)


def cmd_attack(cfg, out, args):
    art = _artifacts(cfg, out)
    ens = cfg.ensemble.build(cfg.seed)
    if args.import_dir:
        corpora = {"nontargeted": _imported_corpus(args.import_dir, art.student.label_space)}
    else:
        test = art.subset.test
        corpora = {"targeted": targeted_corpus(art.student.network, test, cfg)}
        if cfg.attack.nontargeted_sources:
            corpora["nontargeted"] = nontargeted_corpus(art.student.network, test, cfg)
    records, arrays = [], {}
    for kind, c in corpora.items():
        table = VerdictTable(art.student, art.registry, c.images)
        defended = [p.label for p in table.two_phase(ens)]
        records += c.records(table.student, defended)
        arrays[kind] = c.images
    write_records(records, out / "attacks.json")
    np.savez_compressed(out / "attacks.npz", **arrays)
    summary = {}
    for kind in corpora:
        rs = [r for r in records if r["mode"] == kind]
        if kind == "targeted":
            hit = [r["prediction_undefended"] == r["target_label"] for r in rs]
            res = [r["prediction_defended"] == r["target_label"] for r in rs]
        else:
            hit = [r["prediction_undefended"] != r["source_label"] for r in rs]
            res = [r["prediction_defended"] not in (0, r["source_label"]) for r in rs]
        summary[kind] = {"count": len(rs), "undefended_success": float(np.mean(hit)),
                         "residual_success": float(np.mean(res))}
    print(json.dumps(summary))


def cmd_defend_eval(cfg, out, args):
    art = _artifacts(cfg, out)
    rep = run_experiment(cfg, art)
    rep.extra["memory"] = store.memory_report(art.registry, art.teacher)
    paths = emit_report(rep, out, formats=_formats(cfg), stem="report")
    print(json.dumps({"written": [str(p) for p in paths]}))


def cmd_adaptive_eval(cfg, out, args):
    art = _artifacts(cfg, out)
    rep = adaptive_eval(cfg, art)
    paths = emit_report(rep, out, formats=_formats(cfg), stem="adaptive")
    print(json.dumps({"written": [str(p) for p in paths]}))


def cmd_report(cfg, out, args):
    src = Path(args.input) if args.input else out / "report.json"
    if not src.exists():
        raise ConfigError(f"no report at {src}")
    rep = load_report(src)
    paths = emit_report(rep, out, formats=_formats(cfg), stem=src.stem)
    print(json.dumps({"written": [str(p) for p in paths]}))


def _formats(cfg):
    return ("csv", "json", "svg") if cfg.report.svg else ("csv", "json")


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "make-student": cmd_make_student,
    "build-registry": cmd_build_registry,
    "attack": cmd_attack,
    "defend-eval": cmd_defend_eval,
    "adaptive-eval": cmd_adaptive_eval,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="tlguard", description="Pruned-differentiator defense experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML experiment configuration")
        s.add_argument("--seed", type=int, help="override the configured seed")
        s.add_argument("--out", default=".", help="artifact and report directory")
        if name == "attack":
            s.add_argument("--import", dest="import_dir",
                           help="evaluate external adversarial PNGs (one folder per source class)")
        if name == "report":
            s.add_argument("--input", help="report JSON to re-render (default OUT/report.json)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, store.ArchiveError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
