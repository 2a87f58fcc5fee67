"""Command-line entry point: ``xctbench <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .autodiff import NumericError
from .phantom import PhantomError
from .tomo import ScanError

log = logging.getLogger("xctbench")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _suite_seeds(spec):
    return {e["name"]: {"phantom": e["phantom"].get("seed", 0), "scan": e["scan"].get("seed", 0)}
            for e in spec["datasets"]}


def cmd_generate(args):
    from . import pipeline as pl

    spec = pl.default_suite_spec() if args.spec is None else _read_json(args.spec)
    pl.generate_phantoms(spec, args.out)
    pl.write_manifest(Path(args.out) / "manifest_generate.json", "generate", spec, _suite_seeds(spec))


def cmd_scan(args):
    from . import pipeline as pl

    suite = pl.scan_phantoms(args.suite, n_workers=args.workers)
    spec = json.loads((Path(args.suite) / "suite_spec.json").read_text())
    pl.write_manifest(Path(args.suite) / "manifest_scan.json", "scan", spec, _suite_seeds(spec),
                      {"frechet_vs_train": {n: d.frechet.get("train") for n, d in suite.datasets.items()}})


def cmd_train(args):
    from . import pipeline as pl

    cfg = {} if args.config is None else _read_json(args.config)
    settings = pl.settings_from_dict(cfg)
    suite = pl.DatasetSuite.load(args.suite)
    model = pl.train_class_models(suite, args.method, settings=settings)
    model.save(args.out)
    pl.write_manifest(Path(args.out) / "manifest_train.json", f"train {args.method}",
                      {"method": args.method, **cfg}, {"train": settings.seed}, {"provenance": model.provenance})


def _load_models(entries):
    from . import pipeline as pl

    models = {}
    for entry in entries:
        name, _, path = entry.partition("=")
        if not path:
            raise ConfigError(f"model must be given as id=DIR, got {entry!r}")
        d = Path(path)
        if (d / "model_set.json").exists():
            models[name] = pl.ClassModelSet.load(d)
        elif (d / "unet25.json").exists():
            models[name] = pl.BaselineSegmenter.load(d)
        else:
            raise ConfigError(f"no model found in {d}")
    return models


def cmd_finetune(args):
    from . import pipeline as pl

    suite = pl.DatasetSuite.load(args.suite)
    base = pl.ClassModelSet.load(args.models)
    cfg = pl.FinetuneConfig(**({} if args.config is None else _read_json(args.config)))
    shots = pl.slices_of(suite[args.few_shot])
    out = pl.refinetune_and_compare(base, shots, suite, tuple(args.sizes), tuple(args.target), cfg,
                                    classes=args.classes)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    for n, rep in out.items():
        (Path(args.out) / f"forgetting_{n}.json").write_text(json.dumps(rep.to_dict(), indent=2))
    pl.write_manifest(Path(args.out) / "manifest_finetune.json", "finetune",
                      {"sizes": args.sizes, "few_shot": args.few_shot, "target": args.target,
                       "finetune": vars(cfg)}, {"finetune": cfg.seed})


def cmd_evaluate(args):
    from . import pipeline as pl

    suite = pl.DatasetSuite.load(args.suite)
    models = _load_models(args.model)
    _, summary = pl.run_experiment(suite, models, args.out, args.datasets)
    pl.write_manifest(Path(args.out) / "manifest_evaluate.json", "evaluate",
                      {"models": args.model, "datasets": args.datasets}, {}, {"summary": summary})


def cmd_report(args):
    from . import metrics as mt
    from . import pipeline as pl

    src = Path(args.reports)
    files = sorted(p for p in src.glob("*__*__*.json"))
    if not files:
        raise ConfigError(f"no reports in {src}")
    reports = [mt.MetricsReport.from_dict(json.loads(p.read_text())) for p in files]
    bad = [p.name for p, r in zip(files, reports) if not mt.report_is_consistent(r)]
    if bad:
        raise NumericError(f"reports not recomputable from per-layer entries: {bad}")
    out = Path(args.out)
    summary = pl.summarize(reports)
    pl.write_reports(reports, summary, out)
    (out / "plot_data.json").write_text(json.dumps(pl.plot_data(summary), indent=2))
    pl.write_manifest(out / "manifest_report.json", "report", {"reports": [p.name for p in files]}, {})


def build_parser():
    p = argparse.ArgumentParser(prog="xctbench", description="Synthetic XCT defect segmentation benchmark.")
    p.add_argument("--version", action="version", version=f"xctbench {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate phantoms for a dataset suite")
    g.add_argument("--spec", help="suite spec JSON (default: built-in desk-scale suite)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("scan", help="simulate acquisitions and reconstructions for a generated suite")
    s.add_argument("--suite", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_scan)

    t = sub.add_parser("train", help="train a baseline U-Net or per-class adapter models")
    t.add_argument("--suite", required=True)
    t.add_argument("--method", choices=("baseline_unet", "adapter"), default="adapter")
    t.add_argument("--config", help="training settings JSON")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="few-shot re-fine-tuning with forgetting comparison")
    f.add_argument("--suite", required=True)
    f.add_argument("--models", required=True, help="adapter model-set directory")
    f.add_argument("--few-shot", required=True, help="suite dataset holding the few-shot images")
    f.add_argument("--target", nargs="*", default=[], help="datasets forming the target-OoD group")
    f.add_argument("--sizes", nargs="+", type=int, default=[9, 15])
    f.add_argument("--classes", nargs="*", default=None)
    f.add_argument("--config", help="fine-tuning settings JSON")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="evaluate models on the suite's test datasets")
    e.add_argument("--suite", required=True)
    e.add_argument("--model", nargs="+", required=True, help="id=DIR entries")
    e.add_argument("--datasets", nargs="*", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="aggregate report JSONs into CSV/JSON and plot data")
    r.add_argument("--reports", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import PipelineError

    try:
        args.func(args)
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, PhantomError, ScanError, PipelineError, FileNotFoundError, KeyError, TypeError,
            ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
