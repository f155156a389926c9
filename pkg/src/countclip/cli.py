"""Command line entry point: ``countclip <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import curation
from .captions import COUNTS
from .config import BUNDLED_PREFIX, bundled_configs, default_cache_dir, load_run_config
from .data import Sample, dump_json, read_jsonl, write_jsonl
from .evaluator import EvalReport, RunResult, compare_runs, evaluate, render_confusion
from .frequencies import ClassFrequencyTable, compute_class_frequencies
from .lambdas import SCHEMES, LambdaScheme, LambdaTable

log = logging.getLogger("countclip")


class CLIError(Exception):
    pass


def _fixture(name: str) -> Path:
    return Path(str(resources.files("countclip") / "data" / "fixtures" / name))


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"file not found: {p}")
    return p


def _image_loader(cache_dir, fetch_kwargs=None, base_dir=None):
    """Loader for manifest rows: inline ``features`` (toy backend) or a fetched URL.

    Relative local paths resolve against ``base_dir``.
    """
    fetch_kwargs = fetch_kwargs or {}

    def load(item: Sample):
        if "features" in item.meta:
            return np.asarray(item.meta["features"], dtype=np.float32)
        url = item.meta.get("url")
        if not url:
            raise curation.FetchError("no_url", True)
        return curation.fetch_image(curation.resolve_url(url, base_dir), cache_dir, **fetch_kwargs)

    return load


def _rows_to_samples(rows) -> list[Sample]:
    samples = []
    for row in rows:
        if row is None:
            continue
        meta = {k: v for k, v in row.items() if k not in ("caption", "count", "id")}
        samples.append(Sample(caption=row["caption"], count=row.get("count"), id=row.get("id"), meta=meta))
    return samples


def _sample_rows(samples) -> list[dict]:
    rows = []
    for s in samples:
        row = {"id": s.id, "caption": s.caption}
        if s.count is not None:
            row["count"] = s.count
        if isinstance(s.image, np.ndarray):
            row["features"] = [float(v) for v in s.image]
        row.update({k: v for k, v in s.meta.items() if k not in row})
        rows.append(row)
    return rows


# -- curate / audit / frequencies -------------------------------------------


def cmd_curate(args) -> int:
    corpus = _require_file(args.corpus)
    if args.detector == "stub":
        detector = curation.StubDetector(_require_file(args.detections or _fixture("detections.json")))
    else:
        detector = curation.YoloDetector(args.weights)
    report = curation.build_counting_set(
        corpus, detector, args.out, args.cache_dir,
        confidence_threshold=args.confidence, workers=args.workers,
        fetch_kwargs={"retries": args.retries, "backoff": args.backoff},
    )
    print(report.to_text(), end="")
    curation.write_report(report, args.report or Path(args.out).with_suffix(".report"))
    return 0


def cmd_audit(args) -> int:
    manifest = _require_file(args.manifest)
    rows = [r for r in read_jsonl(manifest) if r is not None]
    if not rows:
        print("warning: manifest is empty; nothing to audit", file=sys.stderr)
    report = curation.audit_benchmark(
        rows, args.cache_dir, workers=args.workers, base_dir=manifest.parent,
        fetch_kwargs={"retries": args.retries, "backoff": args.backoff},
    )
    print(report.to_text(), end="")
    if args.report:
        curation.write_report(report, args.report)
    return 0


def _plot_frequencies(table: ClassFrequencyTable, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = np.array([table[c] for c in COUNTS], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log1 = np.where(counts > 0, np.log2(counts), np.nan)
        log2 = np.where(counts > 1, np.log2(log1), np.nan)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, values, title in zip(
        axes, (counts, log1, log2), ("class frequency", "log2(frequency)", "log2(log2(frequency))")
    ):
        ax.bar(COUNTS, np.nan_to_num(values), color="tab:blue")
        ax.set_xticks(COUNTS)
        ax.set_xlabel("count")
        ax.set_title(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={".pdf": {"CreationDate": None}, ".svg": {"Date": None}}.get(path.suffix))
    plt.close(fig)


def cmd_frequencies(args) -> int:
    rows = [r for r in read_jsonl(_require_file(args.manifest)) if r is not None]
    try:
        table = compute_class_frequencies(rows)
    except ValueError as exc:
        raise CLIError(f"{args.manifest}: {exc}") from exc
    print("count  n_class  " + "  ".join(f"{s:>8}" for s in SCHEMES))
    tables = {s: LambdaTable.build(LambdaScheme(s, args.lambda_0), table) for s in SCHEMES}
    for c in COUNTS:
        print(f"{c:>5}  {table[c]:>7}  " + "  ".join(f"{tables[s][c]:>8.4f}" for s in SCHEMES))
    print(f"total  {table.n_total:>7}")
    for s in SCHEMES:
        if tables[s].flags:
            print(f"note: {s}: {tables[s].flags}")
    if args.out:
        dump_json(args.out, {"frequencies": table.to_dict(), "lambdas": {s: t.to_dict() for s, t in tables.items()}})
    if args.plot:
        _plot_frequencies(table, Path(args.plot))
    return 0


# -- train ------------------------------------------------------------------


def _load_pools(run, rng_seed):
    """``(general, counting, validation, load_image, frequencies, backend)`` for a run config."""
    from .backends import build_backend, make_synthetic_task
    from .trainer import split_validation

    data = run.data
    if "synthetic" in data:
        syn = dict(data.get("synthetic") or {})
        syn.setdefault("seed", rng_seed)
        task = make_synthetic_task(**syn)
        spec = {"dim": 32, "seed": rng_seed, **run.backend}
        spec.update(kind="toy", vocab=task.vocab, feature_dim=task.feature_dim)
        return task.general_pool, task.counting_pool, task.validation, None, None, build_backend(spec)

    def load_manifest(path):
        path = _require_file(path)
        load_image = _image_loader(run.cache_dir, base_dir=path.resolve().parent)
        samples = []
        for s in _rows_to_samples(read_jsonl(path)):
            try:
                s.image = load_image(s)
            except curation.FetchError as exc:
                log.warning("skipping %s: %s", s.id, exc.reason)
                continue
            samples.append(s)
        return samples

    counting = load_manifest(data["counting_manifest"])
    general = load_manifest(data["general_manifest"]) if data.get("general_manifest") else []
    load_image = None
    if data.get("validation_manifest"):
        path = _require_file(data["validation_manifest"])
        validation = _rows_to_samples(read_jsonl(path))
        load_image = _image_loader(run.cache_dir, base_dir=path.resolve().parent)
    else:
        counting, validation = split_validation(counting, run.training.validation_fraction, run.training.seed)
    frequencies = None
    if data.get("frequencies"):
        frequencies = ClassFrequencyTable.from_dict(json.loads(Path(data["frequencies"]).read_text())["frequencies"])
    return general, counting, validation, load_image, frequencies, build_backend(run.backend)


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CLIError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def cmd_train(args) -> int:
    from .trainer import fit

    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    if args.out:
        overrides["training.checkpoint_dir"] = args.out
    try:
        run = load_run_config(args.config, overrides)
    except (ValueError, TypeError) as exc:
        raise CLIError(f"invalid config {args.config}: {exc}") from exc
    if not run.training.checkpoint_dir:
        raise CLIError("no output directory: set training.checkpoint_dir or pass --out")
    out = Path(run.training.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(run.to_dict(), fh, sort_keys=True)

    general, counting, validation, load_image, frequencies, backend = _load_pools(run, run.training.seed)
    write_jsonl(out / "validation.jsonl", _sample_rows(validation))
    result = fit(backend, general, counting, validation, run.training, load_image=load_image, frequencies=frequencies)

    summary = {
        "name": run.name,
        "final_step": result.final.step,
        "final_accuracy": result.final.validation_accuracy,
        "best_step": result.best.step,
        "best_accuracy": result.best.validation_accuracy,
    }
    dump_json(out / "run_summary.json", summary)
    table = compare_runs(
        [RunResult(run.name, result.final.validation_accuracy, result.best.validation_accuracy)]
    )
    print(table.to_text(), end="")
    return 0


# -- eval / plot / compare --------------------------------------------------


def _load_model(ref: str, which: str):
    from .backends import HFClipBackend
    from .trainer import Checkpoint

    if ref.startswith("pretrained:"):
        return HFClipBackend(ref.split(":", 1)[1] or "openai/clip-vit-base-patch32")
    path = Path(ref)
    if (path / "checkpoint.json").is_file():
        return Checkpoint.from_dir(path).load_backend()
    marker = path / f"{'best' if which == 'best' else 'latest'}.json"
    if marker.is_file():
        return Checkpoint.from_dir(path / json.loads(marker.read_text())["path"]).load_backend()
    raise CLIError(f"not a checkpoint or run directory: {path}")


def cmd_eval(args) -> int:
    backend = _load_model(args.model, args.which)
    benchmark = _require_file(args.benchmark)
    rows = [r for r in read_jsonl(benchmark) if r is not None]
    try:
        loader = _image_loader(
            args.cache_dir, {"retries": args.retries, "backoff": args.backoff}, benchmark.resolve().parent
        )
        report = evaluate(backend, _rows_to_samples(rows), loader)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report.to_dict())
    render_confusion(report, out / f"confusion{args.plot_format}", title=args.title)
    print(f"accuracy {100 * report.accuracy:.2f}% ({report.n_evaluated} evaluated, {report.n_skipped} skipped)")
    return 0


def _read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(_require_file(path).read_text()))


def cmd_plot(args) -> int:
    report = _read_report(args.report)
    render_confusion(report, args.out, title=args.title)
    print(f"wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    runs = []
    for entry in args.runs:
        if "=" in entry:
            name, paths = entry.split("=", 1)
            final, _, best = paths.partition(":")
            runs.append(RunResult(name, _read_report(final), _read_report(best) if best else None))
            continue
        summary = json.loads(_require_file(Path(entry) / "run_summary.json").read_text())
        runs.append(RunResult(summary["name"], summary["final_accuracy"], summary["best_accuracy"]))
    table = compare_runs(runs)
    print(table.to_text(), end="")
    if args.out:
        Path(args.out).write_text(table.to_json(), encoding="utf-8")
    return 0


# -- parser -----------------------------------------------------------------


def _fetch_flags(p):
    p.add_argument("--cache-dir", default=default_cache_dir(), help="image cache (env COUNTCLIP_CACHE_DIR)")
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0, help="first retry delay in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countclip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="build a counting set from an image-caption manifest")
    p.add_argument("corpus", help="input manifest (JSON lines with id, url, caption)")
    p.add_argument("--out", required=True, help="output counting-set manifest")
    p.add_argument("--detector", choices=("stub", "yolo"), default="stub")
    p.add_argument("--detections", help="canned detections for the stub detector")
    p.add_argument("--weights", default="yolov8n.pt", help="weights for the live detector")
    p.add_argument("--confidence", type=float, default=curation.DEFAULT_CONFIDENCE)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", help="report path stem (.txt and .json are written)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; curation is deterministic")
    _fetch_flags(p)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("audit", help="check availability and class balance of a benchmark manifest")
    p.add_argument("manifest")
    p.add_argument("--report", help="report path stem (.txt and .json are written)")
    p.add_argument("--workers", type=int, default=4)
    _fetch_flags(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("frequencies", help="class frequencies and lambda tables of a counting set")
    p.add_argument("manifest")
    p.add_argument("--lambda-0", type=float, default=1.0)
    p.add_argument("--out", help="JSON output")
    p.add_argument("--plot", help="frequency / log / log-log bar plots")
    p.set_defaults(func=cmd_frequencies)

    p = sub.add_parser("train", help="fine-tune from a run config")
    p.add_argument("config", help=f"YAML run config, or {BUNDLED_PREFIX}<name> for a bundled one")
    p.add_argument("--out", help="run directory (overrides training.checkpoint_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. training.total_steps=200")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)
    p.epilog = "bundled configs: " + ", ".join(f"{BUNDLED_PREFIX}{n}" for n in bundled_configs())

    p = sub.add_parser("eval", help="zero-shot counting accuracy on a benchmark manifest")
    p.add_argument("--model", required=True, help="checkpoint dir, run dir, or pretrained:<hf model id>")
    p.add_argument("--which", choices=("best", "final"), default="best", help="checkpoint to use from a run dir")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.add_argument("--plot-format", default=".png", choices=(".png", ".pdf", ".svg"))
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    _fetch_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a confusion-matrix heatmap from report.json")
    p.add_argument("report")
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="tabulate accuracies across runs")
    p.add_argument("runs", nargs="+", help="run dirs, or name=final_report.json[:best_report.json]")
    p.add_argument("--out", help="machine-readable JSON output")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
