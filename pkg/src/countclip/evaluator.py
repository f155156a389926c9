"""Zero-shot counting evaluation with confusion-matrix reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .captions import COUNTS, detect_count, make_candidate_captions
from .data import Sample
from .validation import check_count

log = logging.getLogger(__name__)

N_CLASSES = len(COUNTS)


@dataclass
class EvalReport:
    """Confusion rows are the true count (2..10), columns the predicted count."""

    confusion: np.ndarray
    n_skipped: int = 0
    skip_reasons: dict = field(default_factory=dict)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"confusion must be 9x9, got {self.confusion.shape}")

    @property
    def n_evaluated(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        n = self.n_evaluated
        return float(np.trace(self.confusion)) / n if n else 0.0

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """NaN for classes with no evaluated images."""
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
            "skip_reasons": dict(sorted(self.skip_reasons.items())),
            "per_class_accuracy": {
                str(c): (None if np.isnan(a) else float(a))
                for c, a in zip(COUNTS, self.per_class_accuracy)
            },
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> EvalReport:
        return cls(np.array(data["confusion"]), data.get("n_skipped", 0), dict(data.get("skip_reasons", {})))


def predict_counts(image_embs, candidate_embs) -> np.ndarray:
    """Vectorized :func:`predict_count` over ``(n, d)`` images and ``(n, 9, d)`` candidates."""
    img = np.asarray(image_embs, dtype=np.float64)
    cand = np.asarray(candidate_embs, dtype=np.float64)
    if cand.shape[1:2] != (N_CLASSES,) or img.shape[0] != cand.shape[0] or img.shape[-1] != cand.shape[-1]:
        raise ValueError(f"shape mismatch: images {img.shape}, candidates {cand.shape}")
    img_norm = np.linalg.norm(img, axis=-1, keepdims=True)
    cand_norm = np.linalg.norm(cand, axis=-1, keepdims=True)
    if (img_norm == 0).any() or (cand_norm == 0).any():
        raise ValueError("zero-norm embedding; the encoder output is degenerate")
    sims = np.einsum("nd,nkd->nk", img / img_norm, cand / cand_norm)
    # np.argmax returns the first maximum, i.e. the smallest count on ties
    return np.argmax(sims, axis=1) + COUNTS[0]


def predict_count(image_emb, candidate_embs) -> int:
    """Count whose caption has the highest cosine similarity to the image."""
    img = np.asarray(image_emb, dtype=np.float64)
    cand = np.asarray(candidate_embs, dtype=np.float64)
    if img.ndim != 1 or cand.ndim != 2:
        raise ValueError("expected a d-vector and a 9 x d candidate matrix")
    return int(predict_counts(img[None], cand[None])[0])


def confusion_from_predictions(true_counts, predicted_counts) -> np.ndarray:
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(
        confusion,
        (np.asarray(true_counts) - COUNTS[0], np.asarray(predicted_counts) - COUNTS[0]),
        1,
    )
    return confusion


def _as_sample(item) -> Sample:
    if isinstance(item, Sample):
        return item
    return Sample(
        caption=item["caption"],
        image=item.get("image"),
        count=item.get("count"),
        id=item.get("id"),
        meta={k: v for k, v in item.items() if k not in ("caption", "image", "count", "id")},
    )


@torch.no_grad()
def evaluate(
    backend,
    items: Iterable,
    load_image: Callable[[Sample], object] | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Score every benchmark item by the argmax over its 9 candidate captions.

    ``load_image`` maps an item to an image when the item carries none;
    it should raise :class:`countclip.curation.FetchError` for unavailable
    images, which are counted as skipped.
    """
    from .curation import FetchError

    was_training = backend.training
    backend.eval()
    skips: Counter = Counter()
    true_counts, predicted = [], []
    pending: list[tuple[int, object, list[str]]] = []

    def flush():
        if not pending:
            return
        images = [p[1] for p in pending]
        texts = [c for p in pending for c in p[2]]
        img = backend.encode_image(images).double().cpu().numpy()
        txt = backend.encode_text(texts).double().cpu().numpy()
        predicted.extend(predict_counts(img, txt.reshape(len(pending), N_CLASSES, -1)).tolist())
        true_counts.extend(p[0] for p in pending)
        pending.clear()

    try:
        for raw in items:
            item = _as_sample(raw)
            caption = detect_count(item.caption)
            if caption is None:
                skips["no_count_word"] += 1
                continue
            count = check_count(item.count) if item.count is not None else caption.count
            if count != caption.count:
                skips["count_mismatch"] += 1
                continue
            image = item.image
            if image is None:
                if load_image is None:
                    skips["no_image"] += 1
                    continue
                try:
                    image = load_image(item)
                except FetchError as exc:
                    skips[f"fetch:{exc.reason}"] += 1
                    continue
            pending.append((count, image, make_candidate_captions(caption)))
            if len(pending) >= batch_size:
                flush()
        flush()
    finally:
        backend.train(was_training)

    if not true_counts:
        raise ValueError("no benchmark item could be evaluated (all skipped)")
    report = EvalReport(
        confusion_from_predictions(true_counts, predicted), sum(skips.values()), dict(skips)
    )
    log.info("evaluated %d items, skipped %d, accuracy %.4f", report.n_evaluated, report.n_skipped, report.accuracy)
    return report


def confusion_to_csv(confusion: np.ndarray) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(np.asarray(confusion).tolist())
    return buf.getvalue()


def read_confusion_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh)], dtype=np.int64)


def render_confusion(report: EvalReport, output_path: str | os.PathLike, title: str | None = None) -> Path:
    """Write a heatmap to ``output_path`` and the raw matrix as CSV beside it."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    confusion = report.confusion

    fig, ax = plt.subplots(figsize=(6, 5.2))
    im = ax.imshow(confusion, cmap="Blues", vmin=0, vmax=max(int(confusion.max()), 1))
    ax.set_xticks(range(N_CLASSES), labels=COUNTS)
    ax.set_yticks(range(N_CLASSES), labels=COUNTS)
    ax.set_xlabel("predicted count")
    ax.set_ylabel("true count")
    ax.set_title(title or f"accuracy {100 * report.accuracy:.2f}%")
    threshold = confusion.max() / 2 if confusion.max() else 1
    for i in range(N_CLASSES):
        for j in range(N_CLASSES):
            ax.text(
                j, i, str(confusion[i, j]), ha="center", va="center", fontsize=8,
                color="white" if confusion[i, j] > threshold else "black",
            )
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    # dropping timestamps keeps repeated renders byte-identical
    metadata = {".pdf": {"CreationDate": None}, ".svg": {"Date": None}}.get(output_path.suffix.lower())
    with plt.rc_context({"svg.hashsalt": "countclip"}):
        fig.savefig(output_path, metadata=metadata)
    plt.close(fig)

    output_path.with_suffix(".csv").write_text(confusion_to_csv(confusion), encoding="utf-8")
    return output_path


@dataclass
class RunResult:
    """A configuration's end-of-training and early-stop results (reports or accuracies)."""

    name: str
    final: EvalReport | float
    best: EvalReport | float | None = None


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_text(self) -> str:
        header = ("Configuration", "Acc. (end)", "Max Acc. (early stop)")
        body = [(r["configuration"], r["final_accuracy"], r["max_accuracy"]) for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        fmt = " | ".join(("{:<%d}" if i == 0 else "{:>%d}") % w for i, w in enumerate(widths))
        lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2) + "\n"


def _pct(result: EvalReport | float) -> str:
    acc = result.accuracy if isinstance(result, EvalReport) else float(result)
    return f"{100 * acc:.2f}"


def compare_runs(runs: Sequence[RunResult | tuple]) -> ComparisonTable:
    """Tabulate end-of-training and early-stop accuracy per configuration, in input order."""
    rows = []
    for run in runs:
        if not isinstance(run, RunResult):
            run = RunResult(*run)
        best = run.best if run.best is not None else run.final
        rows.append(
            {
                "configuration": run.name,
                "final_accuracy": _pct(run.final),
                "max_accuracy": _pct(best),
            }
        )
    return ComparisonTable(rows)
