"""Counting-set curation: caption filtering, image fetching and detector verification."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol
from urllib.parse import urlparse
from urllib.request import url2pathname

import requests
from PIL import Image, UnidentifiedImageError

from .captions import COUNTS, CountingCaption, detect_count
from .data import dump_json, read_jsonl, write_jsonl
from .frequencies import ClassFrequencyTable, compute_class_frequencies  # noqa: F401

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE = 0.25
COUNTBENCH_SIZE = 540
COUNTBENCH_PER_CLASS = 60


class FetchError(Exception):
    """An image could not be obtained. ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, permanent: bool, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.permanent = permanent


class DetectorError(RuntimeError):
    """The detector failed to run; retrying may succeed."""


@dataclass(frozen=True)
class ImageCaptionRecord:
    id: str
    url: str
    caption: str

    @classmethod
    def from_row(cls, row) -> ImageCaptionRecord | None:
        if not isinstance(row, Mapping):
            return None
        fields = [row.get(k) for k in ("id", "url", "caption")]
        if not all(isinstance(v, str) and v for v in fields):
            return None
        return cls(*fields)


@dataclass(frozen=True)
class Detection:
    label: str
    confidence: float
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox must be (x, y, w, h) with positive size, got {self.bbox}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))


@dataclass(frozen=True)
class CountingSample:
    record: ImageCaptionRecord
    counting_caption: CountingCaption
    verified_label: str

    def to_row(self) -> dict:
        return {
            "id": self.record.id,
            "url": self.record.url,
            "caption": self.record.caption,
            "count": self.counting_caption.count,
            "verified_label": self.verified_label,
        }


class Detector(Protocol):
    def detect(self, image, image_id: str | None = None) -> list[Detection]: ...


class StubDetector:
    """Replays canned detections keyed by image id (unknown ids detect nothing).

    The file maps ids to lists of ``{"label", "confidence", "bbox"}``.
    """

    def __init__(self, detections: Mapping | str | os.PathLike):
        if not isinstance(detections, Mapping):
            with open(detections, encoding="utf-8") as fh:
                detections = json.load(fh)
        self._detections = {
            str(k): [Detection(d["label"], float(d["confidence"]), tuple(d["bbox"])) for d in v]
            for k, v in detections.items()
        }

    def detect(self, image, image_id=None):
        return list(self._detections.get(str(image_id), []))


class YoloDetector:
    """Live detector backed by ``ultralytics`` (optional dependency)."""

    def __init__(self, weights="yolov8n.pt", device="cpu"):
        try:
            from ultralytics import YOLO
        except ImportError as exc:
            raise ImportError("the live detector needs `pip install ultralytics`") from exc
        self._model = YOLO(weights)
        self._device = device

    def detect(self, image, image_id=None):
        try:
            result = self._model.predict(image, device=self._device, verbose=False)[0]
        except Exception as exc:  # noqa: BLE001 - any inference failure is retryable
            raise DetectorError(str(exc)) from exc
        names = result.names
        out = []
        for cls_id, conf, (x1, y1, x2, y2) in zip(
            result.boxes.cls.tolist(), result.boxes.conf.tolist(), result.boxes.xyxy.tolist()
        ):
            if x2 > x1 and y2 > y1:
                out.append(Detection(names[int(cls_id)], float(conf), (x1, y1, x2 - x1, y2 - y1)))
        return out


def filter_counting_captions(
    records: Iterable, stats: Counter | None = None
) -> Iterator[tuple[ImageCaptionRecord, CountingCaption]]:
    """Yield ``(record, counting_caption)`` for records whose caption spells one count.

    Rows may be :class:`ImageCaptionRecord` or raw manifest dicts. Malformed
    rows and duplicate ids are skipped and tallied in ``stats["malformed"]``.
    """
    stats = stats if stats is not None else Counter()
    seen = set()
    for row in records:
        stats["scanned"] += 1
        record = row if isinstance(row, ImageCaptionRecord) else ImageCaptionRecord.from_row(row)
        if record is None or record.id in seen:
            stats["malformed"] += 1
            stats["caption_rejected"] += 1
            continue
        seen.add(record.id)
        caption = detect_count(record.caption)
        if caption is None:
            stats["caption_rejected"] += 1
            continue
        stats["caption_matched"] += 1
        yield record, caption


def most_frequent_labels(detections: Iterable[Detection], confidence_threshold=DEFAULT_CONFIDENCE):
    """Labels tied for the highest instance count, and that count."""
    tally = Counter(d.label for d in detections if d.confidence >= confidence_threshold)
    if not tally:
        return [], 0
    top = max(tally.values())
    return sorted(label for label, n in tally.items() if n == top), top


def verify_counting_image(
    image,
    expected_count: int,
    detector: Detector,
    confidence_threshold: float = DEFAULT_CONFIDENCE,
    image_id: str | None = None,
) -> str | None:
    """Label of the single most frequent detected entity if its count matches.

    Ties for the most frequent entity are rejected. Detector failures raise
    :class:`DetectorError`.
    """
    detections = detector.detect(image, image_id=image_id)
    return verification_outcome(detections, expected_count, confidence_threshold)[0]


def verification_outcome(detections, expected_count, confidence_threshold=DEFAULT_CONFIDENCE):
    """``(label, None)`` on success, else ``(None, reason)``."""
    if expected_count not in COUNTS:
        raise ValueError(f"expected_count must be in [2, 10], got {expected_count}")
    labels, top = most_frequent_labels(detections, confidence_threshold)
    if not labels:
        return None, "no_detections"
    if len(labels) > 1:
        return None, "tie"
    if top != expected_count:
        return None, "count_mismatch"
    return labels[0], None


def resolve_url(url: str, base_dir: str | os.PathLike | None) -> str:
    """Resolve a relative local path against ``base_dir``; other URLs pass through."""
    if base_dir is None or urlparse(url).scheme or os.path.isabs(url):
        return url
    return str(Path(base_dir) / url)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ImageCache:
    """Content-addressed blob store with a URL index.

    ``blobs/<sha256 of content>`` holds the bytes; ``urls/<sha256 of url>``
    holds the content hash. Failures are appended to ``fetch_audit.jsonl``.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        (self.root / "urls").mkdir(parents=True, exist_ok=True)

    def _index(self, url: str) -> Path:
        return self.root / "urls" / _sha256(url.encode("utf-8"))

    def get(self, url: str) -> bytes | None:
        index = self._index(url)
        if not index.exists():
            return None
        blob = self.root / "blobs" / index.read_text().strip()
        return blob.read_bytes() if blob.exists() else None

    def put(self, url: str, data: bytes) -> Path:
        digest = _sha256(data)
        blob = self.root / "blobs" / digest
        if not blob.exists():
            tmp = blob.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(blob)
        self._index(url).write_text(digest)
        return blob

    def record_failure(self, url: str, error: FetchError) -> None:
        entry = {"url": url, "reason": error.reason, "permanent": error.permanent}
        with open(self.root / "fetch_audit.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _download(url, session, retries, backoff, timeout) -> bytes:
    parsed = urlparse(url)
    if parsed.scheme in ("", "file"):
        path = Path(url2pathname(parsed.path) if parsed.scheme == "file" else url)
        try:
            return path.read_bytes()
        except OSError as exc:
            raise FetchError("missing_file", True, str(exc)) from exc
    if parsed.scheme not in ("http", "https"):
        raise FetchError("unsupported_scheme", True, url)

    session = session or requests
    last: FetchError | None = None
    for attempt in range(retries):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = session.get(url, timeout=timeout)
        except requests.Timeout as exc:
            last = FetchError("timeout", False, str(exc))
            continue
        except requests.RequestException as exc:
            last = FetchError("network_error", False, str(exc))
            continue
        if 400 <= resp.status_code < 500:
            raise FetchError(f"http_{resp.status_code}", True, url)
        if resp.status_code >= 500:
            last = FetchError(f"http_{resp.status_code}", False, url)
            continue
        return resp.content
    raise last


def decode_image(data: bytes) -> Image.Image:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FetchError("undecodable", True, str(exc)) from exc


def fetch_bytes(url, cache_dir, session=None, retries=3, backoff=1.0, timeout=10.0) -> bytes:
    """Raw image bytes for ``url``, served from the cache after the first success.

    Network failures are retried ``retries`` times with exponential backoff;
    a final failure is written to the cache's audit log and raised as
    :class:`FetchError`.
    """
    cache = cache_dir if isinstance(cache_dir, ImageCache) else ImageCache(cache_dir)
    data = cache.get(url)
    if data is not None:
        return data
    try:
        data = _download(url, session, retries, backoff, timeout)
        decode_image(data)
    except FetchError as exc:
        cache.record_failure(url, exc)
        raise
    cache.put(url, data)
    return data


def fetch_image(url, cache_dir, **kwargs) -> Image.Image:
    return decode_image(fetch_bytes(url, cache_dir, **kwargs))


@dataclass
class CurationReport:
    scanned: int = 0
    caption_matched: int = 0
    caption_rejected: int = 0
    malformed: int = 0
    fetched: int = 0
    fetch_failed: int = 0
    verified: int = 0
    verification_rejected: int = 0
    detector_errors: int = 0
    failure_reasons: dict = field(default_factory=dict)
    confidence_threshold: float = DEFAULT_CONFIDENCE
    tie_policy: str = "reject"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"scanned            {self.scanned}",
            f"caption matched    {self.caption_matched}  (rejected {self.caption_rejected}, malformed {self.malformed})",
            f"fetched            {self.fetched}  (failed {self.fetch_failed})",
            f"verified           {self.verified}  (rejected {self.verification_rejected}, detector errors {self.detector_errors})",
            f"confidence >= {self.confidence_threshold}, ties: {self.tie_policy}",
        ]
        lines += [f"  {reason:<20} {n}" for reason, n in sorted(self.failure_reasons.items())]
        return "\n".join(lines) + "\n"


def build_counting_set(
    manifest_in,
    detector: Detector,
    manifest_out,
    cache_dir,
    confidence_threshold: float = DEFAULT_CONFIDENCE,
    workers: int = 1,
    fetch_kwargs: Mapping | None = None,
) -> CurationReport:
    """Filter captions, fetch images and keep detector-verified counting samples.

    Output order follows the input manifest regardless of ``workers``.
    """
    rows = list(read_jsonl(manifest_in))  # unreadable manifest raises here
    base_dir = Path(manifest_in).resolve().parent
    cache = ImageCache(cache_dir)
    fetch_kwargs = dict(fetch_kwargs or {})
    stats: Counter = Counter()
    reasons: Counter = Counter()

    def process(pair):
        record, caption = pair
        record = ImageCaptionRecord(record.id, resolve_url(record.url, base_dir), record.caption)
        try:
            image = fetch_image(record.url, cache, **fetch_kwargs)
        except FetchError as exc:
            return "fetch_failed", exc.reason, None
        try:
            detections = detector.detect(image, image_id=record.id)
        except DetectorError as exc:
            log.warning("detector failed on %s: %s", record.id, exc)
            return "detector_error", "detector_error", None
        label, reason = verification_outcome(detections, caption.count, confidence_threshold)
        if label is None:
            return "rejected", reason, None
        return "verified", None, CountingSample(record, caption, label)

    accepted = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for status, reason, sample in pool.map(process, filter_counting_captions(rows, stats)):
            if status != "fetch_failed":
                stats["fetched"] += 1
            stats[status] += 1
            if reason:
                reasons[reason] += 1
            if sample is not None:
                accepted.append(sample.to_row())
    write_jsonl(manifest_out, accepted)

    return CurationReport(
        scanned=stats["scanned"],
        caption_matched=stats["caption_matched"],
        caption_rejected=stats["caption_rejected"],
        malformed=stats["malformed"],
        fetched=stats["fetched"],
        fetch_failed=stats["fetch_failed"],
        verified=stats["verified"],
        verification_rejected=stats["rejected"],
        detector_errors=stats["detector_error"],
        failure_reasons=dict(sorted(reasons.items())),
        confidence_threshold=confidence_threshold,
    )


@dataclass
class AuditReport:
    total: int
    per_class: dict
    missing: list
    balanced: bool

    @property
    def n_missing(self) -> int:
        return len(self.missing)

    @property
    def n_available(self) -> int:
        return self.total - self.n_missing

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "available": self.n_available,
            "missing": self.n_missing,
            "balanced": self.balanced,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "missing_records": self.missing,
        }

    def to_text(self) -> str:
        lines = ["count  total  available  missing"]
        for c, v in self.per_class.items():
            lines.append(f"{c:>5}  {v['total']:>5}  {v['available']:>9}  {v['missing']:>7}")
        lines.append(f"  all  {self.total:>5}  {self.n_available:>9}  {self.n_missing:>7}")
        if self.balanced:
            lines.append(f"class-balanced: {COUNTBENCH_PER_CLASS} per class, {COUNTBENCH_SIZE} total")
        else:
            lines.append("NOT class-balanced (expected 60 per class, 540 total)")
        for m in self.missing:
            lines.append(f"missing {m['id']} (count {m['count']}): {m['reason']}")
        return "\n".join(lines) + "\n"


def audit_benchmark(
    rows: Iterable[Mapping], cache_dir, workers: int = 1, fetch_kwargs=None, base_dir=None
) -> AuditReport:
    """Try to fetch every benchmark image and tally availability per count."""
    rows = [r for r in rows if r is not None]
    cache = ImageCache(cache_dir)
    fetch_kwargs = dict(fetch_kwargs or {})

    def probe(row):
        try:
            fetch_bytes(resolve_url(row["url"], base_dir), cache, **fetch_kwargs)
            return None
        except FetchError as exc:
            return exc.reason

    per_class = {c: {"total": 0, "available": 0, "missing": 0} for c in COUNTS}
    missing = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for row, reason in zip(rows, pool.map(probe, rows)):
            slot = per_class[int(row["count"])]
            slot["total"] += 1
            if reason is None:
                slot["available"] += 1
            else:
                slot["missing"] += 1
                missing.append({"id": row.get("id"), "url": row["url"], "count": int(row["count"]), "reason": reason})
    balanced = len(rows) == COUNTBENCH_SIZE and all(
        v["total"] == COUNTBENCH_PER_CLASS for v in per_class.values()
    )
    return AuditReport(len(rows), per_class, missing, balanced)


def write_report(report, stem: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (human-readable) and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
    txt.write_text(report.to_text(), encoding="utf-8")
    dump_json(js, report.to_dict())
    return txt, js
