"""Records and line-delimited JSON manifests."""

from __future__ import annotations

import json
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any


@dataclass
class Sample:
    """An image-caption pair ready for encoding.

    ``image`` is whatever the backend's image encoder accepts (a PIL image
    for CLIP, a feature vector for the toy backend). ``count`` is set for
    counting samples and benchmark items.
    """

    caption: str
    image: Any = None
    count: int | None = None
    id: str | None = None
    meta: dict = field(default_factory=dict)


def read_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    """Yield one dict per non-blank line. Undecodable lines yield ``None``."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                yield None
                continue
            yield row if isinstance(row, dict) else None


def write_jsonl(path: str | os.PathLike, rows: Iterable[Mapping]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def dump_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
