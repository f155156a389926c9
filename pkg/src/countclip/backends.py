"""Dual-encoder backends.

A backend is a ``torch.nn.Module`` exposing ``encode_image``,
``encode_text``, a learnable ``logit_scale`` (log of the inverse
temperature) and ``describe()``, a JSON-able dict from which
:func:`build_backend` rebuilds an equivalent, untrained module.
"""

from __future__ import annotations

import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .captions import COUNTS, NUMBER_WORDS, word_for
from .data import Sample

DEFAULT_OBJECTS = ("cat", "dog", "apple", "bird", "car", "cup")
FILLER_WORDS = ("a", "an", "the", "photo", "of", "and", "on", "in", "some")
_WORD_RE = re.compile(r"[a-z]+")


def default_vocab(objects: Sequence[str] = DEFAULT_OBJECTS) -> list[str]:
    nouns = [w for obj in objects for w in (obj, obj + "s")]
    return ["<unk>", *NUMBER_WORDS, *nouns, *FILLER_WORDS]


class ToyBackend(nn.Module):
    """Small deterministic dual encoder for desk-scale runs.

    Text: mean of token embeddings followed by a linear map. Images are
    plain feature vectors of length ``feature_dim`` passed through a linear
    map.
    """

    def __init__(self, dim=32, vocab=None, seed=0, feature_dim=32):
        super().__init__()
        if dim < 4:
            raise ValueError("dim must be at least 4")
        self.dim = dim
        self.vocab = list(vocab) if vocab is not None else default_vocab()
        self.seed = seed
        self.feature_dim = feature_dim
        self._index = {w: i for i, w in enumerate(self.vocab)}

        gen = torch.Generator().manual_seed(seed)
        self.token_emb = nn.Parameter(torch.randn(len(self.vocab), dim, generator=gen) / math.sqrt(dim))
        self.text_proj = nn.Parameter(torch.randn(dim, dim, generator=gen) / math.sqrt(dim))
        self.image_proj = nn.Parameter(
            torch.randn(feature_dim, dim, generator=gen) / math.sqrt(feature_dim)
        )
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    def describe(self) -> dict:
        return {
            "kind": "toy",
            "dim": self.dim,
            "vocab": self.vocab,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
        }

    def tokenize(self, caption: str) -> list[int]:
        ids = [self._index.get(w, 0) for w in _WORD_RE.findall(caption.lower())]
        return ids or [0]

    def encode_text(self, captions: Sequence[str]) -> torch.Tensor:
        ids = [torch.tensor(self.tokenize(c)) for c in captions]
        offsets = torch.tensor([0, *np.cumsum([len(i) for i in ids])[:-1]])
        pooled = nn.functional.embedding_bag(torch.cat(ids), self.token_emb, offsets, mode="mean")
        return pooled @ self.text_proj

    def encode_image(self, images) -> torch.Tensor:
        feats = torch.stack([torch.as_tensor(im, dtype=self.image_proj.dtype) for im in images])
        return feats @ self.image_proj

    @classmethod
    def rigged(cls, task: SyntheticTask, dim=None) -> ToyBackend:
        """Weights set by hand so each image lands on its true count caption."""
        dim = dim or max(16, len(COUNTS))
        backend = cls(dim=dim, vocab=task.vocab, seed=0, feature_dim=task.feature_dim)
        with torch.no_grad():
            backend.token_emb.zero_()
            backend.text_proj.copy_(torch.eye(dim))
            backend.image_proj.zero_()
            for slot, count in enumerate(COUNTS):
                backend.token_emb[backend._index[word_for(count)], slot] = 1.0
                backend.image_proj[slot, slot] = 1.0
        return backend


@dataclass
class SyntheticTask:
    """Planted-signal counting data for the toy backend.

    Image features are ``[count one-hot | object one-hot | distractors]``
    scaled by ``signal``, plus isotropic Gaussian noise.
    """

    general_pool: list[Sample]
    counting_pool: list[Sample]
    validation: list[Sample]
    feature_dim: int
    vocab: list[str] = field(default_factory=default_vocab)

    def backend(self, dim=32, seed=0) -> ToyBackend:
        return ToyBackend(dim=dim, vocab=self.vocab, seed=seed, feature_dim=self.feature_dim)


def make_synthetic_task(
    n_train_per_class=5,
    n_val_per_class=2,
    n_general=40,
    objects=DEFAULT_OBJECTS,
    n_distractors=8,
    signal=3.0,
    noise=0.5,
    seed=0,
) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    n_obj = len(objects)
    feature_dim = len(COUNTS) + n_obj + n_distractors

    def features(count, obj):
        x = rng.normal(0.0, noise, feature_dim)
        if count is not None:
            x[count - 2] += signal
        x[len(COUNTS) + obj] += signal
        return x.astype(np.float32)

    def counting(n_per_class, prefix, offset):
        out = []
        for count in COUNTS:
            for i in range(n_per_class):
                # same object mix in every class so objects carry no count signal
                obj = (i + offset) % n_obj
                out.append(
                    Sample(
                        caption=f"{word_for(count)} {objects[obj]}s",
                        image=features(count, obj),
                        count=count,
                        id=f"{prefix}-{count}-{i}",
                    )
                )
        return out

    general = []
    for i in range(n_general):
        obj = int(rng.integers(n_obj))
        general.append(
            Sample(caption=f"a photo of a {objects[obj]}", image=features(None, obj), id=f"gen-{i}")
        )
    train = counting(n_train_per_class, "train", 0)
    val = counting(n_val_per_class, "val", n_train_per_class)
    return SyntheticTask(general, train, val, feature_dim, default_vocab(objects))


class HFClipBackend(nn.Module):
    """Pretrained CLIP from ``transformers`` (weights are downloaded on first use)."""

    def __init__(self, model_name="openai/clip-vit-base-patch32", device="cpu"):
        super().__init__()
        from transformers import CLIPModel, CLIPProcessor

        self.model_name = model_name
        self.device_name = device
        self.model = CLIPModel.from_pretrained(model_name).to(device)
        self.processor = CLIPProcessor.from_pretrained(model_name)

    @property
    def logit_scale(self) -> nn.Parameter:
        return self.model.logit_scale

    def describe(self) -> dict:
        return {"kind": "clip", "model_name": self.model_name, "device": self.device_name}

    def encode_text(self, captions: Sequence[str]) -> torch.Tensor:
        tokens = self.processor(text=list(captions), return_tensors="pt", padding=True, truncation=True)
        return self.model.get_text_features(**tokens.to(self.device_name))

    def encode_image(self, images) -> torch.Tensor:
        pixels = self.processor(images=list(images), return_tensors="pt")
        return self.model.get_image_features(**pixels.to(self.device_name))


def build_backend(spec: dict) -> nn.Module:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "toy":
        return ToyBackend(**spec)
    if kind == "clip":
        return HFClipBackend(**spec)
    raise ValueError(f"unknown backend kind {kind!r}")
