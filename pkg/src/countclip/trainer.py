"""Fine-tuning loop: mixed batches, combined loss, warmup-cosine schedule, early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch

from .backends import build_backend
from .captions import detect_count, make_all_counterfactuals, make_counterfactual
from .data import Sample, dump_json
from .evaluator import evaluate
from .frequencies import ClassFrequencyTable
from .lambdas import LambdaScheme, LambdaTable
from .losses import VARIANTS, EmbeddingBatch, LossBreakdown, combined_loss

log = logging.getLogger(__name__)

MAX_LOGIT_SCALE = math.log(100.0)


class NonFiniteLossError(FloatingPointError):
    pass


def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10_000)
    return Fraction(value)


@dataclass
class TrainingConfig:
    learning_rate: float = 5e-6
    total_steps: int = 20_000
    epochs: int = 10
    batch_size: int = 5
    counting_fraction: Fraction = Fraction(1, 5)
    lambda_scheme: str = "constant"
    lambda_0: float = 1.0
    loss_variant: str = "count"
    use_scheduler: bool = True
    seed: int = 0
    normalize_training_embeddings: bool = True
    validation_interval: int = 1000
    validation_fraction: float = 0.1
    weight_decay: float = 0.0
    checkpoint_dir: str | None = None
    resume: bool = False

    def __post_init__(self):
        self.counting_fraction = _as_fraction(self.counting_fraction)
        for name in ("total_steps", "epochs", "batch_size", "validation_interval"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.counting_fraction <= 1:
            raise ValueError("counting_fraction must be in [0, 1]")
        n = self.batch_size * self.counting_fraction
        if n.denominator != 1:
            raise ValueError(
                f"batch_size * counting_fraction = {n} is not an integer number of counting samples"
            )
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for the contrastive loss")
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"loss_variant must be one of {VARIANTS}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.scheme  # validates lambda_scheme / lambda_0

    @property
    def n_counting(self) -> int:
        return int(self.batch_size * self.counting_fraction)

    @property
    def n_general(self) -> int:
        return self.batch_size - self.n_counting

    @property
    def scheme(self) -> LambdaScheme:
        return LambdaScheme(self.lambda_scheme, float(self.lambda_0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counting_fraction"] = str(self.counting_fraction)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


def lr_at(step: int, config: TrainingConfig) -> float:
    """Linear warmup over the first half of training, cosine decay over the second."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak = config.learning_rate
    if not config.use_scheduler:
        return peak
    half = total / 2
    if step <= half:
        return peak * step / half
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - half) / half))


def steps_per_epoch(config: TrainingConfig, n_counting_pool: int, n_general_pool: int = 0) -> int:
    """Batches needed for one pass over the counting pool (or the general pool when p = 0)."""
    if config.n_counting:
        return math.ceil(n_counting_pool / config.n_counting)
    return math.ceil(n_general_pool / config.n_general)


class _EpochCycler:
    """Without-replacement draws, reshuffled at every pass over the items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.epoch = 0
        self.pos = 0
        self.order = rng.permutation(n) if n else np.arange(0)

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self.order = self.rng.permutation(self.n)
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos, "order": self.order.tolist()}

    def load(self, state: dict) -> None:
        self.epoch, self.pos = state["epoch"], state["pos"]
        self.order = np.array(state["order"], dtype=np.int64)


@dataclass
class Batch:
    samples: list[Sample]
    counting_mask: list[bool]
    counts: list[int]
    cf_captions: list[list[str]]

    @property
    def n_counting(self) -> int:
        return sum(self.counting_mask)


class BatchSampler:
    """Draws ``b_size * (1 - p)`` general and ``b_size * p`` counting samples per batch.

    Counterfactuals are attached at draw time: one fresh random
    counterfactual per draw for ``count``, all 8 for ``count_plus``.
    """

    def __init__(self, general_pool: Sequence[Sample], counting_pool: Sequence[Sample], config: TrainingConfig, rng=None):
        if config.n_general and not general_pool:
            raise ValueError("general pool is empty")
        if config.n_counting and not counting_pool:
            raise ValueError("counting pool is empty")
        self.general_pool = list(general_pool)
        self.counting_pool = list(counting_pool)
        self.captions = [detect_count(s.caption) for s in self.counting_pool]
        bad = [s.caption for s, c in zip(self.counting_pool, self.captions) if c is None]
        if bad:
            raise ValueError(f"counting samples without a single number word: {bad[:3]}")
        self.config = config
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(
            config.seed if rng is None else rng
        )
        self._general = _EpochCycler(len(self.general_pool), self.rng)
        self._counting = _EpochCycler(len(self.counting_pool), self.rng)

    @property
    def epoch(self) -> int:
        return self._counting.epoch if self.config.n_counting else self._general.epoch

    def build_batch(self) -> Batch:
        general = [self.general_pool[i] for i in self._general.take(self.config.n_general)]
        idx = self._counting.take(self.config.n_counting)
        counting = [self.counting_pool[i] for i in idx]
        if self.config.loss_variant == "count_plus":
            cfs = [make_all_counterfactuals(self.captions[i]) for i in idx]
        else:
            cfs = [[make_counterfactual(self.captions[i], self.rng)] for i in idx]
        return Batch(
            samples=general + counting,
            counting_mask=[False] * len(general) + [True] * len(counting),
            counts=[self.captions[i].count for i in idx],
            cf_captions=cfs,
        )

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "general": self._general.state(),
            "counting": self._counting.state(),
        }

    def load(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._general.load(state["general"])
        self._counting.load(state["counting"])


def make_optimizer(backend, config: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(backend.parameters(), lr=0.0, weight_decay=config.weight_decay)


def embed_batch(backend, batch: Batch) -> EmbeddingBatch:
    image_emb = backend.encode_image([s.image for s in batch.samples])
    text_emb = backend.encode_text([s.caption for s in batch.samples])
    n = batch.n_counting
    if n:
        flat = [c for cfs in batch.cf_captions for c in cfs]
        cf_emb = backend.encode_text(flat).reshape(n, len(batch.cf_captions[0]), -1)
    else:
        cf_emb = None
    return EmbeddingBatch(image_emb, text_emb, batch.counting_mask, cf_emb, batch.counts)


def train_step(backend, optimizer, batch: Batch, config: TrainingConfig, step: int, lambdas: LambdaTable) -> LossBreakdown:
    """One gradient update at learning rate ``lr_at(step)``."""
    backend.train()
    emb = embed_batch(backend, batch)
    temperature = 1.0 / backend.logit_scale.exp()
    loss = combined_loss(
        emb, lambdas, variant=config.loss_variant, temperature=temperature,
        normalize=config.normalize_training_embeddings,
    )
    if not torch.isfinite(loss.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: {loss.as_dict()} "
            f"(logit_scale={backend.logit_scale.item():.4g}, lambdas={loss.per_sample_lambda.tolist()})"
        )
    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    with torch.no_grad():
        backend.logit_scale.clamp_(0.0, MAX_LOGIT_SCALE)
    return loss


@dataclass
class Checkpoint:
    step: int
    validation_accuracy: float
    backend_spec: dict
    config: dict
    lambda_table: dict
    path: str | None = None
    state: dict | None = field(default=None, repr=False)

    def meta(self) -> dict:
        return {
            "step": self.step,
            "validation_accuracy": self.validation_accuracy,
            "backend_spec": self.backend_spec,
        }

    def load_backend(self):
        """Rebuild the backend and load the checkpointed weights."""
        backend = build_backend(self.backend_spec)
        state = self.state if self.state is not None else _load_state(self.path)
        backend.load_state_dict(state["backend"])
        backend.eval()
        return backend

    @classmethod
    def from_dir(cls, path: str | os.PathLike) -> Checkpoint:
        path = Path(path)
        meta = json.loads((path / "checkpoint.json").read_text())
        return cls(
            step=meta["step"],
            validation_accuracy=meta["validation_accuracy"],
            backend_spec=meta["backend_spec"],
            config=json.loads((path / "config.json").read_text()),
            lambda_table=json.loads((path / "lambda_table.json").read_text()),
            path=str(path),
        )


def _load_state(path) -> dict:
    return torch.load(Path(path) / "state.pt", map_location="cpu", weights_only=False)


def _write_checkpoint_dir(ckpt: Checkpoint, state: dict) -> Path:
    path = Path(ckpt.path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    torch.save(state, tmp / "state.pt")
    dump_json(tmp / "config.json", ckpt.config)
    dump_json(tmp / "lambda_table.json", ckpt.lambda_table)
    dump_json(tmp / "checkpoint.json", ckpt.meta())
    if path.exists():
        for f in path.iterdir():
            f.unlink()
        path.rmdir()
    tmp.rename(path)
    return path


def _write_checkpoint(ckpt: Checkpoint, state: dict, root: Path, is_best: bool) -> None:
    path = _write_checkpoint_dir(ckpt, state)
    dump_json(root / "latest.json", {"step": ckpt.step, "path": path.name})
    if is_best:
        dump_json(root / "best.json", {"step": ckpt.step, "path": path.name})


def save_checkpoint(
    backend, path, step=0, validation_accuracy=None,
    config: TrainingConfig | None = None, lambda_table: LambdaTable | None = None,
) -> Checkpoint:
    """Write ``backend`` as a standalone checkpoint directory loadable by ``Checkpoint.from_dir``."""
    ckpt = Checkpoint(
        step, validation_accuracy, backend.describe(), (config or TrainingConfig()).to_dict(),
        lambda_table.to_dict() if lambda_table is not None else {},
        path=str(path),
    )
    _write_checkpoint_dir(ckpt, {"backend": backend.state_dict()})
    return ckpt


class FitResult(NamedTuple):
    final: Checkpoint
    best: Checkpoint
    metrics: list[dict]


def _metric(step, loss: LossBreakdown | None, lr, val_acc=None) -> dict:
    rec: dict[str, Any] = {"step": step}
    if loss is not None:
        rec.update(loss.as_dict())
    if lr is not None:
        rec["lr"] = lr
    if val_acc is not None:
        rec["val_acc"] = val_acc
    return rec


def split_validation(samples: Sequence[Sample], fraction=0.1, seed=0) -> tuple[list[Sample], list[Sample]]:
    """Seeded hold-out split of a counting set: ``(train, validation)``."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = max(1, round(len(samples) * fraction)) if fraction > 0 else 0
    val = set(order[:n_val].tolist())
    return (
        [s for i, s in enumerate(samples) if i not in val],
        [s for i, s in enumerate(samples) if i in val],
    )


def fit(
    backend,
    general_pool: Sequence[Sample],
    counting_pool: Sequence[Sample],
    validation_set: Sequence[Sample],
    config: TrainingConfig,
    load_image: Callable | None = None,
    frequencies: ClassFrequencyTable | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> FitResult:
    """Train for ``config.total_steps`` steps, validating and checkpointing periodically.

    Validation accuracy is zero-shot counting accuracy on ``validation_set``;
    the returned ``best`` checkpoint is the one with the highest accuracy
    (earliest on ties). With ``config.checkpoint_dir`` set, checkpoints and
    ``metrics.jsonl`` are written there and ``config.resume`` picks up from
    the latest checkpoint.
    """
    torch.manual_seed(config.seed)
    sampler = BatchSampler(general_pool, counting_pool, config)
    if frequencies is None and counting_pool:
        frequencies = ClassFrequencyTable.from_counts(c.count for c in sampler.captions)
    lambdas = LambdaTable.build(
        config.scheme if frequencies else LambdaScheme("constant", config.lambda_0),
        frequencies or ClassFrequencyTable({2: 1}),
    )
    optimizer = make_optimizer(backend, config)

    spe = steps_per_epoch(config, len(counting_pool), len(general_pool))
    if abs(spe * config.epochs - config.total_steps) > spe:
        log.warning(
            "epochs=%d x %d steps/epoch does not match total_steps=%d; training runs total_steps",
            config.epochs, spe, config.total_steps,
        )

    root = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    metrics: list[dict] = []
    best: Checkpoint | None = None
    start = 0
    final = None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        if config.resume and (root / "latest.json").exists():
            final, best, metrics = _resume(root, backend, optimizer, sampler)
            start = final.step
            log.info("resumed from step %d", start)

    def validate() -> float:
        return evaluate(backend, validation_set, load_image).accuracy

    writer = ThreadPoolExecutor(max_workers=1)
    pending: list[Future] = []
    metrics_fh = None
    if root is not None:
        metrics_fh = open(root / "metrics.jsonl", "w", encoding="utf-8")
        for rec in metrics:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def emit(rec):
        metrics.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_fh.flush()
        if callback is not None:
            callback(rec["step"], rec)

    def checkpoint(step, acc) -> Checkpoint:
        nonlocal best
        state = {
            "backend": copy.deepcopy(backend.state_dict()),
            "optimizer": copy.deepcopy(optimizer.state_dict()),
            "sampler": copy.deepcopy(sampler.state()),
        }
        ckpt = Checkpoint(
            step, acc, backend.describe(), config.to_dict(), lambdas.to_dict(),
            path=str(root / f"step_{step:07d}") if root is not None else None,
            state=state,
        )
        is_best = best is None or acc > best.validation_accuracy
        if is_best:
            best = ckpt
        if root is not None:
            pending.append(writer.submit(_write_checkpoint, ckpt, state, root, is_best))
        return ckpt

    try:
        if start == 0:
            emit(_metric(0, None, lr_at(0, config), validate()))
        for step in range(start + 1, config.total_steps + 1):
            loss = train_step(backend, optimizer, sampler.build_batch(), config, step, lambdas)
            val_acc = None
            if step % config.validation_interval == 0 or step == config.total_steps:
                val_acc = validate()
            emit(_metric(step, loss, lr_at(step, config), val_acc))
            if val_acc is not None:
                final = checkpoint(step, val_acc)
    finally:
        writer.shutdown(wait=True)
        if metrics_fh is not None:
            metrics_fh.close()
    for fut in pending:
        fut.result()
    return FitResult(final, best, metrics)


def _resume(root: Path, backend, optimizer, sampler) -> tuple[Checkpoint, Checkpoint | None, list[dict]]:
    latest = json.loads((root / "latest.json").read_text())
    ckpt = Checkpoint.from_dir(root / latest["path"])
    state = _load_state(ckpt.path)
    backend.load_state_dict(state["backend"])
    optimizer.load_state_dict(state["optimizer"])
    sampler.load(state["sampler"])
    best = None
    if (root / "best.json").exists():
        best = Checkpoint.from_dir(root / json.loads((root / "best.json").read_text())["path"])
    metrics = []
    if (root / "metrics.jsonl").exists():
        with open(root / "metrics.jsonl", encoding="utf-8") as fh:
            metrics = [json.loads(line) for line in fh if line.strip()]
        metrics = [m for m in metrics if m["step"] <= ckpt.step]
    return ckpt, best, metrics
