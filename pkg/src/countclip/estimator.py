"""scikit-learn style wrapper around the fine-tuning loop."""

from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .captions import detect_count, make_candidate_captions
from .data import Sample
from .evaluator import evaluate, predict_counts
from .trainer import TrainingConfig, fit, split_validation
from .validation import check_counts


def _as_samples(X, y=None) -> list[Sample]:
    samples = []
    for i, item in enumerate(X):
        if isinstance(item, Sample):
            s = item
        elif isinstance(item, dict):
            s = Sample(caption=item["caption"], image=item.get("image"), count=item.get("count"), id=item.get("id"))
        else:
            raise TypeError(f"expected Sample or dict items, got {type(item).__name__}")
        if y is not None:
            s = Sample(s.caption, s.image, int(y[i]), s.id, s.meta)
        samples.append(s)
    return samples


class CountingFineTuner(BaseEstimator):
    """Fine-tune a dual encoder for zero-shot counting.

    ``fit`` takes counting samples (caption with one spelled-out count plus
    an image) and, optionally, general image-caption pairs and a held-out
    validation set; without one, ``validation_fraction`` of ``X`` is held
    out. ``predict`` returns the zero-shot count for each item and ``score``
    the counting accuracy.

    ``backend`` is an untrained module (see :mod:`countclip.backends`). A
    copy is trained, so refitting starts from the same weights; the trained
    copy is ``backend_``, holding the early-stopping checkpoint when
    ``restore_best`` is set and the final weights otherwise.
    """

    def __init__(
        self,
        backend=None,
        learning_rate=5e-6,
        total_steps=20_000,
        epochs=10,
        batch_size=5,
        counting_fraction=0.2,
        lambda_scheme="constant",
        lambda_0=1.0,
        loss_variant="count",
        use_scheduler=True,
        normalize_training_embeddings=True,
        validation_interval=1000,
        validation_fraction=0.1,
        checkpoint_dir=None,
        restore_best=True,
        seed=0,
    ):
        self.backend = backend
        self.learning_rate = learning_rate
        self.total_steps = total_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.counting_fraction = counting_fraction
        self.lambda_scheme = lambda_scheme
        self.lambda_0 = lambda_0
        self.loss_variant = loss_variant
        self.use_scheduler = use_scheduler
        self.normalize_training_embeddings = normalize_training_embeddings
        self.validation_interval = validation_interval
        self.validation_fraction = validation_fraction
        self.checkpoint_dir = checkpoint_dir
        self.restore_best = restore_best
        self.seed = seed

    def _config(self) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate,
            total_steps=self.total_steps,
            epochs=self.epochs,
            batch_size=self.batch_size,
            counting_fraction=self.counting_fraction,
            lambda_scheme=self.lambda_scheme,
            lambda_0=self.lambda_0,
            loss_variant=self.loss_variant,
            use_scheduler=self.use_scheduler,
            seed=self.seed,
            normalize_training_embeddings=self.normalize_training_embeddings,
            validation_interval=self.validation_interval,
            validation_fraction=self.validation_fraction,
            checkpoint_dir=self.checkpoint_dir,
        )

    def fit(self, X, y=None, general=None, validation=None, load_image=None):
        if self.backend is None:
            raise ValueError("CountingFineTuner needs a backend")
        if y is not None:
            y = check_counts(y)
        counting = _as_samples(X, y)
        for s in counting:
            c = detect_count(s.caption)
            if c is None or (s.count is not None and s.count != c.count):
                raise ValueError(f"caption {s.caption!r} does not spell its count {s.count}")
        config = self._config()
        if validation is None:
            counting, validation = split_validation(counting, config.validation_fraction, config.seed)
        backend = copy.deepcopy(self.backend)
        result = fit(
            backend, _as_samples(general or []), counting, _as_samples(validation),
            config, load_image=load_image,
        )
        self.backend_ = result.best.load_backend() if self.restore_best else backend
        self.final_checkpoint_ = result.final
        self.best_checkpoint_ = result.best
        self.metrics_ = result.metrics
        self.lambda_table_ = result.final.lambda_table
        return self

    def _backend(self):
        return self.backend_ if hasattr(self, "backend_") else self.backend

    def predict(self, X):
        """Predicted count per item. Each caption must spell some count; it is swapped through 2..10."""
        backend = self._backend()
        if backend is None:
            check_is_fitted(self, "backend_")
        samples = _as_samples(X)
        out = []
        backend.eval()
        with torch.no_grad():
            for s in samples:
                caption = detect_count(s.caption)
                if caption is None:
                    raise ValueError(f"caption {s.caption!r} has no single number word to vary")
                cands = make_candidate_captions(caption)
                img = backend.encode_image([s.image]).double().numpy()
                txt = backend.encode_text(cands).double().numpy()
                out.append(int(predict_counts(img, txt[None])[0]))
        return np.array(out, dtype=np.int64)

    def score(self, X, y=None):
        samples = _as_samples(X, None if y is None else check_counts(y))
        return evaluate(self._backend(), samples).accuracy

