import json
import math
from collections import Counter

import numpy as np
import pytest
import torch

from countclip.captions import NUMBER_WORDS, detect_count
from countclip.evaluator import evaluate
from countclip.lambdas import LambdaScheme, LambdaTable
from countclip.losses import clip_contrastive_loss, combined_loss
from countclip.frequencies import ClassFrequencyTable
from countclip.trainer import (
    BatchSampler,
    Checkpoint,
    NonFiniteLossError,
    TrainingConfig,
    embed_batch,
    fit,
    lr_at,
    make_optimizer,
    save_checkpoint,
    split_validation,
    steps_per_epoch,
    train_step,
)

FAST = dict(learning_rate=1e-2, total_steps=120, epochs=14, lambda_scheme="modal",
            loss_variant="count_plus", validation_interval=40)


def constant_lambdas(lambda_0=1.0):
    return LambdaTable.build(LambdaScheme("constant", lambda_0), ClassFrequencyTable({2: 1}))


def test_lr_schedule_points():
    cfg = TrainingConfig(total_steps=20_000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10_000, cfg) == 5e-6
    assert math.isclose(lr_at(5_000, cfg), 2.5e-6)
    assert math.isclose(lr_at(15_000, cfg), 2.5e-6)
    assert lr_at(20_000, cfg) < 1e-12
    flat = TrainingConfig(use_scheduler=False)
    assert {lr_at(s, flat) for s in (0, 1, 12_345, 20_000)} == {5e-6}
    with pytest.raises(ValueError):
        lr_at(20_001, cfg)


def test_config_validation():
    cfg = TrainingConfig()
    assert (cfg.n_general, cfg.n_counting) == (4, 1)
    assert TrainingConfig(counting_fraction=0).n_counting == 0
    with pytest.raises(ValueError, match="not an integer"):
        TrainingConfig(batch_size=5, counting_fraction="1/3")
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=1, counting_fraction=0)
    with pytest.raises(ValueError):
        TrainingConfig(loss_variant="count3")
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"learning_rte": 1e-3})
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def test_epoch_accounting_matches_default_schedule():
    cfg = TrainingConfig()
    assert steps_per_epoch(cfg, 2000) * cfg.epochs == cfg.total_steps


def test_sampler_composition_and_replay(synthetic_task):
    cfg = TrainingConfig(seed=3)
    a = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg)
    b = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg)
    for _ in range(20):
        x, y = a.build_batch(), b.build_batch()
        assert x == y
        assert x.counting_mask == [False] * 4 + [True]
        caption = detect_count(x.samples[-1].caption)
        assert x.counts == [caption.count]
        cf = detect_count(x.cf_captions[0][0])
        assert cf.count != caption.count


def test_sampler_count_plus_and_epochs(synthetic_task):
    cfg = TrainingConfig(loss_variant="count_plus", batch_size=6, counting_fraction="1/2")
    s = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg)
    n = len(synthetic_task.counting_pool)
    seen = Counter()
    for _ in range(n // 3):
        batch = s.build_batch()
        assert all(len(c) == 8 for c in batch.cf_captions)
        seen.update(x.id for x in batch.samples[3:])
    # one full pass: every counting sample exactly once
    assert len(seen) == n and set(seen.values()) == {1}


def test_sampler_without_counting(synthetic_task):
    cfg = TrainingConfig(counting_fraction=0)
    batch = BatchSampler(synthetic_task.general_pool, [], cfg).build_batch()
    assert batch.n_counting == 0 and len(batch.samples) == 5 and batch.cf_captions == []


def test_zero_counting_never_encodes_counterfactuals(synthetic_task):
    backend = synthetic_task.backend()
    calls = []
    original = backend.encode_text
    backend.encode_text = lambda caps: calls.append(list(caps)) or original(caps)
    cfg = TrainingConfig(counting_fraction=0, learning_rate=1e-3)
    batch = BatchSampler(synthetic_task.general_pool, [], cfg).build_batch()
    train_step(backend, make_optimizer(backend, cfg), batch, cfg, 5, constant_lambdas())
    assert calls == [[s.caption for s in batch.samples]]


def test_zero_learning_rate_is_a_no_op(synthetic_task):
    backend = synthetic_task.backend()
    before = {k: v.clone() for k, v in backend.state_dict().items()}
    cfg = TrainingConfig(learning_rate=0.0)
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    train_step(backend, make_optimizer(backend, cfg), batch, cfg, 10, constant_lambdas())
    for k, v in backend.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_repeated_steps_reduce_loss_on_a_fixed_batch(synthetic_task):
    backend = synthetic_task.backend()
    cfg = TrainingConfig(learning_rate=1e-2, use_scheduler=False)
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    opt = make_optimizer(backend, cfg)
    losses = [train_step(backend, opt, batch, cfg, 1, constant_lambdas()).total.item() for _ in range(50)]
    assert losses[-1] < losses[0]


def test_zero_lambda_gives_pure_clip_gradients(synthetic_task):
    cfg = TrainingConfig(loss_variant="count_plus", batch_size=6, counting_fraction="1/2")
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    table = ClassFrequencyTable.from_counts(range(2, 11))
    for kind in ("constant", "norm", "modal", "log"):
        grads = []
        for use_combined in (True, False):
            backend = synthetic_task.backend()
            emb = embed_batch(backend, batch)
            temp = 1.0 / backend.logit_scale.exp()
            if use_combined:
                lambdas = LambdaTable.build(LambdaScheme(kind, 0.0), table)
                loss = combined_loss(emb, lambdas, variant="count_plus", temperature=temp).total
            else:
                loss = clip_contrastive_loss(emb.image_emb, emb.text_emb, temp)
            loss.backward()
            grads.append([p.grad.clone() for p in backend.parameters()])
        for g1, g2 in zip(*grads):
            assert torch.allclose(g1, g2, rtol=0, atol=1e-12)


def test_gradients_reach_every_parameter(synthetic_task):
    backend = synthetic_task.backend()
    cfg = TrainingConfig(loss_variant="count_plus")
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    emb = embed_batch(backend, batch)
    combined_loss(emb, constant_lambdas(), variant="count_plus", temperature=1 / backend.logit_scale.exp()).total.backward()
    for name, p in backend.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_non_finite_loss_aborts(synthetic_task):
    backend = synthetic_task.backend()
    with torch.no_grad():
        backend.logit_scale.fill_(1e4)  # exp overflows: temperature 0
    cfg = TrainingConfig()
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    with pytest.raises(NonFiniteLossError):
        train_step(backend, make_optimizer(backend, cfg), batch, cfg, 1, constant_lambdas())


def test_logit_scale_clamped(synthetic_task):
    backend = synthetic_task.backend()
    with torch.no_grad():
        backend.logit_scale.fill_(6.0)
    cfg = TrainingConfig(learning_rate=1e-3)
    batch = BatchSampler(synthetic_task.general_pool, synthetic_task.counting_pool, cfg).build_batch()
    train_step(backend, make_optimizer(backend, cfg), batch, cfg, 10_000, constant_lambdas())
    assert backend.logit_scale.item() == pytest.approx(math.log(100.0), rel=1e-6)


def test_text_encoder_is_deterministic(synthetic_task):
    a = synthetic_task.backend(seed=4).encode_text(["three cats", "three cats"])
    b = synthetic_task.backend(seed=4).encode_text(["three cats", "three cats"])
    assert torch.equal(a[0], a[1]) and torch.equal(a, b)
    # batch shape only changes the BLAS reduction order
    single = synthetic_task.backend(seed=4).encode_text(["three cats"])
    assert torch.allclose(single[0], a[0], atol=1e-6)


def test_fit_checkpoints_round_trip(synthetic_task, tmp_path):
    cfg = TrainingConfig(**FAST, checkpoint_dir=str(tmp_path / "run"))
    result = fit(synthetic_task.backend(), synthetic_task.general_pool, synthetic_task.counting_pool,
                 synthetic_task.validation, cfg)
    assert result.best.validation_accuracy >= result.final.validation_accuracy
    assert result.final.step == 120
    root = tmp_path / "run"
    logged = [json.loads(line) for line in (root / "metrics.jsonl").read_text().splitlines()]
    assert logged == result.metrics
    assert [m["step"] for m in logged] == list(range(121))
    assert {"l_clip", "l_count", "total", "lr"} <= set(logged[1])
    assert sorted(p.name for p in root.glob("step_*")) == ["step_0000040", "step_0000080", "step_0000120"]
    for marker, ckpt in (("best.json", result.best), ("latest.json", result.final)):
        loaded = Checkpoint.from_dir(root / json.loads((root / marker).read_text())["path"])
        assert loaded.step == ckpt.step
        assert loaded.config == cfg.to_dict()
        acc = evaluate(loaded.load_backend(), synthetic_task.validation).accuracy
        assert acc == ckpt.validation_accuracy


def test_resume_reproduces_uninterrupted_run(synthetic_task, tmp_path):
    def run(root, stop_at=None, resume=False):
        cfg = TrainingConfig(**FAST, checkpoint_dir=str(root), resume=resume)

        def stop(step, rec):
            if step == stop_at:
                raise KeyboardInterrupt

        backend = synthetic_task.backend()
        out = fit(backend, synthetic_task.general_pool, synthetic_task.counting_pool,
                  synthetic_task.validation, cfg, callback=stop)
        return out, backend

    full, full_backend = run(tmp_path / "a")
    with pytest.raises(KeyboardInterrupt):
        run(tmp_path / "b", stop_at=61)
    resumed, resumed_backend = run(tmp_path / "b", resume=True)
    assert resumed.metrics == full.metrics
    for (k, v), w in zip(full_backend.state_dict().items(), resumed_backend.state_dict().values()):
        assert torch.equal(v, w), k
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_training_separates_number_words(synthetic_task):
    backend = synthetic_task.backend()

    def mean_offdiag_similarity():
        with torch.no_grad():
            e = backend.encode_text(list(NUMBER_WORDS))
            e = e / e.norm(dim=1, keepdim=True)
            s = (e @ e.T).numpy()
        return s[~np.eye(9, dtype=bool)].mean()

    before = mean_offdiag_similarity()
    fit(backend, synthetic_task.general_pool, synthetic_task.counting_pool, synthetic_task.validation,
        TrainingConfig(**FAST))
    assert mean_offdiag_similarity() < before


def test_save_checkpoint_standalone(synthetic_task, tmp_path):
    backend = synthetic_task.backend(seed=2)
    save_checkpoint(backend, tmp_path / "ckpt")
    loaded = Checkpoint.from_dir(tmp_path / "ckpt").load_backend()
    assert torch.equal(loaded.encode_text(["two cups"]), backend.encode_text(["two cups"]))


def test_split_validation(synthetic_task):
    train, val = split_validation(synthetic_task.counting_pool, 0.1, seed=1)
    assert len(val) == round(0.1 * len(synthetic_task.counting_pool))
    assert len(train) + len(val) == len(synthetic_task.counting_pool)
    assert not {s.id for s in train} & {s.id for s in val}
    assert split_validation(synthetic_task.counting_pool, 0.1, seed=1) == (train, val)
