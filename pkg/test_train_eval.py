"""
Tests for ranking metrics, the MFU / MRU baselines and the training loop.
"""

import math

import numpy as np
import pytest

from app.core.exceptions import DataError, ShapeError, TrainingDivergedError
from app.schemas.config import GeneratorSpec, IngestConfig, ModelConfig, TrainConfig
from app.schemas.events import PAD, PredictionInstance
from app.services import autodiff as ad
from app.services import training
from app.services.baselines import baseline_mfu, baseline_mru, read_usage, usage_counts, write_usage
from app.services.ingest import TrainSession, preprocess
from app.services.metrics import acc_at_k, mrr_at_k, rank_from_scores, summarize
from app.services.synth import random_routine_library, synth_generate
from app.services.training import evaluate_model, fit, random_instances

TOY = dict(
    dim=8,
    num_apps=12,
    window=8,
    intent_window=3,
    fusion_heads=2,
    heads=2,
    layers=1,
    gcn_layers=2,
    dropout=0.0,
    num_categories=3,
)


def instance(user, apps, target, window=4):
    return PredictionInstance(
        user_id=user, window=[PAD] * (window - len(apps)) + list(apps), window_len=len(apps), target=target, tau=0
    )


def test_rank_from_scores_examples():
    assert rank_from_scores(np.array([[0.1, 0.9, 0.3]]), [2]).tolist() == [1]
    assert rank_from_scores(np.array([[0.4, 0.4, 0.4]]), [1]).tolist() == [1]
    assert rank_from_scores(np.array([[0.4, 0.4, 0.4]]), [3]).tolist() == [3]
    assert rank_from_scores(np.array([[0.5, 0.9, 0.7]]), [3]).tolist() == [2]
    with pytest.raises(DataError):
        rank_from_scores(np.array([[0.5, 0.9]]), [0])
    with pytest.raises(ShapeError):
        rank_from_scores(np.array([[0.5, 0.9]]), [1, 2])


def test_rank_from_scores_matches_sort_oracle():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 4, size=(200, 7)).astype(float)
    targets = rng.integers(1, 8, size=200)
    ranks = rank_from_scores(scores, targets)
    for row, target, rank in zip(scores, targets, ranks):
        order = sorted(range(7), key=lambda i: (-row[i], i))
        assert order.index(target - 1) + 1 == rank


def test_acc_and_mrr():
    assert acc_at_k([1, 2, 4], 3) == pytest.approx(2 / 3)
    assert acc_at_k([1, 2, 4], 4) == 1.0
    assert acc_at_k([2, 3], 1) == 0.0
    assert mrr_at_k([1, 2, 4], 3) == pytest.approx(0.5)
    assert mrr_at_k([1, 2, 4], 3, truncate=False) == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert mrr_at_k([1, 1, 1], 5) == 1.0
    with pytest.raises(DataError):
        acc_at_k([], 1)


def test_summarize_flat_keys():
    result = summarize([1, 2, 4], acc_ks=(1, 3), mrr_ks=(3,))
    assert result.flat() == {"ACC@1": pytest.approx(1 / 3), "ACC@3": pytest.approx(2 / 3), "MRR@3": pytest.approx(0.5)}
    assert "ranks" not in result.model_dump()
    assert summarize([]).n == 0


def test_mfu_baseline():
    usage = usage_counts([TrainSession("solo", [3, 3, 3]), TrainSession("other", [1, 2, 1])])
    tests = [instance("solo", [1], 3), instance("solo", [2], 3)]
    assert baseline_mfu(usage, tests, num_apps=4).tolist() == [1, 1]
    # unseen user: global counts 3 -> 3, 1 -> 2, 2 -> 1
    assert baseline_mfu(usage, [instance("new", [4], 1)], num_apps=4).tolist() == [2]


def test_usage_round_trip(tmp_path):
    usage = usage_counts([TrainSession("u", [2, 5, 2])])
    write_usage(tmp_path / "usage.json", usage)
    assert read_usage(tmp_path / "usage.json") == {"u": {2: 2, 5: 1}}


def test_mru_baseline():
    assert baseline_mru([instance("u", [2, 3, 1], 1)], num_apps=5).tolist() == [1]
    assert baseline_mru([instance("u", [2, 3, 1], 2)], num_apps=5).tolist() == [3]
    ranks = baseline_mru([instance("u", [2, 3, 1], 5)], num_apps=5)
    assert ranks[0] > 3


def synthetic_dataset(noise_rate, num_apps=10, seed=0):
    rng = np.random.default_rng(seed)
    spec = GeneratorSpec(
        num_users=20,
        num_apps=num_apps,
        routines=random_routine_library(num_apps, [2, 3, 3, 4], rng),
        noise_rate=noise_rate,
    )
    corpus = synth_generate(spec, rng)
    return preprocess(corpus.events_text().splitlines(), IngestConfig(), 8, np.random.default_rng(seed + 1))


def test_mru_never_hits_without_consecutive_repeats():
    dataset = synthetic_dataset(noise_rate=0.3)
    split = dataset.splits["cold_start"]
    ranks = baseline_mru(split.test, dataset.vocabulary.size)
    assert acc_at_k(ranks, 1) == 0.0


def test_mfu_on_pure_noise_is_chance_level():
    dataset = synthetic_dataset(noise_rate=1.0)
    split = dataset.splits["standard"]
    usage = usage_counts(dataset.train_sessions["standard"])
    ranks = baseline_mfu(usage, split.test, dataset.vocabulary.size)
    p = 1 / dataset.vocabulary.size
    sigma = math.sqrt(p * (1 - p) / len(ranks))
    assert abs(acc_at_k(ranks, 1) - p) < 3 * sigma


def test_pure_noise_targets_avoid_last_app_but_stay_uniform():
    dataset = synthetic_dataset(noise_rate=1.0)
    split = dataset.splits["standard"]
    instances = split.train + split.val + split.test
    assert all(inst.target != inst.apps[-1] for inst in instances)
    assert acc_at_k(baseline_mru(split.test, dataset.vocabulary.size), 1) == 0.0

    size = dataset.vocabulary.size
    counts = np.bincount([inst.target for inst in instances], minlength=size + 1)[1:]
    p = 1 / size
    sigma = math.sqrt(len(instances) * p * (1 - p))
    assert np.all(np.abs(counts - len(instances) * p) < 5 * sigma)


def toy_config(**updates):
    return ModelConfig(**{**TOY, **updates})


def run_fit(instances, val=(), seed=0, **train):
    config = toy_config()
    settings = TrainConfig(**{"batch_size": 4, "lr": 0.01, "epochs": 3, **train})
    return fit(
        instances,
        list(val),
        config,
        settings,
        init_rng=np.random.default_rng(seed),
        shuffle_rng=np.random.default_rng(seed + 1),
        dropout_rng=np.random.default_rng(seed + 2),
    )


def test_fit_memorizes_one_instance():
    single = random_instances(toy_config(), np.random.default_rng(3), 1)
    result = run_fit(single, lr=0.05, epochs=300, batch_size=1)
    assert result.history[-1].loss < 0.01
    assert result.best_epoch == 300


def test_fit_is_deterministic():
    data = random_instances(toy_config(), np.random.default_rng(4), 10)
    first = run_fit(data, val=data[:3], seed=7)
    second = run_fit(data, val=data[:3], seed=7)
    assert [r.loss for r in first.history] == [r.loss for r in second.history]
    for name in first.params:
        assert np.array_equal(first.params[name], second.params[name])


def test_fit_with_zero_learning_rate_keeps_parameters():
    data = random_instances(toy_config(), np.random.default_rng(5), 6)
    initial = training.init_params(toy_config(), np.random.default_rng(0))
    result = run_fit(data, lr=0.0, batch_size=16)
    for name, value in initial.items():
        assert np.array_equal(result.final_params[name], value)
    losses = [r.loss for r in result.history]
    assert losses == pytest.approx([losses[0]] * len(losses))


def test_frozen_rows_stay_zero():
    data = random_instances(toy_config(), np.random.default_rng(6), 8)
    result = run_fit(data, lr=0.05, epochs=2)
    assert np.all(result.final_params["app_embedding"][0] == 0)
    assert np.all(result.final_params["station_embedding"][0] == 0)


def test_fit_selects_best_validation_epoch():
    data = random_instances(toy_config(), np.random.default_rng(8), 12)
    result = run_fit(data, val=data[:4], epochs=4)
    best = max(result.history, key=lambda r: r.val_mrr5)
    assert result.best_epoch == min(r.epoch for r in result.history if r.val_mrr5 == best.val_mrr5)
    assert "val MRR@5" in result.history_text()


def test_fit_early_stopping():
    data = random_instances(toy_config(), np.random.default_rng(9), 8)
    result = run_fit(data, val=data[:2], lr=0.0, epochs=10, patience=2)
    assert len(result.history) == 3


def test_fit_rejects_empty_training_split():
    with pytest.raises(DataError):
        run_fit([])


def test_fit_reports_divergence(monkeypatch):
    def poisoned(logits, targets):
        return ad.scale(ad.sum_(logits), float("nan"))

    monkeypatch.setattr(training, "loss", poisoned)
    data = random_instances(toy_config(), np.random.default_rng(10), 4)
    with pytest.raises(TrainingDivergedError) as info:
        run_fit(data)
    assert info.value.epoch == 1
    assert set(info.value.last_good) == set(training.init_params(toy_config(), np.random.default_rng(0)))
    assert info.value.best is None


def test_fit_divergence_keeps_best_selected_parameters(monkeypatch):
    calls = []
    real_loss = training.loss

    def poisoned_after_first_batch(logits, targets):
        calls.append(1)
        value = real_loss(logits, targets)
        return value if len(calls) == 1 else ad.scale(value, float("nan"))

    monkeypatch.setattr(training, "loss", poisoned_after_first_batch)
    data = random_instances(toy_config(), np.random.default_rng(10), 4)
    with pytest.raises(TrainingDivergedError) as info:
        run_fit(data, val=data)
    assert info.value.epoch == 2
    assert info.value.best is info.value.last_good
    assert info.value.recoverable is info.value.best


def test_evaluate_model_and_profile():
    config = toy_config()
    model = training.MISAppModel.initialize(config, np.random.default_rng(0))
    data = random_instances(config, np.random.default_rng(11), 5)
    result = evaluate_model(model, data)
    assert result.n == 5
    assert set(result.flat()) == {"ACC@1", "ACC@3", "ACC@5", "MRR@3", "MRR@5"}
    assert evaluate_model(model, []).n == 0

    profile = training.profile_model(model, data, limit=3)
    assert profile.samples == 3
    assert profile.parameters == training.count_parameters(model.params)


def motif_run(seed, noise_rate, lengths, use_multihop=True, epochs=15):
    rng = np.random.default_rng(seed)
    spec = GeneratorSpec(num_users=20, num_apps=20, routines=random_routine_library(20, lengths, rng), noise_rate=noise_rate)
    corpus = synth_generate(spec, rng)
    dataset = preprocess(corpus.events_text().splitlines(), IngestConfig(), 8, np.random.default_rng(seed + 1))
    split = dataset.splits["standard"]
    config = ModelConfig(
        dim=32, layers=1, heads=4, fusion_heads=4, num_apps=dataset.vocabulary.size, use_multihop=use_multihop
    )
    result = fit(
        split.train,
        split.val,
        config,
        TrainConfig(batch_size=64, lr=0.005, epochs=epochs),
        init_rng=np.random.default_rng(seed + 2),
        shuffle_rng=np.random.default_rng(seed + 3),
        dropout_rng=np.random.default_rng(seed + 4),
    )
    return dataset, result


@pytest.mark.slow
def test_overfits_noise_free_motifs():
    dataset, result = motif_run(0, 0.0, [2, 3, 3, 4, 4], epochs=200)
    train = dataset.splits["standard"].train
    assert evaluate_model(result.model, train).acc[1] >= 0.95


@pytest.mark.slow
def test_multihop_model_beats_baselines_and_one_hop_ablation():
    full_scores, one_hop_scores = [], []
    for seed in (0, 1, 2):
        dataset, full = motif_run(seed, 0.3, [3, 3, 4, 4])
        _, single = motif_run(seed, 0.3, [3, 3, 4, 4], use_multihop=False)
        split = dataset.splits["standard"]
        size = dataset.vocabulary.size
        model_acc = evaluate_model(full.model, split.test).acc[1]
        usage = usage_counts(dataset.train_sessions["standard"])
        assert model_acc > acc_at_k(baseline_mfu(usage, split.test, size), 1)
        assert model_acc > acc_at_k(baseline_mru(split.test, size), 1)
        full_scores.append(model_acc)
        one_hop_scores.append(evaluate_model(single.model, split.test).acc[1])
    assert np.mean(full_scores) > np.mean(one_hop_scores)
