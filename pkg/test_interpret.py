"""
Tests for PMI statistics, hop-relevance alignment and the perturbation study.
"""

import math

import numpy as np
import pytest

from app.core.exceptions import DataError
from app.schemas.config import ModelConfig
from app.schemas.events import PAD, PredictionInstance
from app.services.interpret import (
    alignment_study,
    build_pmi,
    donor_replacement,
    hop_relevance,
    influential_node,
    jaccard,
    kendall_tau,
    perturb,
    perturb_random,
    perturbation_study,
    replace_app,
    score_alignment,
    sign_test,
)
from app.services.model import ForwardTrace, MISAppModel
from app.services.session_graphs import build_graphs

TOY = ModelConfig(
    dim=8, num_apps=12, window=8, intent_window=3, fusion_heads=2, heads=2, layers=1, gcn_layers=2, dropout=0.0
)


def instance(apps, target, window=8):
    return PredictionInstance(
        user_id="u", window=[PAD] * (window - len(apps)) + list(apps), window_len=len(apps), target=target, tau=3
    )


def softmax(values):
    shifted = np.exp(np.asarray(values) - np.max(values))
    return shifted / shifted.sum()


def fake_trace(window, probabilities, hop_weights):
    graphs = build_graphs(window)
    return ForwardTrace(
        nodes=sorted(graphs.nodes),
        node_reprs=[],
        pool_attention=[],
        graph_embeddings=np.zeros((len(hop_weights), 2)),
        intent=np.zeros(2),
        hop_weights=np.asarray(hop_weights, dtype=float),
        mixed=np.zeros(2),
        fused=np.zeros(2),
        decoded=np.zeros(2),
        probabilities=np.asarray(probabilities, dtype=float),
        graphs=graphs,
    )


def test_pmi_values():
    table = build_pmi([[1, 2], [1, 2], [3], [3]])
    assert table.p(1) == 0.5
    assert table.pmi(1, 2) == pytest.approx(math.log(2))
    assert table.pmi(2, 1) == table.pmi(1, 2)
    assert table.p(3) == 0.5

    everywhere = build_pmi([[1, 4], [1], [1, 5, 1]])
    assert everywhere.p(1) == 1.0
    apart = everywhere.pmi(4, 5)
    assert math.isfinite(apart) and apart < -10
    with pytest.raises(DataError):
        build_pmi([])


def test_hop_relevance_single_edge():
    table = build_pmi([[1, 3], [2, 3], [1], [2, 4]])
    sims, empty = hop_relevance(build_graphs([1, 2]), table, target=3)
    assert sims[0] == pytest.approx((table.pmi(1, 3) + table.pmi(2, 3)) / 2)
    assert sims[1:] == [0.0, 0.0]
    assert empty == [False, True, True]


def test_hop_relevance_constant_pmi():
    table = build_pmi([[1, 2, 3, 4, 9]])
    sims, _ = hop_relevance(build_graphs([1, 2, 3, 4]), table, target=9)
    assert sims == pytest.approx([table.pmi(1, 9)] * 3)


def test_kendall_tau_examples():
    assert kendall_tau([1, 2, 3], [10, 20, 30]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(DataError):
        kendall_tau([1, 2], [1])


def tau_b_oracle(xs, ys):
    dx = np.sign(np.subtract.outer(xs, xs))
    dy = np.sign(np.subtract.outer(ys, ys))
    upper = np.triu_indices(len(xs), k=1)
    pairs = len(upper[0])
    untied_x = pairs - np.sum(dx[upper] == 0)
    untied_y = pairs - np.sum(dy[upper] == 0)
    if untied_x == 0 or untied_y == 0:
        return 0.0
    return float(np.sum(dx[upper] * dy[upper]) / np.sqrt(untied_x * untied_y))


def test_kendall_tau_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        xs = rng.integers(0, 4, size=n).astype(float).tolist()
        ys = rng.integers(0, 4, size=n).astype(float).tolist()
        assert kendall_tau(xs, ys) == pytest.approx(tau_b_oracle(xs, ys), abs=1e-12)


def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    assert jaccard(set(), set()) == 1.0


def test_score_alignment_argmax_ties_prefer_lower_hop():
    tau, agree = score_alignment([0.2, 0.2, 0.1], [0.4, 0.4, 0.2])
    assert tau == pytest.approx(1.0)
    assert agree


def test_alignment_with_softmax_weights_is_perfect():
    table = build_pmi([[1, 5], [4, 5], [2, 3], [1, 2, 3, 4]])
    windows = [[1, 2, 3, 4], [4, 2, 3, 1], [1, 3, 2, 4]]
    instances, full, single = [], [], []
    for i, window in enumerate(windows):
        inst = instance(window, target=5)
        sims, _ = hop_relevance(build_graphs(inst.window), table, 5)
        probs = np.full(12, 0.01)
        probs[4] = 0.5 + 0.1 * i
        wrong = np.full(12, 0.01)
        wrong[0] = 0.5
        instances.append(inst)
        full.append(fake_trace(inst.window, probs, softmax(sims)))
        single.append(fake_trace(inst.window, wrong, [1.0]))

    report = alignment_study(instances, full, single, table, top_n=2)
    assert report.qualifying == 3
    assert [s.index for s in report.samples] == [2, 1]
    assert report.mean_tau == pytest.approx(1.0)
    assert report.consistency_rate == 1.0
    assert report.warnings == []

    short = alignment_study(instances, full, single, table, top_n=10)
    assert len(short.samples) == 3 and short.warnings
    with pytest.raises(DataError):
        alignment_study(instances, full[:1], single, table)


def test_alignment_skips_samples_the_one_hop_model_gets_right():
    table = build_pmi([[1, 2, 5]])
    inst = instance([1, 2], target=5)
    probs = np.full(12, 0.01)
    probs[4] = 0.9
    trace = fake_trace(inst.window, probs, [0.5, 0.3, 0.2])
    report = alignment_study([inst], [trace], [trace], table, top_n=1)
    assert report.samples == []
    assert report.qualifying == 0


def test_donor_replacement_rules():
    assert donor_replacement([1, 2, 3], 4, [[1, 2, 5], [1, 6, 7]]) == 5
    assert donor_replacement([1, 2, 3], 4, [[1, 2, 3, 4], [9, 8]]) == 8
    assert donor_replacement([1, 2, 3], 4, [[1, 2, 9], [1, 2, 7]]) == 9
    assert donor_replacement([1, 2], 3, [[1, 2, 3]]) is None
    assert donor_replacement([1, 2], 3, []) is None


def test_replace_app_modes():
    inst = instance([1, 2, 1, 3], target=4)
    assert replace_app(inst, 1, 9).apps == [9, 2, 9, 3]
    assert replace_app(inst, 1, 9, mode="first").apps == [9, 2, 1, 3]


def test_sign_test():
    assert sign_test(5, 0) == pytest.approx(1 / 32)
    assert sign_test(0, 0) == 1.0
    assert sign_test(3, 3) == pytest.approx(42 / 64)


def correctly_predicted(model, windows):
    """Instances whose target is the model's own top-1 prediction."""
    result = []
    for window in windows:
        draft = instance(window, target=1)
        result.append(draft.model_copy(update={"target": model.forward(draft).top1}))
    return result


def test_perturb_replaces_influential_app():
    model = MISAppModel.initialize(TOY, np.random.default_rng(0))
    table = build_pmi([[1, 2, 3, 4, 5], [2, 6], [3, 7, 8]])
    donors = [[1, 2, 10, 11], [6, 7]]
    inst = correctly_predicted(model, [[1, 2, 3, 4]])[0]
    trace = model.forward(inst)
    hop, node = influential_node(trace, table, inst.target)

    result = perturb(inst, model, table, donors)
    if node is None:
        assert result.skipped
        return
    replacement = donor_replacement(inst.apps, inst.target, donors)
    assert not result.skipped
    assert result.hop == hop and result.influential == node
    assert result.replacement == replacement
    assert node not in result.perturbed_window and replacement in result.perturbed_window
    assert result.delta == pytest.approx(result.original_prob - result.perturbed_prob)
    assert result.original_prob == pytest.approx(trace.prob(inst.target))


def test_perturb_skips_without_donor():
    model = MISAppModel.initialize(TOY, np.random.default_rng(1))
    table = build_pmi([[1, 2, 3]])
    inst = correctly_predicted(model, [[1, 2, 3]])[0]
    result = perturb(inst, model, table, donors=[[1, 2, 3]])
    assert result.skipped
    assert result.delta == 0.0


def test_perturb_random_avoids_the_influential_app():
    model = MISAppModel.initialize(TOY, np.random.default_rng(2))
    table = build_pmi([[1, 2, 3, 4, 5, 6]])
    inst = correctly_predicted(model, [[1, 2, 3, 4, 5]])[0]
    trace = model.forward(inst)
    _, node = influential_node(trace, table, inst.target)
    result = perturb_random(inst, model, table, [[9, 10]], np.random.default_rng(0), trace)
    assert not result.skipped
    assert result.influential != node
    assert result.influential in inst.apps


def test_perturbation_study_pairs_both_arms():
    model = MISAppModel.initialize(TOY, np.random.default_rng(3))
    windows = [[1, 2, 3, 4], [2, 3, 4, 5, 6], [5, 6, 7, 8], [3, 1, 4, 1, 5]]
    instances = correctly_predicted(model, windows)
    traces = model.traces(instances)
    table = build_pmi([[1, 2, 3, 4, 5, 6, 7, 8], [1, 9], [2, 10]])
    study = perturbation_study(instances, traces, model, table, [[9, 10, 11, 12]], np.random.default_rng(0), limit=3)
    assert 0 < len(study.critical) <= 3
    assert len(study.critical) == len(study.random)
    assert study.wins + study.losses <= len(study.critical)
    assert 0.0 < study.p_value <= 1.0
    assert [r.index for r in study.critical] == [r.index for r in study.random]


@pytest.mark.slow
def test_pmi_selected_perturbation_hurts_more_than_random():
    from app.schemas.config import GeneratorSpec, IngestConfig, TrainConfig
    from app.services.ingest import preprocess
    from app.services.synth import random_routine_library, synth_generate
    from app.services.training import fit

    rng = np.random.default_rng(0)
    spec = GeneratorSpec(num_users=30, num_apps=20, routines=random_routine_library(20, [3, 3, 4, 4], rng), noise_rate=0.1)
    dataset = preprocess(synth_generate(spec, rng).events_text().splitlines(), IngestConfig(), 8, np.random.default_rng(1))
    split = dataset.splits["standard"]
    config = ModelConfig(dim=32, layers=1, heads=4, fusion_heads=4, num_apps=dataset.vocabulary.size)
    result = fit(
        split.train,
        split.val,
        config,
        TrainConfig(batch_size=64, lr=0.005, epochs=15),
        init_rng=np.random.default_rng(2),
        shuffle_rng=np.random.default_rng(3),
        dropout_rng=np.random.default_rng(4),
    )
    sessions = [s.apps for s in dataset.train_sessions["standard"]]
    model = result.model
    study = perturbation_study(
        split.test, model.traces(split.test), model, build_pmi(sessions), sessions, np.random.default_rng(5)
    )
    assert len(study.critical) >= 100
    assert study.mean_delta_critical > study.mean_delta_random
    assert study.p_value < 0.05
