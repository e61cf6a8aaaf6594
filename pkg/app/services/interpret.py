"""
Interpretability Service

PMI-based hop relevance, rank agreement between hop weights and PMI
relevance (Kendall tau-b, top-1 consistency) and the structured perturbation
experiment that swaps the most PMI-relevant app of the dominant hop for a
Jaccard-matched donor app.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.exceptions import DataError
from app.schemas.events import PAD, PredictionInstance
from app.services.model import ForwardTrace, MISAppModel
from app.services.session_graphs import MultiHopGraphs

logger = logging.getLogger(__name__)


class PmiTable(BaseModel):
    """
    Session co-occurrence statistics.

    Attributes:
        sessions: Number of sessions counted
        app_sessions: App -> sessions containing it
        pair_sessions: ``"u,y"`` (u < y) -> sessions containing both
        epsilon: Smoothing added to numerator and denominator of the log
    """

    sessions: int
    app_sessions: Dict[int, int] = Field(default_factory=dict)
    pair_sessions: Dict[str, int] = Field(default_factory=dict)
    epsilon: float = 1e-9

    def p(self, app: int) -> float:
        return self.app_sessions.get(app, 0) / self.sessions

    def p_pair(self, u: int, y: int) -> float:
        if u == y:
            return self.p(u)
        key = f"{min(u, y)},{max(u, y)}"
        return self.pair_sessions.get(key, 0) / self.sessions

    def pmi(self, u: int, y: int) -> float:
        return math.log((self.p_pair(u, y) + self.epsilon) / (self.p(u) * self.p(y) + self.epsilon))


def build_pmi(sessions: Iterable[Sequence[int]], epsilon: float = 1e-9) -> PmiTable:
    """Count per-app and per-pair session occurrences (set semantics per session)."""
    total = 0
    apps: Counter = Counter()
    pairs: Counter = Counter()
    for session in sessions:
        members = sorted({a for a in session if a != PAD})
        total += 1
        apps.update(members)
        pairs.update(f"{u},{y}" for u, y in combinations(members, 2))
    if total == 0:
        raise DataError("PMI statistics need at least one training session")
    return PmiTable(sessions=total, app_sessions=dict(apps), pair_sessions=dict(pairs), epsilon=epsilon)


def hop_relevance(graphs: MultiHopGraphs, pmi: PmiTable, target: int, hops: int = 3) -> Tuple[List[float], List[bool]]:
    """
    sim_gamma = mean PMI(u, target) over the nodes incident to a hop's edges.

    Returns:
        (sims, empty) where ``empty[g]`` flags a hop without edges (sim 0)
    """
    sims, empty = [], []
    for hop in range(1, hops + 1):
        nodes = sorted(graphs.non_isolated(hop))
        if not nodes:
            sims.append(0.0)
            empty.append(True)
            continue
        sims.append(float(np.mean([pmi.pmi(u, target) for u in nodes])))
        empty.append(False)
    return sims, empty


def kendall_tau(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Tau-b over all pairs; 0 when either side is constant."""
    if len(xs) != len(ys):
        raise DataError(f"kendall_tau: lengths differ ({len(xs)} vs {len(ys)})")
    if len(xs) < 2:
        raise DataError("kendall_tau needs at least two observations")
    concordant = discordant = tied_x = tied_y = 0
    for i, j in combinations(range(len(xs)), 2):
        dx = np.sign(xs[i] - xs[j])
        dy = np.sign(ys[i] - ys[j])
        if dx == 0:
            tied_x += 1
        if dy == 0:
            tied_y += 1
        if dx * dy > 0:
            concordant += 1
        elif dx * dy < 0:
            discordant += 1
    pairs = len(xs) * (len(xs) - 1) // 2
    denominator = math.sqrt((pairs - tied_x) * (pairs - tied_y))
    if denominator == 0:
        return 0.0
    return (concordant - discordant) / denominator


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class AlignmentSample(BaseModel):
    index: int
    target: int
    window: List[int]
    gain: float
    sims: List[float]
    empty_hops: List[bool]
    hop_weights: List[float]
    tau: float
    top1_agree: bool


class AlignmentReport(BaseModel):
    """Per-sample hop relevance vs hop weights plus the aggregates."""

    samples: List[AlignmentSample] = Field(default_factory=list)
    mean_tau: float = 0.0
    consistency_rate: float = 0.0
    requested: int = 0
    qualifying: int = 0
    warnings: List[str] = Field(default_factory=list)


def score_alignment(sims: Sequence[float], hop_weights: Sequence[float]) -> Tuple[float, bool]:
    """Kendall tau and top-1 agreement (argmax ties resolved to the lower hop)."""
    return kendall_tau(sims, hop_weights), int(np.argmax(sims)) == int(np.argmax(hop_weights))


def alignment_study(
    instances: Sequence[PredictionInstance],
    full_traces: Sequence[ForwardTrace],
    one_hop_traces: Sequence[ForwardTrace],
    pmi: PmiTable,
    top_n: int = 50,
) -> AlignmentReport:
    """
    Compare hop weights with PMI relevance on the samples that gain most from
    multi-hop structure: full model right, 1-hop model wrong, ranked by
    P_full(y) - P_1hop(y) (ties: earlier sample first).
    """
    if not (len(instances) == len(full_traces) == len(one_hop_traces)):
        raise DataError("instances and traces must align one to one")
    candidates = []
    for i, (inst, full, single) in enumerate(zip(instances, full_traces, one_hop_traces)):
        if full.top1 == inst.target and single.top1 != inst.target:
            candidates.append((full.prob(inst.target) - single.prob(inst.target), i))
    candidates.sort(key=lambda c: (-c[0], c[1]))
    report = AlignmentReport(requested=top_n, qualifying=len(candidates))
    if len(candidates) < top_n:
        message = f"only {len(candidates)} samples qualify for the alignment study (requested {top_n})"
        logger.warning(message)
        report.warnings.append(message)

    for gain, i in candidates[:top_n]:
        inst, trace = instances[i], full_traces[i]
        sims, empty = hop_relevance(trace.graphs, pmi, inst.target, hops=len(trace.hop_weights))
        weights = [float(w) for w in trace.hop_weights]
        tau, agree = score_alignment(sims, weights)
        report.samples.append(
            AlignmentSample(
                index=i,
                target=inst.target,
                window=list(inst.window),
                gain=float(gain),
                sims=sims,
                empty_hops=empty,
                hop_weights=weights,
                tau=tau,
                top1_agree=agree,
            )
        )
    if report.samples:
        report.mean_tau = float(np.mean([s.tau for s in report.samples]))
        report.consistency_rate = float(np.mean([s.top1_agree for s in report.samples]))
    return report


class PerturbationResult(BaseModel):
    """
    Outcome of replacing one app of a window.

    Attributes:
        delta: original_prob - perturbed_prob for the target
        influential: Replaced app v
        replacement: Donor app v*
        skipped: True when no eligible v or v* exists
    """

    index: int = 0
    target: int
    window: List[int]
    perturbed_window: List[int] = Field(default_factory=list)
    hop: Optional[int] = None
    influential: Optional[int] = None
    replacement: Optional[int] = None
    original_prob: float = 0.0
    perturbed_prob: float = 0.0
    delta: float = 0.0
    original_top1: int = 0
    perturbed_top1: int = 0
    top1_changed: bool = False
    skipped: bool = False
    reason: str = ""


def influential_node(trace: ForwardTrace, pmi: PmiTable, target: int) -> Tuple[int, Optional[int]]:
    """Dominant hop (1-based) and its non-isolated node with max PMI to the target."""
    hop = int(np.argmax(trace.hop_weights)) + 1
    nodes = sorted(trace.graphs.non_isolated(hop))
    if not nodes:
        return hop, None
    return hop, max(nodes, key=lambda u: pmi.pmi(u, target))


def donor_replacement(window_apps: Sequence[int], target: int, donors: Sequence[Sequence[int]]) -> Optional[int]:
    """
    Lowest-index app outside the window (and not the target) from the donor
    sequence with the highest Jaccard similarity; donors without such an app
    are passed over and ties go to the earlier donor.
    """
    present = set(window_apps)
    best: Optional[Tuple[float, int]] = None
    for i, donor in enumerate(donors):
        eligible = sorted({a for a in donor if a != PAD and a not in present and a != target})
        if not eligible:
            continue
        score = jaccard(present, [a for a in donor if a != PAD])
        if best is None or score > best[0]:
            best = (score, eligible[0])
    return None if best is None else best[1]


def replace_app(instance: PredictionInstance, old: int, new: int, mode: str = "all") -> PredictionInstance:
    window = list(instance.window)
    for position, app in enumerate(window):
        if app == old:
            window[position] = new
            if mode == "first":
                break
    return instance.model_copy(update={"window": window})


def _apply(
    model: MISAppModel,
    instance: PredictionInstance,
    trace: ForwardTrace,
    node: int,
    replacement: int,
    mode: str,
    result: PerturbationResult,
) -> PerturbationResult:
    perturbed = replace_app(instance, node, replacement, mode)
    after = model.forward(perturbed)
    result.influential, result.replacement = node, replacement
    result.perturbed_window = list(perturbed.window)
    result.perturbed_prob = after.prob(instance.target)
    result.delta = result.original_prob - result.perturbed_prob
    result.perturbed_top1 = after.top1
    result.top1_changed = after.top1 != trace.top1
    return result


def _base_result(instance: PredictionInstance, trace: ForwardTrace, index: int) -> PerturbationResult:
    return PerturbationResult(
        index=index,
        target=instance.target,
        window=list(instance.window),
        original_prob=trace.prob(instance.target),
        original_top1=trace.top1,
    )


def perturb(
    instance: PredictionInstance,
    model: MISAppModel,
    pmi: PmiTable,
    donors: Sequence[Sequence[int]],
    trace: Optional[ForwardTrace] = None,
    mode: str = "all",
    index: int = 0,
) -> PerturbationResult:
    """Replace the most PMI-relevant app of the dominant hop and measure the target drop."""
    trace = trace if trace is not None else model.forward(instance)
    result = _base_result(instance, trace, index)
    hop, node = influential_node(trace, pmi, instance.target)
    result.hop = hop
    if node is None:
        return result.model_copy(update={"skipped": True, "reason": f"hop {hop} has no edges"})
    replacement = donor_replacement(instance.apps, instance.target, donors)
    if replacement is None:
        return result.model_copy(update={"skipped": True, "influential": node, "reason": "no eligible donor app"})
    return _apply(model, instance, trace, node, replacement, mode, result)


def perturb_random(
    instance: PredictionInstance,
    model: MISAppModel,
    pmi: PmiTable,
    donors: Sequence[Sequence[int]],
    rng: np.random.Generator,
    trace: Optional[ForwardTrace] = None,
    mode: str = "all",
    index: int = 0,
) -> PerturbationResult:
    """Control arm: replace a uniformly drawn window app other than the influential one."""
    trace = trace if trace is not None else model.forward(instance)
    result = _base_result(instance, trace, index)
    hop, critical = influential_node(trace, pmi, instance.target)
    result.hop = hop
    others = sorted(set(instance.apps) - {critical})
    if critical is None or not others:
        return result.model_copy(update={"skipped": True, "reason": "no non-critical app to replace"})
    node = int(others[int(rng.integers(len(others)))])
    replacement = donor_replacement(instance.apps, instance.target, donors)
    if replacement is None:
        return result.model_copy(update={"skipped": True, "reason": "no eligible donor app"})
    return _apply(model, instance, trace, node, replacement, mode, result)


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign test p-value P(X >= wins), X ~ Binomial(wins + losses, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


class PerturbationStudy(BaseModel):
    """Paired comparison of PMI-selected and random perturbations."""

    critical: List[PerturbationResult] = Field(default_factory=list)
    random: List[PerturbationResult] = Field(default_factory=list)
    mean_delta_critical: float = 0.0
    mean_delta_random: float = 0.0
    wins: int = 0
    losses: int = 0
    p_value: float = 1.0


def perturbation_study(
    instances: Sequence[PredictionInstance],
    traces: Sequence[ForwardTrace],
    model: MISAppModel,
    pmi: PmiTable,
    donors: Sequence[Sequence[int]],
    rng: np.random.Generator,
    limit: int = 200,
    mode: str = "all",
) -> PerturbationStudy:
    """
    Run both arms on up to ``limit`` correctly predicted instances; pairs where
    either arm is skipped are left out of the aggregates.
    """
    study = PerturbationStudy()
    for i, (inst, trace) in enumerate(zip(instances, traces)):
        if len(study.critical) >= limit:
            break
        if trace.top1 != inst.target:
            continue
        critical = perturb(inst, model, pmi, donors, trace, mode, index=i)
        control = perturb_random(inst, model, pmi, donors, rng, trace, mode, index=i)
        if critical.skipped or control.skipped:
            continue
        study.critical.append(critical)
        study.random.append(control)
    if study.critical:
        deltas = np.array([r.delta for r in study.critical])
        controls = np.array([r.delta for r in study.random])
        study.mean_delta_critical = float(deltas.mean())
        study.mean_delta_random = float(controls.mean())
        study.wins = int(np.sum(deltas > controls))
        study.losses = int(np.sum(deltas < controls))
        study.p_value = sign_test(study.wins, study.losses)
    logger.info(
        "perturbation: %d pairs, mean delta %.4f (critical) vs %.4f (random), p=%.4g",
        len(study.critical),
        study.mean_delta_critical,
        study.mean_delta_random,
        study.p_value,
    )
    return study


class ExplainReport(BaseModel):
    """Everything ``explain`` writes: alignment study plus both perturbation arms."""

    split: str
    alignment: AlignmentReport
    perturbation: PerturbationStudy
