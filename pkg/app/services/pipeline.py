"""
Pipeline Orchestration

Stage functions behind the CLI subcommands (synth, preprocess, train, eval,
explain, gradcheck, sweep), the run-config loader with flag overrides and the
on-disk artifact layout under the output directory.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import ConfigurationError, TrainingDivergedError
from app.schemas.config import ModelConfig, RunConfig
from app.schemas.events import PredictionInstance
from app.schemas.reports import MetricsReport
from app.services import baselines
from app.services.checkpoint import load_model, save_checkpoint
from app.services.ingest import (
    AppVocabulary,
    PreprocessResult,
    TrainSession,
    preprocess,
    read_instances,
    read_training_sessions,
    write_instances,
    write_training_sessions,
)
from app.services.interpret import ExplainReport, alignment_study, build_pmi, perturbation_study
from app.services.metrics import summarize
from app.services.report_service import report_service, write_alignment_csv
from app.services.spatial_context import categorize_stations, read_poi_table
from app.services.synth import random_routine_library, synth_generate
from app.services.training import FitResult, evaluate_model, fit, gradient_check, profile_model

logger = logging.getLogger(__name__)

STAGES = ("synth", "split", "init", "shuffle", "dropout", "explain")
SWEEP_AXES = {"K": "intent_window", "d": "dim", "T": "window", "L": "layers"}
GRADIENT_TOLERANCE = 1e-4


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator per stage, all derived from the root seed."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return np.random.default_rng(children[STAGES.index(stage)])


def _field_of(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return "config"
    return ".".join(str(p) for p in errors[0]["loc"]) or "config"


def validated(model_cls, data: Mapping[str, Any]):
    """``model_validate`` with validation failures mapped to ConfigurationError(field)."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_field_of(exc), exc.errors()[0]["msg"]) from exc


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Read the JSON run config (if any) and apply dotted-key overrides
    (``"model.fusion_mode"``); ``None`` overrides are ignored.

    Precedence: override flag > config file > model default.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError("config", f"{path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError("config", f"{path} is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return validated(RunConfig, data)


class RunLayout:
    """File locations of every artifact under the output directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def events(self) -> Path:
        return self.root / "events.csv"

    @property
    def poi(self) -> Path:
        return self.root / "poi.csv"

    @property
    def motifs(self) -> Path:
        return self.root / "motifs.json"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def vocab(self) -> Path:
        return self.data / "vocab.json"

    def split_dir(self, split: str) -> Path:
        return self.data / split

    @property
    def models(self) -> Path:
        return self.root / "models"

    def checkpoint(self, split: str, multihop: bool = True) -> Path:
        return self.models / (f"{split}.npz" if multihop else f"{split}_1hop.npz")

    def metrics(self, split: str) -> Path:
        return self.root / f"metrics_{split}.json"

    def explain(self, split: str) -> Path:
        return self.root / f"explain_{split}.json"


def run_synth(config: RunConfig) -> Dict[str, Path]:
    """Generate a corpus; an empty routine library is replaced by a random one of lengths 2-4."""
    rng = stage_rng(config.seed, "synth")
    spec = config.generator
    if not spec.routines:
        spec = spec.model_copy(update={"routines": random_routine_library(spec.num_apps, [2, 3, 3, 4, 4, 4], rng)})
    corpus = synth_generate(spec, rng)
    layout = RunLayout(config.paths.out_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    written = {"events": layout.events, "motifs": layout.motifs}
    layout.events.write_text(corpus.events_text())
    layout.motifs.write_text(corpus.annotations_json())
    if corpus.poi_rows:
        layout.poi.write_text(corpus.poi_text())
        written["poi"] = layout.poi
    return written


def _events_path(config: RunConfig, layout: RunLayout) -> Path:
    path = config.paths.events or layout.events
    if not Path(path).exists():
        raise ConfigurationError("paths.events", f"events file {path} does not exist")
    return Path(path)


def _station_categories(config: RunConfig, layout: RunLayout) -> Dict[str, int]:
    path = config.paths.poi
    if path is None:
        if not layout.poi.exists():
            return {}
        path = layout.poi
    if not Path(path).exists():
        raise ConfigurationError("paths.poi", f"POI table {path} does not exist")
    categories = categorize_stations(read_poi_table(Path(path)), config.ingest.k_loc)
    layout.data.mkdir(parents=True, exist_ok=True)
    (layout.data / "station_categories.csv").write_text(categories.export())
    return categories.category_of


def build_dataset(config: RunConfig, window: Optional[int] = None) -> PreprocessResult:
    """In-memory preprocess of the configured events file."""
    layout = RunLayout(config.paths.out_dir)
    events = _events_path(config, layout)
    stations = _station_categories(config, layout)
    with open(events, encoding="utf-8") as handle:
        return preprocess(
            handle, config.ingest, window or config.model.window, stage_rng(config.seed, "split"), stations
        )


def run_preprocess(config: RunConfig) -> PreprocessResult:
    result = build_dataset(config)
    layout = RunLayout(config.paths.out_dir)
    layout.data.mkdir(parents=True, exist_ok=True)
    layout.vocab.write_text(result.vocabulary.to_json())
    (layout.data / "preprocess.json").write_text(json.dumps(result.counts, indent=2, sort_keys=True))
    for name, split in result.splits.items():
        directory = layout.split_dir(name)
        write_instances(directory / "train.txt", split.train)
        write_instances(directory / "val.txt", split.val)
        write_instances(directory / "test.txt", split.test)
        sessions = result.train_sessions[name]
        write_training_sessions(directory / "sessions_train.json", sessions)
        baselines.write_usage(directory / "train_usage.json", baselines.usage_counts(sessions))
        summary = {"dropped_unseen": split.dropped_unseen, "warnings": split.warnings}
        (directory / "split.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        logger.info("%s split: %d/%d/%d instances", name, len(split.train), len(split.val), len(split.test))
    return result


class SplitData:
    """Instances and side files of one preprocessed split."""

    def __init__(self, layout: RunLayout, split: str):
        directory = layout.split_dir(split)
        if not (directory / "train.txt").exists():
            raise ConfigurationError("split", f"{directory} has no preprocessed data; run preprocess first")
        if not layout.vocab.exists():
            raise ConfigurationError("paths.out_dir", f"{layout.vocab} does not exist; run preprocess first")
        self.vocabulary = AppVocabulary.load(layout.vocab)
        self.train = read_instances(directory / "train.txt")
        self.val = read_instances(directory / "val.txt")
        self.test = read_instances(directory / "test.txt")
        self.sessions: List[TrainSession] = read_training_sessions(directory / "sessions_train.json")
        self.usage = baselines.read_usage(directory / "train_usage.json")
        summary_path = directory / "split.json"
        self.summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}


def network_config(model: ModelConfig, vocabulary: AppVocabulary, **updates: Any) -> ModelConfig:
    data = model.model_dump()
    data.update(num_apps=vocabulary.size, num_categories=vocabulary.num_categories, **updates)
    return validated(ModelConfig, data)


def train_model(
    config: RunConfig,
    network: ModelConfig,
    train: Sequence[PredictionInstance],
    val: Sequence[PredictionInstance],
) -> FitResult:
    return fit(
        train,
        val,
        network,
        config.train,
        init_rng=stage_rng(config.seed, "init"),
        shuffle_rng=stage_rng(config.seed, "shuffle"),
        dropout_rng=stage_rng(config.seed, "dropout"),
    )


def run_train(config: RunConfig) -> Tuple[FitResult, Path]:
    layout = RunLayout(config.paths.out_dir)
    data = SplitData(layout, config.split)
    network = network_config(config.model, data.vocabulary)
    target = config.paths.checkpoint or layout.checkpoint(config.split, network.use_multihop)
    try:
        result = train_model(config, network, data.train, data.val)
    except TrainingDivergedError as exc:
        if exc.recoverable is not None:
            path = save_checkpoint(exc.recoverable, network, Path(target))
            (path.parent / "vocab.json").write_text(data.vocabulary.to_json())
            logger.error("training diverged at epoch %d; kept last good parameters in %s", exc.epoch, path)
        raise
    path = save_checkpoint(result.params, network, Path(target))
    path.with_suffix(".history.txt").write_text(result.history_text())
    (path.parent / "vocab.json").write_text(data.vocabulary.to_json())
    return result, path


def run_eval(config: RunConfig, profile: bool = False, pdf: bool = False) -> Tuple[MetricsReport, Path]:
    """Model vs MFU vs MRU on the test split; writes sorted-key JSON (and optionally a PDF)."""
    layout = RunLayout(config.paths.out_dir)
    data = SplitData(layout, config.split)
    checkpoint = config.paths.checkpoint or layout.checkpoint(config.split, config.model.use_multihop)
    model = load_model(Path(checkpoint))
    settings = config.evaluation
    num_apps = data.vocabulary.size

    results = {"model": evaluate_model(model, data.test, settings.acc_ks, settings.mrr_ks, settings.mrr_truncate)}
    if data.test:
        results["MFU"] = summarize(
            baselines.baseline_mfu(data.usage, data.test, num_apps), settings.acc_ks, settings.mrr_ks, settings.mrr_truncate
        )
        results["MRU"] = summarize(
            baselines.baseline_mru(data.test, num_apps), settings.acc_ks, settings.mrr_ks, settings.mrr_truncate
        )
    report = MetricsReport(
        split=config.split,
        seed=config.seed,
        instances=len(data.test),
        dropped_unseen=int(data.summary.get("dropped_unseen", 0)),
        results={name: r.flat() for name, r in results.items()},
        network=model.config.model_dump(),
    )
    if profile:
        report.efficiency = profile_model(model, data.test).model_dump()

    path = layout.metrics(config.split)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n")
    if pdf:
        path.with_suffix(".pdf").write_bytes(report_service.html_to_pdf(report_service.render_metrics_html(report)))
    return report, path


def run_explain(config: RunConfig, pdf: bool = False) -> Tuple[ExplainReport, Path]:
    """Alignment study (full vs 1-hop checkpoint) and the perturbation comparison on the test split."""
    layout = RunLayout(config.paths.out_dir)
    data = SplitData(layout, config.split)
    full_path = Path(config.paths.checkpoint or layout.checkpoint(config.split, True))
    single_path = Path(config.paths.baseline_checkpoint or layout.checkpoint(config.split, False))
    if not single_path.exists():
        raise ConfigurationError("paths.baseline_checkpoint", f"1-hop checkpoint {single_path} does not exist")
    full, single = load_model(full_path), load_model(single_path)
    if single.config.use_multihop:
        raise ConfigurationError("paths.baseline_checkpoint", "baseline checkpoint must be trained with --no-multihop")

    pmi = build_pmi([s.apps for s in data.sessions], config.explain.pmi_epsilon)
    donors = [s.apps for s in data.sessions]
    full_traces = full.traces(data.test)
    alignment = alignment_study(data.test, full_traces, single.traces(data.test), pmi, config.explain.top_n)
    study = perturbation_study(
        data.test,
        full_traces,
        full,
        pmi,
        donors,
        stage_rng(config.seed, "explain"),
        limit=config.explain.max_perturbations,
        mode=config.explain.replace_mode,
    )
    report = ExplainReport(split=config.split, alignment=alignment, perturbation=study)

    path = layout.explain(config.split)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n")
    name = data.vocabulary.app_id
    write_alignment_csv(alignment, layout.root / f"alignment_{config.split}.csv", app_name=name)
    if pdf:
        html = report_service.render_explain_html(report, app_name=name)
        path.with_suffix(".pdf").write_bytes(report_service.html_to_pdf(html))
    return report, path


def run_gradcheck(config: RunConfig) -> Dict[str, float]:
    network = config.model
    if network.num_apps == 0:
        network = validated(ModelConfig, {**network.model_dump(), "num_apps": 12})
    return gradient_check(network, stage_rng(config.seed, "init"))


def run_sweep(config: RunConfig, axis: str, values: Sequence[int]) -> Tuple[Dict[str, Any], Path]:
    """Retrain per value of one hyperparameter and report test ACC@1 / MRR@5."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError("axis", f"must be one of {', '.join(SWEEP_AXES)}")
    layout = RunLayout(config.paths.out_dir)
    field_name = SWEEP_AXES[axis]
    stored = None if axis == "T" else SplitData(layout, config.split)
    rows: Dict[str, Dict[str, float]] = {}
    for value in values:
        if stored is None:
            dataset = build_dataset(config, window=value)
            split = dataset.splits[config.split]
            vocabulary, train, val, test = dataset.vocabulary, split.train, split.val, split.test
        else:
            vocabulary, train, val, test = stored.vocabulary, stored.train, stored.val, stored.test
        network = network_config(config.model, vocabulary, **{field_name: value})
        result = train_model(config, network, train, val)
        scores = evaluate_model(result.model, test, acc_ks=(1,), mrr_ks=(5,))
        rows[str(value)] = scores.flat()
        logger.info("sweep %s=%d: %s", axis, value, rows[str(value)])
    payload = {"axis": axis, "field": field_name, "split": config.split, "seed": config.seed, "results": rows}
    path = layout.root / f"sweep_{axis}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload, path
