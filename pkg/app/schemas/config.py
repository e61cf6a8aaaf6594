"""
Run Configuration Schemas

This module defines Pydantic models for every run-level setting: model
hyperparameters, training, ingestion, the synthetic generator, the case
study and artifact paths. A JSON config file maps onto ``RunConfig``.
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

FusionMode = Literal["cmgf", "gated", "sum", "mean"]
SplitMode = Literal["standard", "cold_start"]


class ModelConfig(BaseModel):
    """
    Hyperparameters of the MISApp network.

    Attributes:
        dim: Embedding dimension d
        intent_window: Immediate-intent window K
        window: Session window T
        layers: Encoder/decoder layers L
        heads: Attention heads of the encoder/decoder
        fusion_heads: CMGF heads B
        gcn_layers: LightGCN propagation layers L_g
        dropout: Dropout rate (training only)
        num_apps: Real app count |A| (PAD excluded), filled from the vocabulary
        num_hours: Temporal embedding rows
        num_categories: Station categories F (0 disables the spatial path)
        fusion_mode: Fusion operator for both fusion sites
        ffn_ratio: Feed-forward hidden width as a multiple of ``dim``
    """

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(default=64, ge=1, description="Embedding dimension d")
    intent_window: int = Field(default=3, ge=1, description="Immediate intent window K")
    window: int = Field(default=8, ge=1, description="Session window T")
    layers: int = Field(default=2, ge=1, description="Encoder/decoder layers L")
    heads: int = Field(default=4, ge=1, description="Encoder/decoder attention heads")
    fusion_heads: int = Field(default=4, ge=1, description="CMGF heads B")
    gcn_layers: int = Field(default=2, ge=0, description="LightGCN layers L_g")
    dropout: float = Field(default=0.10, ge=0.0, lt=1.0, description="Dropout rate")
    num_apps: int = Field(default=0, ge=0, description="App vocabulary size without PAD")
    num_hours: int = Field(default=24, ge=1, description="Hour-of-day rows")
    num_categories: int = Field(default=0, ge=0, description="Station categories F")
    fusion_mode: FusionMode = Field(default="cmgf", description="Fusion operator")
    ffn_ratio: int = Field(default=4, ge=1, description="FFN width multiplier")
    use_multihop: bool = True
    use_temporal: bool = True
    use_spatial: bool = True
    use_decoder: bool = True

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim ({self.dim}) must be divisible by heads ({self.heads})")
        if self.dim % self.fusion_heads:
            raise ValueError(f"dim ({self.dim}) must be divisible by fusion_heads ({self.fusion_heads})")
        if self.intent_window > self.window:
            raise ValueError("intent_window (K) must not exceed window (T)")
        return self

    @property
    def hops(self) -> int:
        return 3 if self.use_multihop else 1

    @property
    def spatial_enabled(self) -> bool:
        return self.use_spatial and self.num_categories > 0


class TrainConfig(BaseModel):
    """
    Training loop settings.

    Attributes:
        batch_size: Mini-batch size
        lr: Adam learning rate
        epochs: Maximum epoch count
        patience: Epochs without val MRR@5 improvement before stopping
        beta1/beta2/epsilon: Adam constants
    """

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=512, ge=1)
    lr: float = Field(default=0.001, ge=0.0)
    epochs: int = Field(default=50, ge=1)
    patience: Optional[int] = Field(default=None, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class IngestConfig(BaseModel):
    """Log parsing, cleaning and sessionization rules."""

    model_config = ConfigDict(extra="forbid")

    delimiter: str = Field(default=",", min_length=1, max_length=1)
    merge_gap: int = Field(default=300, ge=0, description="Same-app merge threshold (s, strict)")
    delta_t: int = Field(default=300, ge=0, description="Session gap threshold (s, inclusive)")
    min_user_events: int = Field(default=50, ge=0)
    max_session_length: int = Field(default=5000, ge=1)
    utc_offset_hours: int = Field(default=0, ge=-12, le=14, description="Offset applied for tau")
    k_loc: int = Field(default=5, ge=1, description="Top-k neighbours in the station graph")


class Routine(BaseModel):
    """An ordered app motif and its sampling weight."""

    apps: List[int] = Field(..., min_length=2, max_length=4, description="App numbers (1-based)")
    weight: float = Field(default=1.0, gt=0.0)


class GeneratorSpec(BaseModel):
    """
    Synthetic corpus description.

    Attributes:
        num_users: Number of users
        num_apps: App alphabet size
        sessions_per_user: Inclusive session-count range per user
        routines_per_session: Inclusive range of motifs sampled per session
        routines: Routine library (must be nonempty)
        routines_per_user: Optional per-user routine subset size
        noise_rate: Probability that a step emits a uniform noise app
        num_stations: Base stations (0 disables spatial data)
        poi_dim: POI feature count M per station
    """

    model_config = ConfigDict(extra="forbid")

    num_users: int = Field(default=20, ge=1)
    num_apps: int = Field(default=20, ge=2)
    sessions_per_user: Tuple[int, int] = (30, 40)
    routines_per_session: Tuple[int, int] = (1, 3)
    routines: List[Routine] = Field(default_factory=list)
    routines_per_user: Optional[int] = Field(default=None, ge=1)
    noise_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    num_stations: int = Field(default=0, ge=0)
    poi_dim: int = Field(default=8, ge=1)
    start_timestamp: int = Field(default=1_600_000_000, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "GeneratorSpec":
        for label, (low, high) in (
            ("sessions_per_user", self.sessions_per_user),
            ("routines_per_session", self.routines_per_session),
        ):
            if low < 1 or high < low:
                raise ValueError(f"{label} must be an increasing range of positive counts")
        for routine in self.routines:
            if any(a < 1 or a > self.num_apps for a in routine.apps):
                raise ValueError("routine apps must lie in 1..num_apps")
        return self


class ExplainConfig(BaseModel):
    """Case-study settings."""

    model_config = ConfigDict(extra="forbid")

    top_n: int = Field(default=50, ge=1)
    pmi_epsilon: float = Field(default=1e-9, gt=0.0)
    replace_mode: Literal["all", "first"] = "all"
    max_perturbations: int = Field(default=200, ge=1)


class EvalConfig(BaseModel):
    """Ranking metric settings."""

    model_config = ConfigDict(extra="forbid")

    acc_ks: List[int] = Field(default_factory=lambda: [1, 3, 5])
    mrr_ks: List[int] = Field(default_factory=lambda: [3, 5])
    mrr_truncate: bool = True


class PathsConfig(BaseModel):
    """Artifact locations; relative paths resolve against the working directory."""

    model_config = ConfigDict(extra="forbid")

    events: Optional[Path] = None
    poi: Optional[Path] = None
    out_dir: Path = Path("runs")
    checkpoint: Optional[Path] = None
    baseline_checkpoint: Optional[Path] = None


class RunConfig(BaseModel):
    """Top-level configuration document for the CLI."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    split: SplitMode = "standard"
    paths: PathsConfig = Field(default_factory=PathsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
