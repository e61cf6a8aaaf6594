"""
Usage Log Schemas

Pydantic models for raw usage events, segmented sessions, fixed-window
prediction instances and dataset splits.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

PAD = 0


class Event(BaseModel):
    """
    One app launch.

    Attributes:
        user_id: Opaque user identifier
        timestamp: Seconds since epoch
        app_id: App identifier from the raw log
        station_id: Base station identifier, when recorded
    """

    model_config = ConfigDict(frozen=True)

    user_id: str = Field(..., min_length=1)
    timestamp: int = Field(..., ge=0)
    app_id: str = Field(..., min_length=1)
    station_id: Optional[str] = None


class ParseIssue(BaseModel):
    """A skipped log row."""

    line: int
    reason: str
    text: str = ""


class ParseResult(BaseModel):
    """Outcome of parsing a log: events plus every skipped row."""

    events: List[Event] = Field(default_factory=list)
    issues: List[ParseIssue] = Field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.issues)


class Session(BaseModel):
    """
    A maximal run of events with inter-event gaps within the session threshold.

    Attributes:
        events: Time-ordered events of one user
        tau: Hour of day of the last event
        rho: Station of the last event, when recorded
    """

    events: List[Event] = Field(..., min_length=1, max_length=5000)
    tau: int = Field(..., ge=0, le=23)
    rho: Optional[str] = None

    @property
    def user_id(self) -> str:
        return self.events[0].user_id

    @property
    def apps(self) -> List[str]:
        return [e.app_id for e in self.events]


class PredictionInstance(BaseModel):
    """
    Fixed-window training example.

    Attributes:
        user_id: Owner of the session
        window: Exactly T app indices, left-padded with PAD (0)
        window_len: Number of real entries in ``window``
        target: Index of the next app
        tau: Hour of day of the last window event
        rho_category: Station category of the last window event (1..F)
        timestamp: Timestamp of the target event (ordering only)
        session, position: Provenance of the target event; not serialized
    """

    model_config = ConfigDict(frozen=True)

    user_id: str
    window: List[int]
    window_len: int = Field(..., ge=1)
    target: int = Field(..., ge=1)
    tau: int = Field(..., ge=0, le=23)
    rho_category: Optional[int] = Field(default=None, ge=1)
    timestamp: int = Field(default=0, ge=0)
    session: Optional[int] = Field(default=None, ge=0, description="Source session (provenance only)")
    position: Optional[int] = Field(default=None, ge=1, description="Target position in the session")

    @model_validator(mode="after")
    def _check_padding(self) -> "PredictionInstance":
        if self.window_len > len(self.window):
            raise ValueError("window_len exceeds the window size")
        pad_count = len(self.window) - self.window_len
        if any(a != PAD for a in self.window[:pad_count]):
            raise ValueError("padding must occupy the left of the window")
        if any(a == PAD for a in self.window[pad_count:]):
            raise ValueError("PAD inside the real part of the window")
        return self

    @property
    def apps(self) -> List[int]:
        """The real (non-PAD) window entries, oldest first."""
        return self.window[len(self.window) - self.window_len :]

    @property
    def last_app(self) -> int:
        return self.window[-1]


class DatasetSplit(BaseModel):
    """
    Train/validation/test partition of prediction instances.

    Attributes:
        mode: ``standard`` (per-user chronological) or ``cold_start`` (by user)
        dropped_unseen: Test instances removed for referencing apps never
            seen in training (cold start only)
        warnings: Degenerate-case notes raised during splitting
    """

    mode: Literal["standard", "cold_start"]
    train: List[PredictionInstance] = Field(default_factory=list)
    val: List[PredictionInstance] = Field(default_factory=list)
    test: List[PredictionInstance] = Field(default_factory=list)
    dropped_unseen: int = 0
    warnings: List[str] = Field(default_factory=list)
