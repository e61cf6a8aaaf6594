"""
Usage Log Ingestion Service

Parses raw usage logs, applies the cleaning rules (same-app merge, sparse-user
filter, noisy-session removal), segments sessions, builds fixed-window
prediction instances and produces standard and cold-start splits.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DataError
from app.schemas.config import IngestConfig
from app.schemas.events import (
    PAD,
    DatasetSplit,
    Event,
    ParseIssue,
    ParseResult,
    PredictionInstance,
    Session,
)

logger = logging.getLogger(__name__)


def parse_events(lines: Iterable[str], delimiter: str = ",") -> ParseResult:
    """
    Parse ``user_id,timestamp,app_id[,station_id]`` rows.

    A leading header row (first field ``user_id``) and blank lines are
    ignored. Malformed rows are skipped and reported with their 1-based line
    number. Events come back grouped per user (first-appearance order) and
    sorted by timestamp, stable on ties.
    """
    result = ParseResult()
    for number, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        fields = [f.strip() for f in text.split(delimiter)]
        if number == 1 and fields[0].lower() == "user_id":
            continue
        if len(fields) not in (3, 4):
            result.issues.append(ParseIssue(line=number, reason=f"expected 3 or 4 fields, got {len(fields)}", text=text))
            continue
        user_id, stamp, app_id = fields[:3]
        station = fields[3] if len(fields) == 4 and fields[3] else None
        try:
            timestamp = int(stamp)
        except ValueError:
            result.issues.append(ParseIssue(line=number, reason=f"unparseable timestamp {stamp!r}", text=text))
            continue
        if timestamp < 0 or not user_id or not app_id:
            result.issues.append(ParseIssue(line=number, reason="negative timestamp or empty identifier", text=text))
            continue
        result.events.append(Event(user_id=user_id, timestamp=timestamp, app_id=app_id, station_id=station))

    grouped = group_by_user(result.events)
    result.events = [e for events in grouped.values() for e in events]
    if result.issues:
        logger.warning("skipped %d malformed log rows", len(result.issues))
    return result


def group_by_user(events: Iterable[Event]) -> "OrderedDict[str, List[Event]]":
    """Group events per user in first-appearance order, sorted by timestamp (stable)."""
    grouped: "OrderedDict[str, List[Event]]" = OrderedDict()
    for event in events:
        grouped.setdefault(event.user_id, []).append(event)
    for user_id, user_events in grouped.items():
        grouped[user_id] = sorted(user_events, key=lambda e: e.timestamp)
    return grouped


def merge_consecutive(events: Sequence[Event], merge_gap: int = 300) -> List[Event]:
    """
    Collapse runs of the same app whose successive gaps are below ``merge_gap``.

    The surviving event carries the first timestamp and station of the run.
    """
    merged: List[Event] = []
    run_last_timestamp: Optional[int] = None
    for event in events:
        if (
            merged
            and merged[-1].app_id == event.app_id
            and run_last_timestamp is not None
            and event.timestamp - run_last_timestamp < merge_gap
        ):
            run_last_timestamp = event.timestamp
            continue
        merged.append(event)
        run_last_timestamp = event.timestamp
    return merged


def filter_users(
    events_by_user: Mapping[str, Sequence[Event]], min_events: int = 50
) -> "OrderedDict[str, List[Event]]":
    """Drop users with fewer than ``min_events`` (post-merge) events."""
    kept = OrderedDict(
        (user_id, list(events)) for user_id, events in events_by_user.items() if len(events) >= min_events
    )
    dropped = len(events_by_user) - len(kept)
    if dropped:
        logger.info("dropped %d users with fewer than %d events", dropped, min_events)
    if events_by_user and not kept:
        logger.warning("user filter removed every user")
    return kept


def hour_of_day(timestamp: int, utc_offset_hours: int = 0) -> int:
    return ((timestamp + utc_offset_hours * 3600) // 3600) % 24


def segment_sessions(
    events: Sequence[Event],
    delta_t: int = 300,
    max_length: int = 5000,
    utc_offset_hours: int = 0,
) -> List[Session]:
    """
    Split one user's sorted events whenever the gap exceeds ``delta_t``.

    Sessions longer than ``max_length`` are discarded as noise. ``tau`` and
    ``rho`` come from the last event of each session.
    """
    sessions: List[Session] = []
    current: List[Event] = []

    def close() -> None:
        if not current:
            return
        if len(current) > max_length:
            logger.info("discarded a %d-event session as noise", len(current))
            return
        last = current[-1]
        sessions.append(
            Session(events=list(current), tau=hour_of_day(last.timestamp, utc_offset_hours), rho=last.station_id)
        )

    for event in events:
        if current and event.timestamp - current[-1].timestamp > delta_t:
            close()
            current = []
        current.append(event)
    close()
    return sessions


def split_repeats(sessions: Sequence[Session], utc_offset_hours: int = 0) -> Tuple[List[Session], int]:
    """
    Cut sessions wherever the same app appears twice in a row.

    Merging leaves such pairs only when their gap equals the merge threshold,
    which still falls inside one session. Each cut starts a new session at
    the repeat; the number of sessions cut is returned alongside.
    """
    result: List[Session] = []
    cut = 0
    for session in sessions:
        pieces: List[List[Event]] = [[session.events[0]]]
        for event in session.events[1:]:
            if event.app_id == pieces[-1][-1].app_id:
                pieces.append([])
            pieces[-1].append(event)
        if len(pieces) == 1:
            result.append(session)
            continue
        cut += 1
        logger.warning(
            "session of user %s repeats an app consecutively after merging; split into %d",
            session.user_id,
            len(pieces),
        )
        for events in pieces:
            last = events[-1]
            result.append(Session(events=events, tau=hour_of_day(last.timestamp, utc_offset_hours), rho=last.station_id))
    return result, cut


def index_apps(sessions: Iterable[Session]) -> Dict[str, int]:
    """Index apps from 1 in order of first appearance."""
    vocab: Dict[str, int] = {}
    for session in sessions:
        for app_id in session.apps:
            if app_id not in vocab:
                vocab[app_id] = len(vocab) + 1
    return vocab


def make_instances(
    sessions: Sequence[Session],
    vocab: Mapping[str, int],
    window: int = 8,
    station_categories: Optional[Mapping[str, int]] = None,
    utc_offset_hours: int = 0,
) -> List[PredictionInstance]:
    """
    Build one instance per session position j >= 2 (1-based).

    The window holds the up-to-``window`` in-session predecessors of event j,
    left-padded with PAD; tau and rho come from event j-1. Each instance keeps
    the position of its session in ``sessions`` for provenance.
    """
    instances: List[PredictionInstance] = []
    for session_index, session in enumerate(sessions):
        events = session.events
        for j in range(1, len(events)):
            history = events[max(0, j - window) : j]
            apps = [vocab[e.app_id] for e in history]
            previous = events[j - 1]
            category = None
            if station_categories is not None and previous.station_id is not None:
                category = station_categories.get(previous.station_id)
            instances.append(
                PredictionInstance(
                    user_id=session.user_id,
                    window=[PAD] * (window - len(apps)) + apps,
                    window_len=len(apps),
                    target=vocab[events[j].app_id],
                    tau=hour_of_day(previous.timestamp, utc_offset_hours),
                    rho_category=category,
                    timestamp=events[j].timestamp,
                    session=session_index,
                    position=j,
                )
            )
    return instances


def _by_user(instances: Iterable[PredictionInstance]) -> "OrderedDict[str, List[PredictionInstance]]":
    grouped: "OrderedDict[str, List[PredictionInstance]]" = OrderedDict()
    for instance in instances:
        grouped.setdefault(instance.user_id, []).append(instance)
    return grouped


def split_standard(instances: Sequence[PredictionInstance]) -> DatasetSplit:
    """
    Per user, chronologically: first floor(0.7n) to train, next floor(0.1n)
    to validation, the remainder to test. Users with n < 3 go wholly to train.
    """
    split = DatasetSplit(mode="standard")
    for user_id, items in _by_user(instances).items():
        n = len(items)
        if n < 3:
            message = f"user {user_id} has only {n} instances; all assigned to train"
            logger.warning(message)
            split.warnings.append(message)
            split.train.extend(items)
            continue
        n_train = (7 * n) // 10
        n_val = n // 10
        split.train.extend(items[:n_train])
        split.val.extend(items[n_train : n_train + n_val])
        split.test.extend(items[n_train + n_val :])
    return split


def split_coldstart(instances: Sequence[PredictionInstance], rng: np.random.Generator) -> DatasetSplit:
    """
    Partition users 90/10 after a seeded shuffle. Of each training user's
    instances the chronologically last floor(0.1n) form the validation set.
    Test instances referencing any app absent from training are dropped.
    """
    grouped = _by_user(instances)
    users = sorted(grouped)
    if len(users) < 2:
        raise DataError("cold-start split needs at least two users")
    order = [users[i] for i in rng.permutation(len(users))]
    n_train_users = (9 * len(users)) // 10

    split = DatasetSplit(mode="cold_start")
    for user_id in order[:n_train_users]:
        items = grouped[user_id]
        n_val = len(items) // 10
        split.train.extend(items[: len(items) - n_val])
        split.val.extend(items[len(items) - n_val :])

    seen = {a for inst in split.train for a in (*inst.apps, inst.target)}
    for user_id in order[n_train_users:]:
        for inst in grouped[user_id]:
            if inst.target in seen and all(a in seen for a in inst.apps):
                split.test.append(inst)
            else:
                split.dropped_unseen += 1
    if split.dropped_unseen:
        logger.info("dropped %d cold-start test instances with unseen apps", split.dropped_unseen)
    return split


@dataclass
class AppVocabulary:
    """
    Bidirectional app id <-> index mapping; index 0 is PAD.

    Attributes:
        apps: ``apps[i - 1]`` is the identifier of index ``i``
        station_categories: Station id -> category (1..F)
    """

    apps: List[str] = field(default_factory=list)
    station_categories: Dict[str, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.apps)

    @property
    def num_categories(self) -> int:
        return max(self.station_categories.values(), default=0)

    def index(self, app_id: str) -> int:
        try:
            return self._lookup[app_id]
        except KeyError:
            raise DataError(f"unknown app {app_id!r}") from None

    def app_id(self, index: int) -> str:
        if not 1 <= index <= len(self.apps):
            raise DataError(f"app index {index} outside 1..{len(self.apps)}")
        return self.apps[index - 1]

    @property
    def _lookup(self) -> Dict[str, int]:
        return {a: i + 1 for i, a in enumerate(self.apps)}

    def to_json(self) -> str:
        return json.dumps({"apps": self.apps, "station_categories": self.station_categories}, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Path) -> "AppVocabulary":
        data = json.loads(Path(path).read_text())
        return cls(apps=list(data["apps"]), station_categories=dict(data.get("station_categories", {})))


def training_first_vocabulary(split: DatasetSplit, provisional: Mapping[str, int]) -> Tuple[AppVocabulary, Dict[int, int]]:
    """
    Re-index apps so training apps come first, in order of first appearance
    in the training instances; apps seen only in val/test follow.

    Returns:
        The final vocabulary and a provisional -> final index map
    """
    by_index = {i: a for a, i in provisional.items()}
    order: Dict[int, None] = {}
    for part in (split.train, split.val, split.test):
        for inst in part:
            for a in (*inst.apps, inst.target):
                order.setdefault(a, None)
    for i in sorted(by_index):
        order.setdefault(i, None)
    remap = {old: new for new, old in enumerate(order, start=1)}
    remap[PAD] = PAD
    return AppVocabulary(apps=[by_index[old] for old in order]), remap


def reindex(instances: Iterable[PredictionInstance], remap: Mapping[int, int]) -> List[PredictionInstance]:
    return [
        inst.model_copy(update={"window": [remap[a] for a in inst.window], "target": remap[inst.target]})
        for inst in instances
    ]


def format_instance(instance: PredictionInstance) -> str:
    """Render ``user_id|window|target|tau|rho_category``."""
    rho = "" if instance.rho_category is None else str(instance.rho_category)
    window = " ".join(str(a) for a in instance.window)
    return f"{instance.user_id}|{window}|{instance.target}|{instance.tau}|{rho}"


def parse_instance(line: str) -> PredictionInstance:
    try:
        user_id, window_text, target, tau, rho = line.rstrip("\n").split("|")
        window = [int(a) for a in window_text.split()]
        return PredictionInstance(
            user_id=user_id,
            window=window,
            window_len=sum(1 for a in window if a != PAD),
            target=int(target),
            tau=int(tau),
            rho_category=int(rho) if rho else None,
        )
    except ValueError as exc:
        raise DataError(f"malformed instance line {line.strip()!r}: {exc}") from exc


def write_instances(path: Path, instances: Iterable[PredictionInstance]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for inst in instances:
            handle.write(format_instance(inst) + "\n")


def read_instances(path: Path) -> List[PredictionInstance]:
    with open(path, encoding="utf-8") as handle:
        return [parse_instance(line) for line in handle if line.strip()]


@dataclass
class TrainSession:
    """The training-visible prefix of a session, as app indices."""

    user_id: str
    apps: List[int]


def training_sessions(
    sessions: Sequence[Session], split: DatasetSplit, remap: Mapping[int, int], provisional: Mapping[str, int]
) -> List[TrainSession]:
    """
    For every session with training instances, the prefix up to the last
    training target. Used for PMI statistics, donor sequences and MFU counts.
    """
    last_position: Dict[int, int] = {}
    for inst in split.train:
        if inst.session is None or inst.position is None:
            continue
        last_position[inst.session] = max(last_position.get(inst.session, 0), inst.position)
    result: List[TrainSession] = []
    for index in sorted(last_position):
        session = sessions[index]
        prefix = session.apps[: last_position[index] + 1]
        result.append(TrainSession(user_id=session.user_id, apps=[remap[provisional[a]] for a in prefix]))
    return result


def write_training_sessions(path: Path, sessions: Iterable[TrainSession]) -> None:
    payload = [{"user_id": s.user_id, "apps": s.apps} for s in sessions]
    path.write_text(json.dumps(payload, indent=1))


def read_training_sessions(path: Path) -> List[TrainSession]:
    return [TrainSession(user_id=s["user_id"], apps=list(s["apps"])) for s in json.loads(Path(path).read_text())]


@dataclass
class PreprocessResult:
    """Everything ``preprocess`` writes out, plus the cleaning counters."""

    vocabulary: AppVocabulary
    splits: Dict[str, DatasetSplit]
    train_sessions: Dict[str, List[TrainSession]]
    counts: Dict[str, int]


def preprocess(
    lines: Iterable[str],
    config: IngestConfig,
    window: int,
    rng: np.random.Generator,
    station_categories: Optional[Mapping[str, int]] = None,
) -> PreprocessResult:
    """
    parse -> merge -> filter -> segment -> instances -> standard and cold-start splits.

    The vocabulary is built from the standard split's training data; the
    cold-start split shares it so checkpoints stay interchangeable.
    """
    parsed = parse_events(lines, config.delimiter)
    grouped = group_by_user(parsed.events)
    merged = OrderedDict((u, merge_consecutive(evs, config.merge_gap)) for u, evs in grouped.items())
    merged_away = sum(len(v) for v in grouped.values()) - sum(len(v) for v in merged.values())
    kept = filter_users(merged, config.min_user_events)

    sessions: List[Session] = []
    for events in kept.values():
        sessions.extend(segment_sessions(events, config.delta_t, config.max_session_length, config.utc_offset_hours))
    sessions, repeat_splits = split_repeats(sessions, config.utc_offset_hours)

    provisional = index_apps(sessions)
    instances = make_instances(sessions, provisional, window, station_categories, config.utc_offset_hours)
    standard = split_standard(instances)
    cold = split_coldstart(instances, rng)

    vocabulary, remap = training_first_vocabulary(standard, provisional)
    vocabulary.station_categories = dict(station_categories or {})
    splits: Dict[str, DatasetSplit] = {}
    train_sessions: Dict[str, List[TrainSession]] = {}
    for name, split in (("standard", standard), ("cold_start", cold)):
        splits[name] = split.model_copy(
            update={
                "train": reindex(split.train, remap),
                "val": reindex(split.val, remap),
                "test": reindex(split.test, remap),
            }
        )
        train_sessions[name] = training_sessions(sessions, split, remap, provisional)

    counts = {
        "rows_parsed": len(parsed.events),
        "rows_skipped": parsed.skipped,
        "events_merged": merged_away,
        "users_kept": len(kept),
        "users_dropped": len(merged) - len(kept),
        "sessions": len(sessions),
        "sessions_split_on_repeat": repeat_splits,
        "instances": len(instances),
        "apps": vocabulary.size,
    }
    logger.info("preprocess: %s", json.dumps(counts, sort_keys=True))
    return PreprocessResult(vocabulary, splits, train_sessions, counts)
