"""
Synthetic usage-log generator.

Sessions interleave weighted routine motifs with uniform noise apps, so motifs
of length 3-4 carry genuine 2-hop/3-hop predictive structure. Output is a
pure function of the spec and the generator, byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.core.exceptions import DataError
from app.schemas.config import GeneratorSpec, Routine

logger = logging.getLogger(__name__)


def app_label(number: int) -> str:
    return f"app{number:03d}"


def user_label(number: int) -> str:
    return f"u{number:03d}"


def station_label(number: int) -> str:
    return f"bs{number:03d}"


@dataclass
class MotifAnnotation:
    """Ground truth: one routine occurrence inside a generated session."""

    user_id: str
    session: int
    routine: int
    start_timestamp: int


@dataclass
class SyntheticCorpus:
    """Generated log rows, POI rows and motif annotations."""

    rows: List[str] = field(default_factory=list)
    poi_rows: List[str] = field(default_factory=list)
    annotations: List[MotifAnnotation] = field(default_factory=list)

    def events_text(self) -> str:
        return "user_id,timestamp,app_id,station_id\n" + "".join(r + "\n" for r in self.rows)

    def poi_text(self) -> str:
        return "".join(r + "\n" for r in self.poi_rows)

    def annotations_json(self) -> str:
        return json.dumps([a.__dict__ for a in self.annotations], indent=1)


def random_routine_library(
    num_apps: int,
    lengths: Sequence[int],
    rng: np.random.Generator,
    reserved: int = 0,
) -> List[Routine]:
    """
    Draw one routine per requested length with distinct apps inside each routine.

    Args:
        num_apps: App alphabet size
        lengths: Motif lengths (2-4)
        rng: Source of randomness
        reserved: Apps ``1..reserved`` are kept out of routines (noise only)
    """
    pool = np.arange(reserved + 1, num_apps + 1)
    routines = []
    for length in lengths:
        apps = rng.choice(pool, size=length, replace=False)
        routines.append(Routine(apps=[int(a) for a in apps]))
    return routines


def _noise_app(num_apps: int, previous: Optional[int], rng: np.random.Generator) -> int:
    """Uniform over apps other than ``previous`` (no immediate repeats)."""
    while True:
        app = int(rng.integers(1, num_apps + 1))
        if app != previous:
            return app


def synth_generate(spec: GeneratorSpec, rng: np.random.Generator) -> SyntheticCorpus:
    """
    Generate a reproducible corpus from ``spec``.

    Each step of a session emits the next element of the current routine, or
    with probability ``noise_rate`` a noise app drawn uniformly from the apps
    that differ from the previous one. At ``noise_rate`` 1.0 a target is
    therefore uniform over the other |A| - 1 apps given its predecessor, and
    uniform over all |A| apps marginally. Events inside a session are 5-120 s
    apart; sessions are separated by more than 10 minutes.
    """
    if not spec.routines:
        raise DataError("routine library is empty")
    weights = np.array([r.weight for r in spec.routines], dtype=np.float64)
    weights = weights / weights.sum()
    corpus = SyntheticCorpus()

    if spec.num_stations:
        centres = rng.poisson(5.0, size=(max(1, spec.num_stations // 3), spec.poi_dim))
        for s in range(1, spec.num_stations + 1):
            base = centres[(s - 1) % len(centres)]
            counts = base + rng.poisson(1.0, size=spec.poi_dim)
            corpus.poi_rows.append(",".join([station_label(s), *(str(int(c)) for c in counts)]))

    for u in range(1, spec.num_users + 1):
        user = user_label(u)
        allowed = np.arange(len(spec.routines))
        if spec.routines_per_user is not None and spec.routines_per_user < len(spec.routines):
            allowed = np.sort(rng.choice(allowed, size=spec.routines_per_user, replace=False))
        user_weights = weights[allowed] / weights[allowed].sum()
        home = rng.integers(1, spec.num_stations + 1, size=2) if spec.num_stations else None

        clock = spec.start_timestamp + int(rng.integers(0, 86_400))
        low, high = spec.sessions_per_user
        for session in range(int(rng.integers(low, high + 1))):
            station = station_label(int(rng.choice(home))) if home is not None else ""
            previous: Optional[int] = None
            r_low, r_high = spec.routines_per_session
            for _ in range(int(rng.integers(r_low, r_high + 1))):
                routine_index = int(allowed[rng.choice(len(allowed), p=user_weights)])
                corpus.annotations.append(MotifAnnotation(user, session, routine_index, clock))
                for element in spec.routines[routine_index].apps:
                    if rng.random() < spec.noise_rate:
                        app = _noise_app(spec.num_apps, previous, rng)
                    elif element == previous:
                        continue
                    else:
                        app = element
                    corpus.rows.append(f"{user},{clock},{app_label(app)},{station}".rstrip(","))
                    previous = app
                    clock += int(rng.integers(5, 121))
            clock += int(rng.integers(900, 14_400))

    logger.info("generated %d events for %d users", len(corpus.rows), spec.num_users)
    return corpus


def default_generator_spec(rng: np.random.Generator, noise_rate: float = 0.3) -> GeneratorSpec:
    """Twenty apps, six routines of lengths 2-4 and a small station set."""
    routines = random_routine_library(20, [2, 3, 3, 4, 4, 4], rng)
    return GeneratorSpec(num_apps=20, routines=routines, noise_rate=noise_rate, num_stations=9)
