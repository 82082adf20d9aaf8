"""Event-log ingestion and sessionization.

Internal time unit is hours.  Raw logs arrive as CSV (header
``user_id,timestamp``) or JSONL objects ``{"user_id": ..., "timestamp": ...}``;
numeric timestamps are taken as hours unless ``time_unit="seconds"``, and
ISO-8601 strings are always converted to hours since the Unix epoch.

A session is a maximal run of one user's events whose consecutive gaps are
strictly below the threshold; a gap exactly equal to the threshold starts a
new session.  The stored gap of session i is start-to-start by default
(t_i - t_{i-1}); ``gap_mode="end-to-start"`` measures from the previous
session's last event instead.  The first session carries the sentinel gap 0.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import DataError

GAP_MODES = ("start-to-start", "end-to-start")


@dataclass(frozen=True)
class Event:
    user_id: str
    timestamp: float  # hours

    def __post_init__(self):
        if not self.user_id:
            raise DataError("Event: empty user_id")
        if not math.isfinite(self.timestamp):
            raise DataError(f"Event: non-finite timestamp for user {self.user_id!r}")


@dataclass(frozen=True)
class Session:
    """(start time, previous absence gap, duration in events)."""

    t: float
    g: float
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise DataError(f"Session: duration must be >= 1, got {self.d}")
        if self.g < 0.0 or not math.isfinite(self.g):
            raise DataError(f"Session: bad gap {self.g}")


@dataclass
class SessionSequence:
    user_id: str
    sessions: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sessions:
            raise DataError(f"SessionSequence: user {self.user_id!r} has no sessions")
        starts = [s.t for s in self.sessions]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise DataError(
                f"SessionSequence: start times not strictly increasing for {self.user_id!r}"
            )

    def __len__(self):
        return len(self.sessions)

    def gaps(self):
        """Observed real gaps (the sentinel first gap is excluded)."""
        return [s.g for s in self.sessions[1:]]

    def durations(self):
        return [s.d for s in self.sessions]


def _parse_timestamp(raw, time_unit, where):
    if isinstance(raw, (int, float)):
        value = float(raw)
    else:
        text = str(raw).strip()
        if not text:
            raise DataError(f"{where}: empty timestamp")
        try:
            value = float(text)
        except ValueError:
            try:
                iso = text.replace("Z", "+00:00") if text.endswith("Z") else text
                dt = datetime.fromisoformat(iso)
            except ValueError:
                raise DataError(f"{where}: unparseable timestamp {text!r}") from None
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return dt.timestamp() / 3600.0
        return value / 3600.0 if time_unit == "seconds" else value
    if not math.isfinite(value):
        raise DataError(f"{where}: non-finite timestamp")
    return value / 3600.0 if time_unit == "seconds" else value


def ingest_events(source, fmt="csv", time_unit="hours"):
    """Parse an event file into {user_id: sorted unique timestamps (hours)}.

    ``source`` is a path or an open text stream.  Events are sorted per user
    and exact duplicate (user, timestamp) records are dropped.
    """
    if time_unit not in ("hours", "seconds"):
        raise ValueError(f"ingest_events: unknown time_unit {time_unit!r}")
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"ingest_events: unknown format {fmt!r}")

    close = False
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        try:
            stream = open(source, "r", encoding="utf-8", newline="")
        except OSError as exc:
            raise DataError(f"cannot open event file: {exc}") from None
        close = True
    else:
        stream = source

    per_user = {}
    try:
        if fmt == "csv":
            reader = csv.reader(stream)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError("empty event file") from None
            cols = [c.strip() for c in header]
            if "user_id" not in cols or "timestamp" not in cols:
                raise DataError(f"line 1: expected header with user_id,timestamp, got {header}")
            ui, ti = cols.index("user_id"), cols.index("timestamp")
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) <= max(ui, ti):
                    raise DataError(f"line {lineno}: expected {len(cols)} fields, got {len(rec)}")
                user = rec[ui].strip()
                if not user:
                    raise DataError(f"line {lineno}: empty user_id")
                ts = _parse_timestamp(rec[ti], time_unit, f"line {lineno}")
                per_user.setdefault(user, set()).add(ts)
        else:
            for lineno, raw in enumerate(stream, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise DataError(f"line {lineno}: bad JSON ({exc.msg})") from None
                if not isinstance(obj, dict) or "user_id" not in obj or "timestamp" not in obj:
                    raise DataError(f"line {lineno}: need user_id and timestamp fields")
                user = str(obj["user_id"])
                if not user:
                    raise DataError(f"line {lineno}: empty user_id")
                ts = _parse_timestamp(obj["timestamp"], time_unit, f"line {lineno}")
                per_user.setdefault(user, set()).add(ts)
    finally:
        if close:
            stream.close()

    if not per_user:
        raise DataError("event file contains no events")
    return {user: sorted(stamps) for user, stamps in per_user.items()}


def sessionize(user_id, timestamps, threshold, gap_mode="start-to-start"):
    """Segment one user's sorted timestamps into a SessionSequence.

    Consecutive events j, j+1 share a session iff t_{j+1} - t_j < threshold
    (strict).  Session duration is the event count; gaps are start-to-start
    or end-to-start depending on gap_mode, with the first gap fixed at 0.
    """
    if threshold <= 0.0:
        raise ValueError(f"sessionize: threshold must be positive, got {threshold}")
    if gap_mode not in GAP_MODES:
        raise ValueError(f"sessionize: unknown gap_mode {gap_mode!r}")
    if len(timestamps) == 0:
        raise DataError(f"sessionize: no events for user {user_id!r}")

    ts = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(ts) < 0.0):
        raise ValueError(f"sessionize: timestamps not sorted for user {user_id!r}")

    breaks = np.flatnonzero(np.diff(ts) >= threshold) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [ts.size]))

    sessions = []
    prev_start = None
    prev_last = None
    for s, e in zip(starts, ends):
        t0 = float(ts[s])
        if prev_start is None:
            gap = 0.0
        elif gap_mode == "start-to-start":
            gap = t0 - prev_start
        else:
            gap = t0 - prev_last
        sessions.append(Session(t=t0, g=gap, d=int(e - s)))
        prev_start = t0
        prev_last = float(ts[e - 1])
    return SessionSequence(user_id=user_id, sessions=sessions)


def sessionize_log(per_user, threshold, gap_mode="start-to-start"):
    """Sessionize every user of an ingested log; output is user-sorted."""
    return [
        sessionize(user, stamps, threshold, gap_mode)
        for user, stamps in sorted(per_user.items())
    ]


def derive_seed(seed, *tokens):
    """Stable sub-seed from (seed, tokens); independent of process hashing."""
    material = ":".join([str(seed)] + [str(t) for t in tokens])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_users(sequences, train_fraction, seed):
    """Deterministic disjoint train/test partition of users."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"split_users: train_fraction must be in (0,1), got {train_fraction}")
    if len(sequences) < 2:
        raise DataError(f"split_users: need at least 2 users, got {len(sequences)}")
    ordered = sorted(sequences, key=lambda s: s.user_id)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    perm = rng.permutation(len(ordered))
    n_train = int(round(train_fraction * len(ordered)))
    n_train = min(max(n_train, 1), len(ordered) - 1)
    train_idx = sorted(perm[:n_train])
    test_idx = sorted(perm[n_train:])
    return [ordered[i] for i in train_idx], [ordered[i] for i in test_idx]


def write_sessions(sequences, path):
    """Write sequences as JSONL {"user_id", "sessions": [{"t","g","d"}]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            obj = {
                "user_id": seq.user_id,
                "sessions": [{"t": float(s.t), "g": float(s.g), "d": int(s.d)} for s in seq.sessions],
            }
            fh.write(json.dumps(obj) + "\n")


def read_sessions(path):
    """Read sequences from the JSONL produced by write_sessions / simulate."""
    sequences = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open sessions file: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: bad JSON ({exc.msg})") from None
            try:
                sessions = [Session(t=float(s["t"]), g=float(s["g"]), d=int(s["d"])) for s in obj["sessions"]]
                sequences.append(SessionSequence(user_id=str(obj["user_id"]), sessions=sessions))
            except (KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: bad session record ({exc})") from None
    if not sequences:
        raise DataError("sessions file contains no sequences")
    return sequences
