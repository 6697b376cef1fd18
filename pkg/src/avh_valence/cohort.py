"""Cohort data model, on-disk log formats, and validation.

On-disk layout of a cohort directory (all written by `avh-valence synth`):

* ``sensing.csv`` -- headerless, one event per line:
  ``participant_id,timestamp,kind[,payload...]`` where timestamp is RFC 3339
  UTC and payload depends on kind: ``gps`` -> lat,lon; ``audio_amplitude`` ->
  amplitude; ``conversation`` -> duration seconds; ``screen_unlock`` /
  ``screen_lock`` -> none.
* ``ema.csv`` -- headerless:
  ``participant_id,timestamp,hearing,negativeness,loudness,control,power``
  with the four answer fields empty when hearing is 0 (the popup closes with
  no further questions).
* ``diaries.tensors`` -- tensor archive with one ``(12, 768)`` tensor per
  (sentence, token); manifest metadata groups tensor names into sentences per
  diary and carries the participant roster (id, timezone offset).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive

QUESTIONS = ("negativeness", "loudness", "control", "power")

EVENT_KINDS = ("gps", "screen_unlock", "screen_lock", "audio_amplitude", "conversation")
KIND_CODE = {k: i for i, k in enumerate(EVENT_KINDS)}

SENSING_FILE = "sensing.csv"
EMA_FILE = "ema.csv"
DIARY_FILE = "diaries.tensors"

_RFC3339 = re.compile(r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})Z$")


class LogParseError(ValueError):
    """A malformed log line; carries the 1-based line number and the cause."""

    def __init__(self, line_no: int, cause: str):
        self.line_no = line_no
        self.cause = cause
        super().__init__(f"line {line_no}: {cause}")


class CohortValidationError(ValueError):
    """A cohort-level integrity violation, naming the offending record."""


def parse_timestamp(text: str) -> int:
    """RFC 3339 UTC ('...Z') -> epoch seconds."""
    m = _RFC3339.match(text)
    if not m:
        raise ValueError(f"bad RFC 3339 UTC timestamp {text!r}")
    y, mo, d, h, mi, s = (int(g) for g in m.groups())
    try:
        dt = datetime(y, mo, d, h, mi, s, tzinfo=timezone.utc)
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}: {exc}") from exc
    return int(dt.timestamp())


def format_timestamp(epoch_s: int) -> str:
    """Epoch seconds -> RFC 3339 UTC."""
    return datetime.fromtimestamp(int(epoch_s), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Participant:
    id: str
    timezone_offset: int  # minutes east of UTC

    def __post_init__(self):
        if not self.id:
            raise ValueError("participant id must be nonempty")
        if not -720 <= self.timezone_offset <= 840:
            raise ValueError(f"timezone_offset {self.timezone_offset} outside [-720, 840]")


@dataclass(frozen=True)
class SensingEvent:
    participant_id: str
    timestamp: int
    kind: str
    lat: float | None = None
    lon: float | None = None
    amplitude: float | None = None
    duration_s: float | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "gps":
            if self.lat is None or self.lon is None:
                raise ValueError("gps event requires lat and lon")
            if not -90.0 <= self.lat <= 90.0:
                raise ValueError(f"latitude {self.lat} outside [-90, 90]")
            if not -180.0 <= self.lon <= 180.0:
                raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        elif self.kind == "audio_amplitude":
            if self.amplitude is None or self.amplitude < 0:
                raise ValueError("audio_amplitude requires a nonnegative amplitude")
        elif self.kind == "conversation":
            if self.duration_s is None or self.duration_s < 0:
                raise ValueError("conversation requires a nonnegative duration")


@dataclass(frozen=True)
class EmaResponse:
    participant_id: str
    timestamp: int
    hearing: bool
    answers: tuple[int, int, int, int] | None = None
    self_initiated: bool = False  # prompted and self-initiated reports are modeled identically

    def __post_init__(self):
        if self.hearing:
            if self.answers is None:
                raise ValueError("hearing=true response must carry four answers")
            if len(self.answers) != 4 or any(a not in (0, 1, 2, 3) for a in self.answers):
                raise ValueError(f"answers {self.answers!r} must be four ordinals in 0..3")
        elif self.answers is not None:
            raise ValueError("hearing=false response must carry no answers")

    def ordinal(self, question: str) -> int:
        return self.answers[QUESTIONS.index(question)]


@dataclass
class DiaryTokenStack:
    """Per-token encoder outputs for one diary: sentences of (12, 768) token stacks."""

    participant_id: str
    ema_timestamp: int
    sentences: list[list[np.ndarray]]

    def validate(self):
        if not self.sentences or any(len(s) == 0 for s in self.sentences):
            raise ValueError("diary stack must have at least one sentence, each with tokens")
        for si, sent in enumerate(self.sentences):
            for ti, tok in enumerate(sent):
                if tok.shape != (12, 768):
                    raise ValueError(
                        f"token (sentence {si}, token {ti}) has shape {tok.shape}, expected (12, 768)"
                    )

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


@dataclass
class EventColumns:
    """Column store for one participant's events, sorted by timestamp.

    `a`/`b` hold the kind-specific payload: gps -> (lat, lon),
    audio_amplitude -> (amplitude, nan), conversation -> (duration_s, nan),
    screen events -> (nan, nan).
    """

    timestamp: np.ndarray  # int64 epoch seconds
    kind: np.ndarray  # int8 KIND_CODE
    a: np.ndarray  # float64
    b: np.ndarray  # float64

    @staticmethod
    def empty() -> "EventColumns":
        return EventColumns(
            np.empty(0, np.int64), np.empty(0, np.int8), np.empty(0, float), np.empty(0, float)
        )

    @staticmethod
    def from_events(events: list[SensingEvent]) -> "EventColumns":
        n = len(events)
        ts = np.empty(n, np.int64)
        kind = np.empty(n, np.int8)
        a = np.full(n, np.nan)
        b = np.full(n, np.nan)
        for i, ev in enumerate(events):
            ts[i] = ev.timestamp
            kind[i] = KIND_CODE[ev.kind]
            if ev.kind == "gps":
                a[i], b[i] = ev.lat, ev.lon
            elif ev.kind == "audio_amplitude":
                a[i] = ev.amplitude
            elif ev.kind == "conversation":
                a[i] = ev.duration_s
        return EventColumns(ts, kind, a, b).sorted()

    def sorted(self) -> "EventColumns":
        order = np.argsort(self.timestamp, kind="stable")
        return EventColumns(self.timestamp[order], self.kind[order], self.a[order], self.b[order])

    def slice_window(self, start_s: int, end_s: int) -> "EventColumns":
        """Events with start_s <= timestamp < end_s (columns are time-sorted)."""
        lo = np.searchsorted(self.timestamp, start_s, side="left")
        hi = np.searchsorted(self.timestamp, end_s, side="left")
        return EventColumns(self.timestamp[lo:hi], self.kind[lo:hi], self.a[lo:hi], self.b[lo:hi])

    def __len__(self):
        return len(self.timestamp)


@dataclass
class Cohort:
    participants: list[Participant]
    events: dict[str, EventColumns]  # participant_id -> time-sorted columns
    emas: list[EmaResponse]
    diaries: dict[tuple[str, int], DiaryTokenStack] = field(default_factory=dict)

    def participant_ids(self) -> list[str]:
        return [p.id for p in self.participants]

    def emas_for(self, participant_id: str) -> list[EmaResponse]:
        return [e for e in self.emas if e.participant_id == participant_id]


# ---------------------------------------------------------------------------
# line-delimited log parsing / serialization

def _as_lines(stream):
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    return text.splitlines()


def _parse_sensing_line(line_no: int, line: str) -> SensingEvent:
    fields = line.split(",")
    if len(fields) < 3:
        raise LogParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
    pid, ts_text, kind = fields[0], fields[1], fields[2]
    if not pid:
        raise LogParseError(line_no, "empty participant_id")
    try:
        ts = parse_timestamp(ts_text)
    except ValueError as exc:
        raise LogParseError(line_no, str(exc)) from exc
    if kind not in EVENT_KINDS:
        raise LogParseError(line_no, f"unknown kind {kind!r}")
    payload = fields[3:]
    try:
        if kind == "gps":
            if len(payload) != 2:
                raise ValueError(f"gps expects 2 payload fields, got {len(payload)}")
            return SensingEvent(pid, ts, kind, lat=float(payload[0]), lon=float(payload[1]))
        if kind == "audio_amplitude":
            if len(payload) != 1:
                raise ValueError(f"audio_amplitude expects 1 payload field, got {len(payload)}")
            return SensingEvent(pid, ts, kind, amplitude=float(payload[0]))
        if kind == "conversation":
            if len(payload) != 1:
                raise ValueError(f"conversation expects 1 payload field, got {len(payload)}")
            return SensingEvent(pid, ts, kind, duration_s=float(payload[0]))
        if payload:
            raise ValueError(f"{kind} expects no payload fields, got {len(payload)}")
        return SensingEvent(pid, ts, kind)
    except ValueError as exc:
        raise LogParseError(line_no, str(exc)) from exc


def parse_sensing_log(stream) -> list[SensingEvent]:
    """Parse a sensing log (bytes, str, or file). Raises LogParseError naming line and cause."""
    return [_parse_sensing_line(i, line) for i, line in enumerate(_as_lines(stream), start=1) if line]


def serialize_sensing_event(ev: SensingEvent) -> str:
    base = f"{ev.participant_id},{format_timestamp(ev.timestamp)},{ev.kind}"
    if ev.kind == "gps":
        return f"{base},{float(ev.lat)!r},{float(ev.lon)!r}"
    if ev.kind == "audio_amplitude":
        return f"{base},{float(ev.amplitude)!r}"
    if ev.kind == "conversation":
        return f"{base},{float(ev.duration_s)!r}"
    return base


def serialize_sensing_log(events) -> str:
    return "".join(serialize_sensing_event(ev) + "\n" for ev in events)


def _parse_ema_line(line_no: int, line: str) -> EmaResponse:
    fields = line.split(",")
    if len(fields) != 7:
        raise LogParseError(line_no, f"expected 7 fields, got {len(fields)}")
    pid, ts_text, hearing_text = fields[0], fields[1], fields[2]
    answer_fields = fields[3:7]
    if not pid:
        raise LogParseError(line_no, "empty participant_id")
    try:
        ts = parse_timestamp(ts_text)
    except ValueError as exc:
        raise LogParseError(line_no, str(exc)) from exc
    if hearing_text not in ("0", "1"):
        raise LogParseError(line_no, f"hearing must be 0 or 1, got {hearing_text!r}")
    hearing = hearing_text == "1"
    if not hearing:
        if any(f != "" for f in answer_fields):
            raise LogParseError(line_no, "hearing=0 row must have empty answer fields")
        return EmaResponse(pid, ts, False)
    answers = []
    for name, f in zip(QUESTIONS, answer_fields):
        if f not in ("0", "1", "2", "3"):
            raise LogParseError(line_no, f"{name} ordinal {f!r} outside 0..3")
        answers.append(int(f))
    return EmaResponse(pid, ts, True, tuple(answers))


def parse_ema_log(stream) -> list[EmaResponse]:
    """Parse an EMA log; enforces the hearing gate. Raises LogParseError."""
    return [_parse_ema_line(i, line) for i, line in enumerate(_as_lines(stream), start=1) if line]


def serialize_ema_response(ema: EmaResponse) -> str:
    head = f"{ema.participant_id},{format_timestamp(ema.timestamp)}"
    if not ema.hearing:
        return f"{head},0,,,,"
    n, l, c, p = ema.answers
    return f"{head},1,{n},{l},{c},{p}"


def serialize_ema_log(emas) -> str:
    return "".join(serialize_ema_response(e) + "\n" for e in emas)


# ---------------------------------------------------------------------------
# diary archive

def _diary_tensor_name(pid: str, ema_ts: int, si: int, ti: int) -> str:
    return f"{pid}/{format_timestamp(ema_ts)}/s{si:03d}/t{ti:03d}"


def write_diary_archive(path, diaries: dict[tuple[str, int], DiaryTokenStack],
                        participants: list[Participant]) -> None:
    """Diary stacks + participant roster -> one tensor archive.

    Stacks are ordered by (participant_id, ema_timestamp); the manifest maps
    tensor names into sentences so readers can regroup tokens.
    """
    tensors = []
    stack_meta = []
    for (pid, ts) in sorted(diaries):
        stack = diaries[(pid, ts)]
        sentences_meta = []
        for si, sent in enumerate(stack.sentences):
            names = []
            for ti, tok in enumerate(sent):
                name = _diary_tensor_name(pid, ts, si, ti)
                tensors.append((name, tok))
                names.append(name)
            sentences_meta.append(names)
        stack_meta.append(
            {"participant_id": pid, "ema_timestamp": format_timestamp(ts), "sentences": sentences_meta}
        )
    meta = {
        "kind": "diary_stacks",
        "participants": [
            {"id": p.id, "timezone_offset": p.timezone_offset} for p in participants
        ],
        "stacks": stack_meta,
    }
    write_archive(path, tensors, meta)


def read_diary_archive(path) -> tuple[dict[tuple[str, int], DiaryTokenStack], list[Participant]]:
    arc = read_archive(path)
    participants = [
        Participant(p["id"], int(p["timezone_offset"])) for p in arc.meta.get("participants", [])
    ]
    diaries: dict[tuple[str, int], DiaryTokenStack] = {}
    for sm in arc.meta.get("stacks", []):
        pid = sm["participant_id"]
        ts = parse_timestamp(sm["ema_timestamp"])
        sentences = [[arc[name] for name in names] for names in sm["sentences"]]
        stack = DiaryTokenStack(pid, ts, sentences)
        stack.validate()
        diaries[(pid, ts)] = stack
    return diaries, participants


# ---------------------------------------------------------------------------
# cohort assembly / IO / validation

def build_cohort(participants, events, emas, diaries=None) -> Cohort:
    """Group events per participant into sorted columns and validate integrity."""
    by_pid: dict[str, list[SensingEvent]] = {p.id: [] for p in participants}
    cohort = Cohort(
        participants=list(participants),
        events={},
        emas=sorted(emas, key=lambda e: (e.participant_id, e.timestamp)),
        diaries=dict(diaries) if diaries else {},
    )
    for ev in events:
        if ev.participant_id not in by_pid:
            raise CohortValidationError(
                f"sensing event at {format_timestamp(ev.timestamp)} references unknown "
                f"participant {ev.participant_id!r}"
            )
        by_pid[ev.participant_id].append(ev)
    cohort.events = {pid: EventColumns.from_events(evs) for pid, evs in by_pid.items()}
    validate_cohort(cohort)
    return cohort


def validate_cohort(cohort: Cohort) -> None:
    """Referential integrity + gate/uniqueness invariants; names the offending record."""
    ids = set()
    for p in cohort.participants:
        if p.id in ids:
            raise CohortValidationError(f"duplicate participant id {p.id!r}")
        ids.add(p.id)
    for pid in cohort.events:
        if pid not in ids:
            raise CohortValidationError(f"sensing events reference unknown participant {pid!r}")
    ema_keys = set()
    for e in cohort.emas:
        if e.participant_id not in ids:
            raise CohortValidationError(
                f"EMA at {format_timestamp(e.timestamp)} references unknown participant "
                f"{e.participant_id!r}"
            )
        ema_keys.add((e.participant_id, e.timestamp))
    for key, stack in cohort.diaries.items():
        pid, ts = key
        if pid not in ids:
            raise CohortValidationError(
                f"diary at {format_timestamp(ts)} references unknown participant {pid!r}"
            )
        if key != (stack.participant_id, stack.ema_timestamp):
            raise CohortValidationError(f"diary key {key} does not match its stack")
        if key not in ema_keys:
            raise CohortValidationError(
                f"diary for participant {pid!r} at {format_timestamp(ts)} has no matching EMA"
            )


def write_cohort(cohort: Cohort, out_dir, force: bool = False) -> list[Path]:
    """Write sensing.csv, ema.csv, diaries.tensors into `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / SENSING_FILE, out / EMA_FILE, out / DIARY_FILE]
    if not force:
        existing = [p for p in paths if p.exists()]
        if existing:
            raise FileExistsError(f"{existing[0]} exists; pass force to overwrite")

    with open(paths[0], "w", encoding="utf-8") as fh:
        for p in cohort.participants:
            cols = cohort.events.get(p.id)
            if cols is None:
                continue
            for i in range(len(cols)):
                kind = EVENT_KINDS[cols.kind[i]]
                base = f"{p.id},{format_timestamp(int(cols.timestamp[i]))},{kind}"
                if kind == "gps":
                    fh.write(f"{base},{float(cols.a[i])!r},{float(cols.b[i])!r}\n")
                elif kind in ("audio_amplitude", "conversation"):
                    fh.write(f"{base},{float(cols.a[i])!r}\n")
                else:
                    fh.write(base + "\n")
    with open(paths[1], "w", encoding="utf-8") as fh:
        fh.write(serialize_ema_log(cohort.emas))
    write_diary_archive(paths[2], cohort.diaries, cohort.participants)
    return paths


def load_cohort(cohort_dir) -> Cohort:
    """Load and validate a cohort directory written by `write_cohort`."""
    d = Path(cohort_dir)
    diaries, participants = read_diary_archive(d / DIARY_FILE)
    events = parse_sensing_log((d / SENSING_FILE).read_bytes())
    emas = parse_ema_log((d / EMA_FILE).read_bytes())
    return build_cohort(participants, events, emas, diaries)
