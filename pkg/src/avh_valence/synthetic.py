"""Seeded synthetic cohort generator with a plantable, recoverable signal.

No real data ships with this package, so experiments run on generated
cohorts built to exercise every pipeline stage: diurnal GPS tracks around
home/work/outing anchors, screen and conversation events with controllable
hourly concentration ("burstiness"), minute-level audio amplitude, prompted
EMA responses inside the four daily windows, and token diaries for every
hearing-positive response.

The label-generating latent for each valence question mixes (a) a hidden
per-participant trait, (b) the realized concentration of unlock/conversation
activity over the 24 h before the report, and (c) the share of a planted
motif token in the diary — quantized at fixed cohort-level quantiles into
ordinals 0..3. Burstiness survives the per-window normalization of the
sensing featurizers and the motif share is visible to the text aggregation,
so trained models can beat chance, and because (b) and (c) enter different
modalities, fusing both recovers more than either alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cohort import (
    Cohort,
    DiaryTokenStack,
    EmaResponse,
    EventColumns,
    KIND_CODE,
    Participant,
    QUESTIONS,
    validate_cohort,
)
from .seeding import derive_rng
from .textagg import encode_transcript

EMA_WINDOWS_LOCAL_H = ((9, 11), (12, 14), (15, 17), (18, 20))

BASE_EPOCH_UTC = 1704067200  # 2024-01-01T00:00:00Z

# question -> (trait, burstiness, motif, noise) weights on the label latent
QUESTION_WEIGHTS = {
    "negativeness": (0.25, 0.30, 1.00, 0.30),
    "loudness": (0.25, 1.25, 0.45, 0.18),
    "control": (0.25, 0.70, 0.70, 0.30),
    "power": (0.25, 0.80, 0.80, 0.28),
}
# cumulative class shares for the ordinal thresholds (majority ~40%)
CLASS_QUANTILES = (0.40, 0.73, 0.90)

MOTIF_TOKEN = "static"
FILLER_TOKENS = (
    "the", "a", "day", "was", "long", "i", "went", "to", "town", "again",
    "felt", "tired", "quiet", "morning", "evening", "walk", "rain", "sun",
    "cold", "warm", "ate", "lunch", "dinner", "slept", "well", "poorly",
    "talked", "with", "friend", "family", "work", "home", "bus", "street",
    "music", "book", "coffee", "tea", "later", "early", "today", "yesterday",
    "night", "room", "window", "door", "slow", "busy",
)

_TZ_CHOICES = (-300, -360, -420, -480)  # minutes east of UTC
_M_PER_DEG_LAT = 111_320.0


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 40
    n_days: int = 30
    seed: int = 0
    compliance: float = 0.55
    gps_interval_s: int = 600
    amp_interval_s: int = 60

    def __post_init__(self):
        if self.n_participants < 1 or self.n_days < 1:
            raise ValueError("n_participants and n_days must be >= 1")
        if not 0.0 < self.compliance <= 1.0:
            raise ValueError("compliance must be in (0, 1]")
        if self.gps_interval_s < 1 or self.amp_interval_s < 1:
            raise ValueError("sampling intervals must be >= 1 s")


def _expit(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _offset_latlon(lat, lon, north_m, east_m):
    return (
        lat + north_m / _M_PER_DEG_LAT,
        lon + east_m / (_M_PER_DEG_LAT * math.cos(math.radians(lat))),
    )


def _diurnal_hour_weights() -> np.ndarray:
    """Baseline phone-activity propensity per local hour (low overnight)."""
    h = np.arange(24, dtype=float)
    w = 0.08 + np.where((h >= 8) & (h < 23), 1.0, 0.0) + 0.4 * np.sin((h - 8) / 15 * np.pi).clip(0)
    return w / w.sum()


_HOUR_WEIGHTS = _diurnal_hour_weights()


@dataclass
class _Place:
    lat: float
    lon: float


class _ParticipantDraws:
    """Everything sampled per participant, in one fixed draw order."""

    def __init__(self, pid: str, cfg: SynthConfig):
        rng = derive_rng(cfg.seed, "participant", pid)
        self.rng = rng
        self.tz_offset = int(rng.choice(_TZ_CHOICES))
        self.trait = float(rng.standard_normal())
        home_lat = 40.0 + rng.uniform(-2.0, 2.0)
        home_lon = -85.0 + rng.uniform(-10.0, 10.0)
        self.home = _Place(home_lat, home_lon)
        theta = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(800.0, 2500.0)
        self.work = _Place(*_offset_latlon(home_lat, home_lon, r * np.cos(theta), r * np.sin(theta)))
        theta = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(400.0, 1500.0)
        self.cafe = _Place(*_offset_latlon(home_lat, home_lon, r * np.cos(theta), r * np.sin(theta)))
        self.unlock_rate = 35.0 * np.exp(0.25 * rng.standard_normal())
        self.conv_rate = 7.0 * np.exp(0.30 * rng.standard_normal())
        self.burst_base = 0.4 * self.trait + 0.6 * rng.standard_normal()
        self.motif_base = 0.4 * self.trait + 0.6 * rng.standard_normal()
        self.p_hear = float(_expit(0.5 * (0.4 * self.trait + 0.6 * rng.standard_normal()) - 0.1))


def _day_gps(draws: _ParticipantDraws, day: int, cfg: SynthConfig, weekend: bool,
             outing: bool):
    """One local day of GPS fixes: (local_s, lat, lon) arrays."""
    rng = draws.rng
    tl = np.arange(0, 86400, cfg.gps_interval_s, dtype=np.int64) + day * 86400
    h = (tl % 86400) / 3600.0
    lat = np.full(tl.shape, draws.home.lat)
    lon = np.full(tl.shape, draws.home.lon)
    if not weekend:
        for lo, hi, frm, to in ((8, 9, draws.home, draws.work), (17, 18, draws.work, draws.home)):
            m = (h >= lo) & (h < hi)
            f = h[m] - lo
            lat[m] = frm.lat + f * (to.lat - frm.lat)
            lon[m] = frm.lon + f * (to.lon - frm.lon)
        m = (h >= 9) & (h < 17)
        lat[m], lon[m] = draws.work.lat, draws.work.lon
        if outing:
            m = (h >= 19) & (h < 21)
            lat[m], lon[m] = draws.cafe.lat, draws.cafe.lon
    elif outing:
        m = (h >= 11) & (h < 13)
        lat[m], lon[m] = draws.cafe.lat, draws.cafe.lon
    lat = lat + rng.normal(0.0, 12.0, tl.shape) / _M_PER_DEG_LAT
    lon = lon + rng.normal(0.0, 12.0, tl.shape) / (
        _M_PER_DEG_LAT * np.cos(np.radians(draws.home.lat))
    )
    return tl, lat, lon


def _allocate_hours(rng, n: int, spike_hours: np.ndarray, p_spike: float) -> np.ndarray:
    """Hour-of-day for n events: spike hours with prob p_spike, else diurnal."""
    spiky = rng.random(n) < p_spike
    hours = rng.choice(24, size=n, p=_HOUR_WEIGHTS)
    if spiky.any():
        hours[spiky] = rng.choice(spike_hours, size=int(spiky.sum()))
    return hours


def generate_cohort(cfg: SynthConfig) -> Cohort:
    """Pure function of config: identical configs yield identical cohorts."""
    participants: list[Participant] = []
    events: dict[str, EventColumns] = {}
    emas: list[EmaResponse] = []
    diaries: dict[tuple[str, int], DiaryTokenStack] = {}

    # raw per-instance label ingredients, filled per participant
    inst_keys: list[tuple[str, int]] = []
    inst_trait: list[float] = []
    inst_burst: list[float] = []
    inst_motif: list[float] = []

    for p_idx in range(cfg.n_participants):
        pid = f"p{p_idx:03d}"
        draws = _ParticipantDraws(pid, cfg)
        rng = draws.rng
        participants.append(Participant(pid, draws.tz_offset))
        utc_shift = BASE_EPOCH_UTC - draws.tz_offset * 60  # local seconds -> UTC epoch

        ts_parts, kind_parts, a_parts, b_parts = [], [], [], []
        hearing_local: list[tuple[int, int]] = []  # (utc_ts, day)
        day_motif = np.empty(cfg.n_days)

        for day in range(cfg.n_days):
            weekend = day % 7 in (5, 6)
            kappa = draws.burst_base + 0.7 * rng.standard_normal()
            day_motif[day] = draws.motif_base + 0.7 * rng.standard_normal()
            spike_hours = rng.choice(np.arange(8, 23), size=3, replace=False)
            outing = rng.random() < (0.5 if weekend else 0.35)

            tl, lat, lon = _day_gps(draws, day, cfg, weekend, outing)
            ts_parts.append(tl + utc_shift)
            kind_parts.append(np.full(tl.shape, KIND_CODE["gps"], np.int8))
            a_parts.append(lat)
            b_parts.append(lon)

            n_unlock = rng.poisson(draws.unlock_rate * (1.25 if weekend else 1.0))
            if n_unlock:
                hours = _allocate_hours(rng, n_unlock, spike_hours, float(_expit(kappa)))
                t_unlock = day * 86400 + hours * 3600 + rng.integers(0, 3600, n_unlock)
                spans = np.minimum(np.exp(rng.normal(4.2, 0.8, n_unlock)), 1800.0)
                ts_parts.append(t_unlock + utc_shift)
                kind_parts.append(np.full(n_unlock, KIND_CODE["screen_unlock"], np.int8))
                a_parts.append(np.full(n_unlock, np.nan))
                b_parts.append(np.full(n_unlock, np.nan))
                ts_parts.append(t_unlock + spans.astype(np.int64) + utc_shift)
                kind_parts.append(np.full(n_unlock, KIND_CODE["screen_lock"], np.int8))
                a_parts.append(np.full(n_unlock, np.nan))
                b_parts.append(np.full(n_unlock, np.nan))

            n_conv = rng.poisson(draws.conv_rate)
            if n_conv:
                hours = _allocate_hours(rng, n_conv, spike_hours, float(_expit(kappa)) * 0.85)
                t_conv = day * 86400 + hours * 3600 + rng.integers(0, 3600, n_conv)
                durs = np.minimum(np.exp(rng.normal(5.5, 0.6, n_conv)), 3600.0)
                ts_parts.append(t_conv + utc_shift)
                kind_parts.append(np.full(n_conv, KIND_CODE["conversation"], np.int8))
                a_parts.append(durs)
                b_parts.append(np.full(n_conv, np.nan))

            t_amp = np.arange(0, 86400, cfg.amp_interval_s, dtype=np.int64) + day * 86400
            h_amp = ((t_amp % 86400) // 3600).astype(int)
            day_bump = np.where((h_amp >= 8) & (h_amp < 22), 0.05, 0.0)
            amp = 0.02 * np.exp(0.5 * rng.standard_normal(t_amp.shape)) + day_bump
            ts_parts.append(t_amp + utc_shift)
            kind_parts.append(np.full(t_amp.shape, KIND_CODE["audio_amplitude"], np.int8))
            a_parts.append(amp)
            b_parts.append(np.full(t_amp.shape, np.nan))

            for start_h, end_h in EMA_WINDOWS_LOCAL_H:
                if rng.random() >= cfg.compliance:
                    continue
                t_local = day * 86400 + start_h * 3600 + int(rng.integers(0, (end_h - start_h) * 3600))
                t_utc = t_local + utc_shift
                if rng.random() < draws.p_hear:
                    hearing_local.append((t_utc, day))
                else:
                    emas.append(EmaResponse(pid, t_utc, False))

        cols = EventColumns(
            np.concatenate(ts_parts),
            np.concatenate(kind_parts),
            np.concatenate(a_parts),
            np.concatenate(b_parts),
        ).sorted()
        events[pid] = cols

        # realized burstiness over the 24 h before each hearing report
        unlock_ts = cols.timestamp[cols.kind == KIND_CODE["screen_unlock"]]
        conv_ts = cols.timestamp[cols.kind == KIND_CODE["conversation"]]
        for t_utc, day in hearing_local:
            c = _herfindahl(unlock_ts, t_utc)
            v = _herfindahl(conv_ts, t_utc)
            key = (pid, t_utc)
            inst_keys.append(key)
            inst_trait.append(draws.trait)
            inst_burst.append(0.65 * c + 0.35 * v)
            m_inst = day_motif[day] + 0.3 * rng.standard_normal()
            n_motif = int(rng.poisson(np.exp(0.7 + 0.5 * m_inst)))
            sentences = _diary_sentences(rng, n_motif)
            n_tokens = sum(len(s) for s in sentences)
            inst_motif.append(n_motif / n_tokens)
            diaries[key] = DiaryTokenStack(pid, t_utc, encode_transcript(sentences, cfg.seed))

    # cohort-level label pass: standardize ingredients, quantize latents
    order = np.argsort(np.array([f"{k[0]},{k[1]:020d}" for k in inst_keys]))
    keys_sorted = [inst_keys[i] for i in order]
    trait = np.array(inst_trait)[order]
    burst = _zscore(np.array(inst_burst)[order])
    motif = _zscore(np.array(inst_motif)[order])

    answers: dict[tuple[str, int], list[int]] = {k: [] for k in keys_sorted}
    for question in QUESTIONS:
        a, b, c, sd = QUESTION_WEIGHTS[question]
        noise = derive_rng(cfg.seed, "labels", question).standard_normal(len(keys_sorted))
        latent = a * trait + b * burst + c * motif + sd * noise
        cuts = np.quantile(latent, CLASS_QUANTILES)
        ordinals = np.digitize(latent, cuts)
        for key, o in zip(keys_sorted, ordinals):
            answers[key].append(int(o))

    for key in keys_sorted:
        pid, ts = key
        emas.append(EmaResponse(pid, ts, True, tuple(answers[key])))

    emas.sort(key=lambda e: (e.participant_id, e.timestamp))
    cohort = Cohort(participants, events, emas, diaries)
    validate_cohort(cohort)
    return cohort


def _herfindahl(event_ts: np.ndarray, window_end: int) -> float:
    """Concentration of events across the 24 hourly buckets before window_end."""
    lo = np.searchsorted(event_ts, window_end - 86400, side="left")
    hi = np.searchsorted(event_ts, window_end, side="left")
    if hi == lo:
        return 1.0 / 24.0
    hours = (event_ts[lo:hi] - (window_end - 86400)) // 3600
    counts = np.bincount(hours.astype(int), minlength=24).astype(float)
    share = counts / counts.sum()
    return float((share**2).sum())


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def _diary_sentences(rng, n_motif: int) -> list[list[str]]:
    n_sent = int(rng.integers(1, 4))
    sentences = [
        [FILLER_TOKENS[j] for j in rng.integers(0, len(FILLER_TOKENS), int(rng.integers(4, 11)))]
        for _ in range(n_sent)
    ]
    for _ in range(n_motif):
        s = sentences[int(rng.integers(0, n_sent))]
        s.insert(int(rng.integers(0, len(s) + 1)), MOTIF_TOKEN)
    return sentences
