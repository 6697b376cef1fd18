import numpy as np
import pytest

from avh_valence.cohort import EVENT_KINDS, KIND_CODE, QUESTIONS, validate_cohort
from avh_valence.metrics import prevalence
from avh_valence.synthetic import (
    BASE_EPOCH_UTC,
    CLASS_QUANTILES,
    EMA_WINDOWS_LOCAL_H,
    SynthConfig,
    _herfindahl,
    generate_cohort,
)

SMALL = SynthConfig(n_participants=4, n_days=3, seed=5)


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(SMALL)


@pytest.fixture(scope="module")
def default_cohort():
    return generate_cohort(SynthConfig(seed=0))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_participants=0)
    with pytest.raises(ValueError):
        SynthConfig(n_days=0)
    with pytest.raises(ValueError):
        SynthConfig(compliance=0.0)
    with pytest.raises(ValueError):
        SynthConfig(compliance=1.2)
    with pytest.raises(ValueError):
        SynthConfig(gps_interval_s=0)


def test_generation_is_deterministic(small_cohort):
    again = generate_cohort(SMALL)
    assert again.participants == small_cohort.participants
    assert again.emas == small_cohort.emas
    for pid, cols in small_cohort.events.items():
        assert np.array_equal(again.events[pid].timestamp, cols.timestamp)
        assert np.array_equal(again.events[pid].kind, cols.kind)
        assert np.array_equal(again.events[pid].a, cols.a, equal_nan=True)
        assert np.array_equal(again.events[pid].b, cols.b, equal_nan=True)
    assert set(again.diaries) == set(small_cohort.diaries)
    for key, stack in small_cohort.diaries.items():
        got = again.diaries[key]
        for s_got, s_want in zip(got.sentences, stack.sentences):
            for a, b in zip(s_got, s_want):
                assert np.array_equal(a, b)


def test_different_seeds_differ(small_cohort):
    other = generate_cohort(SynthConfig(n_participants=4, n_days=3, seed=6))
    assert other.emas != small_cohort.emas


def test_cohort_passes_validation(small_cohort):
    validate_cohort(small_cohort)  # no exception
    assert small_cohort.participant_ids() == ["p000", "p001", "p002", "p003"]


def test_events_are_sorted_and_well_formed(small_cohort):
    for pid, cols in small_cohort.events.items():
        assert np.all(np.diff(cols.timestamp) >= 0)
        assert set(np.unique(cols.kind)) <= set(KIND_CODE.values())
        gps = cols.kind == KIND_CODE["gps"]
        assert np.all((cols.a[gps] >= -90) & (cols.a[gps] <= 90))
        assert np.all((cols.b[gps] >= -180) & (cols.b[gps] <= 180))
        amp = cols.kind == KIND_CODE["audio_amplitude"]
        assert np.all(cols.a[amp] >= 0)
        conv = cols.kind == KIND_CODE["conversation"]
        assert np.all((cols.a[conv] > 0) & (cols.a[conv] <= 3600))
        # all streams stay within the study span (plus timezone slack)
        lo = BASE_EPOCH_UTC - 86400
        hi = BASE_EPOCH_UTC + (SMALL.n_days + 2) * 86400
        assert cols.timestamp.min() >= lo and cols.timestamp.max() < hi


def test_ema_prompts_fall_in_local_windows(small_cohort):
    tz = {p.id: p.timezone_offset for p in small_cohort.participants}
    windows_seen = set()
    for e in small_cohort.emas:
        local = e.timestamp - BASE_EPOCH_UTC + tz[e.participant_id] * 60
        hour = (local % 86400) / 3600.0
        window = next(
            ((lo, hi) for lo, hi in EMA_WINDOWS_LOCAL_H if lo <= hour < hi), None
        )
        assert window is not None, f"EMA at local hour {hour:.2f} outside all windows"
        windows_seen.add(window)
    assert windows_seen == set(EMA_WINDOWS_LOCAL_H)


def test_at_most_one_prompt_per_window_per_day(small_cohort):
    tz = {p.id: p.timezone_offset for p in small_cohort.participants}
    seen = set()
    for e in small_cohort.emas:
        local = e.timestamp - BASE_EPOCH_UTC + tz[e.participant_id] * 60
        window = next(
            i for i, (lo, hi) in enumerate(EMA_WINDOWS_LOCAL_H)
            if lo <= (local % 86400) / 3600.0 < hi
        )
        key = (e.participant_id, local // 86400, window)
        assert key not in seen
        seen.add(key)


def test_full_compliance_yields_every_prompt():
    cfg = SynthConfig(n_participants=2, n_days=2, seed=1, compliance=1.0)
    cohort = generate_cohort(cfg)
    assert len(cohort.emas) == 2 * 2 * len(EMA_WINDOWS_LOCAL_H)


def test_gate_mix_and_diary_alignment(small_cohort):
    hearing = {(e.participant_id, e.timestamp) for e in small_cohort.emas if e.hearing}
    silent = [e for e in small_cohort.emas if not e.hearing]
    assert hearing and silent  # both gate outcomes occur
    assert set(small_cohort.diaries) == hearing
    for stack in small_cohort.diaries.values():
        stack.validate()


def test_label_prevalence_matches_quantile_design(default_cohort):
    # quantile cuts at (0.40, 0.73, 0.90) plant class shares ~(40, 33, 17, 10)%
    expected = np.diff((0.0,) + CLASS_QUANTILES + (1.0,))
    for qi, question in enumerate(QUESTIONS):
        answers = [e.answers[qi] for e in default_cohort.emas if e.hearing]
        prev = prevalence(np.array(answers))
        assert np.all(np.abs(prev - expected) < 0.03), (question, prev)
        assert 0.25 < prev.max() < 0.6  # majority class is modal but not degenerate


def test_prevalence_identical_across_questions(default_cohort):
    # the latent differs per question but the quantile cuts pin the shares
    prevs = []
    for qi in range(4):
        answers = [e.answers[qi] for e in default_cohort.emas if e.hearing]
        prevs.append(tuple(np.bincount(answers, minlength=4)))
    assert len(set(prevs)) == 1


def test_timezones_come_from_catalog(default_cohort):
    assert {p.timezone_offset for p in default_cohort.participants} <= {-300, -360, -420, -480}


def test_herfindahl_reference_values():
    # all events in a single hour bucket -> maximal concentration 1.0
    ts = np.array([100, 200, 300], dtype=np.int64)
    assert _herfindahl(ts, 86400) == 1.0
    # one event in each of the 24 buckets -> uniform concentration 1/24
    ts = np.arange(24, dtype=np.int64) * 3600 + 10
    assert _herfindahl(ts, 86400) == pytest.approx(1.0 / 24.0)
    # empty windows fall back to the uniform value
    assert _herfindahl(np.array([], dtype=np.int64), 86400) == pytest.approx(1.0 / 24.0)
    # events outside the window are ignored
    ts = np.array([-50, 100, 200, 90000], dtype=np.int64)
    assert _herfindahl(ts, 86400) == 1.0
