"""Mobility and phone-use features from raw sensing streams.

GPS tracks are clustered with DBSCAN over haversine distances to find
significant locations (clusters dwelt in for at least 30 minutes), and each
report window is summarized into a 7 x 24 array of hourly behavioral
aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import KIND_CODE, EventColumns

EARTH_RADIUS_M = 6_371_000.0

DEFAULT_EPS_M = 100.0
DEFAULT_MIN_SAMPLES = 5
MIN_DWELL_MIN = 30.0

NOISE = -1

SENSING_ROWS = (
    "places_visited",
    "distance_travelled_m",
    "unlock_duration_s",
    "n_unlocks",
    "audio_amplitude_mean",
    "conversation_duration_s",
    "n_conversations",
)
WINDOW_HOURS = 24


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; accepts scalars or arrays (broadcast)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=float)) for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _pairwise_haversine(lat, lon):
    return haversine_m(lat[:, None], lon[:, None], lat[None, :], lon[None, :])


def dbscan_labels(lat, lon, eps_m: float = DEFAULT_EPS_M, min_samples: int = DEFAULT_MIN_SAMPLES):
    """DBSCAN over haversine distances; noise points get label -1.

    Deterministic: points are scanned in index order and the first unclaimed
    core point starts the next cluster, expanding breadth-first in index
    order. Border points join the first cluster that reaches them.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    n = lat.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels

    dist = _pairwise_haversine(lat, lon)
    neighbors = [np.flatnonzero(dist[i] <= eps_m) for i in range(n)]  # includes self
    is_core = np.array([len(nb) >= min_samples for nb in neighbors])

    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not is_core[i]:
            continue
        labels[i] = cluster
        frontier = [j for j in neighbors[i] if labels[j] == NOISE]
        for j in frontier:
            labels[j] = cluster
        k = 0
        while k < len(frontier):
            j = frontier[k]
            k += 1
            if is_core[j]:
                for q in neighbors[j]:
                    if labels[q] == NOISE:
                        labels[q] = cluster
                        frontier.append(q)
        cluster += 1
    return labels


@dataclass(frozen=True)
class SignificantLocation:
    label: int
    center_lat: float
    center_lon: float
    dwell_min: float
    member_count: int


def significant_locations(timestamps, lat, lon, eps_m: float = DEFAULT_EPS_M,
                          min_samples: int = DEFAULT_MIN_SAMPLES,
                          min_dwell_min: float = MIN_DWELL_MIN):
    """Clusters of a time-sorted GPS track dwelt in for >= `min_dwell_min`.

    Dwell time for a cluster is the summed duration of maximal runs of
    consecutive track fixes belonging to it (run duration = last timestamp
    minus first, so single-fix runs contribute zero). Centers are arithmetic
    means of member lat/lon. Returns (locations, per-fix DBSCAN labels).
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    labels = dbscan_labels(lat, lon, eps_m, min_samples)
    out = []
    for lab in range(labels.max() + 1 if labels.size else 0):
        member = labels == lab
        idx = np.flatnonzero(member)
        dwell_s = 0.0
        start = None
        for i, here in enumerate(member):
            if here and start is None:
                start = i
            elif not here and start is not None:
                dwell_s += float(timestamps[i - 1] - timestamps[start])
                start = None
        if start is not None:
            dwell_s += float(timestamps[len(member) - 1] - timestamps[start])
        if dwell_s / 60.0 >= min_dwell_min:
            out.append(
                SignificantLocation(
                    label=lab,
                    center_lat=float(lat[idx].mean()),
                    center_lon=float(lon[idx].mean()),
                    dwell_min=dwell_s / 60.0,
                    member_count=int(idx.size),
                )
            )
    return out, labels


def _hour_bucket(ts, window_start):
    return (ts - window_start) // 3600


def sensing_window(cols: EventColumns, window_end_s: int, eps_m: float = DEFAULT_EPS_M,
                   min_samples: int = DEFAULT_MIN_SAMPLES,
                   places_per_window: bool = False) -> np.ndarray:
    """Summarize the 24 h ending at `window_end_s` into a (7, 24) float array.

    Rows follow SENSING_ROWS; column h covers
    [window_end - (24 - h) * 3600, window_end - (23 - h) * 3600), i.e. h=0 is
    the oldest hour and h=23 the hour just before the report. Hours with no
    relevant events contribute zeros.

    * places_visited: distinct significant locations (clustered over the 24 h
      track) counted in the hour they are first entered; with
      `places_per_window` the window-level count is replicated across all 24.
    * distance_travelled_m: haversine between the centers of consecutive
      distinct significant-location visits, counted in the hour the
      transition completes (the arrival fix).
    * unlock spans (unlock -> next lock) are split proportionally across the
      hours they overlap; n_unlocks counts the unlock event's hour. A span
      still open at the window end is truncated there.
    * audio_amplitude_mean: mean amplitude of samples in the hour.
    * conversation events: total duration and count, per the event's hour.
    """
    window_start = window_end_s - WINDOW_HOURS * 3600
    win = cols.slice_window(window_start, window_end_s)
    out = np.zeros((len(SENSING_ROWS), WINDOW_HOURS), dtype=float)

    gps_mask = win.kind == KIND_CODE["gps"]
    gps_ts = win.timestamp[gps_mask]
    gps_lat = win.a[gps_mask]
    gps_lon = win.b[gps_mask]
    if gps_ts.size:
        sig, labels = significant_locations(gps_ts, gps_lat, gps_lon, eps_m, min_samples)
        center = {s.label: (s.center_lat, s.center_lon) for s in sig}
        # first entry per significant location
        seen: set[int] = set()
        for i, lab in enumerate(labels):
            lab = int(lab)
            if lab in center and lab not in seen:
                seen.add(lab)
                if places_per_window:
                    continue
                out[0, _hour_bucket(int(gps_ts[i]), window_start)] += 1.0
        if places_per_window:
            out[0, :] = float(len(seen))
        # transitions between consecutive distinct significant-location visits
        prev_lab = None
        for i, lab in enumerate(labels):
            lab = int(lab)
            if lab not in center:
                continue
            if prev_lab is not None and lab != prev_lab:
                d = haversine_m(center[prev_lab][0], center[prev_lab][1],
                                center[lab][0], center[lab][1])
                out[1, _hour_bucket(int(gps_ts[i]), window_start)] += float(d)
            prev_lab = lab

    unlock_code, lock_code = KIND_CODE["screen_unlock"], KIND_CODE["screen_lock"]
    # pair unlocks with the next lock over the full stream so spans crossing
    # the window edge are still seen; then clip the span to the window
    all_ts, all_kind = cols.timestamp, cols.kind
    unlock_idx = np.flatnonzero(all_kind == unlock_code)
    lock_ts = all_ts[all_kind == lock_code]
    for ui in unlock_idx:
        u = int(all_ts[ui])
        if u >= window_end_s:
            break
        li = np.searchsorted(lock_ts, u, side="left")
        span_end = int(lock_ts[li]) if li < lock_ts.size else window_end_s
        span_end = min(span_end, window_end_s)
        if span_end <= window_start or u >= window_end_s:
            continue
        if window_start <= u:
            out[3, _hour_bucket(u, window_start)] += 1.0
        lo = max(u, window_start)
        h0 = int(_hour_bucket(lo, window_start))
        h1 = int(_hour_bucket(span_end - 1, window_start)) if span_end > lo else h0
        for h in range(h0, h1 + 1):
            hour_lo = window_start + h * 3600
            hour_hi = hour_lo + 3600
            out[2, h] += max(0.0, min(span_end, hour_hi) - max(lo, hour_lo))

    amp_mask = win.kind == KIND_CODE["audio_amplitude"]
    if amp_mask.any():
        amp_hours = _hour_bucket(win.timestamp[amp_mask], window_start)
        amps = win.a[amp_mask]
        for h in range(WINDOW_HOURS):
            sel = amp_hours == h
            if sel.any():
                out[4, h] = amps[sel].mean()

    conv_mask = win.kind == KIND_CODE["conversation"]
    if conv_mask.any():
        conv_hours = _hour_bucket(win.timestamp[conv_mask], window_start)
        np.add.at(out[5], conv_hours, win.a[conv_mask])
        np.add.at(out[6], conv_hours, 1.0)

    return out
