"""Per-instance featurization for hearing-positive EMA reports.

Each report gets four feature blocks:

* ``audio``           — embedding of the diary-derived audio series run through
                        the sonification front end (width = embedder output).
* ``text``            — diary transcript vector (768).
* ``sensing_vggish``  — the 7 sensing-window streams sonified and embedded,
                        concatenated stream-major (7 x embedder output).
* ``sensing_rocket``  — random-kernel [max, ppv] features of the raw window
                        streams (7 x 2 x n_kernels).

The cohort carries no recorded diary audio (real deployments would decode it
into the same log-mel front end), so the audio block uses a deterministic
proxy: the transcript vector projected to a 24-point series by a fixed seeded
matrix, then sonified and embedded exactly like a sensing stream. This keeps
the audio path fully exercised and gives the audio block its own view of the
diary content.

Blocks are cached in tensor archives keyed by a digest of the cohort content
and the featurization config, so reruns are cheap and stale caches are
detected rather than silently reused.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .archive import read_archive, write_archive
from .cohort import Cohort
from .embedder import EmbedderConfig, EmbedderWeights, embed_average, random_weights
from .mobility import DEFAULT_EPS_M, DEFAULT_MIN_SAMPLES, sensing_window
from .rocket import sample_kernels, transform_streams
from .seeding import derive_rng
from .sonify import NOISE_EPSILON, SOURCE_RATE_HZ, series_to_patches
from .textagg import TEXT_WIDTH, stack_vector

N_SENSING_STREAMS = 7
BLOCK_NAMES = ("audio", "text", "sensing_vggish", "sensing_rocket")


@dataclass(frozen=True)
class FeaturizeConfig:
    seed: int = 0
    width_divisor: int = 1
    n_kernels: int = 64
    epsilon: float = NOISE_EPSILON
    sample_rate_hz: int = SOURCE_RATE_HZ
    dbscan_eps_m: float = DEFAULT_EPS_M
    dbscan_min_samples: int = DEFAULT_MIN_SAMPLES
    places_per_window: bool = False

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(width_divisor=self.width_divisor)

    def block_widths(self) -> dict[str, int]:
        e = self.embedder_config().embedding_width
        return {
            "audio": e,
            "text": TEXT_WIDTH,
            "sensing_vggish": N_SENSING_STREAMS * e,
            "sensing_rocket": N_SENSING_STREAMS * 2 * self.n_kernels,
        }

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class FeatureStore:
    """Aligned feature blocks for the hearing-positive instances of one cohort."""

    keys: list[tuple[str, int]]  # (participant_id, ema_timestamp), sorted
    blocks: dict[str, np.ndarray]  # block name -> (n_instances, width) float32
    config: FeaturizeConfig
    cohort_digest: str = ""

    def __post_init__(self):
        self._row = {k: i for i, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.keys)

    def rows(self, block: str, keys: list[tuple[str, int]]) -> np.ndarray:
        """Feature matrix for the given instances; names any missing one."""
        matrix = self.blocks[block]
        idx = []
        for key in keys:
            if key not in self._row:
                raise KeyError(f"no {block} features for instance {key[0]}@{key[1]}")
            idx.append(self._row[key])
        return matrix[idx]

    def subset(self, blocks) -> "FeatureStore":
        """Same instances, only the named blocks."""
        return FeatureStore(
            self.keys, {name: self.blocks[name] for name in blocks},
            self.config, self.cohort_digest,
        )


def hearing_instance_keys(cohort: Cohort) -> list[tuple[str, int]]:
    """Sorted (participant, timestamp) keys of hearing-positive reports."""
    keys = sorted((e.participant_id, e.timestamp) for e in cohort.emas if e.hearing)
    for key in keys:
        if key not in cohort.diaries:
            raise ValueError(f"missing diary for hearing-positive report {key[0]}@{key[1]}")
    return keys


def diary_projection(seed: int) -> np.ndarray:
    """Fixed (24, 768) projection taking a transcript vector to an hourly-like series."""
    rng = derive_rng(seed, "diary-projection")
    return rng.standard_normal((24, TEXT_WIDTH)) / np.sqrt(TEXT_WIDTH)


def featurize_cohort(cohort: Cohort, config: FeaturizeConfig,
                     weights: EmbedderWeights | None = None,
                     blocks: tuple[str, ...] = BLOCK_NAMES) -> FeatureStore:
    """Compute feature blocks for every hearing-positive report.

    `weights` defaults to a seeded random initialization of the configured
    embedder; pass loaded weights to reuse a trained/pinned embedder. `blocks`
    restricts the work to the named blocks; every sonification stream keeps
    its own seed derivation, so a block's values are identical whether blocks
    are computed together or separately.
    """
    unknown = set(blocks) - set(BLOCK_NAMES)
    if unknown:
        raise ValueError(f"unknown feature blocks {sorted(unknown)}")
    want = set(blocks)
    need_embed = bool(want & {"audio", "sensing_vggish"})
    need_window = bool(want & {"sensing_vggish", "sensing_rocket"})
    need_text = bool(want & {"audio", "text"})

    keys = hearing_instance_keys(cohort)
    if need_embed:
        if weights is None:
            weights = random_weights(config.embedder_config(),
                                     derive_rng(config.seed, "embedder-init"))
        elif weights.config != config.embedder_config():
            raise ValueError("embedder weights do not match the configured width_divisor")
    kernels = (sample_kernels(derive_rng(config.seed, "rocket-kernels"), config.n_kernels)
               if "sensing_rocket" in want else None)
    projection = diary_projection(config.seed) if "audio" in want else None

    widths = config.block_widths()
    n = len(keys)
    out = {name: np.empty((n, widths[name]), np.float32) for name in BLOCK_NAMES if name in want}

    for i, (pid, ts) in enumerate(keys):
        window = None
        if need_window:
            window = sensing_window(
                cohort.events[pid], ts, eps_m=config.dbscan_eps_m,
                min_samples=config.dbscan_min_samples,
                places_per_window=config.places_per_window,
            )
        text_vec = stack_vector(cohort.diaries[(pid, ts)]) if need_text else None

        if need_embed:
            # stream index s tags the sonification rng: 0..6 sensing, 7 audio.
            # Each stream is sonified and embedded on its own so a block's
            # values never depend on which other blocks are being computed.
            streams = []
            if "sensing_vggish" in want:
                streams.extend((s, window[s]) for s in range(N_SENSING_STREAMS))
            if "audio" in want:
                streams.append((N_SENSING_STREAMS, projection @ text_vec))
            per_stream = np.stack([
                embed_average(
                    series_to_patches(
                        series, derive_rng(config.seed, "sonify", pid, ts, s),
                        sample_rate_hz=config.sample_rate_hz, epsilon=config.epsilon,
                    ),
                    weights,
                )
                for s, series in streams
            ])
            if "sensing_vggish" in want:
                out["sensing_vggish"][i] = per_stream[:N_SENSING_STREAMS].reshape(-1)
            if "audio" in want:
                out["audio"][i] = per_stream[-1]
        if "sensing_rocket" in want:
            out["sensing_rocket"][i] = transform_streams(window, kernels)
        if "text" in want:
            out["text"][i] = text_vec

    return FeatureStore(keys, out, config, cohort_digest=cohort_content_digest(cohort))


def cohort_content_digest(cohort: Cohort) -> str:
    """Digest of the label-relevant cohort content (events, EMAs, diary keys)."""
    h = hashlib.sha256()
    for p in sorted(cohort.participants, key=lambda p: p.id):
        h.update(f"participant,{p.id},{p.timezone_offset}\n".encode())
        cols = cohort.events[p.id]
        for arr in (cols.timestamp, cols.kind, cols.a, cols.b):
            h.update(np.ascontiguousarray(arr).tobytes())
    for e in cohort.emas:
        h.update(f"ema,{e.participant_id},{e.timestamp},{e.hearing},{e.answers}\n".encode())
    for key in sorted(cohort.diaries):
        stack = cohort.diaries[key]
        h.update(f"diary,{key[0]},{key[1]}\n".encode())
        for sent in stack.sentences:
            for tok in sent:
                h.update(np.ascontiguousarray(tok, dtype=np.float32).tobytes())
    return h.hexdigest()


def write_feature_store(path, store: FeatureStore) -> None:
    tensors = {f"block/{name}": store.blocks[name] for name in BLOCK_NAMES if name in store.blocks}
    meta = {
        "kind": "feature-store",
        "config": dataclasses.asdict(store.config),
        "cohort_digest": store.cohort_digest,
        "instances": [[pid, ts] for pid, ts in store.keys],
    }
    write_archive(path, tensors, meta)


def read_feature_store(path) -> FeatureStore:
    archive = read_archive(path)
    meta = archive.meta
    if meta.get("kind") != "feature-store":
        raise ValueError(f"{path} is not a feature-store archive")
    config = FeaturizeConfig(**meta["config"])
    keys = [(pid, int(ts)) for pid, ts in meta["instances"]]
    blocks = {}
    for name in BLOCK_NAMES:
        if f"block/{name}" in archive:
            blocks[name] = archive[f"block/{name}"]
    return FeatureStore(keys, blocks, config, cohort_digest=meta.get("cohort_digest", ""))
