"""Diary transcript aggregation over per-token encoder stacks.

Transcripts arrive (or are synthesized) as sentences of tokens; each token
carries a (12, 768) stack of per-layer encoder vectors. A sentence vector is
the mean over its tokens of the layer-summed token vector, and the transcript
vector is the mean over sentence vectors — always width 768.

The stub encoder stands in for a real pretrained model: every (seed, token,
layer) triple deterministically hashes to a unit-norm 768-vector, so repeated
tokens share one interned array and identical transcripts encode identically
across runs and machines.
"""

from __future__ import annotations

import numpy as np

from .cohort import DiaryTokenStack
from .seeding import derive_rng

TEXT_WIDTH = 768
N_LAYERS = 12

_TOKEN_CACHE: dict[tuple[int, str], np.ndarray] = {}


def clear_token_cache() -> None:
    _TOKEN_CACHE.clear()


def encode_token(token: str, seed: int) -> np.ndarray:
    """Token -> interned (12, 768) float32 stack of unit-norm layer vectors."""
    key = (int(seed), token)
    cached = _TOKEN_CACHE.get(key)
    if cached is not None:
        return cached
    stack = np.empty((N_LAYERS, TEXT_WIDTH), dtype=np.float32)
    for layer in range(N_LAYERS):
        rng = derive_rng(seed, "textenc", token, layer)
        v = rng.standard_normal(TEXT_WIDTH)
        stack[layer] = (v / np.linalg.norm(v)).astype(np.float32)
    stack.flags.writeable = False
    _TOKEN_CACHE[key] = stack
    return stack


def encode_transcript(sentences: list[list[str]], seed: int) -> list[list[np.ndarray]]:
    """Tokenized sentences -> per-sentence lists of (12, 768) token stacks."""
    if not sentences or any(not s for s in sentences):
        raise ValueError("transcript must have at least one sentence, each with tokens")
    return [[encode_token(tok, seed) for tok in sent] for sent in sentences]


def stub_encode(sentences: list[list[str]], seed: int, participant_id: str = "",
                ema_timestamp: int = 0) -> DiaryTokenStack:
    """Tokenized transcript -> a DiaryTokenStack via the stub encoder."""
    return DiaryTokenStack(participant_id, ema_timestamp, encode_transcript(sentences, seed))


def sentence_vector(token_stacks: list[np.ndarray]) -> np.ndarray:
    """Mean over tokens of the layer-summed token vector -> (768,) float64."""
    summed = np.stack([np.asarray(t, dtype=np.float64).sum(axis=0) for t in token_stacks])
    return summed.mean(axis=0)


def transcript_vector(sentences: list[list[np.ndarray]]) -> np.ndarray:
    """Mean over sentence vectors -> (768,) float64."""
    return np.stack([sentence_vector(s) for s in sentences]).mean(axis=0)


def stack_vector(stack: DiaryTokenStack) -> np.ndarray:
    return transcript_vector(stack.sentences)
