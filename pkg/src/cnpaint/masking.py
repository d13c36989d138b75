"""Context/predict masks that mimic how a user interacts with a painting.

A mask is a length-L uint8 vector: 1 keeps the slot as conditioning context,
0 marks it to be predicted. Five strategies cover the interaction patterns:
keep coarse levels only, drop a random subset, drop a local square region,
drop a contiguous run (undo), or drop everything (paint from scratch).
"""

from __future__ import annotations

import enum
import json

import numpy as np

from .strokes import GridLayout, StrokeSequence

MASK_FORMAT_VERSION = 1


class MaskStrategy(enum.Enum):
    LEVEL = "level"
    RANDOM = "random"
    SQUARE = "square"
    BLOCK = "block"
    NO_CONTEXT = "none"


def mask_random(rng: np.random.Generator, L: int) -> np.ndarray:
    """Drop exactly round(ratio*L) uniformly chosen slots, ratio ~ U[0.1, 0.9]."""
    if L < 2:
        raise ValueError("sequence too short")
    ratio = rng.uniform(0.1, 0.9)
    count = int(np.floor(ratio * L + 0.5))
    bits = np.ones(L, dtype=np.uint8)
    bits[rng.choice(L, size=count, replace=False)] = 0
    return bits


def mask_level(rng: np.random.Generator, grid: GridLayout) -> np.ndarray:
    """Keep levels 1..k as context, k ~ U{1..min(3, levels-1)}; drop the rest."""
    if grid.levels < 2:
        raise ValueError("grid needs at least two levels")
    k = int(rng.integers(1, min(3, grid.levels - 1) + 1))
    bits = np.zeros(grid.total_length, dtype=np.uint8)
    bits[: grid.level_slice(k)[1]] = 1
    return bits


def mask_block(rng: np.random.Generator, L: int) -> np.ndarray:
    """Drop one contiguous run: length ~ U[10, floor(0.75*L)], no wraparound."""
    max_len = int(np.floor(0.75 * L))
    if L < 14 or max_len < 10:
        raise ValueError("sequence too short")
    length = int(rng.integers(10, max_len + 1))
    start = int(rng.integers(0, L - length + 1))
    bits = np.ones(L, dtype=np.uint8)
    bits[start : start + length] = 0
    return bits


def mask_square(rng: np.random.Generator, seq: StrokeSequence) -> np.ndarray:
    """Drop all strokes whose center lies in a side-0.5 axis-aligned square
    centered on a uniformly chosen occupied stroke (the pivot included)."""
    occupied = np.flatnonzero(seq.occupancy)
    if occupied.size == 0:
        raise ValueError("empty sequence: square masking needs an occupied pivot")
    pivot = int(occupied[rng.integers(0, occupied.size)])
    px, py = seq.strokes[pivot, 0], seq.strokes[pivot, 1]
    inside = (np.abs(seq.strokes[:, 0] - px) <= 0.25) & (np.abs(seq.strokes[:, 1] - py) <= 0.25)
    return (~inside).astype(np.uint8)


def mask_no_context(L: int) -> np.ndarray:
    return np.zeros(L, dtype=np.uint8)


_STRATEGIES = (
    MaskStrategy.LEVEL,
    MaskStrategy.RANDOM,
    MaskStrategy.SQUARE,
    MaskStrategy.BLOCK,
    MaskStrategy.NO_CONTEXT,
)


def make_mask(strategy: MaskStrategy, rng: np.random.Generator, seq: StrokeSequence) -> np.ndarray:
    L = len(seq)
    if strategy is MaskStrategy.LEVEL:
        return mask_level(rng, seq.grid)
    if strategy is MaskStrategy.RANDOM:
        return mask_random(rng, L)
    if strategy is MaskStrategy.SQUARE:
        return mask_square(rng, seq)
    if strategy is MaskStrategy.BLOCK:
        return mask_block(rng, L)
    if strategy is MaskStrategy.NO_CONTEXT:
        return mask_no_context(L)
    raise ValueError(f"unknown strategy {strategy!r}")


def sample_mask(rng: np.random.Generator, seq: StrokeSequence) -> tuple[MaskStrategy, np.ndarray]:
    """Pick one of the five strategies uniformly and draw a mask from it.

    Square masking needs an occupied pivot; on a fully empty sequence that
    draw falls back to random masking.
    """
    strategy = _STRATEGIES[int(rng.integers(0, len(_STRATEGIES)))]
    if strategy is MaskStrategy.SQUARE and not seq.occupancy.any():
        strategy = MaskStrategy.RANDOM
    return strategy, make_mask(strategy, rng, seq)


def split(strokes, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partition strokes into (context, predict): s*m and s*(1-m) row-wise."""
    if isinstance(strokes, StrokeSequence):
        strokes = strokes.strokes
    strokes = np.asarray(strokes)
    mask = np.asarray(mask)
    if mask.shape[0] != strokes.shape[0]:
        raise ValueError(f"length mismatch: {mask.shape[0]} mask bits for {strokes.shape[0]} strokes")
    m = mask.astype(strokes.dtype)[:, None]
    return strokes * m, strokes * (1 - m)


def mask_to_doc(bits: np.ndarray) -> dict:
    return {"version": MASK_FORMAT_VERSION, "length": int(bits.shape[0]),
            "bits": [int(b) for b in bits]}


def mask_from_doc(doc: dict) -> np.ndarray:
    if doc.get("version") != MASK_FORMAT_VERSION:
        raise ValueError(f"unsupported version: {doc.get('version')!r}")
    bits = np.asarray(doc["bits"], dtype=np.uint8)
    if bits.shape[0] != int(doc["length"]):
        raise ValueError("length mismatch: bits do not match declared length")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("mask bits must be 0 or 1")
    return bits


def save_mask(bits: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(mask_to_doc(bits), f)


def load_mask(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return mask_from_doc(json.load(f))
