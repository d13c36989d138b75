"""Strokes, the granularity grid, slot layout and the sequence file format.

A painting is a fixed-length sequence of 8-parameter strokes organized in
granularity levels: level ``m`` tiles the unit canvas with ``m x m`` blocks
and every block owns ``n_per_block`` consecutive slots. Coarse strokes live
in level 1, detail strokes in deeper levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Serialized channel order. theta is stored in [0,1] and encodes [0, pi).
STROKE_FIELDS = ("x", "y", "w", "h", "theta", "r", "g", "b")
STROKE_DIM = len(STROKE_FIELDS)

SEQUENCE_FORMAT_VERSION = 1


class BlockFullError(Exception):
    """All slots of the target block are occupied."""

    def __init__(self, level: int, block: tuple[int, int]):
        super().__init__(f"no free slot in level {level} block {block}")
        self.level = level
        self.block = block


@dataclass(frozen=True)
class Stroke:
    """One brushstroke: center, size, rotation and color, all normalized."""

    x: float
    y: float
    w: float
    h: float
    theta: float
    r: float
    g: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h, self.theta, self.r, self.g, self.b], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Stroke":
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape[0] != STROKE_DIM:
            raise ValueError(f"expected {STROKE_DIM} scalars, got {a.shape[0]}")
        return cls(*(float(v) for v in a))


def validate_stroke(s: Stroke) -> list[str]:
    """Return a list of violated-field descriptions; empty means valid.

    x, y, theta, r, g, b must lie in [0,1]; w and h in (0,1]; everything
    finite.
    """
    problems = []
    for name in STROKE_FIELDS:
        v = getattr(s, name)
        if not math.isfinite(v):
            problems.append(f"non-finite: {name}")
            continue
        if name in ("w", "h"):
            if not (0.0 < v <= 1.0):
                problems.append(f"out-of-range: {name}")
        else:
            if not (0.0 <= v <= 1.0):
                problems.append(f"out-of-range: {name}")
    return problems


def require_valid_stroke(s: Stroke) -> None:
    problems = validate_stroke(s)
    if problems:
        raise ValueError("invalid stroke: " + ", ".join(problems))


@dataclass(frozen=True)
class GridLayout:
    """Granularity grid: level m holds m*m blocks of n_per_block slots each."""

    levels: int = 4
    n_per_block: int = 12

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.n_per_block < 1:
            raise ValueError("n_per_block must be >= 1")

    @property
    def total_length(self) -> int:
        return self.n_per_block * sum(m * m for m in range(1, self.levels + 1))

    def level_start(self, level: int) -> int:
        """First slot index of a level (levels are 1-based)."""
        if not (1 <= level <= self.levels):
            raise ValueError(f"level {level} out of range 1..{self.levels}")
        return self.n_per_block * sum(m * m for m in range(1, level))

    def level_slice(self, level: int) -> tuple[int, int]:
        start = self.level_start(level)
        return start, start + self.n_per_block * level * level

    def slot_range(self, level: int, block: tuple[int, int]) -> tuple[int, int]:
        """Half-open slot interval of a block, ordered by (level, row, col)."""
        row, col = block
        if not (1 <= level <= self.levels):
            raise ValueError(f"level {level} out of range 1..{self.levels}")
        if not (0 <= row < level and 0 <= col < level):
            raise ValueError(f"block {block} out of range for level {level}")
        start = self.level_start(level) + (row * level + col) * self.n_per_block
        return start, start + self.n_per_block

    def level_of_slot(self, slot: int) -> int:
        if not (0 <= slot < self.total_length):
            raise ValueError(f"slot {slot} out of range")
        for level in range(1, self.levels + 1):
            lo, hi = self.level_slice(level)
            if lo <= slot < hi:
                return level
        raise AssertionError("unreachable")

    def level_for_size(self, size: float) -> int:
        """Level whose nominal stroke size 1/m is closest to ``size``.

        Ties break toward the coarser (smaller m) level.
        """
        best, best_err = 1, float("inf")
        for m in range(1, self.levels + 1):
            err = abs(1.0 / m - size)
            if err < best_err:
                best, best_err = m, err
        return best

    def block_of_point(self, level: int, x: float, y: float) -> tuple[int, int]:
        row = min(int(y * level), level - 1)
        col = min(int(x * level), level - 1)
        return row, col


def slot_range(grid: GridLayout, level: int, block: tuple[int, int]) -> tuple[int, int]:
    return grid.slot_range(level, block)


def locate_slot(grid: GridLayout, occupancy: np.ndarray, s: Stroke) -> tuple[int, tuple[int, int], int]:
    """Place a stroke: pick the level by size, the block by position, and the
    first free slot in that block.

    Raises BlockFullError when every slot of the block is occupied.
    """
    require_valid_stroke(s)
    occupancy = np.asarray(occupancy)
    if occupancy.shape[0] != grid.total_length:
        raise ValueError("occupancy length does not match grid")
    level = grid.level_for_size(max(s.w, s.h))
    block = grid.block_of_point(level, s.x, s.y)
    lo, hi = grid.slot_range(level, block)
    for slot in range(lo, hi):
        if not occupancy[slot]:
            return level, block, slot
    raise BlockFullError(level, block)


@dataclass(frozen=True)
class ClassLabel:
    """Class conditioning: an id in [0, num_classes) or the null token."""

    id: int | None = None

    @classmethod
    def null(cls) -> "ClassLabel":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.id is None


@dataclass
class StrokeSequence:
    """Fixed-length stroke sequence with occupancy and optional class label.

    ``strokes`` is an (L, 8) float array; unoccupied slots hold the all-zero
    placeholder stroke.
    """

    grid: GridLayout = field(default_factory=GridLayout)
    strokes: np.ndarray | None = None
    occupancy: np.ndarray | None = None
    class_label: ClassLabel = field(default_factory=ClassLabel.null)

    def __post_init__(self):
        L = self.grid.total_length
        if self.strokes is None:
            self.strokes = np.zeros((L, STROKE_DIM), dtype=np.float64)
        else:
            self.strokes = np.asarray(self.strokes, dtype=np.float64)
        if self.occupancy is None:
            self.occupancy = np.zeros(L, dtype=np.uint8)
        else:
            self.occupancy = np.asarray(self.occupancy, dtype=np.uint8)
        if self.strokes.shape != (L, STROKE_DIM):
            raise ValueError(f"strokes shape {self.strokes.shape} does not match grid length {L}")
        if self.occupancy.shape != (L,):
            raise ValueError(f"occupancy shape {self.occupancy.shape} does not match grid length {L}")

    def __len__(self) -> int:
        return self.grid.total_length

    def copy(self) -> "StrokeSequence":
        return StrokeSequence(self.grid, self.strokes.copy(), self.occupancy.copy(), self.class_label)

    def stroke_at(self, slot: int) -> Stroke:
        return Stroke.from_array(self.strokes[slot])

    def set_stroke(self, slot: int, s: Stroke) -> None:
        self.strokes[slot] = s.as_array()
        self.occupancy[slot] = 1

    def clear_slot(self, slot: int) -> None:
        self.strokes[slot] = 0.0
        self.occupancy[slot] = 0

    def add_stroke(self, s: Stroke) -> tuple[int, tuple[int, int], int]:
        """Place and store a stroke; returns (level, block, slot)."""
        level, block, slot = locate_slot(self.grid, self.occupancy, s)
        self.set_stroke(slot, s)
        return level, block, slot

    def to_doc(self) -> dict:
        return {
            "version": SEQUENCE_FORMAT_VERSION,
            "grid": {"levels": self.grid.levels, "n_per_block": self.grid.n_per_block},
            "class": self.class_label.id,
            "occupancy": [int(v) for v in self.occupancy],
            "strokes": [[float(v) for v in row] for row in self.strokes],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "StrokeSequence":
        if not isinstance(doc, dict):
            raise ValueError("malformed document: expected a JSON object")
        version = doc.get("version")
        if version != SEQUENCE_FORMAT_VERSION:
            raise ValueError(f"unsupported version: {version!r}")
        try:
            grid = GridLayout(int(doc["grid"]["levels"]), int(doc["grid"]["n_per_block"]))
            occupancy = np.asarray(doc["occupancy"], dtype=np.uint8)
            strokes = np.asarray(doc["strokes"], dtype=np.float64)
            raw_class = doc.get("class")
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed document: {e}") from e
        L = grid.total_length
        if strokes.ndim != 2 or strokes.shape != (L, STROKE_DIM):
            raise ValueError(f"length mismatch: {strokes.shape[0] if strokes.ndim == 2 else '?'} strokes for grid of {L}")
        if occupancy.shape != (L,):
            raise ValueError(f"length mismatch: occupancy of {occupancy.shape[0]} for grid of {L}")
        label = ClassLabel(None if raw_class is None else int(raw_class))
        return cls(grid, strokes, occupancy, label)


def serialize(seq: StrokeSequence) -> bytes:
    """Encode a sequence as the canonical UTF-8 JSON document."""
    return json.dumps(seq.to_doc()).encode("utf-8")


def deserialize(data: bytes | str) -> StrokeSequence:
    """Decode the canonical JSON document; inverse of serialize."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed document: {e}") from e
    return StrokeSequence.from_doc(doc)


def load_sequence(path) -> StrokeSequence:
    with open(path, "rb") as f:
        return deserialize(f.read())


def save_sequence(seq: StrokeSequence, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(seq))
