"""Parameter-free stroke renderer.

Each stroke warps a procedural soft-ellipse brush by an affine transform and
is alpha-composited onto the canvas in sequence order. The per-pixel blend
loop is the hot path; a compiled Cython kernel is used when available and a
NumPy fallback otherwise (set CNPAINT_RENDER_BACKEND=numpy|cython to force).
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..strokes import Stroke, StrokeSequence, require_valid_stroke

from . import _composite_py

_requested = os.environ.get("CNPAINT_RENDER_BACKEND", "auto")
if _requested not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"unknown CNPAINT_RENDER_BACKEND {_requested!r}")

_kernel = _composite_py
ACTIVE_BACKEND = "numpy"
if _requested in ("auto", "cython"):
    try:
        from . import _composite as _kernel_ext

        _kernel = _kernel_ext
        ACTIVE_BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise


@dataclass
class Canvas:
    """H x W x 3 float image with channel values in [0,1]."""

    height: int
    width: int
    pixels: np.ndarray | None = None

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("zero resolution")
        if self.pixels is None:
            self.pixels = np.zeros((self.height, self.width, 3), dtype=np.float32)
        else:
            self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
            if self.pixels.shape != (self.height, self.width, 3):
                raise ValueError("pixel buffer does not match resolution")

    def copy(self) -> "Canvas":
        return Canvas(self.height, self.width, self.pixels.copy())


def _soft_ellipse_alpha(size: int, softness: float) -> np.ndarray:
    # smoothstep from 1 inside rho <= 1-softness down to 0 at the rim rho = 1
    centers = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(centers, centers)
    rho = np.sqrt(((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / 0.5) ** 2)
    t = np.clip((1.0 - rho) / softness, 0.0, 1.0)
    return (t * t * (3.0 - 2.0 * t)).astype(np.float32)


@dataclass(frozen=True)
class BrushPrimitive:
    """Square alpha matte of the brush; zero outside the inscribed ellipse."""

    alpha: np.ndarray = field(default_factory=lambda: _soft_ellipse_alpha(64, 0.3))

    @classmethod
    def soft_ellipse(cls, size: int = 64, softness: float = 0.3) -> "BrushPrimitive":
        return cls(_soft_ellipse_alpha(size, softness))


_DEFAULT_PRIMITIVE = BrushPrimitive.soft_ellipse()


def stroke_affine(s: Stroke, resolution: tuple[int, int]) -> np.ndarray:
    """2x3 matrix mapping brush unit coordinates [0,1]^2 to pixel coordinates.

    Scales by (w*W, h*H), rotates by theta*pi about the stroke center and
    translates the center to (x*W, y*H).
    """
    H, W = resolution
    if H <= 0 or W <= 0:
        raise ValueError("zero resolution")
    require_valid_stroke(s)
    phi = s.theta * math.pi
    c, si = math.cos(phi), math.sin(phi)
    sx, sy = s.w * W, s.h * H
    m = np.array([[c * sx, -si * sy], [si * sx, c * sy]], dtype=np.float64)
    center = np.array([s.x * W, s.y * H], dtype=np.float64)
    t = center - m @ np.array([0.5, 0.5])
    return np.concatenate([m, t[:, None]], axis=1)


def composite_stroke(canvas: Canvas, s: Stroke, prim: BrushPrimitive | None = None) -> Canvas:
    """Blend one stroke onto a copy of the canvas: C' = C*(1-a) + color*a."""
    out = canvas.copy()
    composite_stroke_inplace(out, s, prim)
    return out


def composite_stroke_inplace(canvas: Canvas, s: Stroke, prim: BrushPrimitive | None = None) -> None:
    prim = prim or _DEFAULT_PRIMITIVE
    affine = stroke_affine(s, (canvas.height, canvas.width))
    m = affine[:, :2]
    origin = (s.x * canvas.width, s.y * canvas.height)

    # Bounding box from the warped unit-square corners, clipped to the canvas.
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pts = corners @ m.T + affine[:, 2]
    x0 = max(int(math.floor(pts[:, 0].min())), 0)
    x1 = min(int(math.ceil(pts[:, 0].max())) + 1, canvas.width)
    y0 = max(int(math.floor(pts[:, 1].min())), 0)
    y1 = min(int(math.ceil(pts[:, 1].max())) + 1, canvas.height)
    if x0 >= x1 or y0 >= y1:
        return

    inv = np.linalg.inv(m)
    _kernel.composite_region(
        canvas.pixels, prim.alpha, np.ascontiguousarray(inv),
        origin, (s.r, s.g, s.b), x0, x1, y0, y1,
    )


def render_sequence(seq: StrokeSequence, resolution: tuple[int, int],
                    prim: BrushPrimitive | None = None) -> Canvas:
    """Composite occupied slots in index order (coarse levels first)."""
    H, W = resolution
    canvas = Canvas(H, W)
    occupied = np.flatnonzero(seq.occupancy)
    for slot in occupied:
        composite_stroke_inplace(canvas, seq.stroke_at(int(slot)), prim)
    return canvas


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up: byte = floor(255*v + 0.5)."""
    v = np.clip(pixels.astype(np.float64), 0.0, 1.0)
    return np.minimum(np.floor(255.0 * v + 0.5), 255).astype(np.uint8)


def write_png(pixels_u8: np.ndarray) -> bytes:
    """Minimal deterministic PNG encoder (8-bit RGB, filter 0 rows)."""
    h, w, _ = pixels_u8.shape
    raw = b"".join(b"\x00" + pixels_u8[row].tobytes() for row in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def write_ppm(pixels_u8: np.ndarray) -> bytes:
    """Binary PPM (P6) encoder."""
    h, w, _ = pixels_u8.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels_u8.tobytes()


def encode_image(canvas: Canvas, format: str) -> bytes:
    u8 = quantize(canvas.pixels)
    fmt = format.lower()
    if fmt == "png":
        return write_png(u8)
    if fmt == "ppm":
        return write_ppm(u8)
    raise ValueError(f"unsupported format {format!r} (PNG or PPM)")


def export_image(canvas: Canvas, path, format: str | None = None) -> None:
    """Write an 8-bit image; format from the extension when not given."""
    if format is None:
        name = str(path).lower()
        format = "png" if name.endswith(".png") else "ppm" if name.endswith(".ppm") else ""
        if not format:
            raise ValueError("cannot infer format from path; pass format='png' or 'ppm'")
    data = encode_image(canvas, format)
    with open(path, "wb") as f:
        f.write(data)


def downsample_box2(pixels: np.ndarray) -> np.ndarray:
    """2x2 box average, used by the resolution-consistency checks."""
    h, w, c = pixels.shape
    return pixels.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
