"""Photometric color pipeline: CCT to chromaticity to linear sRGB emission,
and HDR buffers to 8-bit display images.

All functions are pure.  Linear RGB throughout means linear-light sRGB
primaries with D65 white; display encoding applies the sRGB transfer
function after a single-parameter Reinhard curve.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

CCT_MIN_K = 1667.0
CCT_MAX_K = 25000.0

# CIE XYZ <-> linear sRGB (D65), IEC 61966-2-1 matrices.
XYZ_TO_RGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
LUMA = RGB_TO_XYZ[1]  # relative luminance of a linear RGB triple


class ColorError(ValueError):
    pass


@dataclass(frozen=True)
class Chromaticity:
    """CIE 1931 xy chromaticity coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 < self.x < 1.0 and 0.0 < self.y < 1.0 and self.x + self.y < 1.0):
            raise ColorError(f"invalid chromaticity ({self.x}, {self.y})")


@dataclass(frozen=True)
class DisplayImage:
    """8-bit sRGB raster, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ColorError("display image must be a (h, w, 3) uint8 array")
        p.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    @staticmethod
    def from_png(data: bytes) -> "DisplayImage":
        try:
            img = Image.open(io.BytesIO(data))
            img.load()
        except Exception as e:
            raise ColorError(f"cannot decode PNG image: {e}") from e
        return DisplayImage(np.asarray(img.convert("RGB"), dtype=np.uint8))


def cct_to_xy(cct_k: float) -> Chromaticity:
    """Planckian-locus chromaticity via the published cubic fit.

    Two rational-cubic pieces in 1000/T for x, cubic polynomials in x for
    y; valid on [1667, 25000] K.
    """
    if not CCT_MIN_K <= cct_k <= CCT_MAX_K:
        raise ColorError(f"cct {cct_k:g} K outside [{CCT_MIN_K:g}, {CCT_MAX_K:g}] K")
    t = 1000.0 / cct_k
    if cct_k <= 4000.0:
        x = -0.2661239 * t**3 - 0.2343589 * t**2 + 0.8776956 * t + 0.179910
    else:
        x = -3.0258469 * t**3 + 2.1070379 * t**2 + 0.2226347 * t + 0.240390
    if cct_k <= 2222.0:
        y = -1.1063814 * x**3 - 1.34811020 * x**2 + 2.18555832 * x - 0.20219683
    elif cct_k <= 4000.0:
        y = -0.9549476 * x**3 - 1.37418593 * x**2 + 2.09137015 * x - 0.16748867
    else:
        y = 3.0817580 * x**3 - 5.87338670 * x**2 + 3.75112997 * x - 0.37001483
    return Chromaticity(x, y)


def xy_to_linear_rgb(c: Chromaticity, luminance: float) -> np.ndarray:
    """Linear sRGB triple at the given chromaticity and relative luminance.

    Out-of-gamut channels are clamped to zero and the result rescaled so
    its relative luminance matches the request.
    """
    if luminance < 0.0:
        raise ColorError("luminance must be >= 0")
    if luminance == 0.0:
        return np.zeros(3)
    X = c.x / c.y * luminance
    Z = (1.0 - c.x - c.y) / c.y * luminance
    rgb = XYZ_TO_RGB @ np.array([X, luminance, Z])
    if np.any(rgb < 0.0):
        rgb = np.maximum(rgb, 0.0)
        got = float(LUMA @ rgb)
        # at least one channel stays positive (LUMA is positive), so got > 0
        rgb = rgb * (luminance / got)
    return rgb


def fixture_emission(fixture) -> np.ndarray:
    """Emitted radiance (linear RGB) of a fixture's front face.

    A flat Lambertian emitter of area A radiating flux F has radiance
    F / (pi * A) in flux-per-steradian-per-area units; dividing by an
    additional 1000 lm puts typical office fixtures near unit radiance.
    The chromatic part is normalized to relative luminance 1, so the
    result is exactly linear in dimmer and flux.
    """
    if not fixture.enabled:
        return np.zeros(3)
    if fixture.cct_k is not None:
        tint = xy_to_linear_rgb(cct_to_xy(fixture.cct_k), 1.0)
    else:
        rgb = np.asarray(fixture.color_rgb, dtype=float)
        lum = float(LUMA @ rgb)
        if lum <= 0.0:
            raise ColorError(f'fixture "{fixture.id}": color has zero luminance')
        tint = rgb / lum
    scale = fixture.dimmer * fixture.flux_lm / (math.pi * fixture.area_m2 * 1000.0)
    return scale * tint


def srgb_encode(u: np.ndarray) -> np.ndarray:
    """IEC 61966-2-1 transfer function, [0, 1] linear to [0, 1] encoded."""
    u = np.asarray(u)
    return np.where(u <= 0.0031308, 12.92 * u, 1.055 * np.power(np.maximum(u, 1e-12), 1.0 / 2.4) - 0.055)


def tonemap(hdr: np.ndarray, exposure_ev: float) -> DisplayImage:
    """Exposure-scaled Reinhard curve followed by sRGB encoding to 8 bits.

    Strictly monotone per channel before quantization: v -> v*2^ev,
    v' -> v'/(1+v'), then the sRGB transfer.
    """
    v = np.asarray(hdr, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ColorError("hdr buffer must have shape (h, w, 3)")
    if np.any(v < 0.0) or not np.all(np.isfinite(v)):
        raise ColorError("hdr values must be finite and >= 0")
    scaled = v * (2.0**exposure_ev)
    curved = scaled / (1.0 + scaled)
    bytes_ = np.clip(np.rint(srgb_encode(curved) * 255.0), 0, 255).astype(np.uint8)
    return DisplayImage(bytes_)
