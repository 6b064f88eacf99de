"""Image embeddings and percentage similarity scores.

Ships a deterministic perceptual encoder (grid of luma/opponent moments
plus gradient-orientation histograms) so the whole pipeline runs with no
model weights, and a client for external CLIP-class encoders behind a
small HTTP protocol.  Scores are 100 * max(0, cosine) between unit-norm
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import requests

from .color import DisplayImage

BUILTIN_ENCODER_ID = "builtin-grid512-v1"
BUILTIN_DIM = 512
_GRID = 8  # 8x8 cells over a 64x64 resample
_BINS = 5  # gradient orientation bins over [0, pi)


class SimilarityError(Exception):
    pass


class EncoderConnectionError(SimilarityError):
    pass


class EncoderProtocolError(SimilarityError):
    pass


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    encoder_id: str

    def __post_init__(self):
        v = self.values
        if v.ndim != 1:
            raise SimilarityError("embedding must be a 1-d vector")
        norm = float(np.linalg.norm(v))
        if not math.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise SimilarityError(f"embedding must be unit-norm (got {norm})")
        v.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SimilarityReport:
    rows: tuple[tuple[str, float], ...]
    reference_label: str

    def __post_init__(self):
        if not self.rows:
            raise SimilarityError("report needs at least one row")
        for label, pct in self.rows:
            if not 0.0 <= pct <= 100.0:
                raise SimilarityError(f"row {label!r}: percent {pct} outside [0, 100]")


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample with half-pixel centers (deterministic)."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def builtin_features(img: DisplayImage) -> np.ndarray:
    """Raw (un-normalized) 512-d feature vector of the built-in encoder.

    64x64 bilinear resample, split into an 8x8 grid of cells; per cell:
    mean luma, mean red-green opponent, mean blue-yellow opponent, and a
    5-bin gradient-orientation histogram of luma weighted by magnitude.
    """
    if img.width < 16 or img.height < 16:
        raise SimilarityError("image too small to encode (needs >= 16x16)")
    rgb = _bilinear_resize(img.pixels.astype(np.float64) / 255.0, 64, 64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    luma = 0.2126 * r + 0.7152 * g + 0.0722 * b
    red_opp = r - g
    blue_opp = b - 0.5 * (r + g)

    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), math.pi)
    bins = np.minimum((theta / math.pi * _BINS).astype(np.int64), _BINS - 1)

    cell = 64 // _GRID
    feats = np.zeros((_GRID, _GRID, 3 + _BINS))
    for cy in range(_GRID):
        for cx in range(_GRID):
            sl = np.s_[cy * cell : (cy + 1) * cell, cx * cell : (cx + 1) * cell]
            feats[cy, cx, 0] = luma[sl].mean()
            feats[cy, cx, 1] = red_opp[sl].mean()
            feats[cy, cx, 2] = blue_opp[sl].mean()
            feats[cy, cx, 3:] = np.bincount(
                bins[sl].ravel(), weights=mag[sl].ravel(), minlength=_BINS
            )
    return feats.ravel()


def encode_builtin(img: DisplayImage) -> Embedding:
    feats = builtin_features(img)
    norm = float(np.linalg.norm(feats))
    if norm <= 0.0:
        # degenerate all-black input; use a fixed canonical direction
        feats = np.zeros(BUILTIN_DIM)
        feats[0] = 1.0
        return Embedding(feats, BUILTIN_ENCODER_ID)
    return Embedding(feats / norm, BUILTIN_ENCODER_ID)


def encode_external(img: DisplayImage, endpoint: str, timeout: float = 30.0) -> Embedding:
    """Encode via an external encoder service (POST /embed, PNG body)."""
    url = endpoint.rstrip("/") + "/embed"
    try:
        resp = requests.post(
            url,
            data=img.to_png(),
            headers={"Content-Type": "image/png"},
            timeout=timeout,
        )
    except requests.RequestException as e:
        raise EncoderConnectionError(f"cannot reach encoder at {endpoint}: {e}") from e
    if resp.status_code != 200:
        raise EncoderProtocolError(f"encoder at {endpoint} returned status {resp.status_code}")
    try:
        payload = resp.json()
    except ValueError as e:
        raise EncoderProtocolError(f"encoder at {endpoint} returned malformed body: {e}") from e
    if not isinstance(payload, dict):
        raise EncoderProtocolError(f"encoder at {endpoint}: response must be an object")
    for key in ("encoder_id", "dim", "embedding"):
        if key not in payload:
            raise EncoderProtocolError(f"encoder at {endpoint}: response missing {key!r}")
    vec = np.asarray(payload["embedding"], dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != int(payload["dim"]):
        raise EncoderProtocolError(
            f"encoder at {endpoint}: embedding length {vec.shape} does not match "
            f"declared dim {payload['dim']}"
        )
    if not np.all(np.isfinite(vec)):
        raise EncoderProtocolError(f"encoder at {endpoint}: embedding has non-finite values")
    norm = float(np.linalg.norm(vec))
    if norm <= 0.0:
        raise EncoderProtocolError(f"encoder at {endpoint}: embedding has zero norm")
    return Embedding(vec / norm, str(payload["encoder_id"]))


def make_encoder(choice: str):
    """Resolve 'builtin' or an http(s) endpoint into an encode function."""
    if choice == "builtin":
        return encode_builtin
    if choice.startswith("http://") or choice.startswith("https://"):
        return lambda img: encode_external(img, choice)
    raise SimilarityError(f"encoder must be 'builtin' or an http(s) URL, got {choice!r}")


def similarity_percent(a: Embedding, b: Embedding) -> float:
    """100 * max(0, cosine).  Symmetric, clamped to [0, 100]."""
    if a.dim != b.dim:
        raise SimilarityError(f"embedding dims differ: {a.dim} vs {b.dim}")
    if a.encoder_id != b.encoder_id:
        raise SimilarityError(
            f"embeddings come from different encoders: {a.encoder_id!r} vs {b.encoder_id!r}"
        )
    return 100.0 * max(0.0, float(a.values @ b.values))


def compare_report(
    reference: DisplayImage,
    candidates: list[tuple[str, DisplayImage]],
    encoder: str = "builtin",
    reference_label: str = "reference",
) -> SimilarityReport:
    """Score each labeled candidate against the reference, in input order."""
    if not candidates:
        raise SimilarityError("compare_report needs at least one candidate")
    encode = make_encoder(encoder)
    ref = encode(reference)
    rows = []
    for label, img in candidates:
        try:
            emb = encode(img)
        except SimilarityError as e:
            raise SimilarityError(f"candidate {label!r}: {e}") from e
        rows.append((label, similarity_percent(ref, emb)))
    return SimilarityReport(rows=tuple(rows), reference_label=reference_label)
