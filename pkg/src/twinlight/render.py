"""Deterministic CPU path tracer for twin scenes.

Unidirectional path tracing with next-event estimation over the fixture
area lights.  All surfaces are Lambertian.  Two properties are load
bearing and guarded by tests:

* Determinism: every random number is a pure hash of
  (seed, pixel_x, pixel_y, sample_index, dimension), so the image is
  bit-identical regardless of tiling or thread count.
* Linearity: light selection is uniform over enabled fixtures and no
  sampling decision ever reads an emission value, so the output is an
  exactly linear function of the fixture emissions (superposition holds
  to float roundoff).

Paths have fixed maximum length (no Russian roulette) and emitters are
counted only when seen directly by camera rays; later vertices receive
light exclusively through next-event estimation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import color
from .scene import Scene

DEFAULT_SAMPLE_BUDGET = 64 * 1024 * 1024
_SAMPLE_CHUNK = 32  # fixed sub-batch of samples; part of the output contract
_RAY_BATCH = 131072

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_C1 = np.uint64(0xA24BAED4963EE407)
_C2 = np.uint64(0x9FB21C651E98DF25)
_C3 = np.uint64(0xD6E8FEB86659FD93)


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class RenderFlags:
    indirect: bool = True
    shadows: bool = True
    max_bounces: int = 4

    def __post_init__(self):
        if self.max_bounces < 0:
            raise RenderError("max_bounces must be >= 0")

    @property
    def effective_bounces(self) -> int:
        if not self.indirect:
            return 1
        return max(1, self.max_bounces)


@dataclass(frozen=True)
class RenderRequest:
    camera_id: str
    width: int
    height: int
    spp: int
    seed: int = 0
    flags: RenderFlags = field(default_factory=RenderFlags)
    sample_budget: int = DEFAULT_SAMPLE_BUDGET

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise RenderError("width and height must be >= 8")
        if self.spp < 1:
            raise RenderError("spp must be >= 1")
        if self.width * self.height * self.spp > self.sample_budget:
            raise RenderError(
                f"sample budget exceeded: {self.width}x{self.height}x{self.spp} "
                f"> {self.sample_budget}"
            )


@dataclass(frozen=True)
class ImageBuffer:
    """Linear HDR radiance, shape (height, width, 3), finite and >= 0."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            raise RenderError("image buffer must have shape (h, w, 3)")
        if not np.all(np.isfinite(d)) or np.any(d < 0.0):
            raise RenderError("image buffer values must be finite and >= 0")
        d.setflags(write=False)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# counter-based RNG

def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _pixel_state(seed: int, x: np.ndarray, y: np.ndarray, s: np.ndarray) -> np.ndarray:
    h = np.uint64(_mix64_int((seed + _GOLDEN) & _MASK64))
    h = _mix64(h ^ (x.astype(np.uint64) * _C1))
    h = _mix64(h ^ (y.astype(np.uint64) * _C2))
    return _mix64(h ^ (s.astype(np.uint64) * _C3))


def _uniform(state: np.ndarray, dim: int) -> np.ndarray:
    """One U[0,1) draw per lane for the given dimension index."""
    h = _mix64(state ^ np.uint64((dim * _GOLDEN) & _MASK64))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


# ---------------------------------------------------------------------------
# compiled scene

_AXIS = {"x": 0, "y": 1, "z": 2}


class _Compiled:
    """Flat numpy views of the scene geometry for vectorized tracing."""

    def __init__(self, scene: Scene):
        self.size = np.asarray(scene.room.size_m, dtype=np.float64)
        wall = np.asarray(scene.room.wall_albedo)
        self.face_albedo = np.stack(
            [wall, wall, wall, wall,
             np.asarray(scene.room.floor_albedo),
             np.asarray(scene.room.ceiling_albedo)]
        ).astype(np.float64)  # order: x-,x+,y-,y+,z-,z+

        self.box_min = np.array([f.min_m for f in scene.furnishings], dtype=np.float64).reshape(-1, 3)
        self.box_max = np.array([f.max_m for f in scene.furnishings], dtype=np.float64).reshape(-1, 3)
        self.box_albedo = np.array([f.albedo for f in scene.furnishings], dtype=np.float64).reshape(-1, 3)

        n_fix = len(scene.fixtures)
        self.fix_axis = np.zeros(n_fix, dtype=np.int64)
        self.fix_plane = np.zeros(n_fix)
        self.fix_normal = np.zeros((n_fix, 3))
        self.fix_center = np.zeros((n_fix, 3))
        self.fix_uaxis = np.zeros(n_fix, dtype=np.int64)
        self.fix_vaxis = np.zeros(n_fix, dtype=np.int64)
        self.fix_he = np.zeros((n_fix, 2))
        self.fix_albedo = np.zeros((n_fix, 3))
        self.fix_emission = np.zeros((n_fix, 3))
        self.fix_area = np.zeros(n_fix)
        for i, f in enumerate(scene.fixtures):
            k = _AXIS[f.facing[1]]
            self.fix_axis[i] = k
            self.fix_plane[i] = f.center_m[k]
            self.fix_normal[i] = f.normal
            self.fix_center[i] = f.center_m
            u, v = [a for a in range(3) if a != k]
            self.fix_uaxis[i], self.fix_vaxis[i] = u, v
            self.fix_he[i] = f.half_extents_m
            self.fix_albedo[i] = f.albedo
            self.fix_emission[i] = color.fixture_emission(f)
            self.fix_area[i] = f.area_m2
        self.lights = np.array(
            [i for i, f in enumerate(scene.fixtures) if f.enabled], dtype=np.int64
        )
        self.offset = 1e-6 * float(np.max(self.size))


# ---------------------------------------------------------------------------
# intersection

def _closest_hit(comp: _Compiled, o: np.ndarray, d: np.ndarray):
    """Nearest surface along each ray.

    Returns (t, position, normal, albedo, emission).  Fixture rectangles
    win ties against coplanar walls so flush-mounted emitters are seen.
    """
    n = o.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        # room interior exit (the room is closed; interior rays always hit)
        bound = np.where(d > 0.0, comp.size[None, :], 0.0)
        t_face = (bound - o) / d
        t_face = np.where(np.isnan(t_face) | (d == 0.0), np.inf, t_face)
        axis = np.argmin(t_face, axis=1)
        best_t = t_face[np.arange(n), axis]
        d_axis = d[np.arange(n), axis]
        face = axis * 2 + (d_axis > 0.0)
        best_albedo = comp.face_albedo[face]
        best_normal = np.zeros((n, 3))
        best_normal[np.arange(n), axis] = -np.sign(d_axis)
        best_emission = np.zeros((n, 3))

        # furnishing boxes
        for b in range(comp.box_min.shape[0]):
            inv = 1.0 / d
            t1 = (comp.box_min[b][None, :] - o) * inv
            t2 = (comp.box_max[b][None, :] - o) * inv
            lo = np.fmin(t1, t2)
            hi = np.fmax(t1, t2)
            lo = np.where(np.isnan(lo), -np.inf, lo)
            hi = np.where(np.isnan(hi), np.inf, hi)
            near_ax = np.argmax(lo, axis=1)
            t_near = lo[np.arange(n), near_ax]
            far_ax = np.argmin(hi, axis=1)
            t_far = hi[np.arange(n), far_ax]
            entering = t_near > 0.0
            t_hit = np.where(entering, t_near, t_far)
            hit_ax = np.where(entering, near_ax, far_ax)
            hit = (t_near <= t_far) & (t_hit > 0.0) & (t_hit < best_t)
            if not hit.any():
                continue
            normal = np.zeros((n, 3))
            sgn = -np.sign(d[np.arange(n), hit_ax])
            normal[np.arange(n), hit_ax] = sgn
            best_albedo = np.where(hit[:, None], comp.box_albedo[b][None, :], best_albedo)
            best_normal = np.where(hit[:, None], normal, best_normal)
            best_emission = np.where(hit[:, None], 0.0, best_emission)
            best_t = np.where(hit, t_hit, best_t)

        # fixture rectangles (tie-break in their favor: flush mounts)
        for i in range(comp.fix_axis.shape[0]):
            k = comp.fix_axis[i]
            dk = d[:, k]
            t = (comp.fix_plane[i] - o[:, k]) / dk
            t = np.where(np.abs(dk) < 1e-14, np.inf, t)
            u, v = comp.fix_uaxis[i], comp.fix_vaxis[i]
            pu = o[:, u] + t * d[:, u]
            pv = o[:, v] + t * d[:, v]
            inside = (np.abs(pu - comp.fix_center[i, u]) <= comp.fix_he[i, 0]) & (
                np.abs(pv - comp.fix_center[i, v]) <= comp.fix_he[i, 1]
            )
            hit = inside & (t > 0.0) & (t * (1.0 - 1e-9) <= best_t)
            if not hit.any():
                continue
            front = (d @ comp.fix_normal[i]) < 0.0
            normal = np.where(front[:, None], comp.fix_normal[i][None, :], -comp.fix_normal[i][None, :])
            albedo = np.where(front[:, None], comp.fix_albedo[i][None, :], 0.0)
            emission = np.where(front[:, None], comp.fix_emission[i][None, :], 0.0)
            best_albedo = np.where(hit[:, None], albedo, best_albedo)
            best_normal = np.where(hit[:, None], normal, best_normal)
            best_emission = np.where(hit[:, None], emission, best_emission)
            best_t = np.where(hit, t, best_t)

    # benign position for (theoretical) misses so masked lanes stay finite
    pos = o + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * d
    return best_t, pos, best_normal, best_albedo, best_emission


def _occluded(comp: _Compiled, o: np.ndarray, d: np.ndarray, t_max: np.ndarray) -> np.ndarray:
    """Whether anything blocks the segment o -> o + t_max*d.

    The room itself never occludes an interior segment (the box is
    convex), so only furnishings and fixture rectangles are tested.  A
    relative margin on t_max keeps emitters from shadowing themselves.
    """
    n = o.shape[0]
    limit = t_max * (1.0 - 1e-4)
    occ = np.zeros(n, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for b in range(comp.box_min.shape[0]):
            inv = 1.0 / d
            t1 = (comp.box_min[b][None, :] - o) * inv
            t2 = (comp.box_max[b][None, :] - o) * inv
            lo = np.where(np.isnan(np.fmin(t1, t2)), -np.inf, np.fmin(t1, t2))
            hi = np.where(np.isnan(np.fmax(t1, t2)), np.inf, np.fmax(t1, t2))
            t_near = np.max(lo, axis=1)
            t_far = np.min(hi, axis=1)
            occ |= (t_near <= t_far) & (t_far > 1e-9) & (t_near < limit)
        for i in range(comp.fix_axis.shape[0]):
            k = comp.fix_axis[i]
            dk = d[:, k]
            t = (comp.fix_plane[i] - o[:, k]) / dk
            t = np.where(np.abs(dk) < 1e-14, np.inf, t)
            u, v = comp.fix_uaxis[i], comp.fix_vaxis[i]
            pu = o[:, u] + t * d[:, u]
            pv = o[:, v] + t * d[:, v]
            inside = (np.abs(pu - comp.fix_center[i, u]) <= comp.fix_he[i, 0]) & (
                np.abs(pv - comp.fix_center[i, v]) <= comp.fix_he[i, 1]
            )
            occ |= inside & (t > 1e-9) & (t < limit)
    return occ


# ---------------------------------------------------------------------------
# path tracing

def _onb(n: np.ndarray):
    # branchless orthonormal basis (Duff et al.)
    s = np.copysign(1.0, n[:, 2])
    a = -1.0 / (s + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + s * n[:, 0] ** 2 * a, s * b, -s * n[:, 0]], axis=1)
    v = np.stack([b, s + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, v


def _trace(comp: _Compiled, o: np.ndarray, d: np.ndarray, state: np.ndarray,
           flags: RenderFlags) -> np.ndarray:
    """Radiance estimate for one batch of rays (one sample per lane)."""
    n = o.shape[0]
    radiance = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    active = np.ones(n, dtype=bool)
    n_lights = comp.lights.shape[0]

    for bounce in range(flags.effective_bounces):
        t, pos, normal, albedo, emission = _closest_hit(comp, o, d)
        hit = np.isfinite(t)
        active &= hit
        if not active.any():
            break

        if bounce == 0:
            # emitters seen directly; later hits are covered by NEE
            radiance += np.where(active[:, None], throughput * emission, 0.0)

        p_off = pos + normal * comp.offset

        if n_lights > 0:
            base = 2 + 5 * bounce
            u_sel = _uniform(state, base)
            pick = np.minimum((u_sel * n_lights).astype(np.int64), n_lights - 1)
            li = comp.lights[pick]
            u1 = _uniform(state, base + 1) * 2.0 - 1.0
            u2 = _uniform(state, base + 2) * 2.0 - 1.0
            q = comp.fix_center[li].copy()
            rows = np.arange(n)
            q[rows, comp.fix_uaxis[li]] += u1 * comp.fix_he[li, 0]
            q[rows, comp.fix_vaxis[li]] += u2 * comp.fix_he[li, 1]
            vec = q - p_off
            dist = np.sqrt(np.sum(vec * vec, axis=1))
            safe = dist > 1e-9
            w = vec / np.where(safe, dist, 1.0)[:, None]
            cos_s = np.sum(normal * w, axis=1)
            cos_l = -np.sum(comp.fix_normal[li] * w, axis=1)
            lit = active & safe & (cos_s > 0.0) & (cos_l > 0.0) & np.any(albedo > 0.0, axis=1)
            if lit.any():
                if flags.shadows:
                    vis = ~_occluded(comp, p_off, w, dist)
                else:
                    vis = np.ones(n, dtype=bool)
                geom = cos_s * cos_l / np.where(safe, dist * dist, 1.0)
                # divide by pdf: area sampling (1/A) and uniform pick (1/n)
                weight = geom * comp.fix_area[li] * float(n_lights)
                mask = lit & vis
                contrib = throughput * (albedo / math.pi) * comp.fix_emission[li] * weight[:, None]
                radiance += np.where(mask[:, None], contrib, 0.0)

        if bounce + 1 >= flags.effective_bounces:
            break

        # cosine-weighted continuation; BRDF * cos / pdf reduces to albedo
        active &= np.any(albedo > 0.0, axis=1)
        if not active.any():
            break
        base = 2 + 5 * bounce
        ua = _uniform(state, base + 3)
        ub = _uniform(state, base + 4)
        r = np.sqrt(ua)
        phi = 2.0 * math.pi * ub
        tb, vb = _onb(normal)
        d = (
            tb * (r * np.cos(phi))[:, None]
            + vb * (r * np.sin(phi))[:, None]
            + normal * np.sqrt(np.maximum(1.0 - ua, 0.0))[:, None]
        )
        o = p_off
        throughput = throughput * albedo

    return radiance


def _camera_basis(cam, width: int, height: int):
    pos = np.asarray(cam.position_m, dtype=np.float64)
    fwd = np.asarray(cam.look_at_m, dtype=np.float64) - pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(cam.up, dtype=np.float64)
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    upv = np.cross(right, fwd)
    half_h = math.tan(math.radians(cam.vfov_deg) / 2.0)
    half_w = half_h * (width / height)
    return pos, fwd, right * half_w, upv * half_h


def _sample_chunks(spp: int):
    full, rest = divmod(spp, _SAMPLE_CHUNK)
    chunks = [(i * _SAMPLE_CHUNK, _SAMPLE_CHUNK) for i in range(full)]
    if rest:
        chunks.append((full * _SAMPLE_CHUNK, rest))
    return chunks


def _render_rows(comp, cam_basis, req: RenderRequest, y0: int, y1: int) -> np.ndarray:
    pos, fwd, right, upv = cam_basis
    w, h = req.width, req.height
    cols = np.arange(w, dtype=np.int64)
    rows = np.arange(y0, y1, dtype=np.int64)
    X = np.repeat(cols[None, :], y1 - y0, axis=0).ravel()
    Y = np.repeat(rows[:, None], w, axis=1).ravel()
    n_pix = X.shape[0]
    acc = np.zeros((n_pix, 3))
    for s0, count in _sample_chunks(req.spp):
        S = (np.arange(count, dtype=np.int64) + s0)[None, :].repeat(n_pix, axis=0).ravel()
        Xr = np.repeat(X, count)
        Yr = np.repeat(Y, count)
        state = _pixel_state(req.seed, Xr, Yr, S)
        jx = _uniform(state, 0)
        jy = _uniform(state, 1)
        ndc_x = (Xr + jx) / w * 2.0 - 1.0
        ndc_y = 1.0 - (Yr + jy) / h * 2.0
        d = fwd[None, :] + ndc_x[:, None] * right[None, :] + ndc_y[:, None] * upv[None, :]
        d = d / np.linalg.norm(d, axis=1)[:, None]
        o = np.broadcast_to(pos, d.shape).copy()
        rad = _trace(comp, o, d, state, req.flags)
        # fixed per-pixel reduction order: chunk-local sum, then chunk order
        acc += rad.reshape(n_pix, count, 3).sum(axis=1)
    return (acc / req.spp).reshape(y1 - y0, w, 3)


def render(scene: Scene, req: RenderRequest, threads: int = 1) -> ImageBuffer:
    """Render the scene; bit-identical for any thread count.

    Pixel rows are distributed over a thread pool; every pixel's samples
    are hashed from (seed, x, y, sample), so the partition has no effect
    on the result.
    """
    req.validate()
    cam = scene.camera(req.camera_id)  # raises for unknown id
    comp = _Compiled(scene)
    basis = _camera_basis(cam, req.width, req.height)

    chunk0 = min(req.spp, _SAMPLE_CHUNK)
    rows_per_task = max(1, _RAY_BATCH // max(1, req.width * chunk0))
    spans = [
        (y, min(y + rows_per_task, req.height))
        for y in range(0, req.height, rows_per_task)
    ]

    out = np.zeros((req.height, req.width, 3))
    if threads <= 1:
        for y0, y1 in spans:
            out[y0:y1] = _render_rows(comp, basis, req, y0, y1)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_render_rows, comp, basis, req, y0, y1): (y0, y1) for y0, y1 in spans}
            for fut, (y0, y1) in futures.items():
                out[y0:y1] = fut.result()
    return ImageBuffer(out)


def render_superposition_check(scene: Scene, req: RenderRequest, threads: int = 1) -> float:
    """Max relative pixel residual between the full render and the sum of
    per-light renders (each with every other light dimmed to zero).

    Dimming keeps the enabled set, so every per-light render makes the
    exact sampling decisions of the full render; the residual is float
    roundoff only.  Contract: <= 1e-4.
    """
    enabled = [i for i, f in enumerate(scene.fixtures) if f.enabled]
    if len(enabled) < 2:
        raise RenderError("superposition check needs at least 2 enabled fixtures")
    full = render(scene, req, threads=threads).data
    total = np.zeros_like(full)
    for keep in enabled:
        fixtures = tuple(
            f if i == keep or not f.enabled else replace(f, dimmer=0.0)
            for i, f in enumerate(scene.fixtures)
        )
        solo = replace(scene, fixtures=fixtures)
        total = total + render(solo, req, threads=threads).data
    scale = max(float(full.max()), 1e-12)
    return float(np.max(np.abs(full - total))) / scale
