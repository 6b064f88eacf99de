"""Scene model for the lighting digital twin.

A Scene is an immutable value: a room box, emissive fixtures, furnishing
boxes and cameras, all in meters in a right-handed frame with the room
spanning [0, size] on each axis and z up.  Mutation goes through
``apply_update`` which returns a new Scene with the revision bumped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

Vec3 = tuple[float, float, float]

FACINGS = ("+x", "-x", "+y", "-y", "+z", "-z")
CCT_MIN_K = 1667.0
CCT_MAX_K = 25000.0

# Degradation preset identifiers, ordered worst to best.
CONDITION_B = "B"  # furniture removed, emission temperature shifted
CONDITION_C = "C"  # no indirect bounces, no shadow rays
CONDITION_D = "D"  # the scene as captured


class SceneError(ValueError):
    """Base class for scene document problems."""


class SceneParseError(SceneError):
    """The document text is not well-formed."""


class SceneValidationError(SceneError):
    """The document parsed but violates a scene invariant."""


@dataclass(frozen=True)
class Room:
    size_m: Vec3
    wall_albedo: Vec3
    floor_albedo: Vec3
    ceiling_albedo: Vec3


@dataclass(frozen=True)
class Fixture:
    """Axis-aligned emissive rectangle.

    Exactly one of ``cct_k`` / ``color_rgb`` is set.  ``albedo`` is the
    diffuse reflectance of the emitting face (default black housing); it
    exists so enclosure tests can build surfaces that both emit and
    reflect.
    """

    id: str
    center_m: Vec3
    half_extents_m: tuple[float, float]
    facing: str
    flux_lm: float
    dimmer: float
    enabled: bool = True
    cct_k: Optional[float] = None
    color_rgb: Optional[Vec3] = None
    albedo: Vec3 = (0.0, 0.0, 0.0)

    @property
    def area_m2(self) -> float:
        a, b = self.half_extents_m
        return 4.0 * a * b

    @property
    def normal(self) -> Vec3:
        sign = 1.0 if self.facing[0] == "+" else -1.0
        axis = "xyz".index(self.facing[1])
        n = [0.0, 0.0, 0.0]
        n[axis] = sign
        return tuple(n)


@dataclass(frozen=True)
class Furnishing:
    id: str
    min_m: Vec3
    max_m: Vec3
    albedo: Vec3


@dataclass(frozen=True)
class Camera:
    id: str
    position_m: Vec3
    look_at_m: Vec3
    up: Vec3
    vfov_deg: float
    exposure_ev: float


@dataclass(frozen=True)
class Scene:
    name: str
    room: Room
    fixtures: tuple[Fixture, ...]
    furnishings: tuple[Furnishing, ...]
    cameras: tuple[Camera, ...]
    revision: int = 0

    def fixture(self, fixture_id: str) -> Fixture:
        for f in self.fixtures:
            if f.id == fixture_id:
                return f
        raise SceneValidationError(f"unknown fixture {fixture_id!r}")

    def camera(self, camera_id: str) -> Camera:
        for c in self.cameras:
            if c.id == camera_id:
                return c
        raise SceneValidationError(f"unknown camera {camera_id!r}")


@dataclass(frozen=True)
class FixtureUpdate:
    """Partial update of one fixture; unset fields keep their value."""

    fixture_id: str
    dimmer: Optional[float] = None
    cct_k: Optional[float] = None
    color_rgb: Optional[Vec3] = None
    enabled: Optional[bool] = None


# ---------------------------------------------------------------------------
# validation

def _check_vec(v, n, ctx: str) -> tuple[float, ...]:
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise SceneValidationError(f"{ctx}: expected a {n}-vector")
    out = []
    for comp in v:
        if isinstance(comp, bool) or not isinstance(comp, (int, float)):
            raise SceneValidationError(f"{ctx}: expected numeric components")
        if not math.isfinite(comp):
            raise SceneValidationError(f"{ctx}: components must be finite")
        out.append(float(comp))
    return tuple(out)


def _check_albedo(v, ctx: str) -> Vec3:
    a = _check_vec(v, 3, ctx)
    if any(c < 0.0 or c > 1.0 for c in a):
        raise SceneValidationError(f"{ctx}: albedo components must lie in [0, 1]")
    return a  # type: ignore[return-value]


def _check_number(v, ctx: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SceneValidationError(f"{ctx}: expected a finite number")
    return float(v)


def validate_fixture(f: Fixture) -> None:
    ctx = f'fixture "{f.id}"'
    if not f.id:
        raise SceneValidationError("fixture id must be nonempty")
    if f.facing not in FACINGS:
        raise SceneValidationError(f"{ctx}: facing must be one of {'/'.join(FACINGS)}")
    a, b = f.half_extents_m
    if a <= 0.0 or b <= 0.0:
        raise SceneValidationError(f"{ctx}: half_extents_m must be positive (area > 0)")
    if f.flux_lm <= 0.0:
        raise SceneValidationError(f"{ctx}: flux_lm must be > 0")
    if not 0.0 <= f.dimmer <= 1.0:
        raise SceneValidationError(f"{ctx}: dimmer must lie in [0, 1]")
    if (f.cct_k is None) == (f.color_rgb is None):
        raise SceneValidationError(f"{ctx}: exactly one of cct_k/color_rgb must be set")
    if f.cct_k is not None and not CCT_MIN_K <= f.cct_k <= CCT_MAX_K:
        raise SceneValidationError(
            f"{ctx}: cct_k must lie in [{CCT_MIN_K:g}, {CCT_MAX_K:g}] K"
        )
    if f.color_rgb is not None:
        if any(c < 0.0 or c > 1.0 for c in f.color_rgb):
            raise SceneValidationError(f"{ctx}: color_rgb components must lie in [0, 1]")
        if max(f.color_rgb) <= 0.0:
            raise SceneValidationError(f"{ctx}: color_rgb must not be black")
    _check_albedo(f.albedo, ctx)


def _fixture_bounds(f: Fixture) -> tuple[Vec3, Vec3]:
    axis = "xyz".index(f.facing[1])
    u_axis, v_axis = [i for i in range(3) if i != axis]
    lo = list(f.center_m)
    hi = list(f.center_m)
    lo[u_axis] -= f.half_extents_m[0]
    hi[u_axis] += f.half_extents_m[0]
    lo[v_axis] -= f.half_extents_m[1]
    hi[v_axis] += f.half_extents_m[1]
    return tuple(lo), tuple(hi)


def validate_scene(s: Scene) -> None:
    size = s.room.size_m
    if any(c <= 0.0 for c in size):
        raise SceneValidationError("room: size_m must be strictly positive")
    for name, alb in (
        ("wall_albedo", s.room.wall_albedo),
        ("floor_albedo", s.room.floor_albedo),
        ("ceiling_albedo", s.room.ceiling_albedo),
    ):
        _check_albedo(alb, f"room.{name}")

    for kind, items in (("fixture", s.fixtures), ("furnishing", s.furnishings), ("camera", s.cameras)):
        seen = set()
        for item in items:
            if not item.id:
                raise SceneValidationError(f"{kind} id must be nonempty")
            if item.id in seen:
                raise SceneValidationError(f'duplicate {kind} id "{item.id}"')
            seen.add(item.id)

    for f in s.fixtures:
        validate_fixture(f)
        lo, hi = _fixture_bounds(f)
        for ax in range(3):
            if lo[ax] < 0.0 or hi[ax] > size[ax]:
                raise SceneValidationError(
                    f'fixture "{f.id}": bounds extend outside the room'
                )

    for fu in s.furnishings:
        for ax in range(3):
            if not fu.min_m[ax] < fu.max_m[ax]:
                raise SceneValidationError(
                    f'furnishing "{fu.id}": min_m must be componentwise below max_m'
                )
            if fu.min_m[ax] < 0.0 or fu.max_m[ax] > size[ax]:
                raise SceneValidationError(
                    f'furnishing "{fu.id}": bounds extend outside the room'
                )
        _check_albedo(fu.albedo, f'furnishing "{fu.id}"')

    if not s.cameras:
        raise SceneValidationError("scene needs at least one camera")
    for c in s.cameras:
        ctx = f'camera "{c.id}"'
        for ax in range(3):
            if not 0.0 < c.position_m[ax] < size[ax]:
                raise SceneValidationError(f"{ctx}: position must lie inside the room")
        view = [b - a for a, b in zip(c.position_m, c.look_at_m)]
        vlen = math.sqrt(sum(v * v for v in view))
        if vlen <= 0.0:
            raise SceneValidationError(f"{ctx}: position and look_at coincide")
        ulen = math.sqrt(sum(u * u for u in c.up))
        if ulen <= 0.0:
            raise SceneValidationError(f"{ctx}: up vector is zero")
        cross = (
            view[1] * c.up[2] - view[2] * c.up[1],
            view[2] * c.up[0] - view[0] * c.up[2],
            view[0] * c.up[1] - view[1] * c.up[0],
        )
        if math.sqrt(sum(x * x for x in cross)) / (vlen * ulen) < 1e-9:
            raise SceneValidationError(f"{ctx}: up is parallel to the view direction")
        if not 10.0 < c.vfov_deg < 140.0:
            raise SceneValidationError(f"{ctx}: vfov_deg must lie in (10, 140)")
        if not math.isfinite(c.exposure_ev):
            raise SceneValidationError(f"{ctx}: exposure_ev must be finite")


# ---------------------------------------------------------------------------
# document parsing / serialization

def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise SceneValidationError(f"{ctx}: missing required key {key!r}")
    return obj[key]


def _parse_fixture(obj: dict) -> Fixture:
    fid = _require(obj, "id", "fixture")
    if not isinstance(fid, str):
        raise SceneValidationError("fixture id must be a string")
    ctx = f'fixture "{fid}"'
    has_cct = "cct_k" in obj
    has_color = "color_rgb" in obj
    if has_cct == has_color:
        raise SceneValidationError(f"{ctx}: exactly one of cct_k/color_rgb must be given")
    return Fixture(
        id=fid,
        center_m=_check_vec(_require(obj, "center_m", ctx), 3, f"{ctx}.center_m"),
        half_extents_m=_check_vec(_require(obj, "half_extents_m", ctx), 2, f"{ctx}.half_extents_m"),
        facing=_require(obj, "facing", ctx),
        flux_lm=_check_number(_require(obj, "flux_lm", ctx), f"{ctx}.flux_lm"),
        dimmer=_check_number(_require(obj, "dimmer", ctx), f"{ctx}.dimmer"),
        enabled=bool(_require(obj, "enabled", ctx)),
        cct_k=_check_number(obj["cct_k"], f"{ctx}.cct_k") if has_cct else None,
        color_rgb=_check_vec(obj["color_rgb"], 3, f"{ctx}.color_rgb") if has_color else None,
        albedo=_check_albedo(obj.get("albedo", (0.0, 0.0, 0.0)), f"{ctx}.albedo"),
    )


def parse_scene(text: str) -> Scene:
    """Parse and validate a scene document; the result carries revision 0."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(
            f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(doc, dict):
        raise SceneParseError("scene document must be an object")

    room_obj = _require(doc, "room", "scene")
    room = Room(
        size_m=_check_vec(_require(room_obj, "size_m", "room"), 3, "room.size_m"),
        wall_albedo=_check_albedo(_require(room_obj, "wall_albedo", "room"), "room.wall_albedo"),
        floor_albedo=_check_albedo(_require(room_obj, "floor_albedo", "room"), "room.floor_albedo"),
        ceiling_albedo=_check_albedo(_require(room_obj, "ceiling_albedo", "room"), "room.ceiling_albedo"),
    )

    def items(key):
        v = doc.get(key, [])
        if not isinstance(v, list):
            raise SceneValidationError(f"{key} must be a list")
        return v

    fixtures = tuple(_parse_fixture(o) for o in items("fixtures"))
    furnishings = tuple(
        Furnishing(
            id=_require(o, "id", "furnishing"),
            min_m=_check_vec(_require(o, "min_m", "furnishing"), 3, "furnishing.min_m"),
            max_m=_check_vec(_require(o, "max_m", "furnishing"), 3, "furnishing.max_m"),
            albedo=_check_albedo(_require(o, "albedo", "furnishing"), "furnishing.albedo"),
        )
        for o in items("furnishings")
    )
    cameras = tuple(
        Camera(
            id=_require(o, "id", "camera"),
            position_m=_check_vec(_require(o, "position_m", "camera"), 3, "camera.position_m"),
            look_at_m=_check_vec(_require(o, "look_at_m", "camera"), 3, "camera.look_at_m"),
            up=_check_vec(_require(o, "up", "camera"), 3, "camera.up"),
            vfov_deg=_check_number(_require(o, "vfov_deg", "camera"), "camera.vfov_deg"),
            exposure_ev=_check_number(_require(o, "exposure_ev", "camera"), "camera.exposure_ev"),
        )
        for o in items("cameras")
    )

    name = doc.get("name", "")
    if not isinstance(name, str):
        raise SceneValidationError("scene name must be a string")
    scene = Scene(name=name, room=room, fixtures=fixtures, furnishings=furnishings, cameras=cameras)
    validate_scene(scene)
    return scene


def _r6(v: float) -> float:
    # canonical numeric form: 6 significant digits, round-trip stable
    return float(f"{v:.6g}")


def _vec6(v) -> list:
    return [_r6(c) for c in v]


def scene_document(s: Scene) -> dict:
    """The canonical document form of a scene (revision is runtime state)."""
    fixtures = []
    for f in s.fixtures:
        obj = {
            "id": f.id,
            "center_m": _vec6(f.center_m),
            "half_extents_m": _vec6(f.half_extents_m),
            "facing": f.facing,
            "flux_lm": _r6(f.flux_lm),
            "dimmer": _r6(f.dimmer),
            "enabled": f.enabled,
        }
        if f.cct_k is not None:
            obj["cct_k"] = _r6(f.cct_k)
        else:
            obj["color_rgb"] = _vec6(f.color_rgb)
        if any(c != 0.0 for c in f.albedo):
            obj["albedo"] = _vec6(f.albedo)
        fixtures.append(obj)
    return {
        "name": s.name,
        "room": {
            "size_m": _vec6(s.room.size_m),
            "wall_albedo": _vec6(s.room.wall_albedo),
            "floor_albedo": _vec6(s.room.floor_albedo),
            "ceiling_albedo": _vec6(s.room.ceiling_albedo),
        },
        "fixtures": fixtures,
        "furnishings": [
            {"id": fu.id, "min_m": _vec6(fu.min_m), "max_m": _vec6(fu.max_m), "albedo": _vec6(fu.albedo)}
            for fu in s.furnishings
        ],
        "cameras": [
            {
                "id": c.id,
                "position_m": _vec6(c.position_m),
                "look_at_m": _vec6(c.look_at_m),
                "up": _vec6(c.up),
                "vfov_deg": _r6(c.vfov_deg),
                "exposure_ev": _r6(c.exposure_ev),
            }
            for c in s.cameras
        ],
    }


def serialize_scene(s: Scene) -> str:
    return json.dumps(scene_document(s), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# mutation

def apply_update(s: Scene, update: FixtureUpdate) -> Scene:
    """Return a new scene with one fixture changed and revision + 1."""
    if (
        update.dimmer is None
        and update.cct_k is None
        and update.color_rgb is None
        and update.enabled is None
    ):
        raise SceneValidationError("update has no fields")
    if update.cct_k is not None and update.color_rgb is not None:
        raise SceneValidationError(
            f'fixture "{update.fixture_id}": exactly one of cct_k/color_rgb may be set'
        )

    idx = next((i for i, f in enumerate(s.fixtures) if f.id == update.fixture_id), None)
    if idx is None:
        raise SceneValidationError(f"unknown fixture {update.fixture_id!r}")
    f = s.fixtures[idx]

    changes: dict = {}
    if update.dimmer is not None:
        changes["dimmer"] = float(update.dimmer)
    if update.enabled is not None:
        changes["enabled"] = bool(update.enabled)
    if update.cct_k is not None:
        changes["cct_k"] = float(update.cct_k)
        changes["color_rgb"] = None
    if update.color_rgb is not None:
        changes["color_rgb"] = _check_vec(update.color_rgb, 3, f'fixture "{f.id}".color_rgb')
        changes["cct_k"] = None
    new_fixture = replace(f, **changes)
    validate_fixture(new_fixture)

    fixtures = s.fixtures[:idx] + (new_fixture,) + s.fixtures[idx + 1 :]
    return replace(s, fixtures=fixtures, revision=s.revision + 1)


# ---------------------------------------------------------------------------
# fidelity presets

def fidelity_preset(s: Scene, condition: str):
    """Derive the scene + render flags for one of the degradation presets.

    D is the identity with full flags.  C keeps the scene but turns off
    indirect bounces and shadow rays.  B removes all furnishings and
    shifts every color temperature up 3000 K (clamped to the valid CCT
    range), keeping full flags.
    """
    from .render import RenderFlags  # deferred: render imports this module

    if condition == CONDITION_D:
        return s, RenderFlags(indirect=True, shadows=True)
    if condition == CONDITION_C:
        return s, RenderFlags(indirect=False, shadows=False)
    if condition == CONDITION_B:
        fixtures = tuple(
            replace(f, cct_k=min(max(f.cct_k + 3000.0, CCT_MIN_K), CCT_MAX_K))
            if f.cct_k is not None
            else f
            for f in s.fixtures
        )
        degraded = replace(s, fixtures=fixtures, furnishings=())
        return degraded, RenderFlags(indirect=True, shadows=True)
    raise SceneValidationError(f"unknown fidelity condition {condition!r} (expected B, C or D)")
