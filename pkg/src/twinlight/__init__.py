"""Digital-twin smart-lighting engine.

Simulates a room under parametric light fixtures with a deterministic
path tracer, scores renders against reference photos via embedding
similarity, and calibrates fixture parameters to maximize that score.
"""

from importlib import resources

from .scene import (
    Scene,
    Room,
    Fixture,
    Furnishing,
    Camera,
    FixtureUpdate,
    SceneError,
    SceneParseError,
    SceneValidationError,
    parse_scene,
    serialize_scene,
    apply_update,
    fidelity_preset,
)
from .color import Chromaticity, DisplayImage, cct_to_xy, xy_to_linear_rgb, fixture_emission, tonemap
from .render import (
    ImageBuffer,
    RenderError,
    RenderFlags,
    RenderRequest,
    render,
    render_superposition_check,
)
from .similarity import (
    Embedding,
    SimilarityReport,
    encode_builtin,
    encode_external,
    similarity_percent,
    compare_report,
)
from .calibrate import CalibrationProblem, CalibrationResult, ParameterSpec, calibrate, objective

__version__ = "0.1.0"


def demo_scene_text() -> str:
    """The bundled demo office scene document."""
    return resources.files("twinlight.data").joinpath("demo_office.json").read_text()


def demo_scene() -> Scene:
    return parse_scene(demo_scene_text())
