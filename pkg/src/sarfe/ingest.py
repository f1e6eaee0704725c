"""Data ingestion: KITTI-format binaries and labels, synthetic scenes,
and configuration files.

File formats
  point binary   little-endian float32 quadruples (x, y, z, intensity);
                 intensity becomes a one-channel feature
  label text     whitespace-delimited KITTI object lines, 15+ fields:
                 type trunc occl alpha bbox(4) h w l x y z rotation_y [score]
  calibration    12 whitespace-delimited floats, a 3x4 camera-to-lidar
                 rigid transform (rotation | translation), row-major
  config/scene   flat TOML key-value files, schemas below
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .cloudgeom import KITTI_RANGE, PointCloud, RangeSpec
from .config import SarfeConfig
from .errors import ConfigError, FormatError, ParseError
from .roipool import Box3D, wrap_angle

# ---------------------------------------------------------------------------
# point binaries
# ---------------------------------------------------------------------------

_POINT_RECORD_BYTES = 16  # four little-endian float32


def read_point_bin(path) -> PointCloud:
    """Read x/y/z/intensity float32 records; values widen to float64."""
    blob = Path(path).read_bytes()
    if len(blob) % _POINT_RECORD_BYTES:
        raise FormatError(
            f"{path}: length {len(blob)} bytes is not a multiple of {_POINT_RECORD_BYTES}"
        )
    arr = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(arr[:, :3], arr[:, 3:4])


def write_point_bin(cloud: PointCloud, path) -> None:
    """Write the cloud as float32 records; first feature channel is intensity."""
    n = len(cloud)
    intensity = cloud.features[:, 0] if cloud.feature_width else np.zeros(n)
    arr = np.column_stack([cloud.xyz, intensity]).astype("<f4")
    Path(path).write_bytes(arr.tobytes())


# ---------------------------------------------------------------------------
# labels and calibration
# ---------------------------------------------------------------------------

KNOWN_CLASSES = frozenset(
    {"Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc", "DontCare"}
)


@dataclass(frozen=True)
class LabelRecord:
    cls: str
    height: float
    width: float
    length: float
    location: tuple[float, float, float]  # camera frame, bottom center
    rotation_y: float

    @property
    def is_dontcare(self) -> bool:
        return self.cls == "DontCare"


def read_labels(path) -> list[LabelRecord]:
    records: list[LabelRecord] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 15:
            raise ParseError(f"{path}:{lineno}: expected >= 15 fields, got {len(fields)}")
        cls = fields[0]
        if cls not in KNOWN_CLASSES:
            raise ParseError(f"{path}:{lineno}: unknown class {cls!r}")
        try:
            h, w, l = (float(fields[i]) for i in (8, 9, 10))
            x, y, z = (float(fields[i]) for i in (11, 12, 13))
            ry = float(fields[14])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if cls != "DontCare" and min(h, w, l) <= 0:
            raise ParseError(f"{path}:{lineno}: non-positive dimensions for {cls}")
        records.append(
            LabelRecord(cls=cls, height=h, width=w, length=l, location=(x, y, z), rotation_y=ry)
        )
    return records


def identity_calib() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 1))])


def read_calib(path) -> np.ndarray:
    fields = Path(path).read_text().split()
    if len(fields) != 12:
        raise ParseError(f"{path}: calibration needs 12 values, got {len(fields)}")
    try:
        values = [float(v) for v in fields]
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return np.array(values).reshape(3, 4)


def to_lidar_box(record: LabelRecord, calib: np.ndarray) -> Box3D:
    """Camera-frame label to a lidar-frame box.

    The camera-frame location is the bottom center, so the lidar center is
    lifted by half the height; yaw = -rotation_y - pi/2, wrapped to (-pi, pi].
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.shape != (3, 4):
        raise ParseError(f"calibration must be 3x4, got {calib.shape}")
    loc = calib[:, :3] @ np.asarray(record.location) + calib[:, 3]
    center = (float(loc[0]), float(loc[1]), float(loc[2] + record.height / 2.0))
    yaw = wrap_angle(-record.rotation_y - math.pi / 2.0)
    return Box3D(center=center, size=(record.length, record.width, record.height), yaw=yaw)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

# cyclist-scale proportions for the default demo object
CYCLIST_SIZE = (1.8, 0.6, 1.7)
CYCLIST_CENTER = (14.0, 2.0, -0.9)
CYCLIST_YAW = 0.3
CYCLIST_SURFACE_DENSITY = 500.0  # points per square meter
DEFAULT_CLUTTER_COUNT = 20000
# ground slab around the object, standing in for the road returns that
# surround an object in a real sweep
DEFAULT_CLUTTER_RANGE = RangeSpec((8.0, -4.0, -1.9), (20.0, 8.0, -1.7))
DEFAULT_FEATURE_CHANNELS = 16
DEFAULT_FEATURE_WAVELENGTH = 1.5  # meters
DEFAULT_FEATURE_AMPLITUDE = 2.0


@dataclass(frozen=True)
class ObjectTemplate:
    box: Box3D
    surface_density: float

    def __post_init__(self):
        if self.surface_density < 0:
            raise ConfigError(f"surface_density must be >= 0, got {self.surface_density}")


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic synthetic scene: boxes with surface-sampled points,
    uniform clutter, and per-point features drawn from smooth spatial fields.

    Per-point features are sinusoidal plane-wave channels evaluated at the
    point position (random directions and phases from the seed). Smoothly
    varying channels emulate what backbone activations look like in space;
    spatially uncorrelated noise would not.
    """

    seed: int
    templates: tuple[ObjectTemplate, ...]
    clutter_count: int
    scene_range: RangeSpec
    clutter_range: RangeSpec | None = None  # None: clutter fills scene_range
    feature_channels: int = 1
    feature_wavelength: float = DEFAULT_FEATURE_WAVELENGTH
    feature_amplitude: float = 1.0

    def __post_init__(self):
        if self.clutter_count < 0:
            raise ConfigError(f"clutter_count must be >= 0, got {self.clutter_count}")
        if self.feature_channels < 1:
            raise ConfigError(f"feature_channels must be >= 1, got {self.feature_channels}")
        if self.feature_wavelength <= 0:
            raise ConfigError(f"feature_wavelength must be > 0, got {self.feature_wavelength}")
        if self.feature_amplitude < 0:
            raise ConfigError(f"feature_amplitude must be >= 0, got {self.feature_amplitude}")
        mins, maxs = self.scene_range.mins, self.scene_range.maxs
        for tpl in self.templates:
            corners = tpl.box.corners()
            if not ((corners >= mins).all() and (corners < maxs).all()):
                raise ConfigError(f"object box at {tpl.box.center} exceeds the scene range")
        if self.clutter_range is not None:
            if not (
                (self.clutter_range.mins >= mins).all()
                and (self.clutter_range.maxs <= maxs).all()
            ):
                raise ConfigError("clutter_range must lie within scene_range")


def default_scene_spec(seed: int = 0) -> SceneSpec:
    """One dense cyclist-scale object on a clutter slab inside the KITTI range."""
    box = Box3D(center=CYCLIST_CENTER, size=CYCLIST_SIZE, yaw=CYCLIST_YAW)
    return SceneSpec(
        seed=seed,
        templates=(ObjectTemplate(box=box, surface_density=CYCLIST_SURFACE_DENSITY),),
        clutter_count=DEFAULT_CLUTTER_COUNT,
        scene_range=KITTI_RANGE,
        clutter_range=DEFAULT_CLUTTER_RANGE,
        feature_channels=DEFAULT_FEATURE_CHANNELS,
        feature_wavelength=DEFAULT_FEATURE_WAVELENGTH,
        feature_amplitude=DEFAULT_FEATURE_AMPLITUDE,
    )


def surface_area(size) -> float:
    l, w, h = size
    return 2.0 * (l * w + l * h + w * h)


def template_point_count(tpl: ObjectTemplate) -> int:
    return int(round(tpl.surface_density * surface_area(tpl.box.size)))


def _sample_box_surface(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """Uniform points on the box surface, area-weighted across the six faces."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for face in range(6):
        m = faces == face
        axis = face // 2
        sign = -0.5 if face % 2 == 0 else 0.5
        if axis == 0:
            local[m, 0] = sign * l
            local[m, 1] = u[m] * w
            local[m, 2] = v[m] * h
        elif axis == 1:
            local[m, 0] = u[m] * l
            local[m, 1] = sign * w
            local[m, 2] = v[m] * h
        else:
            local[m, 0] = u[m] * l
            local[m, 1] = v[m] * w
            local[m, 2] = sign * h
    return local @ box.rotation().T + np.asarray(box.center)


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, list[Box3D]]:
    """Deterministic scene: surface-sampled objects first, then uniform clutter."""
    rng = np.random.default_rng(spec.seed)
    # field parameters come first so point counts do not shift the field
    directions = rng.normal(size=(spec.feature_channels, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=spec.feature_channels)
    xyz_parts: list[np.ndarray] = []
    boxes: list[Box3D] = []
    for tpl in spec.templates:
        xyz_parts.append(_sample_box_surface(rng, tpl.box, template_point_count(tpl)))
        boxes.append(tpl.box)
    if spec.clutter_count:
        region = spec.clutter_range if spec.clutter_range is not None else spec.scene_range
        xyz_parts.append(
            rng.uniform(region.mins, region.maxs, size=(spec.clutter_count, 3))
        )
    if xyz_parts:
        xyz = np.vstack(xyz_parts)
    else:
        xyz = np.zeros((0, 3))
    wavenumber = 2.0 * math.pi / spec.feature_wavelength
    features = spec.feature_amplitude * np.sin(wavenumber * (xyz @ directions.T) + phases)
    return PointCloud(xyz, features), boxes


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "grid_resolution",
    "radii",
    "channel_width",
    "attention_depth",
    "sa_hidden_width",
    "max_neighbors",
    "seed",
    "fps_count",
    "range_min",
    "range_max",
    "voxel_size",
}


def _parse_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def config_from_mapping(mapping: dict, origin: str = "<config>") -> SarfeConfig:
    unknown = set(mapping) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{origin}: unknown keys {sorted(unknown)}")
    kwargs: dict = {}
    for key in ("grid_resolution", "channel_width", "attention_depth",
                "sa_hidden_width", "max_neighbors", "seed", "fps_count"):
        if key in mapping:
            kwargs[key] = int(mapping[key])
    if "radii" in mapping:
        kwargs["radii"] = tuple(float(r) for r in mapping["radii"])
    if "voxel_size" in mapping:
        kwargs["voxel_size"] = tuple(float(v) for v in mapping["voxel_size"])
    if ("range_min" in mapping) != ("range_max" in mapping):
        raise ConfigError(f"{origin}: range_min and range_max must be given together")
    if "range_min" in mapping:
        kwargs["scene_range"] = RangeSpec(
            tuple(float(v) for v in mapping["range_min"]),
            tuple(float(v) for v in mapping["range_max"]),
        )
    return SarfeConfig(**kwargs)


def load_config(path) -> SarfeConfig:
    """Parse and validate a config file; missing keys fall back to defaults."""
    return config_from_mapping(_parse_toml(path), origin=str(path))


def _toml_value(value) -> str:
    if isinstance(value, bool):
        raise TypeError("no boolean config keys")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def save_config(config: SarfeConfig, path) -> None:
    lines = [
        f"grid_resolution = {config.grid_resolution}",
        f"radii = {_toml_value(config.radii)}",
        f"channel_width = {config.channel_width}",
        f"attention_depth = {config.attention_depth}",
        f"sa_hidden_width = {config.sa_hidden_width}",
        f"max_neighbors = {config.max_neighbors}",
        f"seed = {config.seed}",
        f"fps_count = {config.fps_count}",
        f"range_min = {_toml_value(config.scene_range.min_corner)}",
        f"range_max = {_toml_value(config.scene_range.max_corner)}",
        f"voxel_size = {_toml_value(config.voxel_size)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# scene spec files
# ---------------------------------------------------------------------------

_SCENE_KEYS = {
    "seed",
    "clutter_count",
    "range_min",
    "range_max",
    "clutter_min",
    "clutter_max",
    "feature_channels",
    "feature_wavelength",
    "feature_amplitude",
    "object",
}
_OBJECT_KEYS = {"center", "size", "yaw", "density"}


def load_scene_spec(path) -> SceneSpec:
    """Scene spec TOML: seed, clutter_count, range_min/max, clutter_min/max,
    feature_channels/wavelength/amplitude, [[object]] tables with center,
    size, yaw, density."""
    mapping = _parse_toml(path)
    unknown = set(mapping) - _SCENE_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    scene_range = KITTI_RANGE
    if ("range_min" in mapping) != ("range_max" in mapping):
        raise ConfigError(f"{path}: range_min and range_max must be given together")
    if "range_min" in mapping:
        scene_range = RangeSpec(
            tuple(float(v) for v in mapping["range_min"]),
            tuple(float(v) for v in mapping["range_max"]),
        )
    clutter_range = None
    if ("clutter_min" in mapping) != ("clutter_max" in mapping):
        raise ConfigError(f"{path}: clutter_min and clutter_max must be given together")
    if "clutter_min" in mapping:
        clutter_range = RangeSpec(
            tuple(float(v) for v in mapping["clutter_min"]),
            tuple(float(v) for v in mapping["clutter_max"]),
        )
    templates = []
    for i, obj in enumerate(mapping.get("object", [])):
        unknown = set(obj) - _OBJECT_KEYS
        if unknown:
            raise ConfigError(f"{path}: object {i}: unknown keys {sorted(unknown)}")
        try:
            box = Box3D(
                center=tuple(float(v) for v in obj["center"]),
                size=tuple(float(v) for v in obj["size"]),
                yaw=float(obj.get("yaw", 0.0)),
            )
            density = float(obj["density"])
        except KeyError as exc:
            raise ConfigError(f"{path}: object {i}: missing key {exc}") from None
        templates.append(ObjectTemplate(box=box, surface_density=density))
    return SceneSpec(
        seed=int(mapping.get("seed", 0)),
        templates=tuple(templates),
        clutter_count=int(mapping.get("clutter_count", 0)),
        scene_range=scene_range,
        clutter_range=clutter_range,
        feature_channels=int(mapping.get("feature_channels", 1)),
        feature_wavelength=float(mapping.get("feature_wavelength", DEFAULT_FEATURE_WAVELENGTH)),
        feature_amplitude=float(mapping.get("feature_amplitude", 1.0)),
    )
