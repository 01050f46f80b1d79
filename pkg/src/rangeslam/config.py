"""Simulation config files: flat ``key = value`` text with sections.

Sections are ``[world]``, ``[camera]`` and ``[noise]``. ``[world]`` must set
``trajectory``, ``n_keyframes``, ``n_map_points``, ``true_scale`` and
``seed``; everything else falls back to the dataclass defaults. Vector values
are whitespace-separated numbers.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .geometry import CameraIntrinsics
from .sim import NoiseConfig, WorldConfig, default_intrinsics

REQUIRED_WORLD_KEYS = ("trajectory", "n_keyframes", "n_map_points", "true_scale", "seed")


def _floats(n):
    def conv(raw: str) -> tuple:
        v = tuple(float(x) for x in raw.split())
        if len(v) != n:
            raise ValueError(f"expected {n} numbers")
        return v
    return conv


_WORLD_KEYS = {
    "trajectory": str,
    "length": float,
    "width": float,
    "radius": float,
    "loop_fraction": float,
    "n_keyframes": int,
    "keyframe_period": float,
    "n_map_points": int,
    "point_box": _floats(6),
    "box_margin": float,
    "camera_height": float,
    "min_depth": float,
    "max_depth": float,
    "anchor_distance": float,
    "anchor_height": float,
    "tag_lever_arm": _floats(3),
    "true_scale": float,
    "seed": int,
}
_CAMERA_KEYS = {"fx": float, "fy": float, "cx": float, "cy": float, "width": int, "height": int}
_NOISE_KEYS = {f.name: float for f in dataclasses.fields(NoiseConfig)}
_SECTIONS = {"world": _WORLD_KEYS, "camera": _CAMERA_KEYS, "noise": _NOISE_KEYS}


@dataclass(frozen=True)
class SimConfig:
    world: WorldConfig
    noise: NoiseConfig


def _key_line(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip().lower()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return n
    return None


def parse_config(text: str, source: str = "<config>") -> SimConfig:
    """Parse config text; errors carry ``source:line`` where known."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}:{e.lineno}: key outside any [section]: {e.line.strip()!r}") from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{source}:{lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as e:
        lineno = getattr(e, "lineno", None)
        where = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{where}: {e.message.splitlines()[0]}") from None

    def where(section, key):
        n = _key_line(text, section, key)
        return f"{source}:{n}" if n else source

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
    for key in REQUIRED_WORLD_KEYS:
        if not cp.has_option("world", key):
            raise ConfigError(f"{source}: missing required key {key!r} in [world]")

    values = {}
    for section, schema in _SECTIONS.items():
        values[section] = {}
        if not cp.has_section(section):
            continue
        for key, raw in cp[section].items():
            try:
                values[section][key] = schema[key](raw.strip())
            except ValueError as e:
                raise ConfigError(f"{where(section, key)}: bad value for {key!r}: {raw!r} ({e})") from None

    try:
        intr = dataclasses.asdict(default_intrinsics())
        intr.update(values["camera"])
        world = WorldConfig(intrinsics=CameraIntrinsics(**intr), **values["world"])
        noise = NoiseConfig(**values["noise"])
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return SimConfig(world, noise)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))


DEFAULT_CONFIG = """\
# Benchmark world: figure-eight 20 m x 10 m, 100 keyframes, 500 map points,
# anchor 15 m off the path, true scale 4.6. Lengths in metres.
[world]
trajectory = figure-eight
length = 20
width = 10
loop_fraction = 0.9
n_keyframes = 100
keyframe_period = 1.0
n_map_points = 500
anchor_distance = 15
anchor_height = 2
tag_lever_arm = 0.1 -0.3 -0.2
true_scale = 4.6
seed = 0

[camera]
fx = 400
fy = 400
cx = 320
cy = 240
width = 640
height = 480

[noise]
pixel_sigma = 1.0
range_sigma = 0.10
rotation_walk = 0.001
translation_walk = 0.01
outlier_probability = 0
outlier_magnitude = 0
"""


def default_config() -> SimConfig:
    return parse_config(DEFAULT_CONFIG, "<default>")
