"""Physical parameters of the single-track two-wheeled robot and their config I/O.

Config files are INI-style key/value documents. Robot constants live in a
``[robot]`` section (a file with no section header is read as that section).
Angles are given in degrees unless suffixed with ``rad``; they are stored in
radians.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from sttw_drift import _kernels as K


class ConfigError(ValueError):
    """Raised when a config document cannot be parsed or fails validation."""


ANGLE_KEYS = frozenset({"lam"})

# config key -> field name; "lambda" is a Python keyword
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {"lam": "lambda"}

_UNITS = {
    "m": "kg",
    "Ic_xx": "kg m^2, body roll inertia",
    "Ic_zz": "kg m^2, body yaw inertia",
    "I_f": "kg m^2, front wheel spin inertia",
    "I_r": "kg m^2, rear wheel spin inertia",
    "a": "m, COM to rear contact (horizontal)",
    "b": "m, wheelbase",
    "c": "m, trail (stored, unused by the model)",
    "h": "m, COM height",
    "r": "m, wheel radius",
    "lam": "caster angle, degrees unless suffixed 'rad'",
    "mu": "rear Coulomb friction coefficient",
    "g": "m/s^2",
}


@dataclass(frozen=True)
class RobotParams:
    m: float = 5.435
    Ic_xx: float = 3.31e-2
    Ic_zz: float = 9.40e-2
    I_f: float = 2.03e-2
    I_r: float = 2.17e-2
    a: float = 0.164
    b: float = 0.402
    c: float = 0.023
    h: float = 0.195
    r: float = 0.100
    lam: float = math.radians(25.0)
    mu: float = 0.3
    g: float = 9.81

    def __post_init__(self) -> None:
        violated = check_invariants(self)
        if violated:
            raise ConfigError(f"invalid robot parameters: violates {violated}")
        vec = self.as_array()
        vec.flags.writeable = False
        object.__setattr__(self, "_kernel_vec", vec)

    def replace(self, **changes) -> "RobotParams":
        return RobotParams(**{**asdict(self), **changes})

    def as_array(self) -> np.ndarray:
        """Flat vector in the layout expected by the compiled kernels."""
        vec = np.empty(K.N_PARAMS)
        vec[K.P_M] = self.m
        vec[K.P_IXX] = self.Ic_xx
        vec[K.P_IZZ] = self.Ic_zz
        vec[K.P_IF] = self.I_f
        vec[K.P_IR] = self.I_r
        vec[K.P_A] = self.a
        vec[K.P_B] = self.b
        vec[K.P_C] = self.c
        vec[K.P_H] = self.h
        vec[K.P_R] = self.r
        vec[K.P_LAM] = self.lam
        vec[K.P_MU] = self.mu
        vec[K.P_G] = self.g
        return vec


def check_invariants(p: RobotParams) -> str | None:
    """Return the name of the first violated invariant, or None."""
    for name in ("m", "Ic_xx", "Ic_zz", "I_f", "I_r", "b", "h", "r", "g"):
        value = getattr(p, name)
        if not (math.isfinite(value) and value > 0):
            return f"{name} > 0"
    if not 0 < p.a:
        return "0 < a"
    if not p.a < p.b:
        return "a < b"
    if not p.mu >= 0:
        return "mu >= 0"
    if not 0 <= p.lam < 0.5 * math.pi:
        return "0 <= lambda < pi/2"
    if not p.c >= 0:
        return "c >= 0"
    return None


def default_params() -> RobotParams:
    return RobotParams()


def parse_angle(text: str) -> float:
    """Parse '25', '25deg' or '0.43rad' into radians."""
    s = text.strip().lower()
    try:
        if s.endswith("rad"):
            return float(s[:-3])
        if s.endswith("deg"):
            s = s[:-3]
        return math.radians(float(s))
    except ValueError as exc:
        raise ConfigError(f"cannot parse angle {text!r}") from exc


def read_config(source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (Ic_xx)
    text = source
    stripped = [ln.strip() for ln in source.splitlines()]
    first = next((ln for ln in stripped if ln and ln[0] not in "#;"), "")
    if first and not first.startswith("["):
        text = "[robot]\n" + source
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return parser


def params_from_section(section) -> RobotParams:
    known = {f.name for f in fields(RobotParams)}
    values = asdict(default_params())
    for key, raw in section.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown parameter key {key!r}")
        if name in ANGLE_KEYS:
            values[name] = parse_angle(raw)
        else:
            try:
                values[name] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"cannot parse {key} = {raw!r}") from exc
    return RobotParams(**values)


def load_params(source: str) -> RobotParams:
    """Build validated parameters from config text; missing keys keep their defaults.

    Unknown keys inside ``[robot]`` are rejected. Other sections belong to
    other consumers (controller, scenario) and are ignored here.
    """
    parser = read_config(source)
    if not parser.has_section("robot"):
        return default_params()
    return params_from_section(parser["robot"])


def load_params_file(path) -> RobotParams:
    with open(path, encoding="utf-8") as fh:
        return load_params(fh.read())


def dump_params(p: RobotParams) -> str:
    """Serialize to config text that ``load_params`` reads back exactly."""
    lines = ["[robot]"]
    for f in fields(RobotParams):
        value = getattr(p, f.name)
        key = _FIELD_KEYS.get(f.name, f.name)
        text = f"{value!r} rad" if f.name in ANGLE_KEYS else repr(value)
        lines.append(f"{key} = {text}  # {_UNITS[f.name]}")
    return "\n".join(lines) + "\n"
