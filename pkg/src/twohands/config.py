"""Run configuration: one ``section.key = value`` per line.

Grammar
-------
* Blank lines and lines starting with ``#`` are ignored; ``#`` after a value
  starts a comment unless it sits inside quotes.
* Every other line is ``section.key = value`` (or ``key = value`` for the
  top-level keys ``seed``, ``dataset`` and ``output``).
* Values are Python literals (``0.04``, ``20``, ``(0.01, 0.006)``,
  ``'text'``), the words ``true``/``false``/``none``, or a bare word, which
  is read as a string.
* A key may appear at most once. Unknown sections or keys are errors.

Sections mirror the library's configuration objects: ``model``, ``camera``,
``weights``, ``solver``, ``observation``, ``oracle``, ``depth_noise``,
``scene``, ``fit`` and ``ablation``.
"""

import ast
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .correspond import OracleNoise
from .depthio import CameraIntrinsics, NoiseConfig
from .energy import BLOCKS, EnergyWeights
from .handmodel import ModelConfig
from .pipeline import ObservationConfig
from .scenes import MOTIONS
from .solver import SolverConfig

CORRESPONDENCE_MODES = ("oracle", "closest_seg", "closest_noseg")
INIT_MODES = ("perturbed", "gt", "interpenetrating")


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        where = f"line {line}: " if line is not None else ""
        what = f"{key}: " if key is not None else ""
        super().__init__(f"{where}{what}{message}")
        self.line, self.key = line, key


@dataclass(frozen=True)
class OracleSettings:
    color_sigma: float = 0.01
    snap_vertices: bool = True
    depth_noise: bool = True


@dataclass(frozen=True)
class SceneSettings:
    motion: str = "separated_wave"
    n_frames: int = 10

    def validate(self):
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")


@dataclass(frozen=True)
class FitSettings:
    init: str = "perturbed"
    perturb_translation: float = 0.02
    perturb_articulation: float = 0.5
    interpenetration: float = 0.045
    overlays: bool = False
    pipelined: bool = False

    def validate(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")


@dataclass(frozen=True)
class AblationSettings:
    disable_point: bool = False
    disable_plane: bool = False
    disable_shape: bool = False
    disable_pose: bool = False
    disable_temp: bool = False
    disable_coll: bool = False
    correspondence: str = "oracle"

    def validate(self):
        if self.correspondence not in CORRESPONDENCE_MODES:
            raise ValueError(f"correspondence must be one of {CORRESPONDENCE_MODES}")


_NULLABLE = {("solver", "facing_cutoff")}
_TOP_LEVEL = ("seed", "dataset", "output")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    depth_noise: NoiseConfig = field(default_factory=NoiseConfig)
    scene: SceneSettings = field(default_factory=SceneSettings)
    fit: FitSettings = field(default_factory=FitSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    seed: int = 0
    dataset: str = ""
    output: str = ""

    # ------------------------------------------------------------------
    def effective_weights(self):
        """Energy weights with ablated terms set to zero."""
        off = {f"w_{b}": 0.0 for b in BLOCKS if getattr(self.ablation, f"disable_{b}")}
        return replace(self.weights, **off)

    def oracle_noise(self, seed):
        return OracleNoise(
            color_sigma=self.oracle.color_sigma,
            depth=self.depth_noise if self.oracle.depth_noise else None,
            seed=seed, snap_vertices=self.oracle.snap_vertices,
        )

    def items(self):
        """Flat ``(key, value)`` pairs in canonical order."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out += [(f"{f.name}.{g.name}", getattr(v, g.name)) for g in fields(v)]
            else:
                out.append((f.name, v))
        return out

    def serialize(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, str):
        return repr(v)
    if isinstance(v, tuple):
        return repr(tuple(_plain(x) for x in v))
    return repr(_plain(v))


def _plain(x):
    if isinstance(x, tuple):
        return tuple(_plain(y) for y in x)
    if isinstance(x, bool):
        return x
    if isinstance(x, int):
        return int(x)
    if isinstance(x, float):
        return float(x)
    return x


def _strip_comment(text):
    quote = None
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return text[:i]
    return text


def _literal(raw):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        if raw.replace("_", "").replace("-", "").replace(".", "").replace("/", "").isalnum():
            return raw
        raise ValueError(f"cannot read value {raw!r}")


def _coerce(value, default, nullable):
    if value is None:
        if nullable or default is None:
            return None
        raise ValueError("none is not allowed here")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if not isinstance(value, tuple):
            raise ValueError(f"expected a tuple, got {value!r}")
        return _coerce_tuple(value, default)
    return value


def _coerce_tuple(value, default):
    if default and isinstance(default[0], tuple):
        if not all(isinstance(v, tuple) for v in value):
            raise ValueError("expected a tuple of tuples")
        return tuple(_coerce_tuple(v, default[0]) for v in value)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ValueError(f"expected numbers, got {value!r}")
    return tuple(float(v) for v in value)


def _validate(cfg, where):
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        check = getattr(sec, "validate", None)
        if check is not None:
            try:
                check()
            except ValueError as exc:
                raise ConfigError(str(exc), where.get(f.name), f.name) from None


def apply_overrides(cfg, pairs, lines=None):
    """Return ``cfg`` with ``[(key, raw_value)]`` applied; ``lines`` gives diagnostics positions."""
    sections = {}
    top = {}
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    seen = set()
    where = {}  # section -> first line mentioning it
    for i, (key, raw) in enumerate(pairs):
        line = lines[i] if lines else None
        where.setdefault(key.split(".", 1)[0], line)
        if key in seen:
            raise ConfigError("duplicate key", line, key)
        seen.add(key)
        try:
            value = _literal(raw.strip())
        except ValueError as exc:
            raise ConfigError(str(exc), line, key) from None
        if "." not in key:
            if key not in _TOP_LEVEL:
                raise ConfigError("unknown key", line, key)
            try:
                top[key] = _coerce(value, defaults[key], False)
            except ValueError as exc:
                raise ConfigError(str(exc), line, key) from None
            continue
        sec, name = key.split(".", 1)
        if sec not in defaults or not dataclasses.is_dataclass(defaults[sec]):
            raise ConfigError("unknown section", line, key)
        base = defaults[sec]
        names = {g.name for g in fields(base)}
        if name not in names:
            raise ConfigError(f"unknown key (valid: {', '.join(sorted(names))})", line, key)
        try:
            sections.setdefault(sec, {})[name] = _coerce(value, getattr(base, name), (sec, name) in _NULLABLE)
        except ValueError as exc:
            raise ConfigError(str(exc), line, key) from None
    new = {}
    for sec, kw in sections.items():
        try:
            new[sec] = replace(defaults[sec], **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), where.get(sec), sec) from None
    out = replace(cfg, **new, **top)
    _validate(out, where)
    return out


def parse(text, base=None):
    """Parse config text on top of ``base`` (defaults when omitted)."""
    pairs, lines = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw).strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", n)
        key, value = body.split("=", 1)
        key = key.strip()
        if not key or not value.strip():
            raise ConfigError("empty key or value", n, key or None)
        pairs.append((key, value))
        lines.append(n)
    return apply_overrides(base or RunConfig(), pairs, lines)


def load(path, overrides=()):
    """Read a config file (or defaults for ``None``) and apply ``key=value`` override strings."""
    cfg = RunConfig() if path is None else parse(Path(path).read_text(), RunConfig())
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    return apply_overrides(cfg, pairs) if pairs else cfg
