"""TOML run configuration."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

REFERENCE_CONFIG = "twin_2d.toml"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Parsed run configuration; ``raw`` keeps the TOML tables for the manifest."""

    domain_box: list
    fem_box: list
    h: float
    T: float
    cfl_safety: float
    phantom: dict
    media_table: Path | None
    weight: float
    stride: int
    eps_max: float
    sigma_max: float
    pulse: dict
    delta: float
    seed: int
    data_refinements: int
    objective: dict
    initial: dict
    cga: dict
    acga: dict
    output_dir: Path
    snapshot_every: int = 0
    raw: dict = field(default_factory=dict, repr=False)
    source: Path | None = None

    @property
    def dim(self) -> int:
        return len(self.domain_box[0])

    @property
    def dt_levels(self) -> int:
        """Halvings of the base CFL step; covers the data mesh and every ACGA level."""
        return max(self.data_refinements, int(self.acga.get("max_refinements", 0)))


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _number(sec: dict, key: str, default=None, lo=None, hi=None, name="", integer=False):
    if key not in sec:
        if default is None:
            raise ConfigError(f"missing {name}.{key}")
        return default
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name}.{key} must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{name}.{key} must be an integer")
    if lo is not None and v < lo:
        raise ConfigError(f"{name}.{key}={v} is below {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name}.{key}={v} is above {hi}")
    return int(v) if integer else float(v)


def _resolve(base: Path | None, p: str) -> Path:
    path = Path(p)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise ConfigError(f"referenced file {path} does not exist")
    return path


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    geo = _section(raw, "geometry")
    try:
        domain_box = [[float(v) for v in c] for c in geo["domain_box"]]
        fem_box = [[float(v) for v in c] for c in geo["fem_box"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"geometry boxes must be [[lo...], [hi...]] lists: {exc}") from None
    if len(domain_box) != 2 or len(domain_box[0]) not in (2, 3):
        raise ConfigError("geometry.domain_box must be [lo, hi] in 2 or 3 dimensions")
    h = _number(geo, "h", name="geometry", lo=1e-12)

    tim = _section(raw, "time")
    T = _number(tim, "T", name="time", lo=1e-12)
    safety = _number(tim, "cfl_safety", 0.5, name="time", lo=1e-6, hi=1.0)

    phantom = _section(raw, "phantom")
    if "file" in phantom:
        phantom = dict(phantom, file=str(_resolve(base_dir, phantom["file"])))
    elif "dims" not in phantom or "spacing" not in phantom:
        raise ConfigError("[phantom] needs either file or dims + spacing (+ shapes)")

    med = _section(raw, "media")
    table = _resolve(base_dir, med["table"]) if med.get("table") else None
    weight = _number(med, "weight", 1.0, name="media", lo=1e-12)
    stride = _number(med, "stride", 1, name="media", lo=1, integer=True)
    eps_max = _number(med, "eps_max", 10.0, name="media", lo=1.0)
    sigma_max = _number(med, "sigma_max", 10.0, name="media", lo=0.0)

    pulse = _section(raw, "pulse")
    if pulse.get("kind", "bump") not in ("bump", "plane", "zero"):
        raise ConfigError(f"pulse.kind must be bump, plane or zero, got {pulse.get('kind')!r}")

    obs = _section(raw, "observations")
    delta = _number(obs, "delta", 0.0, name="observations", lo=0.0, hi=1.0)
    seed = _number(obs, "seed", 0, name="observations", lo=0, integer=True)
    data_ref = _number(obs, "data_refinements", 0, name="observations", lo=0, hi=4, integer=True)

    acga = _section(raw, "acga")
    _number(acga, "max_refinements", 2, name="acga", lo=0, hi=4, integer=True)
    out = _section(raw, "output")
    snap = _number(out, "snapshot_every", 0, name="output", lo=0, integer=True)
    return RunConfig(
        domain_box=domain_box, fem_box=fem_box, h=h, T=T, cfl_safety=safety,
        phantom=phantom, media_table=table, weight=weight, stride=stride,
        eps_max=eps_max, sigma_max=sigma_max, pulse=pulse, delta=delta, seed=seed,
        data_refinements=data_ref, objective=_section(raw, "objective"),
        initial=_section(raw, "initial"), cga=_section(raw, "cga"), acga=acga,
        output_dir=Path(out.get("dir", "out")), snapshot_every=snap, raw=raw,
        source=None if base_dir is None else base_dir,
    )


def load_config(path=None) -> RunConfig:
    """Load a TOML file; without a path, the packaged 2D twin experiment."""
    if path is None:
        text = resources.files("hybridcip.data").joinpath(REFERENCE_CONFIG).read_text()
        base = None
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        base = path.parent
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return parse_config(raw, base)
