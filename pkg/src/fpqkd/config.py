"""Run configuration: an INI file with one section per stage.

Every key is optional; missing keys take the documented defaults. Unknown
sections or keys are rejected so typos cannot silently fall back to a
default. Custom regions may be given as ``[region:<label>]`` sections, which
then replace the standard geometry.

Example::

    [channel]
    loss_db = 7.2, 11.6, 16.7
    misalignment_e_d = 0.012

    [run]
    n_samples = 10000000
    seed = 7
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .detection import DEFAULT_E_D, ChannelParams
from .postselect import (ConfigurationError, Region, RegionParams, ReshapeSpec, Window,
                         compute_C, standard_regions)
from .source import SourceConfig


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration; carries the field path."""



@dataclass(frozen=True)
class ChannelSection:
    loss_db: tuple[float, ...] = (16.7,)
    detector_efficiency: float = 0.1
    dark_prob: float = 1e-6
    misalignment_e_d: float = DEFAULT_E_D
    basis_split: float = 0.5

    def at(self, loss: float) -> ChannelParams:
        return ChannelParams(loss, self.detector_efficiency, self.dark_prob,
                             self.misalignment_e_d, self.basis_split)


@dataclass(frozen=True)
class DecoySection:
    n_cut: int = 10
    k_sigma: float = 0.0
    # Monte Carlo runs: "empirical" (region averages over the sampled pulses)
    # or "quadrature" (integrals of the reshaped density)
    moments: str = "empirical"


@dataclass(frozen=True)
class KeyrateSection:
    f_e: float = 1.16


@dataclass(frozen=True)
class SweepSection:
    loss_min: float = 0.0
    loss_max: float = 40.0
    loss_step: float = 1.0


@dataclass(frozen=True)
class RunSection:
    n_samples: int = 10_000_000
    seed: int = 0
    shards: int = 1
    output: str = "out"


@dataclass(frozen=True)
class RunConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    reshape: str | float = "auto"
    regions: RegionParams = field(default_factory=RegionParams)
    custom_regions: tuple[Region, ...] = ()
    channel: ChannelSection = field(default_factory=ChannelSection)
    decoy: DecoySection = field(default_factory=DecoySection)
    keyrate: KeyrateSection = field(default_factory=KeyrateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)

    def reshape_spec(self) -> ReshapeSpec:
        mu_max = self.source.mu_max_per_pol
        c = compute_C(mu_max) if self.reshape == "auto" else float(self.reshape)
        return ReshapeSpec(c, mu_max)

    def region_list(self) -> list[Region]:
        return list(self.custom_regions) if self.custom_regions else standard_regions(self.regions)

    def validate(self) -> "RunConfig":
        try:
            self.region_list()
            self.reshape_spec()
            for loss in self.channel.loss_db:
                self.channel.at(loss)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.decoy.n_cut < 2:
            raise ConfigError("decoy.n_cut: must be >= 2")
        if self.decoy.moments not in ("empirical", "quadrature"):
            raise ConfigError("decoy.moments: must be 'empirical' or 'quadrature'")
        if self.decoy.k_sigma < 0:
            raise ConfigError("decoy.k_sigma: must be >= 0")
        if self.keyrate.f_e < 1:
            raise ConfigError("keyrate.f_e: must be >= 1")
        if self.run.n_samples < 1 or self.run.shards < 1:
            raise ConfigError("run.n_samples and run.shards must be positive")
        if not self.channel.loss_db:
            raise ConfigError("channel.loss_db: at least one loss point is required")
        if self.sweep.loss_step <= 0 or self.sweep.loss_max < self.sweep.loss_min:
            raise ConfigError("sweep: need loss_step > 0 and loss_max >= loss_min")
        return self


# section name -> (attribute on RunConfig, dataclass type)
_SECTIONS = {
    "source": ("source", SourceConfig),
    "regions": ("regions", RegionParams),
    "channel": ("channel", ChannelSection),
    "decoy": ("decoy", DecoySection),
    "keyrate": ("keyrate", KeyrateSection),
    "sweep": ("sweep", SweepSection),
    "run": ("run", RunSection),
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _coerce(path: str, default, text: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {text!r}") from None


def _parse_region(label: str, items: dict[str, str]) -> Region:
    allowed = {"polar_min", "polar_max", "radius_max", "state", "windows"}
    extra = set(items) - allowed
    if extra:
        raise ConfigError(f"region:{label}.{sorted(extra)[0]}: unknown key")
    try:
        windows = []
        for chunk in items.get("windows", "").split(","):
            if chunk.strip():
                lo, hi, state = chunk.split(":")
                windows.append(Window(float(lo), float(hi), state.strip()))
        radius = items.get("radius_max", "box").strip()
        return Region(
            label,
            float(items["polar_min"]),
            float(items["polar_max"]),
            None if radius == "box" else float(radius),
            tuple(windows),
            items.get("state") or None,
        )
    except KeyError as exc:
        raise ConfigError(f"region:{label}.{exc.args[0]}: required") from None
    except (ValueError, ConfigurationError) as exc:
        raise ConfigError(f"region:{label}: {exc}") from None


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        detail = exc.message.splitlines()[0]
        if isinstance(exc, configparser.ParsingError) and exc.errors:
            line, text = exc.errors[0]
            detail = "cannot parse " + text.strip().strip("'").replace("\\n", "")
        where = f" (line {line})" if line else ""
        raise ConfigError(f"config parse error{where}: {detail}") from None

    cfg = RunConfig()
    updates = {}
    regions = []
    for section in parser.sections():
        items = dict(parser.items(section))
        if section.startswith("region:"):
            regions.append(_parse_region(section.split(":", 1)[1], items))
            continue
        if section == "reshape":
            extra = set(items) - {"C"}
            if extra:
                raise ConfigError(f"reshape.{sorted(extra)[0]}: unknown key")
            c = items.get("C", "auto").strip()
            updates["reshape"] = "auto" if c == "auto" else _coerce("reshape.C", 0.0, c)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        attr, cls = _SECTIONS[section]
        current = getattr(cfg, attr)
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, text in items.items():
            if key not in known:
                raise ConfigError(f"{section}.{key}: unknown key")
            kw[key] = _coerce(f"{section}.{key}", getattr(current, key), text)
        try:
            updates[attr] = replace(current, **kw)
        except (ValueError, ConfigurationError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    if regions:
        updates["custom_regions"] = tuple(regions)
    return replace(cfg, **updates).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return loads(text)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(cls)}
    parser["reshape"] = {"C": _fmt(cfg.reshape)}
    for r in cfg.custom_regions:
        sec = {"polar_min": _fmt(r.polar_min), "polar_max": _fmt(r.polar_max),
               "radius_max": "box" if r.radius_max is None else _fmt(r.radius_max)}
        if r.state:
            sec["state"] = r.state
        if r.windows:
            sec["windows"] = ", ".join(f"{w.lo!r}:{w.hi!r}:{w.state}" for w in r.windows)
        parser[f"region:{r.label}"] = sec
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    """Digest of every setting that can change results (output path and shards cannot)."""
    neutral = replace(cfg, run=replace(cfg.run, output="", shards=1))
    return hashlib.sha256(dumps(neutral).encode()).hexdigest()[:16]

