"""Scenario configuration: typed sections, YAML parsing, round-trip output.

A configuration file is a nested key-value document with one section per
subsystem. Every key is optional and falls back to the built-in defaults;
unknown keys are rejected rather than ignored so typos cannot silently
change a run. ``serialize_config(parse_config(p))`` reparses to an equal
configuration.
"""

import hashlib
import importlib.resources
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from . import dynamics as dyn
from . import estimation as est
from . import simulation as sim
from .errors import ParseError, ValidationError

__all__ = [
    "FilterConfig", "RunConfig", "ScenarioConfig", "parse_config",
    "serialize_config", "config_digest", "default_config_path",
]


@dataclass
class FilterConfig:
    """Estimator tuning: noise diagonals, sigma scaling, observer gain."""

    q_diag: np.ndarray = field(default_factory=lambda: est.DEFAULT_Q_DIAG.copy())
    r_diag: np.ndarray = field(default_factory=lambda: est.DEFAULT_R_DIAG.copy())
    p0_diag: np.ndarray = field(default_factory=lambda: est.DEFAULT_P0_DIAG.copy())
    phi: float = 1.0
    gamma: float = 2.0
    sigma: float = 0.0
    delta: float = 72.0

    def __post_init__(self):
        self.q_diag = np.asarray(self.q_diag, dtype=float)
        self.r_diag = np.asarray(self.r_diag, dtype=float)
        self.p0_diag = np.asarray(self.p0_diag, dtype=float)

    def validate(self):
        bad = []
        for name, arr, size in (("q_diag", self.q_diag, 19),
                                ("r_diag", self.r_diag, 9),
                                ("p0_diag", self.p0_diag, 19)):
            if arr.shape != (size,):
                bad.append("filter.%s must have %d entries" % (name, size))
            elif np.any(arr < 0.0):
                bad.append("filter.%s entries must be nonnegative" % name)
        # the trailing state component is pinned, so it may carry no noise
        if self.q_diag.shape == (19,) and self.q_diag[-1] != 0.0:
            bad.append("filter.q_diag last entry must be zero")
        if self.p0_diag.shape == (19,) and self.p0_diag[-1] != 0.0:
            bad.append("filter.p0_diag last entry must be zero")
        if not self.phi > 0.0:
            bad.append("filter.phi must be positive")
        if not self.delta > 0.0:
            bad.append("filter.delta must be positive")
        if bad:
            raise ValidationError(bad)
        return self


@dataclass
class RunConfig:
    t_step: float = 0.01
    duration: float = 70.0
    seed: int = 0
    estimators: tuple = ("qukf", "ekf")

    def __post_init__(self):
        self.estimators = tuple(self.estimators)

    def validate(self):
        bad = []
        if not self.t_step > 0.0:
            bad.append("run.t_step must be positive")
        elif not self.duration >= self.t_step:
            bad.append("run.duration must be at least one step")
        unknown = [e for e in self.estimators if e not in ("qukf", "ekf")]
        if unknown:
            bad.append("run.estimators must be drawn from {'qukf', 'ekf'}, "
                       "got %r" % (unknown,))
        if not self.estimators:
            bad.append("run.estimators must not be empty")
        if self.seed != int(self.seed):
            bad.append("run.seed must be an integer")
        if bad:
            raise ValidationError(bad)
        return self


@dataclass
class ScenarioConfig:
    """Everything one closed-loop run needs, grouped by subsystem.

    The observer gain lives in the filter section; the system section
    holds only physical constants.
    """

    system: dyn.SystemParams = field(default_factory=dyn.SystemParams)
    filter: FilterConfig = field(default_factory=FilterConfig)
    admittance: sim.AdmittanceParams = field(default_factory=sim.AdmittanceParams)
    profile: sim.ForceProfile = field(default_factory=sim.default_profile)
    run: RunConfig = field(default_factory=RunConfig)

    # -- assembly helpers --------------------------------------------------

    def system_params(self):
        """System constants with the observer gain folded back in."""
        return replace(self.system, delta=self.filter.delta)

    def noise_config(self):
        return est.NoiseConfig(q_diag=self.filter.q_diag.copy(),
                               r_diag=self.filter.r_diag.copy())

    def scaling(self):
        return (self.filter.phi, self.filter.gamma, self.filter.sigma)

    def validate(self):
        bad = []
        for section in (self.system, self.filter, self.admittance,
                        self.profile, self.run):
            try:
                section.validate()
            except ValidationError as e:
                bad.extend(e.violations)
        if bad:
            raise ValidationError(bad)
        return self

    # -- plain-data conversion ---------------------------------------------

    def to_dict(self):
        system = {}
        for f in fields(dyn.SystemParams):
            if f.name == "delta":
                continue  # serialized under filter
            v = getattr(self.system, f.name)
            system[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return {
            "system": system,
            "filter": {
                "q_diag": self.filter.q_diag.tolist(),
                "r_diag": self.filter.r_diag.tolist(),
                "p0_diag": self.filter.p0_diag.tolist(),
                "phi": self.filter.phi,
                "gamma": self.filter.gamma,
                "sigma": self.filter.sigma,
                "delta": self.filter.delta,
            },
            "admittance": {
                "m_v": self.admittance.m_v.tolist(),
                "c_v": self.admittance.c_v.tolist(),
                "k_v": self.admittance.k_v.tolist(),
            },
            "profile": {
                "segments": [{
                    "start": s.start,
                    "end": s.end,
                    "force": s.force.tolist(),
                    "torque": s.torque.tolist(),
                    "ramp": s.ramp,
                } for s in self.profile.segments],
            },
            "run": {
                "t_step": self.run.t_step,
                "duration": self.run.duration,
                "seed": self.run.seed,
                "estimators": list(self.run.estimators),
            },
        }

    @classmethod
    def from_dict(cls, data, source="<config>"):
        data = data or {}
        if not isinstance(data, dict):
            raise ParseError("%s: top level must be a mapping" % source)
        known_sections = ("system", "filter", "admittance", "profile", "run")
        for key in data:
            if key not in known_sections:
                raise ParseError("%s: unknown section '%s'" % (source, key))

        system = _build_section(dyn.SystemParams, data.get("system"),
                                "system", source, skip=("delta",))
        filt = _build_section(FilterConfig, data.get("filter"),
                              "filter", source)
        admit = _build_section(sim.AdmittanceParams, data.get("admittance"),
                               "admittance", source)
        run = _build_section(RunConfig, data.get("run"), "run", source)
        profile = _parse_profile(data.get("profile"), source)
        return cls(system=system, filter=filt, admittance=admit,
                   profile=profile, run=run)


def _build_section(dc_type, sub, name, source, skip=()):
    """Instantiate a dataclass section, rejecting unknown keys."""
    sub = sub or {}
    if not isinstance(sub, dict):
        raise ParseError("%s: section '%s' must be a mapping" % (source, name))
    spec = {f.name: f for f in fields(dc_type) if f.name not in skip}
    kwargs = {}
    for key, value in sub.items():
        if key not in spec:
            raise ParseError("%s: unknown key '%s.%s'" % (source, name, key))
        kwargs[key] = _coerce(value, getattr(dc_type(), key),
                              "%s.%s" % (name, key), source)
    return dc_type(**kwargs)


def _coerce(value, default, path, source):
    try:
        if isinstance(default, np.ndarray):
            return np.asarray(value, dtype=float)
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(value)
    except (TypeError, ValueError):
        raise ParseError("%s: field '%s' has invalid value %r"
                         % (source, path, value)) from None
    return value


def _parse_profile(sub, source):
    if sub is None:
        return sim.default_profile()
    if not isinstance(sub, dict):
        raise ParseError("%s: section 'profile' must be a mapping" % source)
    for key in sub:
        if key != "segments":
            raise ParseError("%s: unknown key 'profile.%s'" % (source, key))
    segs = sub.get("segments", [])
    if not isinstance(segs, list):
        raise ParseError("%s: profile.segments must be a list" % source)
    allowed = {"start", "end", "force", "torque", "ramp"}
    out = []
    for i, raw in enumerate(segs):
        if not isinstance(raw, dict):
            raise ParseError("%s: profile.segments[%d] must be a mapping"
                             % (source, i))
        for key in raw:
            if key not in allowed:
                raise ParseError("%s: unknown key 'profile.segments[%d].%s'"
                                 % (source, i, key))
        try:
            out.append(sim.ForceSegment(
                start=float(raw.get("start", 0.0)),
                end=float(raw.get("end", 0.0)),
                force=np.asarray(raw.get("force", (0.0, 0.0, 0.0)), dtype=float),
                torque=np.asarray(raw.get("torque", (0.0, 0.0, 0.0)), dtype=float),
                ramp=float(raw.get("ramp", 0.0))))
        except (TypeError, ValueError):
            raise ParseError("%s: profile.segments[%d] has a non-numeric field"
                             % (source, i)) from None
    return sim.ForceProfile(segments=out)


def parse_config(path):
    """Load and validate a configuration file.

    An empty file yields the full default configuration. Raises ParseError
    for unreadable files, syntax errors (with the line number), and unknown
    keys; ValidationError listing every violated invariant.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ParseError("%s: %s" % (path, e.strerror or e)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = "%s:%d" % (path, mark.line + 1) if mark else str(path)
        detail = getattr(e, "problem", None) or "invalid syntax"
        raise ParseError("%s: %s" % (where, detail)) from None
    cfg = ScenarioConfig.from_dict(data, source=str(path))
    cfg.validate()
    return cfg


def serialize_config(cfg):
    """Render a configuration back to text; floats keep full precision."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def config_digest(cfg):
    """Stable content hash of a configuration."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def default_config_path():
    """Path of the annotated default configuration shipped with the package."""
    return importlib.resources.files("aerowrench") / "default_config.yaml"
