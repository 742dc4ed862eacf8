"""Run configuration: an INI file with one section per concern.

Every field has a default, so a config file only needs the values that
differ. ``RunConfig.to_ini`` writes every field; ``RunConfig.from_ini``
reads it back to an equal object.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, fields

from .errors import ConfigError
from .util import parse_number

COMMANDS = ("constants", "exact", "search", "validate-appendix")
DESIGNS = ("orthogonal", "exchangeable", "equicorrelated", "one-vs-rest", "nested", "csv", "gram")

# section of every field; fields in RUNTIME do not affect results
SECTIONS = {
    "run": ("command", "seed", "alpha", "r", "draws", "threads", "out"),
    "design": ("design", "p", "n", "a", "c", "rho", "design_csv", "gram", "protected", "embedding_seed"),
    "exact": ("figure", "c_threshold", "rhos", "rho_points", "rho_max", "zeta_max", "zeta_points"),
    "search": ("selectors", "ks", "targets", "plan", "checkpoint", "timing"),
    "appendix": ("n_selectors", "n_points", "replications", "m0", "m1"),
}
RUNTIME = ("threads", "out", "checkpoint")


@dataclass
class RunConfig:
    command: str = "constants"
    seed: int = 0
    alpha: float = 0.05
    r: str = ""
    draws: int = 200_000
    threads: int = 1
    out: str = "-"

    design: str = "equicorrelated"
    p: int = 10
    n: int = 30
    a: float = 10.0
    c: str = ""
    rho: float = 0.9
    design_csv: str = ""
    gram: str = ""
    protected: int = 1
    embedding_seed: str = "1"

    figure: int = 1
    c_threshold: str = "sqrt2"
    rhos: str = "0.9,0.5"
    rho_points: int = 41
    rho_max: float = 0.995
    zeta_max: float = 6.0
    zeta_points: int = 241

    selectors: str = "aic,bic,lasso"
    ks: str = "naive,posi1,posi-all-subsets"
    targets: str = "selected,full"
    plan: str = "10000x100,1000x1000,1x500000"
    checkpoint: str = ""
    timing: bool = False

    n_selectors: int = 50
    n_points: int = 10
    replications: int = 100_000
    m0: str = "2,3"
    m1: str = "1,2"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        for name in self.words("design") or [""]:
            if name not in DESIGNS:
                raise ConfigError(f"unknown design {name!r}; expected one of {', '.join(DESIGNS)}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("p", "n", "draws", "threads", "rho_points", "zeta_points", "n_selectors", "n_points", "replications", "protected"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.figure not in (1, 2, 3):
            raise ConfigError(f"figure must be 1, 2 or 3, got {self.figure}")
        if not -1 < self.rho < 1:
            raise ConfigError(f"rho must lie in (-1, 1), got {self.rho}")
        if not 0 <= self.rho_max < 1:
            raise ConfigError(f"rho_max must lie in [0, 1), got {self.rho_max}")
        if self.r:
            self.dof()
        if self.embedding_seed.strip().lower() not in ("", "none") and not self.embedding_seed.strip().isdigit():
            raise ConfigError(f"embedding_seed must be a nonnegative integer or 'none', got {self.embedding_seed!r}")

    # -- derived values -------------------------------------------------

    def dof(self, default=math.inf):
        if not self.r:
            return default
        try:
            r = parse_number(self.r)
        except ValueError as exc:
            raise ConfigError(f"bad r {self.r!r}: {exc}") from None
        if r != math.inf and (r < 1 or r != int(r)):
            raise ConfigError(f"r must be a positive integer or inf, got {self.r!r}")
        return r if r == math.inf else int(r)

    def numbers(self, name) -> list[float]:
        text = getattr(self, name)
        try:
            return [parse_number(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad {name} {text!r}: {exc}") from None

    def words(self, name) -> list[str]:
        return [t.strip().lower() for t in getattr(self, name).split(",") if t.strip()]

    def stage_sizes(self):
        out = []
        for part in self.words("plan"):
            try:
                count, reps = part.split("x")
                out.append((int(parse_number(count)), int(parse_number(reps))))
            except ValueError:
                raise ConfigError(f"bad plan stage {part!r}; expected COUNTxREPLICATIONS") from None
        return tuple(out)

    # -- serialization --------------------------------------------------

    def to_ini(self, runtime: bool = True) -> str:
        lines = []
        for section, names in SECTIONS.items():
            names = [n for n in names if runtime or n not in RUNTIME]
            lines.append(f"[{section}]")
            lines.extend(f"{n} = {_format(getattr(self, n))}" for n in names)
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        types = {f.name: f.type for f in fields(cls)}
        owner = {n: s for s, names in SECTIONS.items() for n in names}
        values = dataclasses.asdict(base) if base is not None else {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if owner.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path, base=None) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_ini(fh.read(), base)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, raw, typ):
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(parse_number(raw))
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    return raw
