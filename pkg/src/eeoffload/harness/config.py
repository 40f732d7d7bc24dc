"""Flat ``key = value`` experiment configuration.

Schema (``#`` starts a comment; list values are comma-separated)::

    model          = path to the early-exit checkpoint            (required)
    classifier     = path to the distortion classifier            (required for mode expert)
    dataset        = shapes-v1 | path to a class-folder tree      (default shapes-v1)
    dataset_seed   = int, seed of the dataset split / generator   (default 7)
    classes        = int, shapes-v1 classes                       (default 3)
    per_class      = int, shapes-v1 images per class              (default 600)
    limit          = int, use only the first N test images        (default: all)
    kinds          = blur,noise
    blur_levels    = subset of 0,1,2,3,4,5                        (0 means pristine)
    noise_levels   = subset of 0,5,10,20,30,40
    p_tar          = float in [0, 1]                              (default 0.8)
    profiles       = names of presets or of profiles_file entries
    profiles_file  = CSV with name,throughput_bps,rtt_ms
    modes          = expert,pristine-baseline[,forced-blur,forced-noise]
    seed           = int, distortion and jitter seed              (default 0)
    jitter_ms      = float, std of Gaussian RTT jitter            (default 0)
    output         = output directory
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from ..distortion import BLUR_LEVELS, NOISE_LEVELS, Kind
from ..runtime.netem import PRESETS, NetworkProfile, load_profiles
from ..runtime.services import Mode


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = ""
    classifier: str = ""
    dataset: str = "shapes-v1"
    dataset_seed: int = 7
    classes: int = 3
    per_class: int = 600
    limit: int | None = None
    kinds: list[Kind] = field(default_factory=lambda: [Kind.BLUR, Kind.NOISE])
    blur_levels: list[int] = field(default_factory=lambda: [0, *BLUR_LEVELS])
    noise_levels: list[int] = field(default_factory=lambda: [0, *NOISE_LEVELS])
    p_tar: float = 0.8
    profiles: list[NetworkProfile] = field(default_factory=lambda: list(PRESETS.values()))
    modes: list[Mode] = field(default_factory=lambda: [Mode.EXPERT, Mode.PRISTINE_BASELINE])
    seed: int = 0
    jitter_ms: float = 0.0
    output: str = "."

    def __post_init__(self):
        self.validate()

    def levels(self, kind: Kind) -> list[int]:
        return self.blur_levels if Kind(kind) is Kind.BLUR else self.noise_levels

    def cells(self) -> list[tuple[Kind, int]]:
        return [(k, lvl) for k in self.kinds for lvl in self.levels(k)]

    def validate(self) -> None:
        if not self.model:
            raise ConfigError("config needs 'model'")
        if not 0.0 <= self.p_tar <= 1.0:
            raise ConfigError(f"p_tar {self.p_tar} outside [0, 1]")
        for k in self.kinds:
            if k is Kind.PRISTINE:
                raise ConfigError("kinds are blur and/or noise; pristine is level 0 of either")
        for name, levels, grid in (("blur_levels", self.blur_levels, BLUR_LEVELS),
                                   ("noise_levels", self.noise_levels, NOISE_LEVELS)):
            bad = [lvl for lvl in levels if lvl != 0 and lvl not in grid]
            if bad:
                raise ConfigError(f"{name} {bad} outside the grid (0,) + {grid}")
            if len(set(levels)) != len(levels):
                raise ConfigError(f"{name} has duplicates")
        if Mode.EXPERT in self.modes and not self.classifier:
            raise ConfigError("mode expert needs 'classifier'")
        if not self.profiles or not self.modes or not self.kinds:
            raise ConfigError("kinds, profiles and modes must be nonempty")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be positive")


_INT_KEYS = {"dataset_seed", "classes", "per_class", "limit", "seed"}
_FLOAT_KEYS = {"p_tar", "jitter_ms"}
_STR_KEYS = {"model", "classifier", "dataset", "output"}


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        raw[key] = value.strip()
    known = {f.name for f in fields(ExperimentConfig)} | {"profiles_file"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")

    kw: dict = {}
    try:
        for key, value in raw.items():
            if key in _INT_KEYS:
                kw[key] = int(value)
            elif key in _FLOAT_KEYS:
                kw[key] = float(value)
            elif key in _STR_KEYS:
                kw[key] = value
        if "kinds" in raw:
            kw["kinds"] = [Kind(v) for v in _split(raw["kinds"])]
        for key in ("blur_levels", "noise_levels"):
            if key in raw:
                kw[key] = [int(v) for v in _split(raw[key])]
        if "modes" in raw:
            kw["modes"] = [Mode(v) for v in _split(raw["modes"])]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    def resolve(p: str) -> str:
        if not p or base_dir is None or Path(p).is_absolute():
            return p
        return str(base_dir / p)

    extra = load_profiles(resolve(raw["profiles_file"])) if "profiles_file" in raw else {}
    table = {**PRESETS, **extra}
    if "profiles" in raw:
        names = _split(raw["profiles"])
        missing = [n for n in names if n not in table]
        if missing:
            raise ConfigError(f"unknown profiles {missing}; known: {sorted(table)}")
        kw["profiles"] = [table[n] for n in names]
    for key in ("model", "classifier"):
        if key in kw:
            kw[key] = resolve(kw[key])
    if "dataset" in kw and kw["dataset"] != "shapes-v1":
        kw["dataset"] = resolve(kw["dataset"])
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (profiles written by name, presets only)."""
    lines = [
        f"model = {cfg.model}",
        f"classifier = {cfg.classifier}",
        f"dataset = {cfg.dataset}",
        f"dataset_seed = {cfg.dataset_seed}",
        f"classes = {cfg.classes}",
        f"per_class = {cfg.per_class}",
        f"kinds = {','.join(k.value for k in cfg.kinds)}",
        f"blur_levels = {','.join(map(str, cfg.blur_levels))}",
        f"noise_levels = {','.join(map(str, cfg.noise_levels))}",
        f"p_tar = {cfg.p_tar!r}",
        f"profiles = {','.join(p.name for p in cfg.profiles)}",
        f"modes = {','.join(m.value for m in cfg.modes)}",
        f"seed = {cfg.seed}",
        f"jitter_ms = {cfg.jitter_ms!r}",
        f"output = {cfg.output}",
    ]
    if cfg.limit is not None:
        lines.append(f"limit = {cfg.limit}")
    return "\n".join(lines) + "\n"
