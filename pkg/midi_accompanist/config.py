"""
Run configuration. The file is dotenv-style `key=value` text using the dotted keys below;
values given on the command line win over the file, which wins over the defaults.
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from .accompanist import AccompanistConfig
from .errors import ConfigError
from .followers import FOLLOWER_KINDS
from .followers.hmm import HmmConfig
from .tempo_models import TempoVariant, resolve_params

logger = logging.getLogger(__name__)

MODES = ("live", "replay", "eval")
INTERPOLATIONS = ("step", "linear")
BLENDS = ("mean", "first")

_SCALARS = {
    "mode": ("mode", str),
    "seed": ("seed", int),
    "log": ("log", str),
    "score": ("score", str),
    "score.part_map": ("part_map", str),
    "solo": ("solo", str),
    "output": ("output", str),
    "onset_log": ("onset_log", str),
    "follower.kind": ("follower", str),
    "follower.oltw.window_sec": ("oltw_window_sec", float),
    "follower.oltw.step_sec": ("oltw_step_sec", float),
    "follower.oltw.references": ("references", list),
    "tempo.variant": ("tempo_variant", str),
    "tempo.initial_bpm": ("initial_bpm", float),
    "tempo.interpolation": ("interpolation", str),
    "tempo.blend": ("blend", str),
    "accomp.balance": ("balance", float),
    "accomp.velocity_ema": ("velocity_ema", float),
    "accomp.retime_horizon_ms": ("retime_horizon_ms", float),
    "accomp.max_skip": ("max_skip", int),
    "accomp.reference": ("accomp_reference", str),
    "io.input_port": ("input_port", str),
    "io.output_port": ("output_port", str),
    "io.latency_ms": ("latency_ms", float),
    "io.speed": ("speed", float),
}
_HMM_FIELDS = {f.name: f.type for f in fields(HmmConfig)}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "replay"
    seed: int = 0
    log: str = "accompanist.log"
    score: Optional[str] = None
    part_map: Optional[str] = None
    solo: Optional[str] = None
    output: Optional[str] = None
    onset_log: Optional[str] = None
    follower: str = "oltw"
    hmm: Dict[str, float] = field(default_factory=dict)
    oltw_window_sec: float = 2.0
    oltw_step_sec: float = 0.1
    references: Tuple[str, ...] = ()
    tempo_variant: str = "lte"
    tempo_params: Dict[str, float] = field(default_factory=dict)
    initial_bpm: Optional[float] = None
    interpolation: str = "step"
    blend: str = "mean"
    balance: float = 0.8
    velocity_ema: float = 0.7
    retime_horizon_ms: float = 20.0
    max_skip: int = 4
    accomp_reference: Optional[str] = None
    input_port: Optional[str] = None
    output_port: Optional[str] = None
    latency_ms: float = 0.0
    speed: float = 1.0

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[str]]) -> "RunConfig":
        kwargs: Dict[str, Any] = {}
        hmm: Dict[str, float] = {}
        tempo_params: Dict[str, float] = {}
        for key, raw in values.items():
            if raw is None or raw.strip() == "":
                continue
            raw = raw.strip()
            if key in _SCALARS:
                name, kind = _SCALARS[key]
                kwargs[name] = _convert(key, raw, kind)
            elif key.startswith("follower.hmm."):
                name = key[len("follower.hmm."):]
                if name not in _HMM_FIELDS:
                    raise ConfigError(f"{key}: unknown HMM setting, expected one of {', '.join(sorted(_HMM_FIELDS))}")
                hmm[name] = _convert(key, raw, int if name == "max_skip" else float)
            elif key.startswith("tempo.params."):
                tempo_params[key[len("tempo.params."):]] = _convert(key, raw, float)
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        return cls(hmm=hmm, tempo_params=tempo_params, **kwargs)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Replace the given fields; None means the flag was not given."""
        changes = {k: v for k, v in overrides.items() if v is not None and v != ()}
        if "references" in changes:
            changes["references"] = tuple(changes["references"])
        return replace(self, **changes)

    @property
    def variant(self) -> TempoVariant:
        return TempoVariant.parse(self.tempo_variant)

    def hmm_config(self) -> HmmConfig:
        return HmmConfig(**self.hmm)

    def accompanist_config(self) -> AccompanistConfig:
        return AccompanistConfig(self.balance, self.velocity_ema, self.retime_horizon_ms, self.max_skip)

    def validate(self, require_files: bool = True) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode: {self.mode!r} is not one of {', '.join(MODES)}")
        if self.follower not in FOLLOWER_KINDS:
            raise ConfigError(f"follower.kind: {self.follower!r} is not one of {', '.join(FOLLOWER_KINDS)}")
        try:
            resolve_params(self.variant, self.tempo_params)
        except ValueError as ex:
            raise ConfigError(f"tempo: {ex}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigError(f"tempo.interpolation: {self.interpolation!r} is not one of {', '.join(INTERPOLATIONS)}")
        if self.blend not in BLENDS:
            raise ConfigError(f"tempo.blend: {self.blend!r} is not one of {', '.join(BLENDS)}")
        if self.initial_bpm is not None and self.initial_bpm <= 0:
            raise ConfigError(f"tempo.initial_bpm must be positive, got {self.initial_bpm}")
        if self.oltw_step_sec <= 0 or self.oltw_window_sec <= self.oltw_step_sec:
            raise ConfigError("follower.oltw: step_sec must be positive and smaller than window_sec")
        if self.speed <= 0:
            raise ConfigError(f"io.speed must be positive, got {self.speed}")
        if self.latency_ms < 0:
            raise ConfigError(f"io.latency_ms must not be negative, got {self.latency_ms}")
        try:
            self.hmm_config()
            self.accompanist_config()
        except (TypeError, ValueError) as ex:
            raise ConfigError(str(ex))

        if require_files:
            for key, path in self._paths():
                if not os.path.exists(path):
                    raise ConfigError(f"{key}: file does not exist: {path}")
        if self.mode == "replay" and (not self.score or not self.solo):
            raise ConfigError("replay needs a score and a solo performance")
        if self.mode == "live" and not self.score:
            raise ConfigError("live mode needs a score")
        return self

    def _paths(self) -> List[Tuple[str, str]]:
        paths = [("score", self.score), ("solo", self.solo), ("accomp.reference", self.accomp_reference)]
        paths.extend(("follower.oltw.references", ref) for ref in self.references)
        return [(key, path) for key, path in paths if path]


def _convert(key: str, raw: str, kind):
    if kind is list:
        return tuple(item.strip() for item in raw.split(",") if item.strip())
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}")


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read the run configuration file, or the defaults when there is none."""
    if not path:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"configuration file does not exist: {path}")
    logger.info(f"Reading configuration from {path}")
    return RunConfig.from_mapping(dotenv_values(path))
