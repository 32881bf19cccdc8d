"""Pipeline configuration and its ``[section] key = value`` text format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .attention import FusionConfig, GalConfig
from .matching import LossConfig, MatchConfig
from .pose import EvalConfig, RansacConfig

SECTIONS = {
    "fusion": FusionConfig,
    "gal": GalConfig,
    "loss": LossConfig,
    "match": MatchConfig,
    "ransac": RansacConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    image_height: int = 288
    image_width: int = 512
    num_points: int = 20480
    num_groups: int = 512
    patch_size: int = 16
    seed: int = 0
    noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    oracle_fine_temperature: float = 0.05
    bypass_fusion: bool = False
    fusion_output_scale: float = 0.01  # output projections of the random fusion weights
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gal: GalConfig = field(default_factory=GalConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    match: MatchConfig = field(default_factory=lambda: MatchConfig(coarse_temperature=0.01,
                                                                   fine_temperature=0.05))
    ransac: RansacConfig = field(default_factory=RansacConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("patch_size must divide the input size")
        if self.num_points < 1 or self.num_groups < 1:
            raise ValueError("num_points and num_groups must be >= 1")
        if not 0 <= self.outlier_rate <= 1:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj) if f.name not in SECTIONS]


def serialize(cfg: PipelineConfig) -> str:
    lines = ["[pipeline]"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in _scalar_fields(cfg)]
    for name in SECTIONS:
        sub = getattr(cfg, name)
        lines += ["", f"[{name}]"]
        lines += [f"{f.name} = {_format(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"


def parse(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse config text; keys not present keep the values of ``base``.

    Unknown sections or keys are errors, so typos do not pass silently.
    """
    base = base or PipelineConfig()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(str(exc).splitlines()[0]) from None
    top = {}
    subs = {}
    for section in cp.sections():
        if section == "pipeline":
            target, known = base, {f.name for f in _scalar_fields(base)}
        elif section in SECTIONS:
            target, known = getattr(base, section), {f.name for f in dataclasses.fields(getattr(base, section))}
        else:
            raise ValueError(f"unknown section [{section}]")
        values = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ValueError(f"[{section}] unknown key {key!r}")
            values[key] = _parse(raw, getattr(target, key), f"[{section}] {key}")
        if section == "pipeline":
            top = values
        else:
            subs[section] = dataclasses.replace(target, **values)
    return dataclasses.replace(base, **top, **subs)


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
