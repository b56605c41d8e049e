"""Experiment configuration: presets, desk/paper-scale defaults, strict schema."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class Preset(str, Enum):
    MIA_NETWORK = "MiaNetwork"
    MIA_LIRA = "MiaLira"
    AIA = "Aia"
    GIA_LADDER = "GiaLadder"
    GIA_SEGMENT_VIT = "GiaSegmentViT"
    ACTIVATION_ABLATION = "ActivationAblation"
    PATCHIFY_LN_ABLATION = "PatchifyLnAblation"
    DEFENSE_COMPONENTS = "DefenseComponents"
    DEFENSE_DPSGD = "DefenseDpsgd"
    DEFENSE_DPSGD_STEM = "DefenseDpsgdStem"


GIA_MODELS = {"width_div": 4, "depth_div": 9}
MIA_MODELS = {"width_div": 16, "depth_div": 3}
VIT = {"family": "vit", "patch": 4, "dim": 64, "depth": 4, "heads": 4}
TRAIN = {"optimizer": "Adam", "lr": 3e-3, "epochs": 30, "batch_size": 32}
MEMBERSHIP_DATA = {"source": "synthetic", "n": 512, "size": 16, "signal": 0.5, "noise": 1.0,
                   "seed": 0, "root": None}
GIA_DATA = {"source": "synthetic", "size": 16, "signal": 1.0, "noise": 0.5, "seed": 1000,
            "root": None}
GIA_ATTACK = {"iterations": 1000, "tv_weight": 1e-4, "lr": 0.1, "batch": 1, "cost": "CosineSimilarity"}
TOGGLE_SETS = [[], ["RestoreActivations"], ["ResNetStem"], ["UseBatchNorm"],
               ["RestoreActivations", "ResNetStem", "UseBatchNorm"]]
MASKS = [[a, b, c] for a in (True, False) for b in (True, False) for c in (True, False)]


def _ladder(**kw):
    return {"family": "ladder", **kw}


# Desk-scale defaults. Every key a user may set appears here; anything else is rejected.
DEFAULTS: dict[Preset, dict] = {
    Preset.MIA_NETWORK: {
        "arch": _ladder(steps=[1, 12], **MIA_MODELS), "recipe": dict(TRAIN),
        "attack": {"epochs": 100, "victim": "trained"}, "data": dict(MEMBERSHIP_DATA)},
    Preset.MIA_LIRA: {
        "arch": _ladder(steps=[1, 12], **MIA_MODELS), "recipe": dict(TRAIN),
        "attack": {"shadows": 16, "victim": "trained"}, "data": {**MEMBERSHIP_DATA, "n": 256}},
    Preset.AIA: {
        "arch": _ladder(steps=[1, 12], **MIA_MODELS), "recipe": dict(TRAIN),
        "attack": {"epochs": 100, "layer": None},
        "data": {**MEMBERSHIP_DATA, "n": 1024, "palettes": 4, "attribute": "palette"}},
    Preset.GIA_LADDER: {
        "arch": _ladder(steps=[1, 4, 10, 12], **GIA_MODELS), "recipe": {},
        "attack": dict(GIA_ATTACK), "data": dict(GIA_DATA)},
    Preset.GIA_SEGMENT_VIT: {
        "arch": dict(VIT), "recipe": {},
        "attack": {**GIA_ATTACK,
                   "selections": ["All", "Stem", "Attention", "MLP", "Norm", "Head"]},
        "data": dict(GIA_DATA)},
    Preset.ACTIVATION_ABLATION: {
        "arch": _ladder(base_step=9, **GIA_MODELS), "recipe": {},
        "attack": {**GIA_ATTACK, "masks": MASKS, "activations": ["ReLU", "GELU"]},
        "data": dict(GIA_DATA)},
    Preset.PATCHIFY_LN_ABLATION: {
        "arch": _ladder(base_step=12, **GIA_MODELS), "recipe": {},
        "attack": {**GIA_ATTACK, "stems": ["ResNet", "Patchify"], "norms": ["BatchNorm", "LayerNorm"]},
        "data": dict(GIA_DATA)},
    Preset.DEFENSE_COMPONENTS: {
        "arch": _ladder(base_step=12, **GIA_MODELS), "recipe": {},
        "attack": {**GIA_ATTACK, "toggle_sets": TOGGLE_SETS}, "data": dict(GIA_DATA)},
    Preset.DEFENSE_DPSGD: {
        "arch": _ladder(steps=[12], **MIA_MODELS), "recipe": dict(TRAIN),
        "attack": {"shadows": 8, "sigmas": [0.0, 0.5, 2.0], "clip_norm": 1.0, "target": "All"},
        "data": {**MEMBERSHIP_DATA, "n": 256}},
}
DEFAULTS[Preset.DEFENSE_DPSGD_STEM] = copy.deepcopy(DEFAULTS[Preset.DEFENSE_DPSGD])
DEFAULTS[Preset.DEFENSE_DPSGD_STEM]["attack"]["target"] = ["Stem"]

# Optional keys whose defaults are absent (None means "not set").
OPTIONAL = {"arch": {"spec", "num_classes", "mlp_ratio"},
            "recipe": {"weight_decay", "momentum_or_betas", "schedule", "mixup", "cutmix",
                       "label_smoothing"},
            "data": {"palettes", "palette_strength", "attribute", "manifest", "num_classes"},
            "attack": set()}

# Full-scale overrides applied by --paper-scale (published recipes, sizes and attack length).
PAPER_SCALE = {
    "gia": {"arch": {"width_div": 1, "depth_div": 1}, "attack": {"iterations": 3000},
            "data": {"size": 32}},
    "membership": {"arch": {"width_div": 1, "depth_div": 1}, "recipe": {"kind": "MembershipVictim"},
                   "data": {"size": 32}},
    "attribute": {"arch": {"width_div": 1, "depth_div": 1}, "recipe": {"kind": "AttributeVictim"},
                  "data": {"size": 32}},
}
GIA_PRESETS = {Preset.GIA_LADDER, Preset.GIA_SEGMENT_VIT, Preset.ACTIVATION_ABLATION,
               Preset.PATCHIFY_LN_ABLATION, Preset.DEFENSE_COMPONENTS}


def _scale_group(preset: Preset) -> str:
    if preset in GIA_PRESETS:
        return "gia"
    return "attribute" if preset is Preset.AIA else "membership"


def _merge(section: str, base: dict, user: dict) -> dict:
    allowed = set(base) | OPTIONAL[section] | ({"kind"} if section == "recipe" else set())
    unknown = set(user) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return {**base, **user}


@dataclass
class ExperimentConfig:
    preset: Preset
    seeds: list[int]
    arch: dict = field(default_factory=dict)
    recipe: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    output_dir: str | None = None
    paper_scale: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.preset = Preset(self.preset)
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported "
                              f"(expected {SCHEMA_VERSION})")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for section in ("arch", "recipe", "attack", "data"):
            _merge(section, DEFAULTS[self.preset][section], getattr(self, section))
        r = self.resolved()
        arch = r["arch"]
        if arch.get("family") not in ("ladder", "vit"):
            raise ConfigError(f"arch.family must be 'ladder' or 'vit', got {arch.get('family')!r}")
        if arch["family"] == "ladder" and "spec" not in arch:
            steps = arch.get("steps", [arch.get("base_step")])
            if not steps or any(s is None or not 1 <= int(s) <= 14 for s in steps):
                raise ConfigError(f"ladder steps must lie in 1..14, got {steps}")
        if self.preset in GIA_PRESETS and int(r["attack"]["iterations"]) < 1:
            raise ConfigError("attack.iterations must be >= 1")
        if "shadows" in r["attack"]:
            n = int(r["attack"]["shadows"])
            if n < 2 or n % 2:
                raise ConfigError(f"attack.shadows must be even and >= 2, got {n}")
        if r["data"]["source"] not in ("synthetic", "cifar10", "manifest"):
            raise ConfigError(f"unknown data.source {r['data']['source']!r}")
        if r["data"]["source"] != "synthetic" and not r["data"].get("root"):
            raise ConfigError("data.root is required for file-backed data sources")

    def resolved(self) -> dict:
        """Defaults, then paper-scale overrides, then user settings."""
        out = {}
        scale = PAPER_SCALE[_scale_group(self.preset)] if self.paper_scale else {}
        for section in ("arch", "recipe", "attack", "data"):
            base = copy.deepcopy(DEFAULTS[self.preset][section])
            if section in scale:
                base.update(scale[section])
            if section == "recipe" and self.paper_scale and "kind" in base:
                for k in ("optimizer", "lr", "epochs", "batch_size"):
                    base.pop(k, None)
            out[section] = {**base, **copy.deepcopy(getattr(self, section))}
        return out

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "preset": self.preset.value,
                "seeds": list(self.seeds), "arch": self.arch, "recipe": self.recipe,
                "attack": self.attack, "data": self.data, "output_dir": self.output_dir,
                "paper_scale": self.paper_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"schema_version", "preset", "seeds", "arch", "recipe", "attack", "data",
                 "output_dir", "paper_scale"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "preset" not in d:
            raise ConfigError("config needs a preset")
        if "schema_version" not in d:
            raise ConfigError("config needs a schema_version")
        try:
            return cls(**d)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def digest(self) -> str:
        """Hash of everything that determines results (output location excluded)."""
        body = {"preset": self.preset.value, "resolved": self.resolved(),
                "schema_version": self.schema_version}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML or JSON config file."""
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(data)
