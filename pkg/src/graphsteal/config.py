"""Experiment configuration: YAML file, dotted overrides, validation."""

from __future__ import annotations

import copy
import hashlib
from importlib import resources

import yaml

from .attack import AttackConfig, MaskOptConfig, PgdConfig
from .diffusion import DenoiserHyper
from .gnn import DPConfig, TrainConfig
from .graphdata import GenConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field that failed."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def bundled_config_text() -> str:
    return resources.files("graphsteal").joinpath("default_config.yaml").read_text(encoding="utf-8")


def default_config() -> dict:
    return yaml.safe_load(bundled_config_text())


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("--config", "top level must be a mapping")
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def fingerprint(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def apply_override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    out = copy.deepcopy(cfg)
    node = out
    for i, p in enumerate(parts[:-1]):
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[:i + 1]), "is not a section")
        node = nxt
    if parts[-1] not in node:
        raise ConfigError(key, "unknown field")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"cannot parse value {raw!r}: {exc}") from None
    return out


def _section(cfg, name):
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(name, "missing section")
    return sec


def _build(cls, sec: dict, path: str, convert=None):
    fields = cls.__dataclass_fields__
    kwargs = {}
    for k, v in sec.items():
        if k not in fields:
            raise ConfigError(f"{path}.{k}", "unknown field")
        if convert and k in convert:
            v = convert[k](v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _tuple(v):
    return tuple(v) if v is not None else None


def _check(path, ok, message):
    if not ok:
        raise ConfigError(path, message)


class Experiment:
    """Typed view of a validated configuration dictionary."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        _check("io.format_version", _section(cfg, "io").get("format_version") == CONFIG_VERSION,
               f"must be {CONFIG_VERSION}")
        data = _section(cfg, "dataset")
        self.gen = _build(GenConfig, _section(data, "gen"), "dataset.gen",
                          {k: _tuple for k in ("max_degree", "node_probs", "node_weights", "edge_weights")})
        try:
            self.gen.validate()
        except ValueError as exc:
            raise ConfigError("dataset.gen", str(exc)) from None
        split = _section(data, "split")
        self.split_mode = split.get("mode", "random")
        _check("dataset.split.mode", self.split_mode in ("random", "cluster_shift"), "must be random or cluster_shift")
        self.ratios = tuple(split.get("ratios", (0.2, 0.1, 0.7)))
        _check("dataset.split.ratios", len(self.ratios) == 3 and abs(sum(self.ratios) - 1) < 1e-9,
               "needs three fractions summing to 1")
        self.groups = int(split.get("groups", 8))

        self.target = self._train_cfg(_section(cfg, "target"), "target")
        self.encoder = self._train_cfg(_section(cfg, "encoder"), "encoder")

        diff = dict(_section(cfg, "diffusion"))
        self.T = int(diff.pop("T", 50))
        self.schedule_kind = diff.pop("schedule", "cosine")
        _check("diffusion.T", self.T >= 2, "must be >= 2")
        _check("diffusion.schedule", self.schedule_kind in ("cosine", "linear"), "must be cosine or linear")
        self.denoiser = _build(DenoiserHyper, diff, "diffusion")
        _check("diffusion.steps", self.denoiser.steps >= 0, "must be >= 0")
        _check("diffusion.lr_decay", self.denoiser.lr_decay in ("none", "cosine"), "must be none or cosine")

        att = dict(_section(cfg, "attack"))
        pgd = _build(PgdConfig, att.pop("pgd", {}), "attack.pgd")
        mask = _build(MaskOptConfig, att.pop("mask_opt", {}), "attack.mask_opt")
        self.attack = _build(AttackConfig, att, "attack")
        self.attack.pgd, self.attack.mask_opt = pgd, mask
        try:
            self.attack.validate(self.gen.num_classes)
        except ValueError as exc:
            raise ConfigError("attack", str(exc)) from None
        _check("attack.K", self.attack.K <= self.T, "must not exceed diffusion.T")

        ev = _section(cfg, "eval")
        self.seeds = [int(s) for s in ev.get("seeds", [])]
        _check("eval.seeds", len(self.seeds) > 0, "needs at least one seed")
        self.methods = list(ev.get("methods", []))
        self.ablations = list(ev.get("ablations", []))
        self.dp_noise = [float(x) for x in ev.get("dp_noise_multipliers", [])]
        self.dp_clip = float(ev.get("dp_clip_norm", 1.0))
        self.dp_delta = float(ev.get("dp_delta", 1e-5))
        from .attack import ABLATIONS, BASELINES
        for m in self.methods:
            _check("eval.methods", m in BASELINES, f"unknown method {m!r}")
        for a in self.ablations:
            _check("eval.ablations", a in ABLATIONS, f"unknown ablation {a!r}")
        _check("eval.dp_noise_multipliers", all(x >= 0 for x in self.dp_noise), "must be >= 0")
        self.workspace = _section(cfg, "io").get("workspace", "workspace")

    def _train_cfg(self, sec, path):
        sec = dict(sec)
        dp = sec.pop("dp", None)
        tc = _build(TrainConfig, sec, path, {"hidden": _tuple})
        if dp is not None:
            tc.dp = _build(DPConfig, dp, f"{path}.dp")
        try:
            tc.validate()
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
        return tc
