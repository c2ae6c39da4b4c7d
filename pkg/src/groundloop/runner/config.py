"""Experiment configuration: a TOML file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from groundloop.backends.scripted import ScriptedAgentProfile
from groundloop.dialogue import LoopConfig
from groundloop.imaging import VisualPromptSpec
from groundloop.promptkit import BoxFormat

EMBED_URL_ENV = "GROUNDLOOP_EMBED_URL"
DATASET_KINDS = ("ade20k", "coco", "custom", "synthetic")
FEEDBACK_FLAGS = {
    "oracle-binary": "oracle_binary",
    "oracle-class": "oracle_class",
    "vlm-verify": "vlm_verify",
    "self-correct": "self_correct",
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: Optional[str] = None
    annotation_file: Optional[str] = None
    mask_dir: Optional[str] = None
    image_dir: Optional[str] = None
    subset_manifest: Optional[str] = None
    # synthetic split
    scenes: int = 5
    regions_per_scene: int = 8
    classes: int = 10
    seed: int = 0


@dataclass
class BackendConfig:
    endpoint: Optional[str] = None
    model: str = "default"
    temperature: float = 0.9
    top_p: float = 0.8
    max_new_tokens: int = 1024
    system_prompt: Optional[str] = None
    timeout: float = 120.0
    # forward request tags as `metadata`; the scripted mock server routes on them
    send_tags: bool = False


@dataclass
class EmbeddingConfig:
    url: Optional[str] = None
    cache: Optional[str] = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    agent: BackendConfig = field(default_factory=BackendConfig)
    verifier: Optional[BackendConfig] = None
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    scripted: Optional[ScriptedAgentProfile] = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/latest"
    scene_parallelism: int = 4
    templates_dir: Optional[str] = None
    dump_visual_prompts: bool = False

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind in ("ade20k", "coco"):
            if not self.dataset.root or not Path(self.dataset.root).is_dir():
                raise ConfigError(f"dataset root {self.dataset.root!r} does not exist")
        if self.dataset.kind == "custom":
            for name in ("annotation_file", "mask_dir", "image_dir"):
                value = getattr(self.dataset, name)
                if not value or not Path(value).exists():
                    raise ConfigError(f"dataset.{name} {value!r} does not exist")
            if self.dataset.subset_manifest and not Path(self.dataset.subset_manifest).exists():
                raise ConfigError(f"subset manifest {self.dataset.subset_manifest!r} does not exist")
        if self.scripted is None:
            if not self.agent.endpoint:
                raise ConfigError("no agent endpoint; pass --agent-endpoint or --scripted")
        if self.templates_dir and not Path(self.templates_dir).is_dir():
            raise ConfigError(f"templates_dir {self.templates_dir!r} is not a directory")
        if self.scene_parallelism < 1:
            raise ConfigError("scene_parallelism must be >= 1")
        return self

    @property
    def verifier_config(self) -> BackendConfig:
        return self.verifier or self.agent

    def to_dict(self) -> dict:
        return _plain(self)

    def config_hash(self) -> str:
        """Digest of everything that affects results (output location and
        prompt dumping excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        d.pop("dump_visual_prompts", None)
        d["loop"].pop("parallelism", None)
        d.pop("scene_parallelism", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def _spec(data: Optional[dict], default: VisualPromptSpec, where: str) -> VisualPromptSpec:
    if data is None:
        return default
    data = dict(data)
    if "mark_color" in data:
        data["mark_color"] = tuple(data["mark_color"])
    try:
        return _build(VisualPromptSpec, data, where)
    except ValueError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def loop_from_dict(data: dict) -> LoopConfig:
    data = dict(data)
    defaults = LoopConfig()
    kwargs: dict[str, Any] = {}
    if "feedback" in data:
        flag = data.pop("feedback")
        kwargs["feedback_source"] = FEEDBACK_FLAGS.get(flag, flag)
    for key in ("visual_prompt", "verify_prompt", "base_visual_prompt"):
        kwargs[key] = _spec(data.pop(key, None), getattr(defaults, key), f"loop.{key}")
    if "box_format" in data:
        kwargs["box_format"] = _build(BoxFormat, data.pop("box_format"), "loop.box_format")
    kwargs.update(data)
    try:
        return _build(LoopConfig, kwargs, "loop")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[loop]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    kwargs: dict[str, Any] = {}
    if "dataset" in data:
        kwargs["dataset"] = _build(DatasetConfig, data.pop("dataset"), "dataset")
    if "loop" in data:
        kwargs["loop"] = loop_from_dict(data.pop("loop"))
    if "agent" in data:
        kwargs["agent"] = _build(BackendConfig, data.pop("agent"), "agent")
    if "verifier" in data:
        kwargs["verifier"] = _build(BackendConfig, data.pop("verifier"), "verifier")
    if "embedding" in data:
        kwargs["embedding"] = _build(EmbeddingConfig, data.pop("embedding"), "embedding")
    if "scripted" in data:
        try:
            kwargs["scripted"] = _build(ScriptedAgentProfile, data.pop("scripted"), "scripted")
        except ValueError as exc:
            raise ConfigError(f"[scripted]: {exc}") from exc
    kwargs.update(data)
    try:
        return _build(ExperimentConfig, kwargs, "top level")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[Path | str]) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                cfg = config_from_dict(tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    if cfg.embedding.url is None and os.environ.get(EMBED_URL_ENV):
        cfg.embedding.url = os.environ[EMBED_URL_ENV]
    return cfg


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Fold parsed CLI flags over a loaded config."""
    if getattr(args, "dataset", None):
        cfg.dataset.kind = args.dataset
    loop_changes = {}
    if getattr(args, "feedback", None):
        loop_changes["feedback_source"] = FEEDBACK_FLAGS[args.feedback]
    if getattr(args, "rounds", None) is not None:
        loop_changes["max_rounds"] = args.rounds
    if loop_changes:
        cfg.loop = dataclasses.replace(cfg.loop, **loop_changes)
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if getattr(args, "agent_endpoint", None):
        cfg.agent.endpoint = args.agent_endpoint
    if getattr(args, "verifier_endpoint", None):
        base = cfg.verifier or dataclasses.replace(cfg.agent)
        cfg.verifier = dataclasses.replace(base, endpoint=args.verifier_endpoint)
    if getattr(args, "scripted", False) and cfg.scripted is None:
        cfg.scripted = ScriptedAgentProfile()
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "dump_visual_prompts", False):
        cfg.dump_visual_prompts = True
    return cfg
