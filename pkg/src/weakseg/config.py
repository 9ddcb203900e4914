"""Experiment configuration files and run manifests.

Config files are YAML mappings. A single experiment::

    name: coco_ts+mlt_s          # required
    network: smanet              # smanet | psp | psp-dd
    stages: "coco_ts:100k,mlt_s:100k"
    seed: 0
    output_root: runs
    test_sets: [icdar2013_test]
    baseline: synth              # setup whose F1 is the delta reference
    group: pretraining           # table section label
    datasets: {coco_ts: /data/coco_ts/manifest.jsonl}
    network_spec: {base_width: 64}             # NetworkSpec fields
    train: {crop_size: 281, learning_rate: 1.0e-4, ...}   # TrainConfig fields
    inference: {window: 281, stride: 140, ...}  # InferencePolicy fields
    thresholds: {th1: 0.3, th2: 0.7}

A matrix file holds ``setups: [ ... ]`` plus optional top-level
``defaults`` (merged under every setup), ``datasets``, ``test_sets``,
``baseline`` and ``output_root``.

Dataset ids resolve through ``datasets`` first, then through
``$WEAKSEG_DATA_ROOT/<id>/manifest.jsonl``.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import os
import platform
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy
import torch
import yaml

from weakseg import __version__
from weakseg.infer import InferencePolicy
from weakseg.smanet import VARIANT_ALIASES, NetworkSpec, SpecError
from weakseg.train import TrainConfig, config_digest, parse_stages
from weakseg.weaklabel import ThresholdPolicy

DATA_ROOT_ENV = "WEAKSEG_DATA_ROOT"

NETWORK_NAMES = {"smanet": "smanet", **VARIANT_ALIASES,
                 "psp_baseline": "psp_baseline", "psp_double_decoder": "psp_double_decoder"}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    for key in data:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r}")


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    stages: Tuple[Tuple[str, int], ...] = ()
    network: str = "smanet"
    network_spec: Dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    inference: InferencePolicy = InferencePolicy()
    thresholds: ThresholdPolicy = ThresholdPolicy()
    seed: int = 0
    output_root: str = "runs"
    test_sets: Tuple[str, ...] = ()
    baseline: Optional[str] = None
    group: str = ""
    datasets: Dict = field(default_factory=dict)

    def spec(self) -> NetworkSpec:
        return NetworkSpec(variant=NETWORK_NAMES[self.network], **self.network_spec)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "name": self.name,
            "stages": ",".join(f"{n}:{s}" for n, s in self.stages),
            "network": self.network,
            "network_spec": dict(self.network_spec),
            "train": train,
            "inference": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in dataclasses.asdict(self.inference).items()},
            "thresholds": dataclasses.asdict(self.thresholds),
            "seed": self.seed,
            "output_root": self.output_root,
            "test_sets": list(self.test_sets),
            "baseline": self.baseline,
            "group": self.group,
            "datasets": dict(self.datasets),
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def resolve_dataset(self, dataset_id: str) -> Path:
        return resolve_dataset(dataset_id, self.datasets)


TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def resolve_dataset(dataset_id: str, datasets: dict) -> Path:
    if dataset_id in datasets:
        return Path(datasets[dataset_id])
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        candidate = Path(root) / dataset_id / "manifest.jsonl"
        if candidate.exists():
            return candidate
    raise ConfigError(f"cannot resolve dataset {dataset_id!r}: not listed under 'datasets' "
                      f"and not found under ${DATA_ROOT_ENV}")


def config_from_dict(data: dict, check_datasets: bool = True) -> ExperimentConfig:
    _check_keys("", data, TOP_KEYS)
    if not data.get("name"):
        raise ConfigError("config key 'name' is required")
    try:
        network = str(data.get("network", "smanet"))
        if network not in NETWORK_NAMES:
            raise ConfigError(f"config key 'network': unknown network {network!r}")
        spec_over = dict(data.get("network_spec") or {})
        _check_keys("network_spec", spec_over, _fields(NetworkSpec) - {"variant"})
        train = dict(data.get("train") or {})
        _check_keys("train", train, _fields(TrainConfig) - {"seed"})
        inference = dict(data.get("inference") or {})
        _check_keys("inference", inference, _fields(InferencePolicy))
        thresholds = dict(data.get("thresholds") or {})
        _check_keys("thresholds", thresholds, _fields(ThresholdPolicy))

        stages = data.get("stages") or ()
        if isinstance(stages, str):
            stages = parse_stages(stages)
        else:
            stages = [(str(s["dataset"]), int(s["steps"])) if isinstance(s, dict)
                      else tuple(s) for s in stages]
        seed = data.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"config key 'seed' must be an integer, got {seed!r}")
        datasets = {str(k): str(v) for k, v in (data.get("datasets") or {}).items()}
        cfg = ExperimentConfig(
            name=str(data["name"]),
            stages=tuple((str(n), int(s)) for n, s in stages),
            network=network,
            network_spec=spec_over,
            train=TrainConfig(**train),
            inference=InferencePolicy(**inference),
            thresholds=ThresholdPolicy(**thresholds),
            seed=seed,
            output_root=str(data.get("output_root", "runs")),
            test_sets=tuple(str(t) for t in (data.get("test_sets") or ())),
            baseline=data.get("baseline"),
            group=str(data.get("group") or ""),
            datasets=datasets,
        )
        cfg.spec()
    except ConfigError:
        raise
    except (TypeError, ValueError, SpecError, KeyError) as exc:
        raise ConfigError(f"invalid config {data.get('name')!r}: {exc}") from exc
    if check_datasets:
        for i, (dataset_id, _) in enumerate(cfg.stages):
            try:
                cfg.resolve_dataset(dataset_id)
            except ConfigError as exc:
                raise ConfigError(f"config key 'stages[{i}]': {exc}") from None
        for i, dataset_id in enumerate(cfg.test_sets):
            try:
                cfg.resolve_dataset(dataset_id)
            except ConfigError as exc:
                raise ConfigError(f"config key 'test_sets[{i}]': {exc}") from None
    return cfg


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _relative_paths(datasets: dict, base: Path) -> dict:
    out = {}
    for k, v in datasets.items():
        p = Path(os.path.expandvars(str(v)))
        out[k] = str(p if p.is_absolute() else (base / p).resolve())
    return out


def load_config(path, check_datasets: bool = True) -> ExperimentConfig:
    data = _read_yaml(path)
    if "datasets" in data:
        data["datasets"] = _relative_paths(data["datasets"] or {}, Path(path).parent)
    return config_from_dict(data, check_datasets)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


MATRIX_KEYS = {"setups", "defaults", "datasets", "test_sets", "baseline", "output_root", "title"}


def load_matrix(path, check_datasets: bool = True) -> Tuple[dict, List[ExperimentConfig]]:
    """Read a matrix file; returns (top-level info, list of configs)."""
    data = _read_yaml(path)
    _check_keys("", data, MATRIX_KEYS)
    base = Path(path).parent
    shared = dict(data.get("defaults") or {})
    for key in ("datasets", "test_sets", "baseline", "output_root"):
        if key in data:
            shared[key] = data[key]
    if "datasets" in shared:
        shared["datasets"] = _relative_paths(shared["datasets"] or {}, base)
    if "output_root" in shared and not Path(shared["output_root"]).is_absolute():
        shared["output_root"] = str((base / shared["output_root"]).resolve())
    configs, names = [], set()
    for i, setup in enumerate(data.get("setups") or []):
        if not isinstance(setup, dict):
            raise ConfigError(f"setups[{i}]: expected a mapping")
        cfg = config_from_dict(_merge(shared, setup), check_datasets)
        if cfg.name in names:
            raise ConfigError(f"duplicate setup name {cfg.name!r} in matrix")
        names.add(cfg.name)
        configs.append(cfg)
    info = {"title": data.get("title", Path(path).stem), "baseline": data.get("baseline")}
    return info, configs


# run manifests --------------------------------------------------------------

def _git_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config_digest: str
    started: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    finished: Optional[str] = None
    code_version: str = ""
    artifacts: List[str] = field(default_factory=list)
    environment: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.code_version:
            self.code_version = f"{__version__}+{_git_version()}"
        if not self.environment:
            self.environment = {
                "python": platform.python_version(),
                "platform": platform.platform(),
                "torch": torch.__version__,
                "numpy": numpy.__version__,
            }

    def add(self, *paths) -> None:
        for p in paths:
            if p is not None and str(p) not in self.artifacts:
                self.artifacts.append(str(p))

    def write(self, out_dir, name: str = "run_manifest.json") -> Path:
        self.finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2), encoding="utf-8")
        return path
