"""Experiment configuration, hashing, seed fan-out, and run records.

Configs are JSON files mirroring the ExperimentConfig dataclass tree.
Precedence is file < environment < command-line flags. Environment
overrides use the prefix GECO_, e.g. GECO_GECO_ALPHA=0.25 sets
``geco.alpha`` and GECO_SEED=7 sets the global seed.

The config hash is the SHA-256 of the canonical serialization (sorted
keys, compact separators), so any field change changes the hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import uuid
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from .util import stable_seed

ENV_PREFIX = "GECO_"

# Best-performing loss weights reported per dataset; shipped as presets,
# not verified claims.
PRESETS: Dict[str, Dict[str, float]] = {
    "fashionvc": {"alpha": 0.25, "beta": 0.25, "tau": 0.5},
    "expreduced": {"alpha": 0.25, "beta": 0.25, "tau": 0.5},
    "fashiontaobao_tb": {"alpha": 0.5, "beta": 1.0, "tau": 0.5},
}


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending key."""


@dataclass
class DatasetSection:
    manifest: Optional[str] = None
    image_size: int = 128
    synth_pairs: int = 200
    synth_image_size: int = 32


@dataclass
class CigmSection:
    depth: int = 7
    base_channels: int = 64
    noise_dim: int = 64
    disc_base_channels: int = 64
    disc_n_down: int = 3
    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 64
    l1_weight: float = 100.0
    save_every: int = 0


@dataclass
class GecoSection:
    encoder_variant: str = "paper_backbone"
    pretrained: bool = False
    weights_path: Optional[str] = None
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1e-4
    tau: float = 0.5
    nce_outer_scale: bool = True
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 64
    scheduler_step: int = 8
    scheduler_factor: float = 0.1


@dataclass
class EvalSection:
    protocol: str = "full"
    n_auc: int = 3
    n_mrr: int = 9
    grid_k: int = 5


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    cigm: CigmSection = field(default_factory=CigmSection)
    geco: GecoSection = field(default_factory=GecoSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def validate(self) -> None:
        problems: List[str] = []

        def positive(section: str, name: str, value) -> None:
            if not value > 0:
                problems.append(f"{section}.{name}={value!r} must be > 0")

        def nonneg(section: str, name: str, value) -> None:
            if not value >= 0:
                problems.append(f"{section}.{name}={value!r} must be >= 0")

        positive("dataset", "image_size", self.dataset.image_size)
        positive("dataset", "synth_image_size", self.dataset.synth_image_size)
        if self.dataset.synth_pairs < 4:
            problems.append(f"dataset.synth_pairs={self.dataset.synth_pairs} must be >= 4")
        for name in ("depth", "base_channels", "noise_dim", "disc_base_channels",
                     "disc_n_down", "batch_size"):
            positive("cigm", name, getattr(self.cigm, name))
        nonneg("cigm", "epochs", self.cigm.epochs)
        positive("cigm", "lr", self.cigm.lr)
        nonneg("cigm", "l1_weight", self.cigm.l1_weight)
        nonneg("cigm", "save_every", self.cigm.save_every)
        if self.geco.encoder_variant not in ("paper_backbone", "tiny"):
            problems.append(f"geco.encoder_variant={self.geco.encoder_variant!r} "
                            "must be 'paper_backbone' or 'tiny'")
        for name in ("alpha", "beta", "gamma"):
            nonneg("geco", name, getattr(self.geco, name))
        if self.geco.alpha == 0 and self.geco.beta == 0:
            problems.append("geco.alpha and geco.beta cannot both be 0")
        positive("geco", "tau", self.geco.tau)
        nonneg("geco", "epochs", self.geco.epochs)
        positive("geco", "lr", self.geco.lr)
        positive("geco", "batch_size", self.geco.batch_size)
        positive("geco", "scheduler_step", self.geco.scheduler_step)
        positive("geco", "scheduler_factor", self.geco.scheduler_factor)
        if self.eval.protocol not in ("full", "mgcm"):
            problems.append(f"eval.protocol={self.eval.protocol!r} must be 'full' or 'mgcm'")
        positive("eval", "n_auc", self.eval.n_auc)
        positive("eval", "n_mrr", self.eval.n_mrr)
        positive("eval", "grid_k", self.eval.grid_k)
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        for key, value in PRESETS[name].items():
            setattr(self.geco, key, value)

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed derived from the global seed; see util.stable_seed."""
        return stable_seed(self.seed, stage)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def _coerce(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _update_section(section: Any, values: Dict[str, Any], where: str) -> None:
    names = {f.name for f in fields(section)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    for key, value in values.items():
        setattr(section, key, value)


def load_config(path: Optional[str | Path] = None, *, env: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Build a config from defaults, an optional JSON file, and environment."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(raw) - {f.name for f in fields(cfg)}
        if unknown:
            raise ConfigError(f"unknown top-level keys in {path}: {sorted(unknown)}")
        for name in ("dataset", "cigm", "geco", "eval"):
            if name in raw:
                _update_section(getattr(cfg, name), raw[name], f"{path}:{name}")
        if "seed" in raw:
            cfg.seed = int(raw["seed"])

    env = os.environ if env is None else env
    for key, raw_value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        tail = key[len(ENV_PREFIX):].lower()
        if tail == "seed":
            cfg.seed = int(raw_value)
            continue
        if "_" not in tail:
            continue
        section_name, field_name = tail.split("_", 1)
        section = getattr(cfg, section_name, None)
        if section is None or not is_dataclass(section):
            continue
        if field_name in {f.name for f in fields(section)}:
            current = getattr(section, field_name)
            setattr(section, field_name, _coerce(raw_value, current if current is not None else ""))
    return cfg


@dataclass
class RunRecord:
    run_id: str
    command: str
    config_hash: str
    seed: int
    input_hashes: Dict[str, str]
    outputs: List[str]
    wall_seconds: float
    metrics: Dict[str, float]

    @classmethod
    def start(cls, command: str, cfg_hash: str, seed: int) -> "RunRecord":
        return cls(
            run_id=uuid.uuid4().hex[:12],
            command=command,
            config_hash=cfg_hash,
            seed=seed,
            input_hashes={},
            outputs=[],
            wall_seconds=0.0,
            metrics={},
        )


def append_run_record(path: str | Path, record: RunRecord) -> None:
    """Append one JSON line; the log is append-only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(asdict(record), sort_keys=True) + "\n")


class Stopwatch:
    def __init__(self) -> None:
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0
