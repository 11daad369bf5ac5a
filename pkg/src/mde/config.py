"""Run configuration (flat YAML key set) and seed streams."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

OUTPUT_ENV = "MDE_OUTPUT_DIR"

# One root seed, expanded into independent named streams.
STREAMS = {"split": 0, "init": 1, "negatives": 2, "shuffle": 3, "synth": 4, "gradcheck": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


def stream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(STREAMS[name],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class RunConfig(BaseModel):
    """All keys of the config file. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # paths
    interactions: Optional[str] = None
    visual_features: Optional[str] = None
    textual_features: Optional[str] = None
    output_dir: str = "runs/default"

    # data
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    # model
    d: int = Field(64, gt=0)
    layers: int = Field(2, ge=0)
    k_item: int = Field(10, gt=0)
    k_user: int = Field(40, gt=0)

    # losses
    sigma_diff: float = Field(0.1, ge=0)
    sigma_cl: float = Field(0.01, ge=0)
    sigma_reg: float = Field(1e-4, ge=0)
    tau: float = Field(0.2, gt=0)
    cl_scope: Literal["full", "in_batch"] = "full"
    mda_form: Literal["mean_abs", "squared_norm"] = "mean_abs"

    # optimisation / training
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(2048, gt=0)
    patience: int = Field(20, ge=0)
    max_epochs: int = Field(1000, gt=0)
    early_stop_k: int = Field(5, gt=0)
    early_stop_split: Literal["val", "train"] = "val"
    eval_k: int = Field(5, gt=0)
    seed: int = 0

    # ablation of the trained model (cmd_train / cmd_eval)
    disable_mda: bool = False
    disable_msa: bool = False
    disable_nlt: bool = False
    fixed_pref_wt: Optional[float] = Field(None, ge=0, le=1)
    independent_weights: bool = False

    # cmd_ablate
    ablate_variants: list[str] = ["no_mda", "no_msa", "no_nlt"]
    ablate_seeds: list[int] = [0]

    # cmd_gen_synth
    synth_users: int = Field(50, gt=0)
    synth_items: int = Field(100, gt=0)
    synth_clusters: int = Field(5, gt=0)
    synth_d_v: int = Field(32, gt=0)
    synth_d_t: int = Field(16, gt=0)

    # cmd_grad_check
    gradcheck_samples: int = Field(200, gt=0)
    gradcheck_users: int = Field(5, gt=0)
    gradcheck_items: int = Field(8, gt=0)
    gradcheck_d: int = Field(4, gt=0)

    @model_validator(mode="after")
    def _exclusive(self):
        if self.fixed_pref_wt is not None and self.independent_weights:
            raise ValueError("fixed_pref_wt and independent_weights are mutually exclusive")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split_ratios must sum to 1")
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def hash(self) -> str:
        payload = self.model_dump(exclude={"output_dir"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _format_error(exc: ValidationError) -> str:
    msgs = []
    for err in exc.errors():
        key = ".".join(str(x) for x in err["loc"]) or "config"
        if err["type"] == "extra_forbidden":
            msgs.append(f"unknown config key {key!r}")
        else:
            msgs.append(f"{key}: {err['msg']}")
    return "; ".join(msgs)


def build_config(values: dict) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults < file < ``$MDE_OUTPUT_DIR`` < explicit overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping of keys to values")
        values.update(loaded)
    if os.environ.get(OUTPUT_ENV):
        values["output_dir"] = os.environ[OUTPUT_ENV]
    values.update(overrides or {})
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    data = cfg.model_dump()
    data["split_ratios"] = list(data["split_ratios"])
    return yaml.safe_dump(data, sort_keys=False)
