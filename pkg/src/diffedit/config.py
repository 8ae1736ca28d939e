"""Flat ``namespace.key = value`` run configuration.

Files are plain text, one assignment per line, ``#`` starts a comment. Every
key must be one of :data:`DEFAULTS`; missing keys take their default. Lists
are comma-separated.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


# key -> (default, type); the type is int, float, str, bool, "ints" or "floats"
DEFAULTS: dict[str, tuple] = {
    "run.seed": (0, int),
    "run.n_jobs": (1, int),
    "data.n_train": (2100, int),
    "data.n_test": (280, int),
    "data.size": (16, int),
    "schedule.T": (100, int),
    "schedule.beta_start": (1e-4, float),
    "schedule.beta_end": (0.02, float),
    "first_stage.mode": ("ae", str),
    "first_stage.f": (4, int),
    "first_stage.c": (3, int),
    "first_stage.hidden": (256, int),
    "first_stage.n_codes": (64, int),
    "first_stage.beta_commit": (0.25, float),
    "first_stage.epochs": (150, int),
    "first_stage.batch_size": (64, int),
    "first_stage.learning_rate": (2e-3, float),
    "denoiser.width": (256, int),
    "denoiser.depth": (3, int),
    "denoiser.d_cls": (32, int),
    "denoiser.time_dim": (32, int),
    "denoiser.p_uncond": (0.2, float),
    "denoiser.learning_rate": (1e-3, float),
    "denoiser.batch_size": (128, int),
    "denoiser.epochs": (200, int),
    "denoiser.optimizer": ("adaptive-moment", str),
    "denoiser.weight_decay": (0.0, float),
    "oracle.epochs": (40, int),
    "embedder.epochs": (40, int),
    "edit.T_ddim": (40, int),
    "edit.t0": (50, int),
    "edit.gamma": (3.0, float),
    "edit.eta": (0.0, float),
    "edit.src": (0, int),
    "edit.trg": (1, int),
    "edit.grid_rows": (8, int),
    "finetune.lambda_dir": (2.0, float),
    "finetune.lambda_id": (1.0, float),
    "finetune.lambda_l2": (1.0, float),
    "finetune.t_tune": (6, int),
    "finetune.t0": (50, int),
    "finetune.T_ddim": (40, int),
    "finetune.gamma": (1.0, float),
    "finetune.epochs": (20, int),
    "finetune.learning_rate": (2e-4, float),
    "finetune.batch_size": (16, int),
    "finetune.precompute_count": (50, int),
    "finetune.subsample": (100, int),
    "finetune.grad_depth": (0, int),
    "finetune.targets": ([0, 1, 2, 3, 4, 5, 6], "ints"),
    "ablate.t0": ([40, 50, 60], "ints"),
    "ablate.gamma": ([1.0, 2.0, 3.0, 4.0, 5.0], "floats"),
    "ablate.T_ddim": ([40], "ints"),
    "ablate.targets": ([0, 1, 2, 3, 4, 5, 6], "ints"),
    "ablate.n_images": (210, int),
}

SEED_ENV = "DIFFEDIT_SEED"


def _coerce(key: str, raw, kind):
    try:
        if kind == "ints":
            vals = raw if isinstance(raw, (list, tuple)) else [v for v in str(raw).split(",") if v.strip()]
            return [int(v) for v in vals]
        if kind == "floats":
            vals = raw if isinstance(raw, (list, tuple)) else [v for v in str(raw).split(",") if v.strip()]
            return [float(v) for v in vals]
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        if kind is float:
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, ns: str) -> dict:
        """Keys of one namespace with the prefix stripped."""
        p = ns + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def subset_hash(self, *namespaces: str) -> str:
        """Hash of only the given namespaces (plus the seed): what one artifact depends on."""
        keep = {k: v for k, v in self.values.items()
                if k == "run.seed" or k.split(".", 1)[0] in namespaces}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **updates) -> "RunConfig":
        """Copy with ``namespace__key=value`` overrides (double underscore for the dot)."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = _coerce(key, v, DEFAULTS[key][1])
        return RunConfig(vals)

    def dumps(self) -> str:
        out = []
        for k in sorted(self.values):
            v = self.values[k]
            out.append(f"{k} = {','.join(str(x) for x in v) if isinstance(v, list) else v}")
        return "\n".join(out) + "\n"


def defaults() -> RunConfig:
    return RunConfig({k: (list(d) if isinstance(d, list) else d) for k, (d, _) in DEFAULTS.items()})


def parse_config(text: str, source: str = "<config>", env: dict | None = None) -> RunConfig:
    """Parse config text over the defaults; ``DIFFEDIT_SEED`` in ``env`` overrides ``run.seed``."""
    vals = dict(defaults().values)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        vals[key] = _coerce(key, raw.strip(), DEFAULTS[key][1])
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        vals["run.seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    return RunConfig(vals)


def load_config(path, env: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", env=env)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p), env)
