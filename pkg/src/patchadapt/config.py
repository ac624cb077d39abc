"""Run configuration and its line-oriented ``key = value`` file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

# file key -> attribute, where they differ
_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    gamma: float = 0.5
    lam: float = 0.1
    lr: float = 0.01
    pretrain_lr: float = 0.02
    disc_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    batch_size: int = 4
    iters: int = 500
    pretrain_iters: int = 500
    seed: int = 0
    patch_size: int = 32
    class_count: int = 6
    n_source: int = 240
    n_target: int = 240
    n_test: int = 120
    val_fraction: float = 0.1
    objective: str = "grl"
    pseudo_threshold: float | None = None
    rescore: bool = False
    dtype: str = "float32"
    stage_iters: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.iters < 0 or self.pretrain_iters < 0:
            raise ValueError("batch_size must be positive and iteration budgets non-negative")
        if self.objective not in ("grl", "alternating"):
            raise ValueError(f"objective must be 'grl' or 'alternating', got {self.objective!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def iters_for(self, stage: str) -> int:
        if stage in self.stage_iters:
            return int(self.stage_iters[stage])
        return self.pretrain_iters if stage == "pretrain" else self.iters

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "stage_iters":
                continue
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {_fmt(getattr(self, f.name))}")
        for stage, n in sorted(self.stage_iters.items()):
            lines.append(f"iters_{stage} = {n}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, raw: str, default):
    text = raw.strip()
    if name in ("pseudo_threshold", "disc_lr"):
        return None if text.lower() in ("none", "off", "") else float(text)
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)} - {"stage_iters"}
    values: dict = {}
    stage_iters: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.startswith("iters_"):
            stage_iters[key[len("iters_"):]] = int(raw)
            continue
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[name] = _coerce(name, raw, getattr(defaults, name))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(stage_iters=stage_iters, **values)


def load_config(path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)
