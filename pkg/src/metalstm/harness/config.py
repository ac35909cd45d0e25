"""Run configuration: a flat key=value text format mirrored by a dataclass.

Unknown keys are rejected, lists are comma-separated, and the canonical
rendering of a resolved config is hashed into checkpoints so stale state
cannot silently be reused."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

LEARNERS = ("plain_lstm", "op_lstm", "maml", "protonet")
TASKS = ("sine", "synthetic", "images")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # what to train on
    learner: str = "plain_lstm"
    task: str = "sine"
    shots: int = 5
    queries: int = 50          # per task (sine) or per class (classification)
    ways: int = 5
    dim: int = 16              # synthetic inputs
    spread: float = 0.1        # synthetic noise scale
    data_root: str = ""        # images

    # outer loop
    meta_batch: int = 4
    meta_iterations: int = 20000
    val_every: int = 1000
    val_tasks: int = 500
    test_tasks: int = 2000
    outer_lr: float = 1e-3
    log_every: int = 100
    seed: int = 0
    out: str = "runs/out"

    # shared architecture knobs
    hidden: list[int] = field(default_factory=lambda: [40, 40])
    unroll_t: int = 3

    # plain lstm
    input_format: str = "auto"  # auto -> xy_prevpred for regression, xy otherwise
    ingestion: str = "batched"

    # op-lstm
    cw_hidden: list[int] = field(default_factory=lambda: [20, 1])
    gamma_init: float = 1.0
    learn_gamma: bool = True
    strict_order: bool = False

    # maml
    inner_steps: int = 1
    inner_lr: float = 0.01
    first_order: bool = False

    # update-direction analysis
    analyze_updates: bool = False
    analysis_tasks: int = 20
    gd_lr: float = 0.01

    def finalize(self) -> "RunConfig":
        """Resolve 'auto' values and validate; returns self."""
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner '{self.learner}' (choose from {LEARNERS})")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}' (choose from {TASKS})")
        if self.input_format == "auto":
            self.input_format = "xy_prevpred" if self.task == "sine" else "xy"
        for name in ("shots", "queries", "ways", "meta_batch", "meta_iterations",
                     "val_every", "val_tasks", "test_tasks", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.val_every > self.meta_iterations:
            raise ConfigError("val_every must not exceed meta_iterations")
        if self.task == "images" and not self.data_root:
            raise ConfigError("images task needs data_root")
        if self.learner == "protonet" and self.task == "sine":
            raise ConfigError("protonet is a classifier; pick a classification task")
        if self.unroll_t < 1:
            raise ConfigError("unroll_t must be >= 1")
        if not self.hidden:
            raise ConfigError("hidden must name at least one layer size")
        if self.cw_hidden[-1] != 1:
            raise ConfigError("cw_hidden must end in width 1")
        return self

    @property
    def is_regression(self) -> bool:
        return self.task == "sine"

    @property
    def eval_metric(self) -> str:
        return "mse" if self.is_regression else "accuracy"

    @property
    def higher_is_better(self) -> bool:
        return not self.is_regression


def _parse_value(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got '{raw}'")
    if target_type is str:
        return raw
    # list[int]
    return [int(tok.strip()) for tok in raw.split(",") if tok.strip()]


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    by_name = {f.name: f for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        ftype = by_name[key].type
        target = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, list)
        values[key] = _parse_value(raw, target, key)
    if overrides:
        values.update(overrides)
    return RunConfig(**values).finalize()


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


def canonical_text(cfg: RunConfig) -> str:
    """Deterministic rendering of every resolved field, for hashing and
    embedding into checkpoints."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that shapes the computation; the output directory
    is deliberately excluded so a run can resume into a new location."""
    lines = [ln for ln in canonical_text(cfg).splitlines() if not ln.startswith("out =")]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
