"""Experiment configuration: plain-text key-value files, validated up front.

Files hold ``key = value`` lines (``#`` comments, blank lines allowed); keys
are dotted section names. Validation collects every offending key before
raising, so a bad config reports all problems at once. Every run writes a
resolved-config snapshot next to its outputs for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """One or more configuration problems; ``issues`` lists them all."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


def parse_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; later duplicates override earlier ones."""
    text = Path(path).read_text(encoding="utf-8")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {line!r}"])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(values: dict[str, str]) -> str:
    return "\n".join(f"{k} = {v}" for k, v in values.items()) + "\n"


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}

# key -> (type tag, default). None default means required for commands that
# need the key; command handlers check presence themselves.
EXPERIMENT_KEYS: dict[str, tuple[str, str | None]] = {
    "dataset.path": ("str", None),
    "dataset.city_config": ("str", None),
    "plan.spatial": ("ints", "4,2,1"),
    "plan.temporal": ("ints", "4,2,1"),
    "plan.steps": ("int", "300"),
    "plan.strategy": ("str", "fine_greedy"),
    "spec.intensity": ("str", "SN"),
    "spec.adding": ("str", "SA"),
    "spec.denoising": ("str", "SD"),
    "spec.alpha_min": ("float", "1e-4"),
    "spec.alpha_max": ("float", "0.9999"),
    "spec.sigma_form": ("str", "paper"),
    "spec.prior_sign": ("str", "plus"),
    "spec.prior_mode": ("str", "replicate_value"),
    "spec.prior_dim": ("int", "32"),
    "trainer.epochs": ("int", "20"),
    "trainer.batch": ("int", "8"),
    "trainer.lr": ("float", "1e-3"),
    "trainer.momentum": ("float", "0.9"),
    "trainer.seed": ("int", "0"),
    "trainer.tile": ("int", "8"),
    "trainer.embed_dim": ("int", "32"),
    "trainer.trunk_channels": ("int", "32"),
    "trainer.use_tpe": ("bool", "true"),
    "trainer.use_spe": ("bool", "true"),
    "eval.metrics": ("strs", "mae,rmse,sprmse,psnr"),
    "eval.held_out": ("int", "4"),
    "output.dir": ("str", "runs/out"),
}

_VALID_METRICS = ("mae", "rmse", "sprmse", "psnr")


@dataclass
class ExperimentConfig:
    """Typed view of a validated experiment config."""

    values: dict[str, object]
    source: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(parse_kv_file(path))

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        issues = []
        for key in sorted(raw):
            if key not in EXPERIMENT_KEYS:
                issues.append(f"unknown key {key!r}")
        values: dict[str, object] = {}
        for key, (kind, default) in EXPERIMENT_KEYS.items():
            text = raw.get(key, default)
            if text is None:
                continue
            try:
                values[key] = _coerce(text, kind)
            except ValueError as exc:
                issues.append(f"bad value for {key!r}: {exc}")
        if "eval.metrics" in values:
            bad = [m for m in values["eval.metrics"] if m not in _VALID_METRICS]
            if bad:
                issues.append(f"unknown metrics {bad}; valid: {_VALID_METRICS}")
        if issues:
            raise ConfigError(issues)
        return cls(values, dict(raw))

    def override(self, **kv) -> "ExperimentConfig":
        raw = dict(self.source)
        raw.update({k: str(v) for k, v in kv.items()})
        return ExperimentConfig.from_mapping(raw)

    def resolved_text(self) -> str:
        lines = []
        for key in EXPERIMENT_KEYS:
            if key in self.values:
                v = self.values[key]
                if isinstance(v, (list, tuple)):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self, out_dir) -> Path:
        """Persist the resolved config for reproducibility; returns the path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.cfg"
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path


def _coerce(text: str, kind: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low not in _BOOL:
            raise ValueError(f"expected a boolean, got {text!r}")
        return _BOOL[low]
    if kind == "ints":
        return tuple(int(v) for v in text.split(",") if v.strip())
    if kind == "strs":
        return tuple(v.strip() for v in text.split(",") if v.strip())
    return text
