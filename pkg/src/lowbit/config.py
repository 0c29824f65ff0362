"""Run configuration: a TOML-subset file merged with command-line overrides.

Grammar: ``[table]`` headers and ``key = value`` lines, where values are
double-quoted strings, integers, floats, or booleans.  Comments start with
``#``.  That is the whole grammar; nested tables, arrays and multi-line
strings are not part of it.

Every key has an explicit default below; unknown keys fail fast, and values
must match the default's type (ints may widen to float).  Overrides use the
same dotted form, e.g. ``--set kurtosis.lambda=1e-5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .kurtosis import KurtosisConfig
from .model import INPUT_SITES, OUTPUT_SITES, ModelConfig
from .train import TrainConfig

DEFAULTS: dict[str, object] = {
    "run.dir": "",
    "data.corpus": "",
    "data.eval_corpus": "",
    "model.n_layers": 2,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.vocab_size": 256,
    "model.seq_len": 128,
    "model.attn_scale": True,
    "model.paper_mlp_wiring": False,
    "model.seed": 0,
    "qat.enabled": False,
    "qat.bits": 4,
    "qat.sites": "qkv_in,attn_proj_in,mlp_in,mlp_proj_in",
    "qat.clip_init": 4.0,
    "qat.align_zero": True,
    "qat.sign_in_range": -1.0,
    "kurtosis.lambda": 0.0,
    "kurtosis.epsilon": 1e-6,
    "kurtosis.sites": "all",
    "train.steps": 2000,
    "train.batch_tokens": 512,
    "train.lr": 3e-4,
    "train.warmup_steps": 20,
    "train.min_lr_frac": 0.1,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.weight_decay": 0.1,
    "train.adam_eps": 1e-8,
    "train.log_interval": 10,
    "train.dump_interval": 0,
    "train.probe_tokens": 256,
    "train.checkpoint_interval": 0,
}


def parse_scalar(raw: str, where: str = "") -> object:
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"empty value{where}")
    if raw.startswith('"'):
        if not (raw.endswith('"') and len(raw) >= 2):
            raise ConfigError(f"unterminated string{where}")
        return raw[1:-1]
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r}{where}") from None


def parse_toml_subset(text: str) -> dict[str, object]:
    """Flat dotted-key dict from the TOML-subset grammar."""
    values: dict[str, object] = {}
    table = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f" at line {lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed table header{where}")
            table = stripped[1:-1].strip()
            if not table:
                raise ConfigError(f"empty table name{where}")
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value{where}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"empty key{where}")
        dotted = f"{table}.{key}" if table else key
        if dotted in values:
            raise ConfigError(f"duplicate key {dotted!r}{where}")
        values[dotted] = parse_scalar(raw, where)
    return values


def _check_types(values: dict[str, object]) -> dict[str, object]:
    merged = dict(DEFAULTS)
    for key, value in values.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} expects a boolean, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key} expects an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} expects a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{key} expects a string, got {value!r}")
        merged[key] = value
    return merged


def apply_overrides(values: dict[str, object], overrides) -> dict[str, object]:
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        # allow bare strings on the command line
        if key in DEFAULTS and isinstance(DEFAULTS[key], str) and not raw.startswith('"'):
            out[key] = raw
        else:
            out[key] = parse_scalar(raw, f" in override {key!r}")
    return out


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        file_values = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            file_values = parse_toml_subset(p.read_text())
        merged = apply_overrides(file_values, overrides)
        return cls(_check_types(merged))

    def __getitem__(self, key: str):
        return self.values[key]

    def _sites(self, key: str, valid, all_value) -> tuple[str, ...]:
        raw = str(self.values[key]).strip()
        if raw == "all":
            return tuple(all_value)
        if not raw:
            return ()
        sites = tuple(s.strip() for s in raw.split(","))
        for s in sites:
            if s not in valid:
                raise ConfigError(f"{key}: unknown site {s!r}")
        return sites

    def model_config(self) -> ModelConfig:
        v = self.values
        qat_sites = ()
        if v["qat.enabled"]:
            qat_sites = self._sites("qat.sites", INPUT_SITES, INPUT_SITES)
        kurt_sites = ()
        if v["kurtosis.lambda"] > 0:
            kurt_sites = self._sites("kurtosis.sites", OUTPUT_SITES, OUTPUT_SITES)
        return ModelConfig(
            n_layers=v["model.n_layers"],
            d_model=v["model.d_model"],
            n_heads=v["model.n_heads"],
            vocab_size=v["model.vocab_size"],
            seq_len=v["model.seq_len"],
            qat_sites=qat_sites,
            qat_bits=v["qat.bits"],
            clip_init=v["qat.clip_init"],
            qat_align_zero=v["qat.align_zero"],
            sign_in_range=v["qat.sign_in_range"],
            kurtosis=KurtosisConfig(lam=v["kurtosis.lambda"],
                                    epsilon=v["kurtosis.epsilon"],
                                    sites=frozenset(kurt_sites)),
            attn_scale=v["model.attn_scale"],
            paper_mlp_wiring=v["model.paper_mlp_wiring"],
            seed=v["model.seed"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"],
            batch_tokens=v["train.batch_tokens"],
            lr=v["train.lr"],
            warmup_steps=v["train.warmup_steps"],
            min_lr_frac=v["train.min_lr_frac"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            weight_decay=v["train.weight_decay"],
            adam_eps=v["train.adam_eps"],
            log_interval=v["train.log_interval"],
            dump_interval=v["train.dump_interval"],
            probe_tokens=v["train.probe_tokens"],
            checkpoint_interval=v["train.checkpoint_interval"],
        )

    def to_toml(self) -> str:
        """Render the resolved configuration back out, grouped by table."""
        tables: dict[str, list[tuple[str, object]]] = {}
        for dotted in sorted(self.values):
            table, key = dotted.split(".", 1)
            tables.setdefault(table, []).append((key, self.values[dotted]))
        lines = []
        for table in sorted(tables):
            lines.append(f"[{table}]")
            for key, value in tables[table]:
                if isinstance(value, bool):
                    rendered = "true" if value else "false"
                elif isinstance(value, str):
                    rendered = f'"{value}"'
                else:
                    rendered = repr(value)
                lines.append(f"{key} = {rendered}")
            lines.append("")
        return "\n".join(lines)
