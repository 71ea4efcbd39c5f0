"""Merged run configuration: file values, command-line overrides, defaults.

Plain-text key = value files; a flag beats the file, the file beats the
default. Relative data paths resolve against the VULNPOOL_DATA environment
variable when it is set.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .corpus import LANGUAGES
from .encoder import EncoderConfig
from .model import MODES, ModelConfig, QUERY_SOURCES, VulnPoolModel
from .tokenizer import Vocabulary

DATA_ROOT_ENV = "VULNPOOL_DATA"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str | None = None
    out: str | None = None
    vocab: str | None = None
    seed: int = 0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # tokenizer
    vocab_size: int = 4096
    max_tokens: int = 512
    # encoder
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ffn: int = 64
    max_positions: int | None = None  # None: max_tokens + top_k * prompt_len
    dropout: float = 0.0
    # pool / model
    mode: str = "pool_masked"
    lam: float = 0.1
    prompt_len: int = 5
    pool_size: int | None = None  # None: languages * matrices_per_language
    top_k: int = 1
    matrices_per_language: int = 1
    query_from: str = "embed_mean"
    # training
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    # synthesis
    n_per_language: int = 100
    vuln_rate: float = 0.5

    # ------------------------------------------------------------------

    def effective_pool_size(self) -> int:
        if self.pool_size is not None:
            return self.pool_size
        return len(LANGUAGES) * self.matrices_per_language

    def effective_max_positions(self) -> int:
        if self.max_positions is not None:
            return self.max_positions
        return self.max_tokens + self.top_k * self.prompt_len

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.query_from not in QUERY_SOURCES:
            raise ConfigError(f"query_from must be one of {QUERY_SOURCES}")
        if not 1 <= self.prompt_len <= 64:
            raise ConfigError(f"prompt_len must lie in [1, 64], got {self.prompt_len}")
        size = self.effective_pool_size()
        if not 1 <= size <= 64:
            raise ConfigError(f"pool_size must lie in [1, 64], got {size}")
        if self.top_k > size:
            raise ConfigError(f"top_k {self.top_k} exceeds pool size {size}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios must be three values summing to 1, got {self.ratios}")
        needed = self.max_tokens + self.top_k * self.prompt_len
        if self.effective_max_positions() < needed:
            raise ConfigError(
                f"max_positions {self.effective_max_positions()} < max_tokens + "
                f"top_k * prompt_len = {needed}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr >= 0")
        return self

    def with_axis(self, axis: str, value) -> "RunConfig":
        if axis == "lambda":
            return dataclasses.replace(self, lam=float(value))
        if axis == "lp":
            return dataclasses.replace(self, prompt_len=int(value))
        if axis == "topk":
            return dataclasses.replace(self, top_k=int(value))
        if axis == "mpl":
            return dataclasses.replace(
                self, matrices_per_language=int(value), pool_size=None
            )
        if axis == "mode":
            return dataclasses.replace(self, mode=str(value))
        raise ConfigError(f"unknown sweep axis {axis!r}")

    def resolve_path(self, path):
        if path is None:
            return None
        root = os.environ.get(DATA_ROOT_ENV)
        if root and not os.path.isabs(path):
            return os.path.join(root, path)
        return path

    def snapshot(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}

_INT_FIELDS = {
    "seed", "vocab_size", "max_tokens", "n_layers", "n_heads", "d_model", "d_ffn",
    "max_positions", "prompt_len", "pool_size", "top_k", "matrices_per_language",
    "epochs", "batch_size", "n_per_language",
}
_FLOAT_FIELDS = {"dropout", "lam", "lr", "beta1", "beta2", "eps", "grad_clip", "vuln_rate"}
_OPTIONAL_FIELDS = {"max_positions", "pool_size", "grad_clip", "data", "out", "vocab"}


def _parse_value(key: str, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(raw, str):
        raw = raw.strip()
        if raw.lower() in ("none", "") and key in _OPTIONAL_FIELDS:
            return None
        if key == "ratios":
            parts = [p for p in raw.replace(",", " ").split() if p]
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                raise ConfigError(f"ratios: cannot parse {raw!r}") from None
        try:
            if key in _INT_FIELDS:
                return int(raw)
            if key in _FLOAT_FIELDS:
                return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def load_config_file(path) -> dict:
    """Parse a key = value config file ('#' starts a comment)."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = _parse_value(key, raw)
    return values


def build_run_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    try:
        config = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return config.validate()


# ---------------------------------------------------------------------------
# builders

def build_model(run_cfg: RunConfig, vocab: Vocabulary, seed: int | None = None) -> VulnPoolModel:
    run_cfg.validate()
    model_cfg = ModelConfig(
        mode=run_cfg.mode,
        lam=run_cfg.lam,
        top_k=run_cfg.top_k,
        prompt_len=run_cfg.prompt_len,
        pool_size=run_cfg.effective_pool_size(),
        matrices_per_language=run_cfg.matrices_per_language,
        query_from=run_cfg.query_from,
        max_tokens=run_cfg.max_tokens,
    )
    enc_cfg = EncoderConfig(
        n_layers=run_cfg.n_layers,
        n_heads=run_cfg.n_heads,
        d_model=run_cfg.d_model,
        d_ffn=run_cfg.d_ffn,
        max_positions=run_cfg.effective_max_positions(),
        dropout_rate=run_cfg.dropout,
    )
    return VulnPoolModel(model_cfg, enc_cfg, vocab, seed=run_cfg.seed if seed is None else seed)


def build_train_config(run_cfg: RunConfig):
    from .trainer import TrainConfig

    return TrainConfig(
        epochs=run_cfg.epochs,
        batch_size=run_cfg.batch_size,
        lr=run_cfg.lr,
        beta1=run_cfg.beta1,
        beta2=run_cfg.beta2,
        eps=run_cfg.eps,
        seed=run_cfg.seed,
        grad_clip=run_cfg.grad_clip,
    )
