"""Experiment configuration: flat ``key = value`` files with ``include``."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ShapeMismatch
from .frontend import FrontEndConfig
from .model import ModelConfig, TrainConfig, TransformerConfig
from .pipeline import FeatureSelection

FEATURE_MODES = ("auto", "precompute", "on_the_fly")


@dataclass
class ExperimentConfig:
    features: str = "FB40"
    frontend: str = "plain"
    seeds: tuple[int, ...] = (1,)
    train_manifest: str = ""
    dev_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "runs/default"
    feature_mode: str = "auto"
    feature_dir: str = ""
    # front-end
    p_A: int = 512
    p_B: int = 256
    K: int = 192
    L: int = 64
    # transformer
    embed_dim: int = 256
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.1
    # training
    max_updates: int = 3000
    lr_peak: float = 0.002
    warmup: int = 1500
    clip_norm: float = 10.0
    clip_mode: str = "norm"
    smoothing: float = 0.1
    max_frames: int = 4000
    save_interval: int = 500
    eval_interval: int = 0
    stop_train_wer: float | None = None
    min_updates: int = 0
    # decoding
    beam: int = 5
    n_average: int = 10
    workers: int = 1
    source: str = field(default="", repr=False)

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        try:
            sel = self.selection
            self.model_config()
        except (ValueError, ShapeMismatch) as e:
            raise ConfigError(str(e)) from e
        if self.frontend == "vq" and sel.M < 1:
            raise ConfigError(f"frontend vq needs prosodic channels; features={self.features}")

    @property
    def selection(self) -> FeatureSelection:
        return FeatureSelection.parse(self.features)

    def model_config(self) -> ModelConfig:
        sel = self.selection
        fe = FrontEndConfig(variant=self.frontend, N=sel.n_mels if self.frontend == "vq" else sel.n_channels,
                            M=sel.M if self.frontend == "vq" else 0, p_A=self.p_A, p_B=self.p_B,
                            K=self.K, L=self.L, O=self.embed_dim)
        tr = TransformerConfig(embed_dim=self.embed_dim, encoder_layers=self.encoder_layers,
                               decoder_layers=self.decoder_layers, heads=self.heads,
                               ffn_dim=self.ffn_dim, dropout=self.dropout)
        return ModelConfig(fe, tr)

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_updates=self.max_updates, lr_peak=self.lr_peak, warmup=self.warmup,
                           clip_norm=self.clip_norm, clip_mode=self.clip_mode,
                           smoothing=self.smoothing, max_frames=self.max_frames,
                           save_interval=self.save_interval, eval_interval=self.eval_interval,
                           stop_train_wer=self.stop_train_wer, min_updates=self.min_updates)

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        values = dataclasses.asdict(self)
        values.update(_convert(pairs, base=None))
        return ExperimentConfig(**values)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "source"}
_PATH_KEYS = {"train_manifest", "dev_manifest", "test_manifest", "out_dir", "feature_dir"}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if key == "seeds":
            return tuple(int(s) for s in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("", "none") else float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _convert(pairs: dict[str, str], base: Path | None) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(key, raw)
        if key in _PATH_KEYS and value and base is not None and not os.path.isabs(value):
            value = str(base / value)
        out[key] = value
    return out


def read_pairs(path, _seen=None) -> dict[str, tuple[str, Path]]:
    """Raw ``key -> (value, directory of defining file)``; later lines win."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    seen.add(path)
    pairs: dict[str, tuple[str, Path]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            target = line.split(None, 1)[1].strip()
            pairs.update(read_pairs(path.parent / target, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = (value, path.parent)
    seen.discard(path)
    return pairs


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = {}
    for key, (raw, base) in read_pairs(path).items():
        values.update(_convert({key: raw}, base))
    values.update(_convert(overrides or {}, Path.cwd()))
    return ExperimentConfig(**values, source=str(path))


def write_config(path, cfg: ExperimentConfig) -> None:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if name == "seeds":
            value = ",".join(map(str, value))
        lines.append(f"{name} = {'none' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
