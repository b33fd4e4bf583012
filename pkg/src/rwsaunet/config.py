"""Flat ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key has a default, so an
empty file is a valid configuration of the XS model.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .dsp import StftConfig
from .model import ConfigError, ModelConfig
from .objectives import LossWeights


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (parser, default)
SCHEMA = {
    "model.C": (int, 16),
    "model.N": (int, 2),
    "model.heads_bottleneck": (int, 8),
    "model.heads_other": (int, 4),
    "model.rwsa": (_bool, True),
    "model.rwsa_pairing": (str, "per_block"),
    "model.mha": (_bool, True),
    "model.tie_layernorm": (_bool, True),
    "mamba.d_state": (int, 16),
    "mamba.d_conv": (int, 4),
    "mamba.expand": (int, 3),
    "stft.n_fft": (int, 510),
    "stft.win": (int, 510),
    "stft.hop": (int, 120),
    "compress.c": (float, 0.3),
    "mask.beta": (float, 2.0),
    "loss.w_time": (float, 0.2),
    "loss.w_mag": (float, 0.9),
    "loss.w_complex": (float, 0.1),
    "loss.w_phase": (float, 0.3),
    "loss.w_consistency": (float, 0.1),
    "loss.w_gan": (float, 0.0),
    "train.segment": (int, 30600),
    "train.batch": (int, 8),
    "train.lr": (float, 5e-4),
    "train.seed": (int, 0),
    "train.eval_every": (int, 50),
}


_MODEL_KEYS = {
    "C": "model.C", "N": "model.N", "heads_bottleneck": "model.heads_bottleneck", "heads_other": "model.heads_other",
    "rwsa_pairing": "model.rwsa_pairing", "d_state": "mamba.d_state", "d_conv": "mamba.d_conv",
    "expand": "mamba.expand", "c": "compress.c", "beta": "mask.beta", "levels": "model.levels",
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def model(self) -> ModelConfig:
        v = self.values
        try:
            stft = StftConfig(n_fft=v["stft.n_fft"], win_length=v["stft.win"], hop=v["stft.hop"])
        except ValueError as exc:
            raise ConfigError("stft.n_fft", str(exc)) from exc
        try:
            return self._model(v, stft)
        except ConfigError as exc:
            key = _MODEL_KEYS.get(exc.key, exc.key)
            raise ConfigError(key, str(exc).split(": ", 1)[-1]) from exc

    @staticmethod
    def _model(v, stft):
        return ModelConfig(
            C=v["model.C"], N=v["model.N"], heads_bottleneck=v["model.heads_bottleneck"],
            heads_other=v["model.heads_other"], stft=stft, c=v["compress.c"], beta=v["mask.beta"],
            d_state=v["mamba.d_state"], d_conv=v["mamba.d_conv"], expand=v["mamba.expand"],
            rwsa=v["model.rwsa"], rwsa_pairing=v["model.rwsa_pairing"], mha=v["model.mha"],
            tie_layernorm=v["model.tie_layernorm"])

    @property
    def loss_weights(self) -> LossWeights:
        v = self.values
        try:
            return LossWeights(v["loss.w_time"], v["loss.w_mag"], v["loss.w_complex"], v["loss.w_phase"],
                               v["loss.w_consistency"], v["loss.w_gan"])
        except ValueError as exc:
            raise ConfigError("loss.w_time", str(exc)) from exc

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigError` naming the first offending key."""
        _ = self.model, self.loss_weights
        for key in ("train.segment", "train.batch", "train.eval_every"):
            if self.values[key] < 1:
                raise ConfigError(key, "must be positive")
        if not self.values["train.lr"] >= 0:
            raise ConfigError("train.lr", "must be nonnegative")
        return self

    def dumps(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in SCHEMA)

    def with_(self, **overrides) -> "RunConfig":
        v = dict(self.values)
        for k, val in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(key, "unknown key")
            v[key] = val
        return RunConfig(v)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def defaults() -> RunConfig:
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse(text: str) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from exc
    return RunConfig(values)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    return parse(text)
