"""Declarative run configuration: one INI-style file, flags win over keys."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attention import NormalizerConfig
from .data import SynthTaskConfig
from .dcore import ContractViolation
from .model import ATTENTION_MODES, ModelConfig
from .training import TrainConfig


@dataclass
class BeamSettings:
    width: int = 10
    max_width: int = 40
    frames_per_symbol: float = 3.0


@dataclass
class RunConfig:
    """Everything one experiment needs: task, model dims, training, decoding."""

    task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    attention_mode: str = "conv"
    encoder_layers: int = 1
    encoder_units: int = 16
    attention_units: int = 16
    conv_channels: int = 4
    conv_width: int = 21
    generator_units: int = 16
    maxout_units: int = 8
    maxout_pool: int = 2
    embedding_dim: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamSettings = field(default_factory=BeamSettings)
    seed: int = 1234

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ContractViolation(f"unknown attention mode '{self.attention_mode}'")

    def model_config(self, vocab_size: int, input_dim: int, eos_id: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            input_dim=input_dim,
            eos_id=eos_id,
            attention_mode=self.attention_mode,
            encoder_layers=self.encoder_layers,
            encoder_units=self.encoder_units,
            attention_units=self.attention_units,
            conv_channels=self.conv_channels,
            conv_width=self.conv_width,
            generator_units=self.generator_units,
            maxout_units=self.maxout_units,
            maxout_pool=self.maxout_pool,
            embedding_dim=self.embedding_dim,
        )

    def default_normalizer(self) -> NormalizerConfig:
        mode = "smoothing" if self.attention_mode == "conv+smoothing" else "softmax"
        return NormalizerConfig(mode=mode)


def _pair(raw: str) -> tuple[int, int]:
    parts = raw.replace(",", " ").split()
    if len(parts) != 2:
        raise ContractViolation(f"expected two integers, got {raw!r}")
    return int(parts[0]), int(parts[1])


def load_run_config(path) -> RunConfig:
    """Parse a sectioned key = value file into a RunConfig."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)
    cfg = RunConfig()

    if parser.has_section("task"):
        t = parser["task"]
        cfg.task = SynthTaskConfig(
            n_symbols=t.getint("symbols", cfg.task.n_symbols),
            feature_dim=t.getint("feature_dim", cfg.task.feature_dim),
            frames_per_symbol=_pair(t.get("frames_per_symbol", "2 4")),
            noise_std=t.getfloat("noise_std", cfg.task.noise_std),
            symbols_per_utterance=_pair(t.get("symbols_per_utterance", "5 15")),
            pause_frames=t.getint("pause_frames", cfg.task.pause_frames),
            seed=t.getint("seed", cfg.task.seed),
        )
    if parser.has_section("model"):
        m = parser["model"]
        cfg.attention_mode = m.get("attention", cfg.attention_mode)
        if cfg.attention_mode not in ATTENTION_MODES:
            raise ContractViolation(f"unknown attention mode '{cfg.attention_mode}'")
        cfg.encoder_layers = m.getint("encoder_layers", cfg.encoder_layers)
        cfg.encoder_units = m.getint("encoder_units", cfg.encoder_units)
        cfg.attention_units = m.getint("attention_units", cfg.attention_units)
        cfg.conv_channels = m.getint("conv_channels", cfg.conv_channels)
        cfg.conv_width = m.getint("conv_width", cfg.conv_width)
        cfg.generator_units = m.getint("generator_units", cfg.generator_units)
        cfg.maxout_units = m.getint("maxout_units", cfg.maxout_units)
        cfg.maxout_pool = m.getint("maxout_pool", cfg.maxout_pool)
        cfg.embedding_dim = m.getint("embedding_dim", cfg.embedding_dim)
    if parser.has_section("train"):
        tr = parser["train"]
        d = TrainConfig()
        cfg.train = TrainConfig(
            rho=tr.getfloat("rho", d.rho),
            eps_stage1=tr.getfloat("eps_stage1", d.eps_stage1),
            eps_finetune=tr.getfloat("eps_finetune", d.eps_finetune),
            max_col_norm=tr.getfloat("max_col_norm", d.max_col_norm),
            weight_noise_std=tr.getfloat("weight_noise_std", d.weight_noise_std),
            patience=tr.getint("patience", d.patience),
            seed=tr.getint("seed", d.seed),
            grad_clip=tr.getfloat("grad_clip", d.grad_clip),
            log_every=tr.getint("log_every", d.log_every),
            stall_evals=tr.getint("stall_evals", d.stall_evals),
            max_updates_stage_a=tr.getint("max_updates_stage_a", d.max_updates_stage_a),
            max_updates_stage_b=tr.getint("max_updates_stage_b", d.max_updates_stage_b),
            max_updates_stage_c=tr.getint("max_updates_stage_c", d.max_updates_stage_c),
        )
    if parser.has_section("beam"):
        b = parser["beam"]
        cfg.beam = BeamSettings(
            width=b.getint("width", cfg.beam.width),
            max_width=b.getint("max_width", cfg.beam.max_width),
            frames_per_symbol=b.getfloat("frames_per_symbol", cfg.beam.frames_per_symbol),
        )
    if parser.has_section("run"):
        cfg.seed = parser["run"].getint("seed", cfg.seed)
    return cfg
