"""The attention-based recurrent sequence generator.

One output step attends over the encoded input, forms a glimpse, emits a
distribution over the vocabulary from the previous generator state and
the glimpse, and then folds the emitted symbol back into the state
through a GRU. Teacher-forced likelihood and forced alignment drive
training and the alignment experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass, replace
from typing import Callable

import numpy as np

from . import attention as att
from .cells import (
    BiRnnEncoderParams,
    BiRnnLayerParams,
    GruParams,
    MaxoutParams,
    birnn_encode,
    gru_step,
    maxout,
)
from .dcore import (
    ContractViolation,
    Parameter,
    Tensor,
    add,
    concat,
    div,
    exp,
    log,
    matmul,
    neg,
    reshape,
    slice_axis,
    sub,
    sum_over_axis,
)

ATTENTION_MODES = ("content", "conv", "conv+smoothing")


@dataclass
class ModelConfig:
    """Dimensions and attention flavor of one model."""

    vocab_size: int
    input_dim: int
    eos_id: int
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

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ContractViolation(f"unknown attention mode '{self.attention_mode}'")
        if not 0 <= self.eos_id < self.vocab_size:
            raise ContractViolation("eos id must lie inside the vocabulary")

    @property
    def encoded_dim(self) -> int:
        return 2 * self.encoder_units

    def default_normalizer(self) -> att.NormalizerConfig:
        mode = "smoothing" if self.attention_mode == "conv+smoothing" else "softmax"
        return att.NormalizerConfig(mode=mode)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ArsgParams:
    config: ModelConfig
    encoder: BiRnnEncoderParams
    attention: att.AttentionParams
    recurrency: GruParams
    out_hidden: MaxoutParams
    out_proj: Parameter  # (vocab, maxout units)
    out_bias: Parameter  # (vocab,)
    embedding: Parameter  # (vocab, d_emb)
    s0: Parameter  # (generator units,)

    def parameters(self) -> list[Parameter]:
        return (
            self.encoder.parameters()
            + self.attention.parameters()
            + self.recurrency.parameters()
            + self.out_hidden.parameters()
            + [self.out_proj, self.out_bias, self.embedding, self.s0]
        )


@dataclass
class GeneratorState:
    s: Tensor
    alpha: Tensor


@dataclass
class StepOutput:
    alignment: Tensor
    glimpse: Tensor
    dist: Tensor
    next_state: GeneratorState
    scores_evaluated: int = 0


def _zeros(shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape)


def _gru(
    name: str,
    d_in: int,
    d_out: int,
    weight_init: Callable,
    recurrent_init: Callable,
) -> GruParams:
    return GruParams(
        W_z=Parameter(f"{name}.W_z", weight_init((d_out, d_in))),
        W_r=Parameter(f"{name}.W_r", weight_init((d_out, d_in))),
        W_c=Parameter(f"{name}.W_c", weight_init((d_out, d_in))),
        U_z=Parameter(f"{name}.U_z", recurrent_init((d_out, d_out))),
        U_r=Parameter(f"{name}.U_r", recurrent_init((d_out, d_out))),
        U_c=Parameter(f"{name}.U_c", recurrent_init((d_out, d_out))),
        b_z=Parameter(f"{name}.b_z", _zeros((d_out,))),
        b_r=Parameter(f"{name}.b_r", _zeros((d_out,))),
        b_c=Parameter(f"{name}.b_c", _zeros((d_out,))),
    )


def build_params(
    cfg: ModelConfig,
    weight_init: Callable | None = None,
    recurrent_init: Callable | None = None,
) -> ArsgParams:
    """Construct the parameter set; default initializers are all-zero."""
    w_init = weight_init or _zeros
    r_init = recurrent_init or w_init
    layers = []
    d_in = cfg.input_dim
    for i in range(cfg.encoder_layers):
        layers.append(
            BiRnnLayerParams(
                fwd=_gru(f"enc.l{i}.fwd", d_in, cfg.encoder_units, w_init, r_init),
                bwd=_gru(f"enc.l{i}.bwd", d_in, cfg.encoder_units, w_init, r_init),
                h0_fwd=Parameter(f"enc.l{i}.h0_fwd", _zeros((cfg.encoder_units,))),
                h0_bwd=Parameter(f"enc.l{i}.h0_bwd", _zeros((cfg.encoder_units,))),
            )
        )
        d_in = 2 * cfg.encoder_units
    hybrid = cfg.attention_mode in ("conv", "conv+smoothing")
    attention = att.AttentionParams(
        w=Parameter("att.w", w_init((cfg.attention_units,))),
        W=Parameter("att.W", w_init((cfg.attention_units, cfg.generator_units))),
        V=Parameter("att.V", w_init((cfg.attention_units, cfg.encoded_dim))),
        b=Parameter("att.b", _zeros((cfg.attention_units,))),
        U=Parameter("att.U", w_init((cfg.attention_units, cfg.conv_channels))) if hybrid else None,
        F=Parameter("att.F", w_init((cfg.conv_channels, cfg.conv_width))) if hybrid else None,
    )
    return ArsgParams(
        config=cfg,
        encoder=BiRnnEncoderParams(layers),
        attention=attention,
        recurrency=_gru(
            "gen", cfg.embedding_dim + cfg.encoded_dim, cfg.generator_units, w_init, r_init
        ),
        out_hidden=MaxoutParams(
            W=Parameter(
                "out.W",
                w_init((cfg.maxout_units * cfg.maxout_pool, cfg.generator_units + cfg.encoded_dim)),
            ),
            b=Parameter("out.b", _zeros((cfg.maxout_units * cfg.maxout_pool,))),
            pool=cfg.maxout_pool,
        ),
        out_proj=Parameter("out.proj", w_init((cfg.vocab_size, cfg.maxout_units))),
        out_bias=Parameter("out.bias", _zeros((cfg.vocab_size,))),
        embedding=Parameter("emb", w_init((cfg.vocab_size, cfg.embedding_dim))),
        s0=Parameter("gen.s0", _zeros((cfg.generator_units,))),
    )


def map_parameters(obj, fn: Callable[[Parameter], Parameter]):
    """Structural copy of a parameter container with every Parameter mapped."""
    if isinstance(obj, Parameter):
        return fn(obj)
    if isinstance(obj, list):
        return [map_parameters(v, fn) for v in obj]
    if isinstance(obj, tuple):
        return tuple(map_parameters(v, fn) for v in obj)
    if is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            m = map_parameters(v, fn)
            if m is not v:
                changes[f.name] = m
        return replace(obj, **changes) if changes else obj
    return obj


# ---------------------------------------------------------------------------
# one generation step
# ---------------------------------------------------------------------------


def initial_state(p: ArsgParams, L: int) -> GeneratorState:
    """Learned initial state and a uniform initial alignment over L frames."""
    if L < 1:
        raise ContractViolation("initial_state: L must be at least 1")
    return GeneratorState(s=p.s0.value, alpha=Tensor(np.full(L, 1.0 / L)))


def start_alignment(L: int, cfg: att.NormalizerConfig) -> Tensor:
    """Alignment prior for the first step.

    Uniform, except under windowed evaluation where the uniform prior's
    median would anchor the first window mid-sequence; there the prior is
    a one-hot at frame 0 so decoding starts at the beginning.
    """
    if cfg.window is not None:
        a = np.zeros(L)
        a[0] = 1.0
        return Tensor(a)
    return Tensor(np.full(L, 1.0 / L))


def _output_logits(p: ArsgParams, s_prev: Tensor, g: Tensor) -> Tensor:
    hidden = maxout(p.out_hidden, concat([s_prev, g]))
    return add(matmul(p.out_proj.value, hidden), p.out_bias.value)


def _softmax_vec(logits: Tensor) -> Tensor:
    z = exp(sub(logits, float(np.max(logits.data))))
    return div(z, sum_over_axis(z))


def _log_softmax_vec(logits: Tensor) -> Tensor:
    z = sub(logits, float(np.max(logits.data)))
    return sub(z, log(sum_over_axis(exp(z))))


def generate_dist(p: ArsgParams, s_prev: Tensor, g: Tensor) -> Tensor:
    """Distribution over the vocabulary from state and glimpse."""
    return _softmax_vec(_output_logits(p, s_prev, g))


def recurrency(p: ArsgParams, s_prev: Tensor, g: Tensor, y: int) -> Tensor:
    """Fold the emitted symbol and glimpse into the generator state."""
    if not 0 <= y < p.config.vocab_size:
        raise ContractViolation(f"symbol {y} outside vocabulary of {p.config.vocab_size}")
    emb = reshape(slice_axis(p.embedding.value, y, y + 1), (p.config.embedding_dim,))
    return gru_step(p.recurrency, s_prev, concat([emb, g]))


def step(
    p: ArsgParams,
    state: GeneratorState,
    h: Tensor,
    y_fed: int,
    cfg: att.NormalizerConfig,
) -> StepOutput:
    """One full generation step; y_fed is the symbol emitted at this step."""
    res = att.attend(p.attention, state.s, state.alpha, h, cfg)
    g = att.glimpse(res.alignment, h)
    dist = generate_dist(p, state.s, g)
    s_next = recurrency(p, state.s, g, y_fed)
    return StepOutput(
        alignment=res.alignment,
        glimpse=g,
        dist=dist,
        next_state=GeneratorState(s=s_next, alpha=res.alignment),
        scores_evaluated=res.scores_evaluated,
    )


# ---------------------------------------------------------------------------
# teacher-forced passes
# ---------------------------------------------------------------------------


def _check_targets(p: ArsgParams, y) -> list[int]:
    y = list(y)
    if not y:
        raise ContractViolation("target sequence is empty")
    if y[-1] != p.config.eos_id:
        raise ContractViolation("target sequence must end with the end-of-sequence symbol")
    return y


def nll_teacher_forced(p: ArsgParams, x, y, cfg: att.NormalizerConfig) -> Tensor:
    """Negative log-likelihood of y (ending in eos) given features x.

    Ground-truth symbols are fed back into the recurrency; the symbol
    emitted at step i conditions the state used from step i + 1 on.
    """
    y = _check_targets(p, y)
    h = birnn_encode(p.encoder, x)
    L = h.shape[0]
    state = GeneratorState(s=p.s0.value, alpha=start_alignment(L, cfg))
    loss = None
    for i, y_i in enumerate(y):
        res = att.attend(p.attention, state.s, state.alpha, h, cfg)
        g = att.glimpse(res.alignment, h)
        logp = _log_softmax_vec(_output_logits(p, state.s, g))
        term = neg(sum_over_axis(slice_axis(logp, y_i, y_i + 1)))
        loss = term if loss is None else add(loss, term)
        if i + 1 < len(y):
            s_next = recurrency(p, state.s, g, y_i)
            state = GeneratorState(s=s_next, alpha=res.alignment)
    return loss


def save_model(path, params: ArsgParams) -> None:
    """Checkpoint plus a JSON sidecar carrying the model dimensions."""
    import json

    from .dcore import save_checkpoint

    save_checkpoint(path, params.parameters())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"config": params.config.to_dict()}, fh, indent=2)
        fh.write("\n")


def load_model(path) -> ArsgParams:
    """Rebuild a model from a checkpoint and its JSON sidecar."""
    import json

    from .dcore import restore_checkpoint

    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    params = build_params(ModelConfig.from_dict(meta["config"]))
    restore_checkpoint(path, params.parameters())
    return params


def forced_align(p: ArsgParams, x, y, cfg: att.NormalizerConfig) -> np.ndarray:
    """(T, L) alignment matrix from feeding ground-truth symbols."""
    y = _check_targets(p, y)
    h = birnn_encode(p.encoder, x)
    L = h.shape[0]
    state = GeneratorState(s=p.s0.value, alpha=start_alignment(L, cfg))
    rows = []
    for i, y_i in enumerate(y):
        res = att.attend(p.attention, state.s, state.alpha, h, cfg)
        rows.append(res.alignment.data)
        if i + 1 < len(y):
            g = att.glimpse(res.alignment, h)
            s_next = recurrency(p, state.s, g, y_i)
            state = GeneratorState(s=s_next, alpha=res.alignment)
    return np.stack(rows)
