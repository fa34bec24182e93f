"""Left-to-right beam search with end-of-sequence handling and widening.

Hypotheses carry raw summed log-probabilities (no length normalization);
finished hypotheses compete in the same pool as unfinished ones but are
never extended. When no hypothesis emits the end symbol within the
length cap, decoding retries at doubled beam widths up to a maximum and
reports a failure if the widest attempt also produces none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import attention as att
from .cells import birnn_encode
from .dcore import ContractViolation, Tensor
from .model import (
    ArsgParams,
    GeneratorState,
    _log_softmax_vec,
    _output_logits,
    recurrency,
    start_alignment,
)


class NoEosError(Exception):
    """Beam search hit the length cap without a finished hypothesis."""

    def __init__(self, stats: "DecodeStats"):
        super().__init__("no hypothesis emitted the end-of-sequence symbol")
        self.stats = stats


@dataclass
class BeamConfig:
    """Beam-search settings, including the decode-time normalizer."""

    width: int = 10
    max_width: int = 40
    max_len: int | None = None
    frames_per_symbol: float = 3.0
    normalizer: att.NormalizerConfig = field(default_factory=att.NormalizerConfig)

    def __post_init__(self):
        if not 1 <= self.width <= self.max_width:
            raise ContractViolation(
                f"beam widths must satisfy 1 <= {self.width} <= {self.max_width}"
            )


@dataclass
class Hypothesis:
    symbols: tuple[int, ...]
    log_prob: float
    finished: bool
    state: Any = None

    def __post_init__(self):
        if self.log_prob > 0:
            raise ContractViolation("hypothesis log-probability must be <= 0")


@dataclass
class DecodeStats:
    attempts: int = 0
    widths: list[int] = field(default_factory=list)
    steps: int = 0
    score_evaluations: int = 0
    per_call_evaluations: list[int] = field(default_factory=list)

    def merge(self, other: "DecodeStats") -> None:
        self.attempts += other.attempts
        self.widths.extend(other.widths)
        self.steps += other.steps
        self.score_evaluations += other.score_evaluations
        self.per_call_evaluations.extend(other.per_call_evaluations)


@dataclass
class DecodeResult:
    symbols: list[int]
    log_prob: float
    stats: DecodeStats
    failed: bool = False


class ArsgBeamModel:
    """Adapts generator parameters to the stepper interface beam search uses."""

    def __init__(self, params: ArsgParams, normalizer: att.NormalizerConfig):
        self.p = params
        self.cfg = normalizer
        self.eos_id = params.config.eos_id
        self.vocab_size = params.config.vocab_size

    def encode(self, x) -> Tensor:
        return birnn_encode(self.p.encoder, x)

    def start(self, h: Tensor):
        return GeneratorState(s=self.p.s0.value, alpha=start_alignment(h.shape[0], self.cfg))

    def expand(self, state: GeneratorState, h: Tensor):
        res = att.attend(self.p.attention, state.s, state.alpha, h, self.cfg)
        g = att.glimpse(res.alignment, h)
        logp = _log_softmax_vec(_output_logits(self.p, state.s, g))
        return logp.data, (g, res.alignment), res.scores_evaluated

    def advance(self, state: GeneratorState, pending, y: int) -> GeneratorState:
        g, alpha = pending
        return GeneratorState(s=recurrency(self.p, state.s, g, y), alpha=alpha)


def _as_model(p, normalizer: att.NormalizerConfig | None):
    if isinstance(p, ArsgParams):
        return ArsgBeamModel(p, normalizer or p.config.default_normalizer())
    return p


def _max_len(cfg: BeamConfig, h) -> int:
    if cfg.max_len is not None:
        return cfg.max_len
    if h is None or not hasattr(h, "shape"):
        raise ContractViolation("beam search needs max_len when no frames are given")
    return max(1, math.ceil(3.0 * h.shape[0] / cfg.frames_per_symbol))


def beam_search(p, h, cfg: BeamConfig, width: int | None = None) -> DecodeResult:
    """Search for the best symbol sequence ending in eos.

    Raises NoEosError when no finished hypothesis exists within the
    length cap. `width` overrides cfg.width (used by the widening retry).
    """
    model = _as_model(p, cfg.normalizer)
    width = cfg.width if width is None else width
    max_len = _max_len(cfg, h)
    stats = DecodeStats(attempts=1, widths=[width])
    beam = [Hypothesis(symbols=(), log_prob=0.0, finished=False, state=model.start(h))]
    for _ in range(max_len):
        stats.steps += 1
        candidates: list[tuple[Hypothesis, Any, Any, int]] = []
        for hyp in beam:
            if hyp.finished:
                candidates.append((hyp, None, None, -1))
                continue
            logp, pending, evals = model.expand(hyp.state, h)
            stats.score_evaluations += evals
            stats.per_call_evaluations.append(evals)
            for y in range(model.vocab_size):
                child = Hypothesis(
                    symbols=hyp.symbols if y == model.eos_id else hyp.symbols + (y,),
                    log_prob=hyp.log_prob + float(logp[y]),
                    finished=y == model.eos_id,
                )
                candidates.append((child, hyp.state, pending, y))
        candidates.sort(key=lambda c: (-c[0].log_prob, c[0].symbols, not c[0].finished))
        beam = []
        seen: set[tuple] = set()
        for child, state, pending, y in candidates:
            key = (child.symbols, child.finished)
            if key in seen:
                continue
            seen.add(key)
            if not child.finished and pending is not None:
                child.state = model.advance(state, pending, y)
            beam.append(child)
            if len(beam) == width:
                break
        if beam[0].finished:
            return DecodeResult(list(beam[0].symbols), beam[0].log_prob, stats)
    done = [hyp for hyp in beam if hyp.finished]
    if done:
        best = max(done, key=lambda hyp: hyp.log_prob)
        return DecodeResult(list(best.symbols), best.log_prob, stats)
    raise NoEosError(stats)


def decode_with_widening(p, h, cfg: BeamConfig) -> DecodeResult:
    """Retry beam search at doubled widths; report failure past the cap."""
    model = _as_model(p, cfg.normalizer)
    stats = DecodeStats()
    width = cfg.width
    while True:
        try:
            result = beam_search(model, h, cfg, width=width)
        except NoEosError as err:
            stats.merge(err.stats)
            if width >= cfg.max_width:
                return DecodeResult([], -math.inf, stats, failed=True)
            width = min(2 * width, cfg.max_width)
            continue
        stats.merge(result.stats)
        return DecodeResult(result.symbols, result.log_prob, stats)


def beam_sweep(p, utterances, widths: list[int], cfg: BeamConfig, refs=None):
    """Decode a dataset at each fixed width (no widening); PER per width.

    `utterances` yields (encoded frames, reference symbols) pairs unless
    `refs` is given separately. Failed decodes score their full reference
    length as errors.
    """
    from .evaluation import per

    if not widths:
        raise ContractViolation("beam_sweep: widths must be nonempty")
    model = _as_model(p, cfg.normalizer)
    pairs = list(utterances) if refs is None else list(zip(utterances, refs))
    out: dict[int, float] = {}
    for width in widths:
        hyps = []
        for h, _ref in pairs:
            try:
                hyps.append(beam_search(model, h, cfg, width=width).symbols)
            except NoEosError:
                hyps.append(None)
        out[width] = per([r for _, r in pairs], hyps)
    return out
