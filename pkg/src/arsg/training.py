"""AdaDelta training with the three-stage schedule.

Stage A trains under a column-norm constraint until development NLL
stops improving; stage B switches the constraint off and weight noise
on, continuing to a new best dev NLL; stage C fine-tunes with a smaller
epsilon until development symbol error rate shows no improvement for a
patience window. Batch size is fixed at one utterance and the loop is
single-threaded, so a fixed seed reproduces a run bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import decoding
from .attention import NormalizerConfig
from .data import Utterance
from .dcore import (
    ContractViolation,
    DcoreError,
    NumericFault,
    Parameter,
    Tape,
    Tensor,
    backward,
    save_checkpoint,
)
from .evaluation import per
from .model import ArsgParams, ModelConfig, build_params, map_parameters, nll_teacher_forced


class TrainingAborted(DcoreError):
    """Training hit a non-finite loss; a diagnostic checkpoint was written."""


@dataclass
class TrainConfig:
    rho: float = 0.95
    eps_stage1: float = 1e-8
    eps_finetune: float = 1e-10
    max_col_norm: float = 1.0
    weight_noise_std: float = 0.01
    patience: int = 100_000  # stage-C updates without dev-PER improvement
    batch_size: int = 1  # per-update utterance count; the loop assumes 1
    seed: int = 1234
    grad_clip: float = 50.0
    log_every: int = 200  # updates per log/dev-eval event
    stall_evals: int = 3  # non-improving dev evals that end stages A and B
    max_updates_stage_a: int = 10_000
    max_updates_stage_b: int = 2_000
    max_updates_stage_c: int = 2_000

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractViolation("rho must lie in (0, 1)")
        if self.eps_stage1 <= 0 or self.eps_finetune <= 0:
            raise ContractViolation("epsilon must be positive")
        if self.batch_size != 1:
            raise ContractViolation("batch size is fixed at 1")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def orthogonal_init(rng: np.random.Generator) -> Callable:
    """Orthogonal factor of a QR decomposition of a Gaussian draw."""

    def init(shape: tuple[int, ...]) -> np.ndarray:
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ContractViolation(f"orthogonal init needs a square matrix, got {shape}")
        q, r = np.linalg.qr(rng.normal(0.0, 1.0, shape))
        return q * np.sign(np.diag(r))

    return init


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ArsgParams:
    """Weights from N(0, 0.01^2), orthogonalized recurrent weights, zero biases."""
    return build_params(
        cfg,
        weight_init=lambda shape: rng.normal(0.0, 0.01, shape),
        recurrent_init=orthogonal_init(rng),
    )


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------


class AdaDeltaState:
    """Per-parameter squared-gradient and squared-delta accumulators."""

    def __init__(self, params: list[Parameter], rho: float = 0.95, eps: float = 1e-8):
        self.params = {p.name: p for p in params}
        if len(self.params) != len(params):
            raise ContractViolation("parameter names are not unique")
        self.rho = rho
        self.eps = eps
        self.acc_grad = {p.name: np.zeros(p.shape) for p in params}
        self.acc_delta = {p.name: np.zeros(p.shape) for p in params}


def adadelta_update(state: AdaDeltaState, grads: dict) -> dict[str, np.ndarray] | None:
    """Apply one AdaDelta step in place; returns the deltas.

    A non-finite gradient anywhere skips the whole update and returns
    None so the caller can report it.
    """
    arrays = {}
    for name, g in grads.items():
        arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            return None
        arrays[name] = arr
    deltas: dict[str, np.ndarray] = {}
    rho, eps = state.rho, state.eps
    for name, g in arrays.items():
        p = state.params[name]
        eg2 = state.acc_grad[name]
        ed2 = state.acc_delta[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        delta = -np.sqrt(ed2 + eps) / np.sqrt(eg2 + eps) * g
        ed2 *= rho
        ed2 += (1.0 - rho) * delta * delta
        p.value = Tensor(p.value.data + delta)
        deltas[name] = delta
    return deltas


def clip_column_norms(params, max_norm: float) -> None:
    """Rescale matrix columns with Euclidean norm above max_norm; vectors exempt."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    for p in params:
        if p.value.ndim != 2:
            continue
        data = p.value.data
        norms = np.sqrt((data * data).sum(axis=0))
        over = norms > max_norm
        if np.any(over):
            scale = np.ones_like(norms)
            scale[over] = max_norm / norms[over]
            p.value = Tensor(data * scale)


def add_weight_noise(params: ArsgParams, sigma: float, rng: np.random.Generator) -> ArsgParams:
    """Fresh perturbed copy for one update; the originals stay clean."""
    if sigma < 0:
        raise ContractViolation("noise std must be >= 0")
    if sigma == 0.0:
        return params
    return map_parameters(
        params, lambda p: Parameter(p.name, p.value.data + rng.normal(0.0, sigma, p.shape))
    )


def clip_global_norm(grads: dict, limit: float) -> dict:
    """Rescale the whole gradient when its global norm exceeds the limit."""
    arrays = {
        name: (g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64))
        for name, g in grads.items()
    }
    total = math.sqrt(sum(float(np.sum(a * a)) for a in arrays.values()))
    if total <= limit or total == 0.0:
        return grads
    factor = limit / total
    return {name: Tensor(a * factor) for name, a in arrays.items()}


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ArsgParams
    history: list[dict]
    checkpoints: list[Path]
    best_checkpoint: Path | None
    log_path: Path | None
    updates: int
    stages_run: list[str]


def evaluate_nll(params: ArsgParams, utts: list[Utterance], normalizer: NormalizerConfig) -> float:
    """Mean per-utterance teacher-forced NLL (no tape)."""
    eos = params.config.eos_id
    total = 0.0
    for u in utts:
        total += nll_teacher_forced(params, u.features, list(u.targets) + [eos], normalizer).item()
    return total / len(utts)


def evaluate_per(params: ArsgParams, utts: list[Utterance], normalizer: NormalizerConfig) -> float:
    """Greedy (width-1) decode of a split, failures scored fully wrong."""
    cfg = decoding.BeamConfig(width=1, max_width=1, normalizer=normalizer)
    model = decoding.ArsgBeamModel(params, normalizer)
    hyps = []
    for u in utts:
        h = model.encode(u.features)
        try:
            hyps.append(decoding.beam_search(model, h, cfg).symbols)
        except decoding.NoEosError:
            hyps.append(None)
    return per([u.targets for u in utts], hyps)


def train(
    params: ArsgParams,
    cfg: TrainConfig,
    train_set: list[Utterance],
    dev_set: list[Utterance],
    normalizer: NormalizerConfig,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Run the staged schedule; returns the best parameters by the last stage's criterion."""
    if not train_set or not dev_set:
        raise ContractViolation("train and dev sets must be nonempty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    eos = params.config.eos_id
    state = AdaDeltaState(params.parameters(), rho=cfg.rho, eps=cfg.eps_stage1)

    history: list[dict] = []
    checkpoints: list[Path] = []
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None
    best_nll = math.inf
    best_per = math.inf
    best_ckpt: Path | None = None
    updates = 0
    skipped = 0
    loss_window: list[float] = []
    order: list[int] = []
    stages_run: list[str] = []

    def next_utterance() -> Utterance:
        nonlocal order
        if not order:
            order = list(rng.permutation(len(train_set)))
        return train_set[order.pop(0)]

    def save_event(tag: str) -> Path | None:
        if out is None:
            return None
        path = out / f"ckpt_{tag}_{updates:06d}.ckpt"
        save_checkpoint(path, params.parameters())
        meta = {"config": params.config.to_dict(), "updates": updates, "tag": tag}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")
        checkpoints.append(path)
        return path

    def log_event(stage: str, dev_nll: float, dev_per: float | None) -> None:
        record = {
            "updates": updates,
            "stage": stage,
            "train_nll": (sum(loss_window) / len(loss_window)) if loss_window else None,
            "dev_nll": dev_nll,
        }
        if dev_per is not None:
            record["dev_per"] = dev_per
        if skipped:
            record["skipped_updates"] = skipped
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
        loss_window.clear()

    def one_update(noise: float, col_norm: bool) -> None:
        nonlocal updates, skipped
        u = next_utterance()
        pass_params = add_weight_noise(params, noise, rng)
        try:
            with Tape() as tape:
                loss = nll_teacher_forced(
                    pass_params, u.features, list(u.targets) + [eos], normalizer
                )
        except NumericFault as err:
            if out is not None:
                save_checkpoint(out / "diagnostic.ckpt", params.parameters())
            raise TrainingAborted(f"non-finite loss on utterance {u.id}: {err}") from err
        loss_window.append(loss.item())
        grads = backward(tape, loss, pass_params.parameters())
        grads = clip_global_norm(grads, cfg.grad_clip)
        if adadelta_update(state, grads) is None:
            skipped += 1
        elif col_norm:
            clip_column_norms(params.parameters(), cfg.max_col_norm)
        updates += 1

    def run_stage(stage: str, budget: int, noise: float, col_norm: bool, use_per: bool) -> None:
        nonlocal best_nll, best_per, best_ckpt
        stages_run.append(stage)
        stall = 0
        since_best = 0
        done = 0
        while done < budget:
            chunk = min(cfg.log_every, budget - done)
            for _ in range(chunk):
                one_update(noise, col_norm)
            done += chunk
            dev_nll = evaluate_nll(params, dev_set, normalizer)
            dev_per_val = evaluate_per(params, dev_set, normalizer) if use_per else None
            log_event(stage, dev_nll, dev_per_val)
            if use_per:
                if dev_per_val < best_per - 1e-12:
                    best_per = dev_per_val
                    best_ckpt = save_event(f"{stage}_per") or best_ckpt
                    since_best = 0
                else:
                    since_best += chunk
                if since_best >= cfg.patience:
                    return
            else:
                if dev_nll < best_nll - 1e-12:
                    best_nll = dev_nll
                    best_ckpt = save_event(f"{stage}_nll") or best_ckpt
                    stall = 0
                else:
                    stall += 1
                if stall >= cfg.stall_evals:
                    return

    try:
        run_stage("A", cfg.max_updates_stage_a, 0.0, True, False)
        state.eps = cfg.eps_stage1
        run_stage("B", cfg.max_updates_stage_b, cfg.weight_noise_std, False, False)
        state.eps = cfg.eps_finetune
        best_per = math.inf  # stage C measures improvement from its own start
        run_stage("C", cfg.max_updates_stage_c, cfg.weight_noise_std, False, True)
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_ckpt is not None:
        from .dcore import restore_checkpoint

        restore_checkpoint(best_ckpt, params.parameters())
        if out is not None:
            save_checkpoint(out / "best.ckpt", params.parameters())
            Path(str(out / "best.ckpt") + ".json").write_text(
                json.dumps({"config": params.config.to_dict(), "source": best_ckpt.name}, indent=2)
                + "\n"
            )
    return TrainResult(
        params=params,
        history=history,
        checkpoints=checkpoints,
        best_checkpoint=best_ckpt,
        log_path=(out / "train_log.jsonl") if out is not None else None,
        updates=updates,
        stages_run=stages_run,
    )
