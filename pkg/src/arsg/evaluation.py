"""Symbol error rate, symbol mapping, alignment verdicts, heatmap export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dcore import ContractViolation


class SymbolMap:
    """Total map from decoded symbol ids to scored symbol ids.

    Identity by default; pairs loaded from a two-column text file
    override individual symbols.
    """

    def __init__(self, mapping: dict[int, int] | None = None):
        self._map = dict(mapping or {})

    def __call__(self, symbol: int) -> int:
        return self._map.get(symbol, symbol)

    def apply(self, seq) -> list[int]:
        return [self(s) for s in seq]

    @classmethod
    def load(cls, path, name_to_id: dict[str, int]) -> "SymbolMap":
        mapping: dict[int, int] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ContractViolation(f"{path}:{lineno}: expected 'from to', got {line!r}")
            src, dst = parts
            if src not in name_to_id or dst not in name_to_id:
                raise ContractViolation(f"{path}:{lineno}: unknown symbol in {line!r}")
            mapping[name_to_id[src]] = name_to_id[dst]
        return cls(mapping)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = np.arange(len(hyp) + 1)
    cur = np.empty(len(hyp) + 1, dtype=np.int64)
    for i, r in enumerate(ref, 1):
        cur[0] = i
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev, cur = cur, prev
    return int(prev[len(hyp)])


def per(
    refs,
    hyps,
    symbol_map: SymbolMap | None = None,
    eos_id: int | None = None,
) -> float:
    """Corpus error rate: total edit distance over total reference length.

    A hypothesis of None marks a decode failure and scores its full
    reference length as errors. The eos symbol is stripped before
    mapping; both sides pass through the symbol map.
    """
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ContractViolation(f"per: {len(refs)} references vs {len(hyps)} hypotheses")
    smap = symbol_map or SymbolMap()
    errors = 0
    total = 0
    for ref, hyp in zip(refs, hyps):
        ref_m = smap.apply(s for s in ref if s != eos_id)
        if not ref_m:
            raise ContractViolation("per: reference maps to an empty sequence")
        total += len(ref_m)
        if hyp is None:
            errors += len(ref_m)
            continue
        hyp_m = smap.apply(s for s in hyp if s != eos_id)
        errors += edit_distance(ref_m, hyp_m)
    return errors / total


@dataclass
class AlignmentVerdict:
    """Per-step alignment mass inside the slack-extended segment windows."""

    fractions: list[float]
    step_correct: list[bool]
    correct: bool
    n_correct: int


def alignment_correct(
    A: np.ndarray,
    segments,
    slack: int = 20,
    mass: float = 0.9,
) -> AlignmentVerdict:
    """Judge a (T, L) forced alignment against ground-truth segments.

    Row i is correct when at least `mass` of its weight lies inside
    [start - slack, end + slack] (closed on both ends) of segment i.
    When A has one more row than there are segments, the extra final row
    is the end-of-sequence step and is exempt from the verdict.
    """
    A = np.asarray(A)
    if A.ndim != 2:
        raise ContractViolation(f"alignment matrix must be 2-D, got {A.shape}")
    segments = list(segments)
    rows = A.shape[0]
    if rows == len(segments) + 1:
        scored = A[:-1]
    elif rows == len(segments):
        scored = A
    else:
        raise ContractViolation(
            f"alignment has {rows} rows for {len(segments)} segments"
        )
    L = A.shape[1]
    fractions: list[float] = []
    flags: list[bool] = []
    for row, (_, start, end) in zip(scored, segments):
        lo = max(0, int(start) - slack)
        hi = min(L - 1, int(end) + slack)
        frac = float(row[lo : hi + 1].sum())
        fractions.append(frac)
        flags.append(frac >= mass - 1e-9)
    n_correct = sum(flags)
    return AlignmentVerdict(fractions, flags, all(flags), n_correct)


def export_alignment(A: np.ndarray, out_prefix) -> tuple[Path, Path]:
    """Write an alignment matrix as CSV (full precision) and 8-bit PGM."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ContractViolation(f"alignment matrix must be 2-D, got {A.shape}")
    prefix = Path(out_prefix)
    csv_path = prefix.with_suffix(".csv")
    pgm_path = prefix.with_suffix(".pgm")
    with open(csv_path, "w") as fh:
        for row in A:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    peak = float(A.max())
    pixels = np.zeros(A.shape, dtype=np.uint8)
    if peak > 0:
        pixels = np.round(255.0 * A / peak).astype(np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{A.shape[1]} {A.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return csv_path, pgm_path


def read_alignment_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line:
            rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows)
