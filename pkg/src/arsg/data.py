"""Synthetic transduction task, feature post-processing, and dataset I/O.

Each symbol has a fixed random prototype vector; an utterance is a random
symbol sequence where every symbol emits a few noisy copies of its
prototype. Ground-truth segment boundaries are recorded exactly, which
is what the forced-alignment experiments score against. Features go
through first/second temporal differences, per-feature standardization
fitted on the training split, and an all-zero end-of-utterance frame.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dcore import ContractViolation, DcoreError

EOS, SOS, PAU = "eos", "sos", "pau"


class DataFormatError(DcoreError):
    """A data file is malformed or truncated."""


@dataclass
class SymbolTable:
    """Symbol names; line number in the table file is the symbol id."""

    names: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ContractViolation("symbol table has duplicate names")
        for required in (EOS, SOS, PAU):
            if required not in self.names:
                raise ContractViolation(f"symbol table is missing '{required}'")
        self.ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    @property
    def sos_id(self) -> int:
        return self.ids[SOS]

    @property
    def pau_id(self) -> int:
        return self.ids[PAU]

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names))

    @classmethod
    def load(cls, path) -> "SymbolTable":
        names = [line for line in Path(path).read_text().splitlines() if line]
        return cls(names)


def make_symbol_table(n_symbols: int) -> SymbolTable:
    """eos/sos/pau first, then the content symbols; pau counts toward n_symbols."""
    if n_symbols < 2:
        raise ContractViolation("need at least one content symbol plus pause")
    return SymbolTable([EOS, SOS, PAU] + [f"s{i:02d}" for i in range(n_symbols - 1)])


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (L', d)
    targets: list[int]  # excluding eos
    segments: list[tuple[int, int, int]] | None = None  # (symbol, first, last) inclusive

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.segments is not None:
            last = -1
            for sym, start, end in self.segments:
                if not (last < start <= end < len(self.features)):
                    raise ContractViolation(
                        f"utterance {self.id}: bad segment ({sym}, {start}, {end})"
                    )
                last = end
            if [s for s, _, _ in self.segments] != list(self.targets):
                raise ContractViolation(f"utterance {self.id}: segments disagree with targets")

    @property
    def n_frames(self) -> int:
        return len(self.features)


@dataclass
class SynthTaskConfig:
    """Knobs of the synthetic benchmark; n_symbols includes the pause symbol."""

    n_symbols: int = 10
    feature_dim: int = 8
    frames_per_symbol: tuple[int, int] = (2, 4)
    noise_std: float = 0.1
    symbols_per_utterance: tuple[int, int] = (5, 15)
    pause_frames: int = 5
    seed: int = 1234

    def __post_init__(self):
        if self.n_symbols < 2:
            raise ContractViolation("n_symbols must be at least 2 (content + pause)")
        if self.frames_per_symbol[0] < 1:
            raise ContractViolation("frames per symbol must be at least 1")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["frames_per_symbol"] = list(self.frames_per_symbol)
        d["symbols_per_utterance"] = list(self.symbols_per_utterance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTaskConfig":
        d = dict(d)
        d["frames_per_symbol"] = tuple(d["frames_per_symbol"])
        d["symbols_per_utterance"] = tuple(d["symbols_per_utterance"])
        return cls(**d)


@dataclass
class SynthTask:
    """Config plus the drawn prototypes; prototype row i belongs to symbol pau_id + i."""

    config: SynthTaskConfig
    table: SymbolTable
    prototypes: np.ndarray  # (n_symbols, feature_dim); row 0 is the pause

    def prototype_for(self, symbol_id: int) -> np.ndarray:
        row = symbol_id - self.table.pau_id
        if not 0 <= row < len(self.prototypes):
            raise ContractViolation(f"symbol {symbol_id} has no prototype")
        return self.prototypes[row]

    @property
    def content_ids(self) -> list[int]:
        return [self.table.pau_id + 1 + i for i in range(self.config.n_symbols - 1)]


def make_task(cfg: SynthTaskConfig) -> SynthTask:
    rng = np.random.default_rng(cfg.seed)
    prototypes = rng.normal(0.0, 1.0, size=(cfg.n_symbols, cfg.feature_dim))
    return SynthTask(cfg, make_symbol_table(cfg.n_symbols), prototypes)


def synth_generate(
    task: SynthTask, n_utts: int, rng: np.random.Generator, prefix: str = "utt"
) -> list[Utterance]:
    """Draw utterances: random content symbols, noisy prototype frames."""
    cfg = task.config
    lo_s, hi_s = cfg.symbols_per_utterance
    lo_f, hi_f = cfg.frames_per_symbol
    content = np.asarray(task.content_ids)
    out: list[Utterance] = []
    for i in range(n_utts):
        n_syms = int(rng.integers(lo_s, hi_s + 1))
        symbols = [int(s) for s in rng.choice(content, size=n_syms)]
        frames = []
        segments = []
        cursor = 0
        for sym in symbols:
            dur = int(rng.integers(lo_f, hi_f + 1))
            block = task.prototype_for(sym) + rng.normal(
                0.0, cfg.noise_std, size=(dur, cfg.feature_dim)
            )
            frames.append(block)
            segments.append((sym, cursor, cursor + dur - 1))
            cursor += dur
        out.append(
            Utterance(
                id=f"{prefix}{i:05d}",
                features=np.concatenate(frames),
                targets=symbols,
                segments=segments,
            )
        )
    return out


# ---------------------------------------------------------------------------
# feature post-processing
# ---------------------------------------------------------------------------


def _sym_diff(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (padded[2:] - padded[:-2])


def compute_deltas(features: np.ndarray) -> np.ndarray:
    """Append first and second temporal differences; triples the columns."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ContractViolation(f"compute_deltas: expected (L, d) features, got {x.shape}")
    d1 = _sym_diff(x)
    d2 = _sym_diff(d1)
    return np.concatenate([x, d1, d2], axis=1)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_norm(train: list[Utterance]) -> NormStats:
    """Per-feature mean and standard deviation over all training frames."""
    if not train:
        raise ContractViolation("fit_norm: empty training set")
    stacked = np.concatenate([u.features for u in train])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    bad = np.flatnonzero(std < 1e-12)
    if bad.size:
        raise ContractViolation(f"zero-variance feature at index {int(bad[0])}")
    return NormStats(mean, std)


def apply_norm(stats: NormStats, utts: list[Utterance]) -> list[Utterance]:
    return [
        Utterance(u.id, (u.features - stats.mean) / stats.std, u.targets, u.segments)
        for u in utts
    ]


def fit_apply_norm(train: list[Utterance], *others: list[Utterance]):
    """Fit stats on the training split only, standardize every split."""
    stats = fit_norm(train)
    sets = [apply_norm(stats, train)] + [apply_norm(stats, o) for o in others]
    return stats, sets


def append_end_frame(utt: Utterance) -> Utterance:
    """Append one all-zero frame; segments and targets are unchanged."""
    zero = np.zeros((1, utt.features.shape[1]))
    return Utterance(utt.id, np.concatenate([utt.features, zero]), utt.targets, utt.segments)


def concat_utterances(
    utts: list[Utterance],
    pause_frames: int,
    pause_vector: np.ndarray | None = None,
    pause_symbol: int | None = None,
    append_end: bool = True,
) -> Utterance:
    """Join utterances with pause-prototype frames and the pause symbol.

    Inputs must not carry end frames; a single all-zero end frame is
    appended at the very end. With pause_frames == 0 no pause symbol is
    inserted either.
    """
    if not utts:
        raise ContractViolation("concat_utterances: empty input")
    dim = utts[0].features.shape[1]
    if any(u.features.shape[1] != dim for u in utts):
        raise ContractViolation("concat_utterances: feature dims differ")
    if pause_frames < 0:
        raise ContractViolation("concat_utterances: pause_frames must be >= 0")
    insert_pause = pause_frames > 0 and len(utts) > 1
    if insert_pause and (pause_vector is None or pause_symbol is None):
        raise ContractViolation("concat_utterances: pause vector and symbol required")
    features = []
    targets: list[int] = []
    segments: list[tuple[int, int, int]] = []
    have_segments = all(u.segments is not None for u in utts)
    cursor = 0
    for idx, u in enumerate(utts):
        if idx > 0 and insert_pause:
            features.append(np.tile(pause_vector, (pause_frames, 1)))
            targets.append(pause_symbol)
            segments.append((pause_symbol, cursor, cursor + pause_frames - 1))
            cursor += pause_frames
        features.append(u.features)
        targets.extend(u.targets)
        if have_segments:
            segments.extend((s, a + cursor, b + cursor) for s, a, b in u.segments)
        cursor += u.n_frames
    out = Utterance(
        id="+".join(u.id for u in utts),
        features=np.concatenate(features),
        targets=targets,
        segments=segments if have_segments else None,
    )
    return append_end_frame(out) if append_end else out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1


def write_fseq(path, features: np.ndarray) -> None:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"write_fseq: expected (L, d), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FSEQ_MAGIC)
        fh.write(struct.pack("<III", FSEQ_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_fseq(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FSEQ_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
        head = fh.read(12)
        if len(head) != 12:
            raise DataFormatError(f"{path}: truncated header at byte {4 + len(head)}")
        version, n_frames, dim = struct.unpack("<III", head)
        if version != FSEQ_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        want = 8 * n_frames * dim
        raw = fh.read(want)
        if len(raw) != want:
            raise DataFormatError(
                f"{path}: truncated payload at byte {16 + len(raw)}, wanted {16 + want} total"
            )
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after frame payload")
    return np.frombuffer(raw, dtype="<f8").reshape(n_frames, dim).copy()


def write_manifest(path, utts: list[Utterance], feature_dir: str = "feats") -> None:
    """One JSON record per utterance; features go to <dir>/<id>.fseq alongside."""
    path = Path(path)
    feat_root = path.parent / feature_dir
    feat_root.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for u in utts:
            rel = f"{feature_dir}/{u.id}.fseq"
            write_fseq(path.parent / rel, u.features)
            record = {
                "id": u.id,
                "feature_path": rel,
                "targets": list(u.targets),
                "segments": [list(s) for s in u.segments] if u.segments is not None else None,
            }
            fh.write(json.dumps(record) + "\n")


def read_manifest(path) -> list[Utterance]:
    path = Path(path)
    out: list[Utterance] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataFormatError(f"{path}:{lineno}: bad JSON: {err}") from None
        segments = rec.get("segments")
        out.append(
            Utterance(
                id=rec["id"],
                features=read_fseq(path.parent / rec["feature_path"]),
                targets=[int(t) for t in rec["targets"]],
                segments=[tuple(s) for s in segments] if segments is not None else None,
            )
        )
    return out


@dataclass
class Dataset:
    splits: dict[str, list[Utterance]]
    table: SymbolTable
    prototypes: np.ndarray
    config: SynthTaskConfig


def store_dataset(out_dir, dataset: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.table.save(out / "symbols.txt")
    write_fseq(out / "prototypes.fseq", dataset.prototypes)
    (out / "task.json").write_text(json.dumps(dataset.config.to_dict(), indent=2) + "\n")
    for name, utts in dataset.splits.items():
        write_manifest(out / f"{name}.jsonl", utts)


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    table = SymbolTable.load(root / "symbols.txt")
    prototypes = read_fseq(root / "prototypes.fseq")
    config = SynthTaskConfig.from_dict(json.loads((root / "task.json").read_text()))
    splits = {}
    for manifest in sorted(root.glob("*.jsonl")):
        splits[manifest.stem] = read_manifest(manifest)
    if "train" not in splits:
        raise DataFormatError(f"{data_dir}: no train.jsonl manifest")
    return Dataset(splits, table, prototypes, config)


# ---------------------------------------------------------------------------
# prepared pipeline: deltas -> standardize -> end frame
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Model-ready splits plus what long-utterance evaluation needs."""

    splits: dict[str, list[Utterance]]
    table: SymbolTable
    stats: NormStats
    pause_row: np.ndarray  # standardized pause prototype with zero deltas
    config: SynthTaskConfig

    @property
    def input_dim(self) -> int:
        return 3 * self.config.feature_dim

    def split(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise ContractViolation(f"no split named '{name}'")
        return self.splits[name]


def prepare_dataset(dataset: Dataset, append_end: bool = True) -> PreparedData:
    """Run the feature pipeline; stats come from the training split only."""
    with_deltas = {
        name: [Utterance(u.id, compute_deltas(u.features), u.targets, u.segments) for u in utts]
        for name, utts in dataset.splits.items()
    }
    stats = fit_norm(with_deltas["train"])
    out: dict[str, list[Utterance]] = {}
    for name, utts in with_deltas.items():
        std = apply_norm(stats, utts)
        out[name] = [append_end_frame(u) for u in std] if append_end else std
    pause_raw = compute_deltas(dataset.prototypes[0:1])[0]  # constant block: zero deltas
    pause_row = (pause_raw - stats.mean) / stats.std
    return PreparedData(out, dataset.table, stats, pause_row, dataset.config)
