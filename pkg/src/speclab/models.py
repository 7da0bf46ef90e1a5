"""Order-k Markov language models used as toy target and draft models.

A model is a dense table with one row per context of ``k`` token ids. Row
``i`` is the next-token distribution for the context whose base-V digits
(most significant first) spell ``i``.

Model file format (version 1), UTF-8 text::

    SPECLAB-MARKOV 1
    vocab_size <V>
    order <k>
    seed <u64>
    <row 0: V space-separated probabilities, 17 significant digits>
    ...
    <row V**k - 1>

Blank lines and lines starting with ``#`` are ignored anywhere in the file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .distributions import NORM_TOL, Distribution

MAGIC = "SPECLAB-MARKOV"
FORMAT_VERSION = 1
MAX_TABLE_ROWS = 2**20

DRAFT_MODES = ("temperature-perturb", "mixture-with-uniform", "dirichlet-resample", "partial-knowledge")

# temperature-perturb: rows are flattened with exponent 1/T, T = 1 + strength * this.
PERTURB_MAX_EXTRA_TEMPERATURE = 3.0
# dirichlet-resample: row' ~ Dirichlet(c * row + floor / V), c = 10 ** (RESAMPLE_LOG10_CONC * (1 - s)).
RESAMPLE_LOG10_CONC = 4.0
RESAMPLE_FLOOR = 0.5
# partial-knowledge: each context is "unknown" to the draft with probability s.
# Known rows are (1 - KNOWN_SMOOTHING * s) * row + KNOWN_SMOOTHING * s / V.
# Unknown rows keep (1 - UNKNOWN_WEIGHT) of the true row and spend the rest on a
# hedge: GUESS_WEIGHT on a spurious guess ~ Dirichlet(1 / V), the remainder uniform.
KNOWN_SMOOTHING = 0.3
UNKNOWN_WEIGHT = 0.8
GUESS_WEIGHT = 0.6


class ModelFileError(ValueError):
    """Malformed model file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class ModelVersionError(ModelFileError):
    pass


class ModelValidationError(ModelFileError):
    """A row of the table is not a valid distribution."""

    def __init__(self, message: str, row: int, line: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}", line)


class TableTooLargeError(ValueError):
    pass


def _check_table_size(vocab_size: int, order: int) -> int:
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    # Compare in log space to avoid building huge ints for silly inputs.
    if order * math.log2(vocab_size) > math.log2(MAX_TABLE_ROWS) + 1e-9:
        raise TableTooLargeError(
            f"V**k = {vocab_size}**{order} rows exceeds the cap of {MAX_TABLE_ROWS}"
        )
    return vocab_size**order


class MarkovModel:
    """Immutable order-k Markov model over tokens ``0..V-1``."""

    def __init__(self, table: np.ndarray, vocab_size: int, order: int, seed: int = 0):
        n_rows = _check_table_size(vocab_size, order)
        table = np.array(table, dtype=np.float64)
        if table.shape != (n_rows, vocab_size):
            raise ValueError(f"table shape {table.shape} != ({n_rows}, {vocab_size})")
        for i, row in enumerate(table):
            _validate_row(row, i)
        table.setflags(write=False)
        self.table = table
        self.vocab_size = vocab_size
        self.order = order
        self.seed = int(seed)

    @property
    def n_contexts(self) -> int:
        return self.table.shape[0]

    def context_index(self, context: Sequence[int]) -> int:
        """Row index for the last ``k`` tokens, left-padding short contexts with 0."""
        V, k = self.vocab_size, self.order
        for t in context:
            if not 0 <= t < V:
                raise ValueError(f"token {t} out of range [0, {V})")
        if k == 0:
            return 0
        tail = list(context[-k:])
        tail = [0] * (k - len(tail)) + tail
        idx = 0
        for t in tail:
            idx = idx * V + t
        return idx

    def row(self, index: int) -> Distribution:
        return Distribution(self.table[index])

    def next_distribution(self, context: Sequence[int]) -> Distribution:
        return self.row(self.context_index(context))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MarkovModel):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.order == other.order
            and self.seed == other.seed
            and np.array_equal(self.table, other.table)
        )

    def __repr__(self) -> str:
        return f"MarkovModel(V={self.vocab_size}, k={self.order}, seed={self.seed})"


def _validate_row(row: np.ndarray, index: int, line: int | None = None) -> None:
    if not np.all(np.isfinite(row)) or row.min() < 0.0 or row.max() > 1.0 + NORM_TOL:
        raise ModelValidationError("entries must lie in [0, 1]", index, line)
    total = float(row.sum())
    if abs(total - 1.0) > NORM_TOL:
        raise ModelValidationError(f"sums to {total!r}, not 1", index, line)


def _normalize(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=1, keepdims=True)


def random_target(vocab_size: int, order: int, concentration: float, seed: int) -> MarkovModel:
    """Rows drawn i.i.d. from a symmetric Dirichlet(concentration)."""
    if not concentration > 0:
        raise ValueError(f"concentration must be > 0, got {concentration!r}")
    n_rows = _check_table_size(vocab_size, order)
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(vocab_size, float(concentration)), size=n_rows)
    return MarkovModel(_normalize(rows), vocab_size, order, seed)


@dataclass(frozen=True)
class DerivedDraftSpec:
    mode: str = "dirichlet-resample"
    strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in DRAFT_MODES:
            raise ValueError(f"unknown draft mode {self.mode!r}; expected one of {DRAFT_MODES}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength!r}")


def _perturb_rows(table: np.ndarray, spec: DerivedDraftSpec) -> np.ndarray:
    s = spec.strength
    V = table.shape[1]
    if spec.mode == "mixture-with-uniform":
        return (1.0 - s) * table + s / V
    if spec.mode == "temperature-perturb":
        t = 1.0 + PERTURB_MAX_EXTRA_TEMPERATURE * s
        scaled = table / table.max(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            return _normalize(np.exp(np.log(scaled) / t))
    if spec.mode == "partial-knowledge":
        rng = np.random.default_rng(spec.seed)
        unknown = rng.random(table.shape[0]) < s
        guess = rng.dirichlet(np.full(V, 1.0 / V), size=table.shape[0])
        hedge = GUESS_WEIGHT * guess + (1.0 - GUESS_WEIGHT) / V
        known_rows = (1.0 - KNOWN_SMOOTHING * s) * table + KNOWN_SMOOTHING * s / V
        unknown_rows = (1.0 - UNKNOWN_WEIGHT) * table + UNKNOWN_WEIGHT * hedge
        return np.where(unknown[:, None], unknown_rows, known_rows)
    # dirichlet-resample
    conc = 10.0 ** (RESAMPLE_LOG10_CONC * (1.0 - s))
    floor = RESAMPLE_FLOOR * s / V
    rng = np.random.default_rng(spec.seed)
    alphas = conc * table + floor
    # Dirichlet via normalized gammas; a zero alpha yields an exact zero entry.
    g = np.where(alphas > 0, rng.standard_gamma(np.maximum(alphas, 1e-300)), 0.0)
    sums = g.sum(axis=1, keepdims=True)
    # A row whose gammas all underflow keeps its base row.
    bad = sums[:, 0] <= 0
    g[bad] = table[bad]
    sums[bad] = 1.0
    return g / sums


def derive_draft(base: MarkovModel, spec: DerivedDraftSpec) -> MarkovModel:
    """Perturbed copy of ``base``; ``strength == 0`` returns identical rows."""
    if spec.strength == 0.0:
        rows = base.table.copy()
    else:
        rows = _normalize(_perturb_rows(base.table, spec))
    return MarkovModel(rows, base.vocab_size, base.order, spec.seed)


def mean_row_tvd(a: MarkovModel, b: MarkovModel) -> float:
    return float(0.5 * np.abs(a.table - b.table).sum(axis=1).mean())


def save(model: MarkovModel, path: str | Path) -> None:
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"vocab_size {model.vocab_size}",
        f"order {model.order}",
        f"seed {model.seed}",
    ]
    lines.extend(" ".join(format(x, ".17g") for x in row) for row in model.table)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _content_lines(text: str) -> Iterable[tuple[int, str]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def load(path: str | Path) -> MarkovModel:
    text = Path(path).read_text(encoding="utf-8")
    lines = list(_content_lines(text))
    if not lines:
        raise ModelFileError("empty model file")

    lineno, first = lines[0]
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ModelFileError(f"expected '{MAGIC} <version>' header", lineno)
    try:
        version = int(parts[1])
    except ValueError:
        raise ModelFileError(f"bad version {parts[1]!r}", lineno) from None
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model file version {version} (expected {FORMAT_VERSION})", lineno)

    header: dict[str, int] = {}
    for key, (lineno, line) in zip(("vocab_size", "order", "seed"), lines[1:4]):
        parts = line.split()
        if len(parts) != 2 or parts[0] != key:
            raise ModelFileError(f"expected '{key} <int>'", lineno)
        try:
            header[key] = int(parts[1])
        except ValueError:
            raise ModelFileError(f"{key} is not an integer: {parts[1]!r}", lineno) from None
    if len(header) < 3:
        raise ModelFileError("truncated header", lines[-1][0])

    V, k = header["vocab_size"], header["order"]
    n_rows = _check_table_size(V, k)
    body = lines[4:]
    if len(body) < n_rows:
        last = body[-1][0] if body else lines[3][0]
        raise ModelFileError(f"truncated file: expected {n_rows} rows, found {len(body)}", last)
    if len(body) > n_rows:
        raise ModelFileError(f"unexpected extra content after {n_rows} rows", body[n_rows][0])

    table = np.empty((n_rows, V))
    for i, (lineno, line) in enumerate(body):
        fields = line.split()
        if len(fields) != V:
            raise ModelFileError(f"row {i} has {len(fields)} entries, expected {V}", lineno)
        try:
            table[i] = [float(f) for f in fields]
        except ValueError as e:
            raise ModelFileError(f"row {i}: {e}", lineno) from None
        _validate_row(table[i], i, lineno)
    return MarkovModel(table, V, k, header["seed"])
