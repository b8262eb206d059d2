"""Synthetic grid images with global, local and mixed questions.

Each image is a G x G grid; every cell has a color id and a shape id and is
encoded as a patch vector [one-hot color | one-hot shape | marker]. The
marker channel highlights the cell a local or mixed question addresses, so
the toy LM can find it with a single attention hop. Questions are three
tokens, arguments first and the question type last:

* Global: ``[NONE, NONE, Q_MAJORITY]`` -> majority color of the grid.
* Local:  ``[ROW_r, COL_c, Q_SHAPE_AT]`` -> shape at cell (r, c).
* Mixed:  ``[ROW_r, COL_c, Q_IS_MAJORITY]`` -> YES iff cell (r, c) has the
  majority color.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import ArgumentError

THETA_COMPLEXITY = 2.5
THETA_GLOBALNESS = 2.5


class TaskKind(str, Enum):
    GLOBAL = "global"
    LOCAL = "local"
    MIXED = "mixed"


QUERY_GLOBALNESS = {TaskKind.GLOBAL: 4.5, TaskKind.LOCAL: 1.0, TaskKind.MIXED: 3.5}


@dataclass(frozen=True)
class Vocab:
    """Symbolic vocabulary layout for a palette and grid size."""

    grid: int = 8
    n_colors: int = 4
    n_shapes: int = 4
    size: int = 64

    def __post_init__(self):
        if self.last_used >= self.size:
            raise ArgumentError(f"vocabulary of {self.size} too small; need {self.last_used + 1}")

    @property
    def sys(self) -> tuple[int, int]:
        return (0, 1)

    def color(self, i: int) -> int:
        return 2 + i

    def shape(self, i: int) -> int:
        return 2 + self.n_colors + i

    def row(self, r: int) -> int:
        return 2 + self.n_colors + self.n_shapes + r

    def col(self, c: int) -> int:
        return 2 + self.n_colors + self.n_shapes + self.grid + c

    @property
    def none(self) -> int:
        return 2 + self.n_colors + self.n_shapes + 2 * self.grid

    @property
    def q_majority(self) -> int:
        return self.none + 1

    @property
    def q_shape_at(self) -> int:
        return self.none + 2

    @property
    def q_is_majority(self) -> int:
        return self.none + 3

    @property
    def yes(self) -> int:
        return self.none + 4

    @property
    def no(self) -> int:
        return self.none + 5

    @property
    def cot_symbolic(self) -> int:
        return self.none + 6

    @property
    def cot_holistic(self) -> int:
        return self.none + 7

    @property
    def last_used(self) -> int:
        return self.none + 7

    @cached_property
    def answers(self) -> np.ndarray:
        ids = [self.color(i) for i in range(self.n_colors)]
        ids += [self.shape(i) for i in range(self.n_shapes)]
        ids += [self.yes, self.no]
        return np.array(ids, dtype=np.int64)

    @property
    def patch_dim(self) -> int:
        return self.n_colors + self.n_shapes + 1


@dataclass
class SyntheticExample:
    example_id: int
    colors: np.ndarray  # (G, G) int
    shapes: np.ndarray  # (G, G) int
    query: np.ndarray  # (3,) token ids
    answer: int
    complexity: float
    globalness: float
    task_kind: TaskKind
    n_colors: int
    n_shapes: int
    cell: tuple[int, int] | None = None

    @property
    def patches(self) -> np.ndarray:
        return encode_patches(self.colors, self.shapes, self.n_colors, self.n_shapes, self.cell)

    @property
    def image_symbolic(self) -> bool:
        return self.complexity < THETA_COMPLEXITY

    @property
    def query_holistic(self) -> bool:
        return self.globalness >= THETA_GLOBALNESS

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "colors": self.colors.tolist(),
            "shapes": self.shapes.tolist(),
            "query": self.query.tolist(),
            "answer": self.answer,
            "complexity": self.complexity,
            "globalness": self.globalness,
            "task_kind": self.task_kind.value,
            "n_colors": self.n_colors,
            "n_shapes": self.n_shapes,
            "cell": None if self.cell is None else list(self.cell),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticExample":
        return cls(
            d["example_id"], np.array(d["colors"]), np.array(d["shapes"]),
            np.array(d["query"], dtype=np.int64), d["answer"], d["complexity"], d["globalness"],
            TaskKind(d["task_kind"]), d["n_colors"], d["n_shapes"],
            None if d.get("cell") is None else tuple(d["cell"]),
        )


def encode_patches(colors: np.ndarray, shapes: np.ndarray, n_colors: int, n_shapes: int,
                   cell: tuple[int, int] | None = None) -> np.ndarray:
    colors = np.asarray(colors)
    flat_c = colors.reshape(-1)
    flat_s = np.asarray(shapes).reshape(-1)
    out = np.zeros((flat_c.size, n_colors + n_shapes + 1), dtype=np.float32)
    out[np.arange(flat_c.size), flat_c] = 1.0
    out[np.arange(flat_s.size), n_colors + flat_s] = 1.0
    if cell is not None:
        out[cell[0] * colors.shape[1] + cell[1], -1] = 1.0
    return out


def image_complexity(colors: np.ndarray, n_colors: int) -> float:
    """Blend of distinct-color count and color entropy, scaled to [0, 5]."""
    counts = np.bincount(colors.reshape(-1), minlength=n_colors).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    distinct = (p.size - 1) / max(n_colors - 1, 1)
    entropy = float(-(p * np.log(p)).sum()) / math.log(n_colors) if n_colors > 1 else 0.0
    return float(round(5.0 * (0.5 * distinct + 0.5 * entropy), 6))


def majority_color(colors: np.ndarray, n_colors: int) -> int | None:
    counts = np.bincount(colors.reshape(-1), minlength=n_colors)
    top = np.flatnonzero(counts == counts.max())
    return int(top[0]) if top.size == 1 else None


def cluster_of(c: float, g: float) -> TaskKind:
    if c < THETA_COMPLEXITY:
        return TaskKind.GLOBAL
    if g < THETA_GLOBALNESS:
        return TaskKind.LOCAL
    return TaskKind.MIXED


def make_example(example_id: int, colors: np.ndarray, shapes: np.ndarray, kind: TaskKind, vocab: Vocab,
                 cell: tuple[int, int] | None = None) -> SyntheticExample:
    """Build an example from explicit grids; answers are computed, not sampled."""
    colors = np.asarray(colors, dtype=np.int64)
    shapes = np.asarray(shapes, dtype=np.int64)
    if kind is TaskKind.GLOBAL:
        maj = majority_color(colors, vocab.n_colors)
        if maj is None:
            raise ArgumentError("global example needs a unique majority color")
        query = [vocab.none, vocab.none, vocab.q_majority]
        answer = vocab.color(maj)
    else:
        if cell is None:
            raise ArgumentError(f"{kind.value} example needs a cell")
        r, c = cell
        if not (0 <= r < vocab.grid and 0 <= c < vocab.grid):
            raise ArgumentError(f"cell {cell} outside the {vocab.grid}x{vocab.grid} grid")
        if kind is TaskKind.LOCAL:
            query = [vocab.row(r), vocab.col(c), vocab.q_shape_at]
            answer = vocab.shape(int(shapes[r, c]))
        else:
            maj = majority_color(colors, vocab.n_colors)
            if maj is None:
                raise ArgumentError("mixed example needs a unique majority color")
            query = [vocab.row(r), vocab.col(c), vocab.q_is_majority]
            answer = vocab.yes if colors[r, c] == maj else vocab.no
    return SyntheticExample(
        example_id, colors, shapes, np.array(query, dtype=np.int64), int(answer),
        image_complexity(colors, vocab.n_colors), QUERY_GLOBALNESS[kind], kind,
        vocab.n_colors, vocab.n_shapes, None if cell is None else (int(cell[0]), int(cell[1])),
    )


def _global_grid(rng, vocab: Vocab) -> np.ndarray:
    n = vocab.grid * vocab.grid
    major, minor = rng.choice(vocab.n_colors, size=2, replace=False)
    m = int(rng.integers(int(np.ceil(0.55 * n)), int(0.75 * n) + 1))
    m = max(m, n // 2 + 1)
    cells = np.full(n, minor)
    cells[rng.permutation(n)[:m]] = major
    return cells.reshape(vocab.grid, vocab.grid)


def _complex_grid(rng, vocab: Vocab, need_majority: bool) -> np.ndarray:
    n = vocab.grid * vocab.grid
    while True:
        probs = rng.dirichlet(np.full(vocab.n_colors, 2.0))
        cells = rng.choice(vocab.n_colors, size=n, p=probs)
        grid = cells.reshape(vocab.grid, vocab.grid)
        if image_complexity(grid, vocab.n_colors) < THETA_COMPLEXITY:
            continue
        if need_majority and majority_color(grid, vocab.n_colors) is None:
            continue
        return grid


def gen_example(seed: int, kind: TaskKind, index: int, vocab: Vocab, example_id: int) -> SyntheticExample:
    kind_code = {TaskKind.GLOBAL: 0, TaskKind.LOCAL: 1, TaskKind.MIXED: 2}[kind]
    rng = np.random.default_rng([seed, kind_code, index])
    G = vocab.grid
    shapes = rng.integers(0, vocab.n_shapes, size=(G, G))
    if kind is TaskKind.GLOBAL:
        return make_example(example_id, _global_grid(rng, vocab), shapes, kind, vocab)
    colors = _complex_grid(rng, vocab, need_majority=kind is TaskKind.MIXED)
    if kind is TaskKind.LOCAL:
        cell = (int(rng.integers(G)), int(rng.integers(G)))
    else:
        maj = majority_color(colors, vocab.n_colors)
        want_yes = bool(rng.integers(2))
        pool = np.argwhere((colors == maj) == want_yes)
        cell = tuple(int(v) for v in pool[rng.integers(len(pool))])
    return make_example(example_id, colors, shapes, kind, vocab, cell)


def gen_dataset(seed: int, counts: dict | tuple = (10, 10, 10), vocab: Vocab | None = None,
                grid: int | None = None, n_colors: int | None = None,
                n_shapes: int | None = None) -> list[SyntheticExample]:
    """Deterministic dataset with exact per-kind tallies.

    ``counts`` is (global, local, mixed) or a mapping keyed by TaskKind or
    its string value. Example ids run consecutively in that kind order.
    """
    if vocab is None:
        vocab = Vocab(grid=grid or 8, n_colors=n_colors or 4, n_shapes=n_shapes or 4)
    if vocab.grid < 2 or vocab.grid * vocab.grid < 2 * vocab.n_colors:
        raise ArgumentError(f"grid {vocab.grid} too small for {vocab.n_colors} colors")
    if vocab.n_colors < 3:
        raise ArgumentError("need at least 3 colors to reach high image complexity")
    if isinstance(counts, dict):
        counts = tuple(int(counts.get(k, counts.get(k.value, 0))) for k in TaskKind)
    if any(c < 0 for c in counts):
        raise ArgumentError("counts must be non-negative")
    out: list[SyntheticExample] = []
    for kind, count in zip(TaskKind, counts):
        for i in range(count):
            out.append(gen_example(seed, kind, i, vocab, len(out)))
    return out


def dumps_dataset(examples: list[SyntheticExample]) -> str:
    return "\n".join(json.dumps(e.to_json(), sort_keys=True, separators=(",", ":")) for e in examples) + "\n"


def loads_dataset(text: str) -> list[SyntheticExample]:
    return [SyntheticExample.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


def shuffled(examples: list, seed: int) -> list:
    order = np.random.default_rng([seed, 0xDA7A]).permutation(len(examples))
    return [examples[i] for i in order]
