"""Synthetic retrieval benchmark: grids of colored cells, edited by short
instructions.

An image is a g x g board of cells, each cell a patch-sized block drawn solid
or hollow in one palette color on a dark background. A query is (reference
image, instruction text); the unique correct target is the gallery image whose
board equals the reference board with the instruction applied.

The gallery is closed under the sampled edits by construction: half the boards
are random, the other half are derived from earlier boards by applying a valid
edit, and queries are drawn from the full set of (reference, edit, target)
edges found by exhaustive enumeration over the finished gallery. Texts are
generated from edits, never the other way around, so the ground truth does not
depend on any text parsing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoders import TokenSequence
from .mining import POSLexicon, Query
from .tensorio import load_tensor, save_tensor

PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.20),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.20, 0.85, 0.85),
    "orange": (0.95, 0.55, 0.15),
    "white": (0.95, 0.95, 0.95),
}
PATTERN_NAMES = ("solid", "hollow")
BACKGROUND = (0.10, 0.10, 0.12)
START_TOKEN, END_TOKEN = "<start>", "<end>"
STRUCTURAL_WORDS = ("recolor", "the", "to", "make", "every", "turn")
NOUN_WORDS = ("cell", "square")
SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    g: int = 4
    patch: int = 4
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "magenta", "cyan")
    patterns: tuple[str, ...] = PATTERN_NAMES
    gallery_size: int = 100
    train_queries: int = 500
    val_queries: int = 50
    test_queries: int = 100
    seed: int = 0

    def __post_init__(self):
        self.colors = tuple(self.colors)
        self.patterns = tuple(self.patterns)
        if self.g < 2:
            raise ValueError(f"board side must be >= 2, got {self.g}")
        if self.patch < 3:
            raise ValueError(
                f"patch must be >= 3 so hollow and solid cells render differently, "
                f"got {self.patch}")
        unknown = [c for c in self.colors if c not in PALETTE]
        if unknown:
            raise ValueError(f"unknown colors {unknown}; palette has {sorted(PALETTE)}")
        if len(set(self.colors)) != len(self.colors) or len(self.colors) < 2:
            raise ValueError("need at least two distinct colors")
        bad = [p for p in self.patterns if p not in PATTERN_NAMES]
        if bad:
            raise ValueError(f"unknown patterns {bad}; known: {PATTERN_NAMES}")
        if len(set(self.patterns)) < 2:
            raise ValueError("need both patterns for pattern edits")
        if self.gallery_size < 4:
            raise ValueError(f"gallery of {self.gallery_size} is too small")
        if min(self.train_queries, self.val_queries, self.test_queries) < 1:
            raise ValueError("every split needs at least one query")

    @property
    def image_side(self) -> int:
        return self.g * self.patch


def load_spec(path) -> SyntheticSpec:
    with open(path, encoding="utf-8") as stream:
        return SyntheticSpec(**json.load(stream))


# -- boards ----------------------------------------------------------------------

# boards are stored as nested tuples so they hash (closure lookups, dedupe)
Board = tuple[tuple[tuple[int, int], ...], ...]


def _board(cells: list[list[tuple[int, int]]]) -> Board:
    return tuple(tuple(row) for row in cells)


def random_board(rng: np.random.Generator, spec: SyntheticSpec) -> Board:
    colors = rng.integers(len(spec.colors), size=(spec.g, spec.g))
    patterns = rng.integers(len(spec.patterns), size=(spec.g, spec.g))
    return _board([[(int(colors[r, c]), int(patterns[r, c])) for c in range(spec.g)]
                   for r in range(spec.g)])


def color_counts(board: Board, n_colors: int) -> list[int]:
    counts = [0] * n_colors
    for row in board:
        for color, _ in row:
            counts[color] += 1
    return counts


@dataclass(frozen=True)
class Edit:
    kind: str     # "recolor_one" | "recolor_all" | "repattern_one"
    color: int    # color the instruction names
    value: int    # replacement color, or replacement pattern


def valid_edits(board: Board, spec: SyntheticSpec) -> list[Edit]:
    counts = color_counts(board, len(spec.colors))
    edits = []
    for c1 in range(len(spec.colors)):
        if counts[c1] == 0:
            continue
        for c2 in range(len(spec.colors)):
            if c2 == c1:
                continue
            if counts[c1] == 1:
                edits.append(Edit("recolor_one", c1, c2))
            edits.append(Edit("recolor_all", c1, c2))
        if counts[c1] == 1:
            pattern = next(p for row in board for col, p in row if col == c1)
            for p in range(len(spec.patterns)):
                if p != pattern:
                    edits.append(Edit("repattern_one", c1, p))
    return edits


def apply_edit(board: Board, edit: Edit) -> Board:
    cells = [list(row) for row in board]
    for r, row in enumerate(cells):
        for c, (color, pattern) in enumerate(row):
            if color != edit.color:
                continue
            if edit.kind in ("recolor_one", "recolor_all"):
                cells[r][c] = (edit.value, pattern)
            else:
                cells[r][c] = (color, edit.value)
    return _board(cells)


def edit_text(edit: Edit, spec: SyntheticSpec) -> str:
    c1 = spec.colors[edit.color]
    if edit.kind == "recolor_one":
        return f"recolor the {c1} cell to {spec.colors[edit.value]}"
    if edit.kind == "recolor_all":
        return f"make every {c1} cell {spec.colors[edit.value]}"
    if edit.kind == "repattern_one":
        return f"turn the {c1} square {spec.patterns[edit.value]}"
    raise ValueError(f"unknown edit kind {edit.kind!r}")


def render(board: Board, spec: SyntheticSpec) -> np.ndarray:
    side, p = spec.image_side, spec.patch
    image = np.empty((side, side, 3))
    image[:] = BACKGROUND
    for r, row in enumerate(board):
        for c, (color, pattern) in enumerate(row):
            rgb = PALETTE[spec.colors[color]]
            block = image[r * p:(r + 1) * p, c * p:(c + 1) * p]
            if spec.patterns[pattern] == "solid":
                block[:] = rgb
            else:
                block[0, :] = rgb
                block[-1, :] = rgb
                block[:, 0] = rgb
                block[:, -1] = rgb
    return image


# -- vocabulary -------------------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError("every token needs exactly one tag")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def encode(self, text: str) -> TokenSequence:
        try:
            ids = tuple(self.index[w] for w in text.split())
        except KeyError as e:
            raise ValueError(f"word {e.args[0]!r} is not in the vocabulary") from None
        return TokenSequence(token_ids=(self.index[START_TOKEN], *ids,
                                        self.index[END_TOKEN]))

    def decode(self, tokens: TokenSequence) -> str:
        return " ".join(self.tokens[i] for i in tokens.content)

    def lexicon(self) -> POSLexicon:
        return POSLexicon(tags=dict(enumerate(self.tags)))


def build_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    tokens = [START_TOKEN, END_TOKEN, *STRUCTURAL_WORDS,
              *spec.colors, *spec.patterns, *NOUN_WORDS]
    tags = (["other"] * (2 + len(STRUCTURAL_WORDS))
            + ["adjective"] * (len(spec.colors) + len(spec.patterns))
            + ["noun"] * len(NOUN_WORDS))
    return Vocabulary(tokens=tokens, tags=tags)


# -- generation -------------------------------------------------------------------


def build_gallery(spec: SyntheticSpec) -> list[Board]:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0)))
    boards: list[Board] = []
    seen: set[Board] = set()
    base = spec.gallery_size // 2
    while len(boards) < base:
        b = random_board(rng, spec)
        if b not in seen:
            seen.add(b)
            boards.append(b)
    attempts = 0
    while len(boards) < spec.gallery_size:
        attempts += 1
        if attempts > 200 * spec.gallery_size:
            raise RuntimeError("gallery construction stalled; relax the spec")
        source = boards[rng.integers(len(boards))]
        edits = valid_edits(source, spec)
        if not edits:
            continue
        derived = apply_edit(source, edits[rng.integers(len(edits))])
        if derived not in seen:
            seen.add(derived)
            boards.append(derived)
    return boards


def enumerate_edges(boards: list[Board], spec: SyntheticSpec) -> list[tuple[int, Edit, int]]:
    """All (reference, edit, target) triples that stay inside the gallery."""
    position = {b: i for i, b in enumerate(boards)}
    edges = []
    for i, board in enumerate(boards):
        for edit in valid_edits(board, spec):
            j = position.get(apply_edit(board, edit))
            if j is not None and j != i:
                edges.append((i, edit, j))
    return edges


def _sample_queries(edges, count, rng):
    if count <= len(edges):
        picks = rng.choice(len(edges), size=count, replace=False)
    else:
        picks = rng.integers(len(edges), size=count)
    return [edges[int(i)] for i in picks]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write the dataset files; returns a small summary for the caller."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    boards = build_gallery(spec)
    edges = enumerate_edges(boards, spec)
    if not edges:
        raise RuntimeError("no in-gallery edits found; enlarge the gallery")
    vocab = build_vocabulary(spec)

    images = np.stack([render(b, spec) for b in boards])
    save_tensor(out / "images.btsr", images)

    with open(out / "vocab.txt", "w", encoding="utf-8") as stream:
        for i, (token, tag) in enumerate(zip(vocab.tokens, vocab.tags)):
            stream.write(f"{token}\t{i}\t{tag}\n")

    with open(out / "spec.json", "w", encoding="utf-8") as stream:
        json.dump(asdict(spec), stream, sort_keys=True, indent=2)
        stream.write("\n")

    counts = {"train": spec.train_queries, "val": spec.val_queries,
              "test": spec.test_queries}
    query_id = 0
    summary = {"gallery": len(boards), "edges": len(edges)}
    for split_index, split in enumerate(SPLITS):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1 + split_index)))
        sampled = _sample_queries(edges, counts[split], rng)
        with open(out / f"queries_{split}.jsonl", "w", encoding="utf-8") as stream:
            for ref, edit, tgt in sampled:
                text = edit_text(edit, spec)
                record = {
                    "query_id": query_id,
                    "reference_id": ref,
                    "target_id": tgt,
                    "text": text,
                    "token_ids": list(vocab.encode(text).token_ids),
                }
                stream.write(json.dumps(record, sort_keys=True) + "\n")
                query_id += 1
        summary[split] = counts[split]
    return summary


# -- loading ----------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    images: np.ndarray                  # [gallery, side, side, 3]
    vocab: Vocabulary
    splits: dict[str, list[Query]]

    @property
    def gallery_size(self) -> int:
        return self.images.shape[0]


def load_dataset(data_dir) -> SyntheticDataset:
    root = Path(data_dir)
    spec = load_spec(root / "spec.json")
    images = load_tensor(root / "images.btsr")
    if images.ndim != 4 or images.shape[1:] != (spec.image_side, spec.image_side, 3):
        raise ValueError(
            f"image stack {images.shape} does not match spec side {spec.image_side}")

    tokens, tags = [], []
    with open(root / "vocab.txt", encoding="utf-8") as stream:
        for line_no, line in enumerate(stream):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"vocab line {line_no} is not token/index/tag: {line!r}")
            token, index, tag = parts
            if int(index) != line_no:
                raise ValueError(f"vocab indices must be contiguous; line {line_no} "
                                 f"claims {index}")
            tokens.append(token)
            tags.append(tag)
    vocab = Vocabulary(tokens=tokens, tags=tags)

    splits: dict[str, list[Query]] = {}
    for split in SPLITS:
        queries = []
        with open(root / f"queries_{split}.jsonl", encoding="utf-8") as stream:
            for line in stream:
                record = json.loads(line)
                for key in ("reference_id", "target_id"):
                    if not 0 <= record[key] < images.shape[0]:
                        raise ValueError(
                            f"query {record['query_id']} {key} {record[key]} outside "
                            f"gallery of {images.shape[0]}")
                ids = record["token_ids"]
                if any(not 0 <= t < len(tokens) for t in ids):
                    raise ValueError(f"query {record['query_id']} has out-of-vocabulary "
                                     f"token ids {ids}")
                queries.append(Query(
                    query_id=record["query_id"],
                    reference_image_id=record["reference_id"],
                    target_image_id=record["target_id"],
                    text=TokenSequence(token_ids=tuple(ids)),
                ))
        splits[split] = queries
    return SyntheticDataset(spec=spec, images=images, vocab=vocab, splits=splits)
