"""Cascade file handling and the synthetic community generator.

Cascade files are UTF-8 text: one cascade per line, whitespace-separated raw
node ids in activation order, ``#`` lines ignored.  The synthetic generator
produces diffusion traces over planted communities together with a
node-to-community label sidecar.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .numerics import RngState

log = logging.getLogger(__name__)

MAX_CASCADE_LEN = 200  # default truncation; typical cascades are far shorter


@dataclass
class Vocabulary:
    """Bijection between raw string node ids and dense indices [0, N)."""

    ids: List[str]
    index: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {v: i for i, v in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return len(self.ids)

    def id_of(self, idx: int) -> str:
        return self.ids[idx]

    def index_of(self, raw: str) -> int:
        return self.index[raw]


@dataclass
class ParsedCascades:
    cascades: List[List[int]]
    vocabulary: Vocabulary
    dropped_short: int


def _check_token(token: str, line_no: int) -> None:
    for ch in token:
        if ord(ch) < 0x20 or ch == "\x7f":
            raise ValueError(f"line {line_no}: malformed token {token!r}")


def parse_cascades(lines: Iterable[str], dedupe: bool = False) -> ParsedCascades:
    """Parse a cascade stream into index sequences plus the vocabulary.

    Cascades shorter than 2 nodes carry no prediction point and are dropped
    (counted in ``dropped_short``).  ``dedupe`` keeps only the first
    occurrence of a node within a cascade; by default repeats are kept.
    """
    raw_cascades: List[List[str]] = []
    dropped = 0
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        for tok in tokens:
            _check_token(tok, line_no)
        if dedupe:
            tokens = list(dict.fromkeys(tokens))
        if len(tokens) < 2:
            dropped += 1
            continue
        raw_cascades.append(tokens)
    if dropped:
        log.warning("dropped %d cascade(s) shorter than 2 nodes", dropped)

    ids: List[str] = []
    index: Dict[str, int] = {}
    for tokens in raw_cascades:
        for tok in tokens:
            if tok not in index:
                index[tok] = len(ids)
                ids.append(tok)
    vocab = Vocabulary(ids=ids, index=index)
    cascades = [[index[t] for t in tokens] for tokens in raw_cascades]
    return ParsedCascades(cascades=cascades, vocabulary=vocab, dropped_short=dropped)


def format_cascade_lines(cascades: Sequence[Sequence[int]], vocab: Vocabulary) -> List[str]:
    """Inverse of parse_cascades (used for round-trips and synth output)."""
    return [" ".join(vocab.id_of(i) for i in c) for c in cascades]


@dataclass
class DatasetSplit:
    train: List[List[int]]
    valid: List[List[int]]
    test: List[List[int]]
    split_seed: int


def split_dataset(cascades: Sequence[Sequence[int]], seed: int) -> DatasetSplit:
    """Seeded shuffle, then 80/10/10: floor-sized valid and test, remainder
    to train."""
    m = len(cascades)
    if m < 10:
        raise ValueError(f"need at least 10 cascades to split, got {m}")
    order = RngState(seed).permutation(m)
    shuffled = [list(cascades[i]) for i in order]
    n_valid = m // 10
    n_test = m // 10
    n_train = m - n_valid - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train:n_train + n_valid],
        test=shuffled[n_train + n_valid:],
        split_seed=seed,
    )


@dataclass
class Batch:
    """Padded index block.  ``pad_mask`` is True exactly at padding slots,
    which must never reach the loss or the attention."""

    indices: np.ndarray   # (B, L) int
    lengths: np.ndarray   # (B,) true lengths
    pad_mask: np.ndarray  # (B, L) bool, True = pad

    def cascade(self, row: int) -> np.ndarray:
        return self.indices[row, : self.lengths[row]]


def make_batches(
    cascades: Sequence[Sequence[int]],
    batch_size: int,
    max_len: int = MAX_CASCADE_LEN,
    pad_index: int = None,
) -> List[Batch]:
    """Group cascades in order into batches, truncating to the first
    ``max_len`` nodes and padding to the longest member."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if pad_index is None:
        pad_index = max((max(c) for c in cascades if len(c)), default=-1) + 1
    batches = []
    for start in range(0, len(cascades), batch_size):
        chunk = [list(c[:max_len]) for c in cascades[start:start + batch_size]]
        lengths = np.array([len(c) for c in chunk], dtype=np.intp)
        width = int(lengths.max()) if len(chunk) else 0
        indices = np.full((len(chunk), width), pad_index, dtype=np.intp)
        for row, c in enumerate(chunk):
            indices[row, : len(c)] = c
        pad = np.arange(width)[None, :] >= lengths[:, None]
        batches.append(Batch(indices=indices, lengths=lengths, pad_mask=pad))
    return batches


# ---------------------------------------------------------------------------
# synthetic multi-community diffusion


@dataclass
class SyntheticSpec:
    communities: int
    nodes_per_community: int
    cross_community_prob: float
    cascades: int
    length_range: Tuple[int, int]
    seed: int

    def __post_init__(self):
        if self.communities < 1 or self.nodes_per_community < 1 or self.cascades < 1:
            raise ValueError("communities, nodes_per_community and cascades must be positive")
        if not 0.0 <= self.cross_community_prob <= 1.0:
            raise ValueError(f"cross_community_prob must be in [0,1], got {self.cross_community_prob}")
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ValueError(f"length_range must satisfy 2 <= min <= max, got {self.length_range}")


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[List[str]], Dict[str, int]]:
    """Diffusion traces over planted communities.

    A cascade starts at a uniform node of a uniform community; at each step
    it jumps to a uniformly chosen *other* community with probability
    ``cross_community_prob`` (when more than one exists), then infects a
    uniform not-yet-infected member of the current community.  An exhausted
    community forces a jump to one with nodes left when jumps are allowed,
    otherwise the cascade ends early.  Deterministic per seed.
    """
    rng = RngState(spec.seed)
    c, m = spec.communities, spec.nodes_per_community
    node_ids = [f"n{i}" for i in range(c * m)]
    labels = {node_ids[i]: i // m for i in range(c * m)}
    lo, hi = spec.length_range

    cascades: List[List[str]] = []
    for _ in range(spec.cascades):
        length = int(rng.integers(lo, hi + 1))
        # per-community pool of still-uninfected members, swap-removed
        pools = [list(range(com * m, (com + 1) * m)) for com in range(c)]
        com = int(rng.integers(c))
        seq: List[int] = []
        while len(seq) < length:
            if seq:  # the jump decision applies from the second node on
                if c > 1 and rng.uniform() < spec.cross_community_prob:
                    hop = int(rng.integers(c - 1))
                    com = hop if hop < com else hop + 1
            if not pools[com]:
                if spec.cross_community_prob <= 0.0:
                    break
                alive = [k for k in range(c) if pools[k]]
                if not alive:
                    break
                com = alive[int(rng.integers(len(alive)))]
            pool = pools[com]
            slot = int(rng.integers(len(pool)))
            node = pool[slot]
            pool[slot] = pool[-1]
            pool.pop()
            seq.append(node)
        cascades.append([node_ids[i] for i in seq])
    return cascades, labels


def write_synthetic(path_cascades, path_labels, cascades: Sequence[Sequence[str]], labels: Dict[str, int]) -> None:
    with open(path_cascades, "w", encoding="utf-8") as fh:
        for cascade in cascades:
            fh.write(" ".join(cascade) + "\n")
    with open(path_labels, "w", encoding="utf-8") as fh:
        for node_id, community in labels.items():
            fh.write(f"{node_id}\t{community}\n")
