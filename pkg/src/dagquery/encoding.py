"""Serialization of query DAGs into token/position sequences.

Each root-to-leaf path is laid out tail-first: the leaf entity first, then
its incoming relation, then the next entity, and so on back to the root.
Existential variables are dropped (their relations are kept); target nodes
become MASK tokens.  Positional ids restart at 0 at every path boundary,
which is the only structural signal the encoder gets, so two tokens with
equal offsets in different paths are positionally indistinguishable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dagquery.kg import MASK_TOKEN, PAD_TOKEN, Vocabulary
from dagquery.querydag import ANCHOR, EXISTENTIAL, QueryDag, QueryPath, TARGET, decompose

PAD_REF = ("pad",)


class SequenceLengthError(ValueError):
    """Encoded query does not fit in max_len tokens."""


@dataclass
class TokenSequence:
    """One encoded query.

    tokens/positions are int32 arrays of equal length; pad_mask is True at
    real tokens.  path_boundaries holds the start offset of each path.
    mask_slots maps sequence index -> target variable id (one entry per
    MASK token).  token_refs records provenance for analysis: ("node", id)
    for entity/MASK tokens, ("edge", src, dst) for relations, ("pad",).
    """

    tokens: np.ndarray
    positions: np.ndarray
    pad_mask: np.ndarray
    path_boundaries: tuple[int, ...]
    mask_slots: tuple[tuple[int, int], ...]
    token_refs: tuple[tuple, ...]

    @property
    def length(self) -> int:
        return int(self.pad_mask.sum())

    def path_ids(self) -> np.ndarray:
        """Which path each token belongs to; -1 at padding."""
        ids = np.full(self.tokens.shape[0], -1, dtype=np.int32)
        bounds = list(self.path_boundaries) + [self.length]
        for p in range(len(self.path_boundaries)):
            ids[bounds[p] : bounds[p + 1]] = p
        return ids


def encode_path(
    dag: QueryDag, path: QueryPath, vocab: Vocabulary
) -> tuple[list[int], list[tuple[int, int]], list[tuple]]:
    """Token ids for one path, tail-first, with mask slots and provenance.

    Returns (tokens, mask_slots, refs) where mask_slots holds
    (index within this path, variable id) pairs.
    """
    tokens: list[int] = []
    slots: list[tuple[int, int]] = []
    refs: list[tuple] = []

    def emit_node(nid: int) -> None:
        node = dag.node_by_id[nid]
        if node.kind == EXISTENTIAL:
            return
        if node.kind == TARGET:
            slots.append((len(tokens), nid))
            tokens.append(MASK_TOKEN)
        else:
            tokens.append(vocab.entity_token(node.entity))
        refs.append(("node", nid))

    last = len(path.nodes) - 1
    emit_node(path.nodes[last])
    for i in range(last, 0, -1):
        tokens.append(vocab.relation_token(path.relations[i - 1]))
        refs.append(("edge", path.nodes[i - 1], path.nodes[i]))
        emit_node(path.nodes[i - 1])
    return tokens, slots, refs


def encode_query(
    dag: QueryDag,
    vocab: Vocabulary,
    max_len: int = 64,
    path_order: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """Encode a query as the concatenation of its path encodings.

    Paths appear in decomposition (lexicographic) order unless `path_order`
    gives an explicit permutation or `rng` draws a shuffled one (training).
    The result is padded to exactly `max_len` tokens.
    """
    paths = decompose(dag)
    order = list(range(len(paths)))
    if path_order is not None and rng is not None:
        raise ValueError("pass either path_order or rng, not both")
    if path_order is not None:
        if sorted(path_order) != order:
            raise ValueError("path_order must be a permutation of path indices")
        order = list(path_order)
    elif rng is not None:
        order = list(rng.permutation(len(paths)))

    tokens: list[int] = []
    positions: list[int] = []
    boundaries: list[int] = []
    slots: list[tuple[int, int]] = []
    refs: list[tuple] = []
    for p in order:
        p_tokens, p_slots, p_refs = encode_path(dag, paths[p], vocab)
        boundaries.append(len(tokens))
        slots.extend((len(tokens) + i, var) for i, var in p_slots)
        positions.extend(range(len(p_tokens)))
        tokens.extend(p_tokens)
        refs.extend(p_refs)

    if len(tokens) > max_len:
        raise SequenceLengthError(
            f"query needs {len(tokens)} tokens but max_len is {max_len}"
        )
    pad = max_len - len(tokens)
    real = len(tokens)
    tokens.extend([PAD_TOKEN] * pad)
    positions.extend([0] * pad)
    refs.extend([PAD_REF] * pad)
    pad_mask = np.zeros(max_len, dtype=bool)
    pad_mask[:real] = True

    return TokenSequence(
        tokens=np.asarray(tokens, dtype=np.int32),
        positions=np.asarray(positions, dtype=np.int32),
        pad_mask=pad_mask,
        path_boundaries=tuple(boundaries),
        mask_slots=tuple(slots),
        token_refs=tuple(refs),
    )


def aggregate_mask_distributions(
    slot_distributions: Sequence[tuple[int, np.ndarray]],
    expected_variables: Sequence[int] | None = None,
    atol: float = 1e-5,
) -> dict[int, np.ndarray]:
    """Arithmetic mean of the per-slot distributions of each variable.

    Every distribution must live on the same support and sum to 1 within
    `atol`; the mean then sums to 1 within the same tolerance.
    """
    grouped: dict[int, list[np.ndarray]] = {}
    size = None
    for var, dist in slot_distributions:
        dist = np.asarray(dist)
        if size is None:
            size = dist.shape
        elif dist.shape != size:
            raise ValueError("slot distributions have mismatched supports")
        total = float(dist.sum())
        if abs(total - 1.0) > atol:
            raise ValueError(f"slot distribution for variable {var} sums to {total}")
        grouped.setdefault(var, []).append(dist)
    if expected_variables is not None:
        missing = set(expected_variables) - set(grouped)
        if missing:
            raise ValueError(f"variables with zero mask slots: {sorted(missing)}")
    return {var: np.mean(dists, axis=0) for var, dists in grouped.items()}


@dataclass
class Batch:
    """A padded batch of token sequences ready for the encoder."""

    tokens: np.ndarray      # (B, T) int32
    positions: np.ndarray   # (B, T) int32
    pad_mask: np.ndarray    # (B, T) bool, True at real tokens
    path_ids: np.ndarray    # (B, T) int32, -1 at padding
    slots: np.ndarray       # (S, 2) int32 rows (example, index)
    slot_variables: np.ndarray  # (S,) int32 variable id per slot

    @property
    def num_slots(self) -> int:
        return int(self.slots.shape[0])


def collate(seqs: Sequence[TokenSequence], length: int | None = None) -> Batch:
    """Stack sequences into a batch, trimming shared padding to `length`.

    `length` defaults to the longest real length in the batch; sequences
    are encoded to a common max_len, so trimming only removes padding.
    """
    if not seqs:
        raise ValueError("empty batch")
    longest = max(s.length for s in seqs)
    if length is None:
        length = longest
    if length < longest:
        raise ValueError(f"batch needs length {longest}, got {length}")

    def cut(arr: np.ndarray, fill) -> np.ndarray:
        if arr.shape[0] >= length:
            return arr[:length]
        out = np.full(length, fill, dtype=arr.dtype)
        out[: arr.shape[0]] = arr
        return out

    tokens = np.stack([cut(s.tokens, PAD_TOKEN) for s in seqs])
    positions = np.stack([cut(s.positions, 0) for s in seqs])
    pad_mask = np.stack([cut(s.pad_mask, False) for s in seqs])
    path_ids = np.stack([cut(s.path_ids(), -1) for s in seqs])
    slot_rows = [
        (b, i) for b, s in enumerate(seqs) for i, _ in s.mask_slots
    ]
    slot_vars = [var for s in seqs for _, var in s.mask_slots]
    slots = np.asarray(slot_rows, dtype=np.int32).reshape(-1, 2)
    return Batch(
        tokens=tokens.astype(np.int32),
        positions=positions.astype(np.int32),
        pad_mask=pad_mask,
        path_ids=path_ids.astype(np.int32),
        slots=slots,
        slot_variables=np.asarray(slot_vars, dtype=np.int32),
    )


def write_debug_batch(path: str | Path, seqs: Sequence[TokenSequence]) -> None:
    """Dump encoded sequences as JSON lines for inspection."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(
                json.dumps(
                    {
                        "tokens": s.tokens[: s.length].tolist(),
                        "positions": s.positions[: s.length].tolist(),
                        "path_boundaries": list(s.path_boundaries),
                        "mask_slots": [list(slot) for slot in s.mask_slots],
                    }
                )
                + "\n"
            )
