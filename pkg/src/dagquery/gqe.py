"""Mean-pooling projection baseline over query DAGs.

Each node position is embedded by composing elementwise relation products
along its ancestor branches (anchors contribute their entity embedding)
and averaging branch embeddings where branches converge.  Candidates are
scored by dot product against every entity embedding.  Non-anchor interior
nodes are passed through during composition; a prediction for such a node
uses only its own ancestor prefix.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dagquery import kernels
from dagquery.checkpoint import CheckpointError, load_arrays, save_arrays
from dagquery.querydag import ANCHOR, QueryDag
from dagquery.seeding import substream
from dagquery.transformer import AdamState, adam_step, write_loss_csv

CHECKPOINT_KIND = "gqe-mp"


@dataclass(frozen=True)
class GqeConfig:
    num_entities: int
    num_relations: int
    dim: int = 64
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.num_entities, self.num_relations, self.dim) <= 0:
            raise ValueError("all size fields must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass
class GqeParams:
    config: GqeConfig
    ent: np.ndarray  # (E, d)
    rel: np.ndarray  # (R, d)

    @property
    def arrays(self) -> dict[str, np.ndarray]:
        return {"ent": self.ent, "rel": self.rel}


def init_gqe(config: GqeConfig) -> GqeParams:
    """Entity rows ~ N(0, 1/sqrt(d)); relation rows ~ N(1, 0.1).

    Relation operators start near the identity so elementwise products
    along multi-hop branches neither vanish nor explode at step one.
    """
    rng = substream(config.init_seed, "gqe-init")
    dtype = config.np_dtype
    ent = rng.normal(0.0, 1.0 / np.sqrt(config.dim), size=(config.num_entities, config.dim))
    rel = rng.normal(1.0, 0.1, size=(config.num_relations, config.dim))
    return GqeParams(config=config, ent=ent.astype(dtype), rel=rel.astype(dtype))


def project(v: np.ndarray, relation: int, params: GqeParams) -> np.ndarray:
    """Elementwise relation product: follow `relation` from embedding `v`."""
    if not 0 <= relation < params.config.num_relations:
        raise ValueError(f"unknown relation id {relation}")
    return v * params.rel[relation]


def _ancestor_order(dag: QueryDag, node: int) -> list[int]:
    """Topological order of `node`'s ancestor closure, `node` last."""
    closure = {node}
    stack = [node]
    while stack:
        for _, src in dag.in_edges[stack.pop()]:
            if src not in closure:
                closure.add(src)
                stack.append(src)
    order: list[int] = []
    done: set[int] = set()

    def visit(nid: int) -> None:
        if nid in done:
            return
        done.add(nid)
        for _, src in sorted(dag.in_edges[nid], key=lambda e: (e[1], e[0])):
            visit(src)
        order.append(nid)

    visit(node)
    return order


def embed_position(
    dag: QueryDag, node: int, params: GqeParams
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Embedding of `node` composed from its ancestor sub-DAG.

    Returns (embedding, per-node embeddings of the whole ancestor closure)
    so training can reuse the intermediate values for the backward pass.
    Raises if the closure contains a root that is not an anchor (the
    position is unreachable from the anchors).
    """
    if node not in dag.node_by_id:
        raise ValueError(f"unknown node id {node}")
    embeddings: dict[int, np.ndarray] = {}
    for nid in _ancestor_order(dag, node):
        n = dag.node_by_id[nid]
        if n.kind == ANCHOR:
            if n.entity >= params.config.num_entities:
                raise ValueError(f"anchor entity {n.entity} out of range")
            embeddings[nid] = params.ent[n.entity]
            continue
        incoming = sorted(dag.in_edges[nid], key=lambda e: (e[1], e[0]))
        if not incoming:
            raise ValueError(
                f"node {nid} is unreachable from any anchor; cannot embed"
            )
        branches = [project(embeddings[src], rel, params) for rel, src in incoming]
        embeddings[nid] = np.mean(branches, axis=0)
    return embeddings[node], embeddings


def score_candidates(query_embedding: np.ndarray, params: GqeParams) -> np.ndarray:
    """Dot-product scores of every entity for one query embedding."""
    return params.ent @ query_embedding


def _backprop_position(
    dag: QueryDag,
    node: int,
    d_node: np.ndarray,
    embeddings: dict[int, np.ndarray],
    params: GqeParams,
    dent: np.ndarray,
    drel: np.ndarray,
) -> None:
    """Accumulate gradients of one position embedding into dent/drel."""
    order = _ancestor_order(dag, node)
    grads = {nid: None for nid in order}
    grads[node] = d_node
    for nid in reversed(order):
        g = grads[nid]
        if g is None:
            continue
        n = dag.node_by_id[nid]
        if n.kind == ANCHOR:
            dent[n.entity] += g
            continue
        incoming = sorted(dag.in_edges[nid], key=lambda e: (e[1], e[0]))
        share = g / len(incoming)
        for rel, src in incoming:
            drel[rel] += share * embeddings[src]
            upstream = share * params.rel[rel]
            grads[src] = upstream if grads[src] is None else grads[src] + upstream


@dataclass
class GqeLossResult:
    loss: float
    dent: np.ndarray
    drel: np.ndarray
    num_slots: int

    @property
    def ok(self) -> bool:
        return self.num_slots > 0


def loss_and_grads_gqe(
    params: GqeParams,
    examples: Sequence[tuple[QueryDag, dict[int, int]]],
) -> GqeLossResult:
    """Mean full-softmax cross-entropy over every masked position."""
    dent = np.zeros_like(params.ent)
    drel = np.zeros_like(params.rel)
    losses: list[float] = []
    pending: list[tuple[QueryDag, int, np.ndarray, dict[int, np.ndarray], np.ndarray]] = []

    for dag, gold in examples:
        for target in dag.targets:
            query_emb, embeddings = embed_position(dag, target, params)
            scores = score_candidates(query_emb, params)
            label = np.asarray([gold[target]], dtype=np.int64)
            loss_row, dscores = kernels.softmax_xent(scores[None, :], label)
            losses.append(float(loss_row[0]))
            pending.append((dag, target, query_emb, embeddings, dscores[0]))

    n = len(losses)
    if n == 0:
        return GqeLossResult(0.0, dent, drel, 0)
    for dag, target, query_emb, embeddings, dscores in pending:
        dscores = dscores / n
        # scores = ent @ q: both factors get gradient
        dent += np.outer(dscores, query_emb)
        dq = params.ent.T @ dscores
        _backprop_position(dag, target, dq, embeddings, params, dent, drel)
    return GqeLossResult(float(np.mean(losses)), dent, drel, n)


@dataclass
class GqeTrainResult:
    params: GqeParams
    loss_rows: list[tuple[int, str, float]]
    epochs_run: int

    @property
    def final_train_loss(self) -> float:
        train_rows = [v for _, split, v in self.loss_rows if split == "train"]
        return train_rows[-1] if train_rows else float("nan")


def train_gqe(
    params: GqeParams,
    examples: Sequence[tuple[QueryDag, dict[int, int]]],
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    dev_examples: Sequence[tuple[QueryDag, dict[int, int]]] | None = None,
    out_dir: str | Path | None = None,
    stop_fn=None,
) -> GqeTrainResult:
    """Adam training of the baseline over shuffled mini-batches."""
    if not examples:
        raise ValueError("no training examples")
    state = AdamState.init(params.arrays)
    n = len(examples)
    loss_rows: list[tuple[int, str, float]] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    epochs_run = 0
    for epoch in range(1, epochs + 1):
        order = substream(seed, "gqe-shuffle", epoch).permutation(n)
        total, slots = 0.0, 0
        for start in range(0, n, batch_size):
            chunk = [examples[i] for i in order[start : start + batch_size]]
            result = loss_and_grads_gqe(params, chunk)
            if not result.ok:
                continue
            if not np.isfinite(result.loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            adam_step(
                params.arrays, {"ent": result.dent, "rel": result.drel}, state, lr
            )
            total += result.loss * result.num_slots
            slots += result.num_slots
        loss_rows.append((epoch, "train", total / max(slots, 1)))

        if dev_examples:
            dev = loss_and_grads_gqe(params, dev_examples)
            loss_rows.append((epoch, "dev", dev.loss))

        if out_path is not None:
            save_gqe_checkpoint(params, out_path / "checkpoint.bin")
            write_loss_csv(out_path / "loss.csv", loss_rows)
        epochs_run = epoch
        if stop_fn is not None and stop_fn(epoch, params):
            break

    if not (np.all(np.isfinite(params.ent)) and np.all(np.isfinite(params.rel))):
        raise FloatingPointError("non-finite values in baseline parameters")
    return GqeTrainResult(params=params, loss_rows=loss_rows, epochs_run=epochs_run)


def predict_scores(params: GqeParams, dag: QueryDag) -> dict[int, np.ndarray]:
    """Raw candidate scores for every target of one query."""
    out: dict[int, np.ndarray] = {}
    for target in dag.targets:
        emb, _ = embed_position(dag, target, params)
        out[target] = score_candidates(emb, params)
    return out


def save_gqe_checkpoint(params: GqeParams, path: str | Path) -> None:
    meta = {"kind": CHECKPOINT_KIND, "config": asdict(params.config)}
    save_arrays(path, meta, {"ent": params.ent, "rel": params.rel})


def load_gqe_checkpoint(path: str | Path) -> GqeParams:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(
            f"{path}: checkpoint kind {meta.get('kind')!r} is not {CHECKPOINT_KIND!r}"
        )
    try:
        config = GqeConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    ent, rel = arrays.get("ent"), arrays.get("rel")
    if ent is None or rel is None:
        raise CheckpointError(f"{path}: missing arrays")
    if ent.shape != (config.num_entities, config.dim) or rel.shape != (
        config.num_relations,
        config.dim,
    ):
        raise CheckpointError(f"{path}: array shapes do not match config")
    return GqeParams(config=config, ent=ent, rel=rel)
