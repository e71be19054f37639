"""Filtered ranking metrics, per-position breakdowns, and attention analysis.

A *scorer* is any callable mapping a QueryExample to ``{target node id:
score vector over all entities}``.  Factories below wrap the encoder, the
mean-pooling baseline, and a gold-answer oracle in that shape so the same
metric code serves all three.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from dagquery.datagen import QueryExample
from dagquery.encoding import encode_query
from dagquery.kg import Vocabulary
from dagquery.querydag import relatives
from dagquery.transformer import TransformerParams, predict_query

Scorer = Callable[[QueryExample], dict[int, np.ndarray]]

DEFAULT_KS = (1, 3, 10)


def filtered_rank(scores: np.ndarray, gold: int, positives: Iterable[int]) -> int:
    """Rank of the gold entity with other true answers filtered out.

    Competitors are all entities outside ``positives`` (gold itself always
    competes); any competitor scoring >= gold counts ahead of it, so ties
    resolve pessimistically and the best possible rank is 1.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError("scores must be a flat vector over entities")
    positives = set(int(p) for p in positives)
    if gold not in positives:
        raise ValueError("gold answer must be among the filtered positives")
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[list(positives)] = False
    keep[gold] = False
    return 1 + int(np.count_nonzero(scores[keep] >= scores[gold]))


def rank_all(scores: np.ndarray) -> np.ndarray:
    """Entity ids sorted by descending score, ties broken by ascending id."""
    scores = np.asarray(scores)
    ids = np.arange(scores.shape[0])
    return np.lexsort((ids, -scores))


def position_class(example: QueryExample, target: int) -> str:
    """Bucket a target node: the shared center, the sink tail, or a branch."""
    if example.center is not None and target == example.center:
        return "intersection"
    if not example.dag.out_edges.get(target):
        return "tail"
    return "branch"


@dataclass
class MetricBlock:
    count: int = 0
    _rr_sum: float = 0.0
    _hit_sums: dict[int, int] = field(default_factory=dict)

    def add(self, rank: int, ks: tuple[int, ...]) -> None:
        self.count += 1
        self._rr_sum += 1.0 / rank
        for k in ks:
            self._hit_sums[k] = self._hit_sums.get(k, 0) + (1 if rank <= k else 0)

    @property
    def mrr(self) -> float:
        return self._rr_sum / self.count if self.count else 0.0

    def hits(self, k: int) -> float:
        return self._hit_sums.get(k, 0) / self.count if self.count else 0.0

    def to_dict(self, ks: tuple[int, ...]) -> dict:
        out = {"mrr": round(self.mrr, 6), "count": self.count}
        for k in ks:
            out[f"h{k}"] = round(self.hits(k), 6)
        return out


@dataclass
class RankingReport:
    overall: MetricBlock
    positions: dict[str, MetricBlock]
    ks: tuple[int, ...]
    num_queries: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.overall.to_dict(self.ks),
            "positions": {
                name: block.to_dict(self.ks)
                for name, block in sorted(self.positions.items())
            },
            "counts": {"queries": self.num_queries, "slots": self.overall.count},
            "provenance": self.provenance,
        }

    def to_table(self) -> str:
        header = ["bucket", "slots", "mrr"] + [f"h@{k}" for k in self.ks]
        rows = [("overall", self.overall)] + sorted(self.positions.items())
        lines = ["\t".join(header)]
        for name, block in rows:
            cells = [name, str(block.count), f"{block.mrr:.4f}"]
            cells += [f"{block.hits(k):.4f}" for k in self.ks]
            lines.append("\t".join(cells))
        return "\n".join(lines)


def evaluate_split(
    scorer: Scorer,
    examples: list[QueryExample],
    filters: dict[tuple[str, int], list[int]],
    ks: tuple[int, ...] = DEFAULT_KS,
    provenance: dict | None = None,
) -> RankingReport:
    """Filtered MRR / Hits@K over every masked target of every query."""
    overall = MetricBlock()
    positions: dict[str, MetricBlock] = {}
    for example in examples:
        scored = scorer(example)
        for target in example.dag.targets:
            key = (example.qid, target)
            if key not in filters:
                raise KeyError(f"no filter entry for query {example.qid} node {target}")
            rank = filtered_rank(scored[target], example.gold[target], filters[key])
            overall.add(rank, ks)
            bucket = position_class(example, target)
            positions.setdefault(bucket, MetricBlock()).add(rank, ks)
    return RankingReport(
        overall=overall,
        positions=positions,
        ks=ks,
        num_queries=len(examples),
        provenance=provenance or {},
    )


def avg_hits_per_query(
    scorer: Scorer,
    examples: list[QueryExample],
    filters: dict[tuple[str, int], list[int]],
    k: int = 3,
) -> float:
    """Mean over queries of the fraction of (target, true answer) pairs hit.

    Every filtered positive of every target counts as one candidate answer;
    an answer is hit when its own filtered rank (filtering the *other*
    positives) is <= k.  Queries are weighted equally regardless of how
    many answers they have.
    """
    if not examples:
        return 0.0
    per_query: list[float] = []
    for example in examples:
        scored = scorer(example)
        hits = 0
        total = 0
        for target in example.dag.targets:
            positives = filters[(example.qid, target)]
            scores = scored[target]
            for answer in positives:
                total += 1
                if filtered_rank(scores, answer, positives) <= k:
                    hits += 1
        per_query.append(hits / total if total else 0.0)
    return float(np.mean(per_query))


@dataclass
class AttentionStats:
    fraction: float
    per_query: list[float]
    num_queries: int

    def to_dict(self) -> dict:
        return {
            "nonrelative_fraction": round(self.fraction, 6),
            "num_queries": self.num_queries,
            "per_query": [round(v, 6) for v in self.per_query],
        }


def attention_nonrelative_fraction(
    params: TransformerParams,
    examples: list[QueryExample],
    vocab: Vocabulary,
    max_len: int = 64,
    mode: str = "bidirectional",
) -> AttentionStats:
    """Share of final-layer attention mass spent outside a target's lineage.

    For each masked target, tokens are *relative* when they come from the
    target's ancestors, descendants, or itself; relation tokens inherit
    relativity from either endpoint.  Attention is head-averaged in the
    final layer; each query contributes the mean over its masked slots.
    """
    per_query: list[float] = []
    for example in examples:
        pred = predict_query(
            params, example.dag, vocab, max_len=max_len, mode=mode, record_attention=True
        )
        att = pred.attention[-1][0]  # (heads, T, T) for the single query
        att = att.mean(axis=0)
        refs = pred.sequence.token_refs
        length = att.shape[-1]
        rel_tokens_cache: dict[int, np.ndarray] = {}
        slot_fracs: list[float] = []
        for row, variable in pred.sequence.mask_slots:
            if variable not in rel_tokens_cache:
                ancestors, descendants = relatives(example.dag, variable)
                lineage = ancestors | descendants | {variable}
                relative = np.zeros(length, dtype=bool)
                for j in range(length):
                    ref = refs[j]
                    if ref[0] == "node":
                        relative[j] = ref[1] in lineage
                    elif ref[0] == "edge":
                        relative[j] = ref[1] in lineage or ref[2] in lineage
                rel_tokens_cache[variable] = relative
            relative = rel_tokens_cache[variable]
            mass = att[row]
            slot_fracs.append(float(mass[~relative].sum()))
        per_query.append(float(np.mean(slot_fracs)))
    fraction = float(np.mean(per_query)) if per_query else 0.0
    return AttentionStats(fraction=fraction, per_query=per_query, num_queries=len(examples))


@dataclass
class AblationResult:
    unrestricted: RankingReport
    no_future: RankingReport

    @property
    def mrr_delta(self) -> float:
        return self.unrestricted.overall.mrr - self.no_future.overall.mrr

    def to_dict(self) -> dict:
        return {
            "unrestricted": self.unrestricted.to_dict(),
            "no_future": self.no_future.to_dict(),
            "mrr_delta": round(self.mrr_delta, 6),
        }

    def to_table(self) -> str:
        lines = ["mode\tslots\tmrr\t" + "\t".join(f"h@{k}" for k in self.unrestricted.ks)]
        for name, report in (("bidirectional", self.unrestricted), ("no_future", self.no_future)):
            block = report.overall
            cells = [name, str(block.count), f"{block.mrr:.4f}"]
            cells += [f"{block.hits(k):.4f}" for k in report.ks]
            lines.append("\t".join(cells))
        return "\n".join(lines)


def run_ablation(
    params: TransformerParams,
    examples: list[QueryExample],
    filters: dict[tuple[str, int], list[int]],
    vocab: Vocabulary,
    max_len: int = 64,
    ks: tuple[int, ...] = DEFAULT_KS,
    provenance: dict | None = None,
) -> AblationResult:
    """Score the same checkpoint with and without future-position attention.

    Only chain-shaped queries are admitted: the restricted mode is defined
    on single paths, so branching queries are rejected up front.
    """
    for example in examples:
        degrees_ok = all(
            len(example.dag.out_edges[n.id]) <= 1 and len(example.dag.in_edges[n.id]) <= 1
            for n in example.dag.nodes
        )
        if not degrees_ok:
            raise ValueError(
                f"query {example.qid} branches; the restricted-attention "
                "comparison is defined on chain queries only"
            )
    base = dict(provenance or {})
    full = evaluate_split(
        make_encoder_scorer(params, vocab, max_len=max_len, mode="bidirectional"),
        examples,
        filters,
        ks=ks,
        provenance={**base, "mode": "bidirectional"},
    )
    restricted = evaluate_split(
        make_encoder_scorer(params, vocab, max_len=max_len, mode="no_future"),
        examples,
        filters,
        ks=ks,
        provenance={**base, "mode": "no_future"},
    )
    return AblationResult(unrestricted=full, no_future=restricted)


def make_encoder_scorer(
    params: TransformerParams,
    vocab: Vocabulary,
    max_len: int = 64,
    mode: str = "bidirectional",
) -> Scorer:
    def scorer(example: QueryExample) -> dict[int, np.ndarray]:
        pred = predict_query(params, example.dag, vocab, max_len=max_len, mode=mode)
        return pred.distributions

    return scorer


def make_gqe_scorer(params) -> Scorer:
    from dagquery.gqe import predict_scores

    def scorer(example: QueryExample) -> dict[int, np.ndarray]:
        return predict_scores(params, example.dag)

    return scorer


def make_oracle_scorer(
    num_entities: int, filters: dict[tuple[str, int], list[int]]
) -> Scorer:
    """Scores 1.0 on every exhaustively-grounded answer, 0.0 elsewhere.

    A sanity ceiling: filtered metrics must all come out 1.0.
    """

    def scorer(example: QueryExample) -> dict[int, np.ndarray]:
        out = {}
        for target in example.dag.targets:
            scores = np.zeros(num_entities, dtype=np.float64)
            scores[filters[(example.qid, target)]] = 1.0
            out[target] = scores
        return out

    return scorer


def write_report(path, report: RankingReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
