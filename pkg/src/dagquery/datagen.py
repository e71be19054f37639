"""Dataset generation: path mining, star-DAG synthesis, splits, filters.

The pipeline splits a triple file into train/dev/test graphs, mines random
walks per split, intersects walks at shared intermediate entities to build
star-shaped DAG queries with one extra tail edge, computes exhaustive
answer filters over the full graph, and emits everything to a directory
whose bytes are a pure function of (input file, seed, limits).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from dagquery.kg import (
    KnowledgeGraph,
    Vocabulary,
    build_graph,
    build_vocab,
    read_named_triples,
    read_vocab_names,
    split_vocab_names,
    write_triples,
    write_vocab,
)
from dagquery.querydag import ANCHOR, TARGET, QueryDag, QueryNode, ground_answers
from dagquery.seeding import substream

SPLITS = ("train", "dev", "test")
MAX_MINING_ROUNDS = 256


@dataclass(frozen=True)
class MinedPath:
    """One successful random walk: entities visited and relations taken."""

    entities: tuple[int, ...]
    relations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.entities) != len(self.relations) + 1:
            raise ValueError("walk must have one more entity than relations")

    @property
    def depth(self) -> int:
        return len(self.relations)

    @property
    def source(self) -> int:
        return self.entities[0]


@dataclass
class QueryExample:
    """A query with its generation-time gold assignment for each target."""

    qid: str
    dag: QueryDag
    gold: dict[int, int]
    kind: str  # "triple" | "path" | "dag"
    center: int | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def pair(self) -> tuple[QueryDag, dict[int, int]]:
        return (self.dag, self.gold)


def mine_paths(
    kg: KnowledgeGraph,
    seed: int,
    limit: int,
    min_depth: int = 2,
    max_depth: int = 5,
    stream: str = "train",
) -> list[MinedPath]:
    """Seeded random walks, one per node per round, deduplicated.

    Walk depth is drawn uniformly from {min_depth..max_depth}; each hop
    picks uniformly among the node's outgoing edges; walks that dead-end
    early are discarded.  Node revisits are allowed and recorded as-is.
    Rounds repeat until `limit` distinct walks are collected, a full round
    adds nothing new, or the round cap is hit; the result is truncated to
    exactly `limit` when the graph is rich enough to reach it.
    """
    if limit < 0:
        raise ValueError("limit must be >= 0")
    if not 1 <= min_depth <= max_depth:
        raise ValueError("need 1 <= min_depth <= max_depth")
    found: dict[tuple, MinedPath] = {}
    for round_no in range(MAX_MINING_ROUNDS):
        added = 0
        for node in range(kg.num_entities):
            if len(found) >= limit:
                break
            rng = substream(seed, "mine", stream, round_no, node)
            depth = int(rng.integers(min_depth, max_depth + 1))
            entities = [node]
            relations: list[int] = []
            for _ in range(depth):
                out = kg.out_index.get(entities[-1], ())
                if not out:
                    break
                rel, nxt = out[int(rng.integers(len(out)))]
                relations.append(rel)
                entities.append(nxt)
            if len(relations) != depth:
                continue  # dead end: discard the walk
            key = (tuple(entities), tuple(relations))
            if key not in found:
                found[key] = MinedPath(entities=key[0], relations=key[1])
                added += 1
        if len(found) >= limit or added == 0:
            break
    return list(found.values())[:limit]


def triple_example(qid: str, head: int, relation: int, tail: int) -> QueryExample:
    """A single-hop query: known head and relation, masked tail."""
    dag = QueryDag(
        nodes=(QueryNode(0, ANCHOR, head), QueryNode(1, TARGET)),
        edges=((0, relation, 1),),
    )
    return QueryExample(qid=qid, dag=dag, gold={1: tail}, kind="triple")


def path_example(qid: str, path: MinedPath) -> QueryExample:
    """A chain query: every entity except the source is masked."""
    nodes = [QueryNode(0, ANCHOR, path.source)]
    nodes += [QueryNode(i, TARGET) for i in range(1, len(path.entities))]
    edges = tuple(
        (i, path.relations[i], i + 1) for i in range(len(path.relations))
    )
    gold = {i: path.entities[i] for i in range(1, len(path.entities))}
    return QueryExample(qid=qid, dag=QueryDag(tuple(nodes), edges), gold=gold, kind="path")


def synthesize_dags(
    paths: list[MinedPath],
    split_kg: KnowledgeGraph,
    seed: int,
    max_branches: int = 3,
    min_branch_depth: int = 1,
    stream: str = "train",
) -> list[QueryExample]:
    """Intersect walks at shared intermediate entities into star DAGs.

    For each entity that is an interior node of at least two walks, each
    contributing walk is truncated at its deepest occurrence of that
    entity; the distinct truncated prefixes become branches converging on
    a shared center node (capped at `max_branches`, random seeded subset).
    Using the deepest occurrence keeps branch slots at depths comparable
    to the walks they came from instead of collapsing to one-hop stubs;
    `min_branch_depth` drops shallower prefixes before grouping, which
    pushes intersection points further from their anchors.
    One extra edge, drawn uniformly from the center entity's outgoing
    split-graph edges not already used by the DAG, adds the tail target.
    Groups left with fewer than two distinct branches or no usable tail
    edge are skipped.  Every non-anchor node is a target; golds come from
    the walks themselves, so each emitted query is satisfiable by
    construction.  qids are assigned by the caller.
    """
    by_entity: dict[int, list[tuple[int, int]]] = {}
    for pi, path in enumerate(paths):
        deepest: dict[int, int] = {}
        for pos in range(1, len(path.entities) - 1):
            deepest[path.entities[pos]] = pos
        for ent, pos in sorted(deepest.items()):
            if pos >= min_branch_depth:
                by_entity.setdefault(ent, []).append((pi, pos))

    examples: list[QueryExample] = []
    seen_canonical: set[tuple] = set()
    for center_entity in sorted(by_entity):
        group = by_entity[center_entity]
        if len(group) < 2:
            continue
        branches: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        contributing: list[int] = []
        seen_branch: set[tuple] = set()
        for pi, pos in group:
            path = paths[pi]
            key = (path.entities[: pos + 1], path.relations[:pos])
            if key not in seen_branch:
                seen_branch.add(key)
                branches.append(key)
                contributing.append(pi)
        if len(branches) < 2:
            continue
        order = sorted(range(len(branches)), key=lambda i: branches[i])
        branches = [branches[i] for i in order]
        contributing = [contributing[i] for i in order]
        if len(branches) > max_branches:
            rng = substream(seed, "cap", stream, center_entity)
            keep = sorted(rng.choice(len(branches), size=max_branches, replace=False))
            branches = [branches[i] for i in keep]
            contributing = [contributing[i] for i in keep]

        used_triples = {
            (ents[i], rels[i], ents[i + 1])
            for ents, rels in branches
            for i in range(len(rels))
        }
        candidates = [
            (rel, tail)
            for rel, tail in split_kg.out_index.get(center_entity, ())
            if (center_entity, rel, tail) not in used_triples
        ]
        if not candidates:
            continue
        rng = substream(seed, "tail", stream, center_entity)
        tail_rel, tail_entity = candidates[int(rng.integers(len(candidates)))]

        canonical = (tuple(branches), tail_rel, tail_entity)
        if canonical in seen_canonical:
            continue
        seen_canonical.add(canonical)

        nodes: list[QueryNode] = []
        edges: list[tuple[int, int, int]] = []
        gold: dict[int, int] = {}
        center_id = sum(len(rels) for _, rels in branches)
        tail_id = center_id + 1
        next_id = 0
        for ents, rels in branches:
            branch_ids = list(range(next_id, next_id + len(rels))) + [center_id]
            next_id += len(rels)
            nodes.append(QueryNode(branch_ids[0], ANCHOR, ents[0]))
            for j in range(1, len(rels)):
                nodes.append(QueryNode(branch_ids[j], TARGET))
                gold[branch_ids[j]] = ents[j]
            for j in range(len(rels)):
                edges.append((branch_ids[j], rels[j], branch_ids[j + 1]))
        nodes.append(QueryNode(center_id, TARGET))
        gold[center_id] = center_entity
        nodes.append(QueryNode(tail_id, TARGET))
        gold[tail_id] = tail_entity
        edges.append((center_id, tail_rel, tail_id))

        examples.append(
            QueryExample(
                qid="",
                dag=QueryDag(tuple(nodes), tuple(edges)),
                gold=gold,
                kind="dag",
                center=center_id,
                provenance={"paths": contributing, "center_entity": center_entity},
            )
        )
    return examples


def build_filters(
    examples: list[QueryExample], full_kg: KnowledgeGraph
) -> dict[tuple[str, int], list[int]]:
    """Exhaustive per-target answer sets over the full graph.

    Keyed by (query id, target node id); every gold answer is checked to
    be present, which generation guarantees.
    """
    filters: dict[tuple[str, int], list[int]] = {}
    for example in examples:
        answers = ground_answers(example.dag, full_kg)
        for target, values in answers.items():
            if example.gold[target] not in values:
                raise AssertionError(
                    f"gold answer missing from filter for {example.qid}/{target}"
                )
            filters[(example.qid, target)] = sorted(values)
    return filters


def example_to_json(example: QueryExample) -> dict:
    obj = {
        "qid": example.qid,
        "kind": example.kind,
        "nodes": [
            {"id": n.id, "kind": n.kind, **({"entity": n.entity} if n.entity is not None else {})}
            for n in sorted(example.dag.nodes, key=lambda n: n.id)
        ],
        "edges": [list(e) for e in example.dag.edges],
        "targets": list(example.dag.targets),
        "gold": {str(k): v for k, v in sorted(example.gold.items())},
        "center": example.center,
    }
    if example.provenance:
        obj["provenance"] = example.provenance
    return obj


def example_from_json(obj: dict) -> QueryExample:
    nodes = tuple(
        QueryNode(
            id=int(n["id"]),
            kind=str(n["kind"]),
            entity=None if n.get("entity") is None else int(n["entity"]),
        )
        for n in obj["nodes"]
    )
    edges = tuple((int(s), int(r), int(d)) for s, r, d in obj["edges"])
    return QueryExample(
        qid=str(obj["qid"]),
        dag=QueryDag(nodes, edges),
        gold={int(k): int(v) for k, v in obj["gold"].items()},
        kind=str(obj["kind"]),
        center=None if obj.get("center") is None else int(obj["center"]),
        provenance=obj.get("provenance") or {},
    )


@dataclass
class DatasetBundle:
    """Everything a trainer or evaluator needs, loaded from a dataset dir."""

    manifest: dict
    vocab: Vocabulary
    entity_names: list[str]
    relation_names: list[str]
    full_kg: KnowledgeGraph
    split_kgs: dict[str, KnowledgeGraph]
    examples: dict[str, dict[str, list[QueryExample]]]  # split -> kind -> examples
    filters: dict[tuple[str, int], list[int]]

    def split_examples(self, split: str, kinds=("triple", "path", "dag")) -> list[QueryExample]:
        return [ex for kind in kinds for ex in self.examples[split][kind + "s"]]


def _sequence_stats(examples: list[QueryExample], vocab: Vocabulary) -> dict:
    from dagquery.encoding import encode_query  # local import avoids a cycle

    if not examples:
        return {"mean_masks": 0.0, "mean_tokens": 0.0}
    masks = 0
    tokens = 0
    for ex in examples:
        seq = encode_query(ex.dag, vocab, max_len=4096)
        masks += len(seq.mask_slots)
        tokens += seq.length
    return {
        "mean_masks": round(masks / len(examples), 4),
        "mean_tokens": round(tokens / len(examples), 4),
    }


def _hash_files(root: Path, relpaths: list[str]) -> str:
    """Order-independent content hash over exactly the generated files."""
    digest = hashlib.sha256()
    for rel in sorted(relpaths):
        digest.update(rel.encode("utf-8"))
        digest.update(b"\0")
        digest.update((root / rel).read_bytes())
    return digest.hexdigest()


def generate_dataset(
    triples_path: str | Path,
    out_dir: str | Path,
    seed: int,
    path_limit: int = 1000,
    max_branches: int = 3,
    min_branch_depth: int = 1,
    min_depth: int = 2,
    max_depth: int = 5,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> dict:
    """Run the full generation pipeline; returns the manifest."""
    if abs(sum(fractions) - 1.0) > 1e-6 or any(f < 0 for f in fractions):
        raise ValueError("split fractions must be non-negative and sum to 1")
    named = read_named_triples(triples_path)
    full_kg = build_graph(named)

    order = substream(seed, "split").permutation(len(named))
    n_train = int(round(fractions[0] * len(named)))
    n_dev = int(round(fractions[1] * len(named)))
    buckets = {
        "train": sorted(order[:n_train].tolist()),
        "dev": sorted(order[n_train : n_train + n_dev].tolist()),
        "test": sorted(order[n_train + n_dev :].tolist()),
    }
    split_named = {s: [named[i] for i in idx] for s, idx in buckets.items()}
    split_kgs = {
        s: build_graph(
            rows,
            entity_names=list(full_kg.entity_names),
            relation_names=list(full_kg.relation_names),
        )
        for s, rows in split_named.items()
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vocab(out / "vocab.tsv", full_kg)
    vocab = build_vocab(full_kg)
    written = ["vocab.tsv"]

    manifest_counts: dict[str, dict] = {}
    all_examples: list[QueryExample] = []
    for split in SPLITS:
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        kg_split = split_kgs[split]
        write_triples(split_dir / "triples.tsv", split_named[split])
        written += [f"{split}/triples.tsv", f"{split}/paths.jsonl", f"{split}/dags.jsonl"]

        mined = mine_paths(
            kg_split, seed, path_limit,
            min_depth=min_depth, max_depth=max_depth, stream=split,
        )
        dags = synthesize_dags(
            mined, kg_split, seed, max_branches=max_branches,
            min_branch_depth=min_branch_depth, stream=split,
        )

        path_examples = []
        with (split_dir / "paths.jsonl").open("w", encoding="utf-8") as fh:
            for i, mp in enumerate(mined):
                qid = f"{split}-path-{i:05d}"
                fh.write(
                    json.dumps(
                        {
                            "qid": qid,
                            "entities": list(mp.entities),
                            "relations": list(mp.relations),
                        }
                    )
                    + "\n"
                )
                path_examples.append(path_example(qid, mp))

        dag_examples = []
        with (split_dir / "dags.jsonl").open("w", encoding="utf-8") as fh:
            for i, ex in enumerate(dags):
                ex.qid = f"{split}-dag-{i:05d}"
                fh.write(json.dumps(example_to_json(ex), sort_keys=True) + "\n")
                dag_examples.append(ex)

        triple_examples = _load_triple_examples(split, split_named[split], full_kg)
        split_examples = triple_examples + path_examples + dag_examples
        all_examples.extend(split_examples)
        manifest_counts[split] = {
            "triples": len(split_named[split]),
            "paths": len(path_examples),
            "dags": len(dag_examples),
            **_sequence_stats(split_examples, vocab),
        }

    filters = build_filters(all_examples, full_kg)
    with (out / "filters.jsonl").open("w", encoding="utf-8") as fh:
        for (qid, node), positives in sorted(filters.items()):
            fh.write(
                json.dumps({"qid": qid, "node": node, "positives": positives}) + "\n"
            )

    manifest = {
        "format": 1,
        "seed": seed,
        "limits": {
            "path_limit": path_limit,
            "max_branches": max_branches,
            "min_branch_depth": min_branch_depth,
            "min_depth": min_depth,
            "max_depth": max_depth,
        },
        "fractions": list(fractions),
        "num_entities": full_kg.num_entities,
        "num_relations": full_kg.num_relations,
        "walk_policy": {"revisits_allowed": True, "dedup": "exact-sequence"},
        "mask_policy": {
            "triple": "tail",
            "path": "all-but-source",
            "dag": "all-non-anchors",
        },
        "counts": manifest_counts,
        "dataset_hash": _hash_files(out, written + ["filters.jsonl"]),
    }
    with (out / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_triple_examples(
    split: str, named: list[tuple[str, str, str]], full_kg: KnowledgeGraph
) -> list[QueryExample]:
    ent_id = {name: i for i, name in enumerate(full_kg.entity_names)}
    rel_id = {name: i for i, name in enumerate(full_kg.relation_names)}
    return [
        triple_example(f"{split}-triple-{i:05d}", ent_id[h], rel_id[r], ent_id[t])
        for i, (h, r, t) in enumerate(named)
    ]


def load_dataset(root: str | Path) -> DatasetBundle:
    """Load a generated dataset directory back into memory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{root} does not look like a dataset (no manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    names = read_vocab_names(root / "vocab.tsv")
    entity_names, relation_names = split_vocab_names(
        names, manifest["num_entities"], manifest["num_relations"]
    )

    split_named = {
        split: read_named_triples(root / split / "triples.tsv") for split in SPLITS
    }
    all_named = [row for split in SPLITS for row in split_named[split]]
    full_kg = build_graph(all_named, entity_names=entity_names, relation_names=relation_names)
    split_kgs = {
        split: build_graph(rows, entity_names=entity_names, relation_names=relation_names)
        for split, rows in split_named.items()
    }

    examples: dict[str, dict[str, list[QueryExample]]] = {}
    for split in SPLITS:
        triple_exs = _load_triple_examples(split, split_named[split], full_kg)
        path_exs = []
        with (root / split / "paths.jsonl").open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                path_exs.append(
                    path_example(
                        str(obj["qid"]),
                        MinedPath(tuple(obj["entities"]), tuple(obj["relations"])),
                    )
                )
        dag_exs = []
        with (root / split / "dags.jsonl").open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    dag_exs.append(example_from_json(json.loads(line)))
        examples[split] = {"triples": triple_exs, "paths": path_exs, "dags": dag_exs}

    filters: dict[tuple[str, int], list[int]] = {}
    with (root / "filters.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            filters[(str(obj["qid"]), int(obj["node"]))] = [int(v) for v in obj["positives"]]

    return DatasetBundle(
        manifest=manifest,
        vocab=build_vocab(full_kg),
        entity_names=entity_names,
        relation_names=relation_names,
        full_kg=full_kg,
        split_kgs=split_kgs,
        examples=examples,
        filters=filters,
    )
