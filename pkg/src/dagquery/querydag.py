"""Query DAG structure and graph operations.

A conjunctive query is a DAG whose nodes are anchors (known entities),
existentially quantified variables, or prediction targets (the missing
entities).  Edges are (source node, relation, destination node) conjuncts.
A target node's variable id is its node id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from dagquery.kg import KnowledgeGraph

ANCHOR = "anchor"
EXISTENTIAL = "existential"
TARGET = "target"
NODE_KINDS = (ANCHOR, EXISTENTIAL, TARGET)


class CycleError(ValueError):
    """The edge set contains a directed cycle."""


class PathExplosionError(ValueError):
    """Decomposition would exceed the configured path cap."""


@dataclass(frozen=True)
class QueryNode:
    id: int
    kind: str
    entity: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind == ANCHOR and self.entity is None:
            raise ValueError(f"anchor node {self.id} has no entity")
        if self.kind != ANCHOR and self.entity is not None:
            raise ValueError(f"{self.kind} node {self.id} must not carry an entity")


@dataclass(frozen=True)
class QueryPath:
    """One root-to-leaf path: node ids and the relation of each hop."""

    nodes: tuple[int, ...]
    relations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.relations) + 1:
            raise ValueError("path must have exactly one more node than relations")


@dataclass(frozen=True)
class QueryDag:
    nodes: tuple[QueryNode, ...]
    edges: tuple[tuple[int, int, int], ...]
    node_by_id: dict[int, QueryNode] = field(init=False, repr=False, compare=False)
    out_edges: dict[int, tuple[tuple[int, int], ...]] = field(init=False, repr=False, compare=False)
    in_edges: dict[int, tuple[tuple[int, int], ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_id = {n.id: n for n in self.nodes}
        if len(by_id) != len(self.nodes):
            raise ValueError("duplicate node ids")
        out: dict[int, list[tuple[int, int]]] = {n.id: [] for n in self.nodes}
        inc: dict[int, list[tuple[int, int]]] = {n.id: [] for n in self.nodes}
        for src, rel, dst in self.edges:
            if src not in by_id or dst not in by_id:
                raise ValueError(f"edge ({src}, {rel}, {dst}) references unknown node")
            if src == dst:
                raise ValueError(f"self-loop on node {src}")
            out[src].append((rel, dst))
            inc[dst].append((rel, src))
        object.__setattr__(self, "node_by_id", by_id)
        object.__setattr__(self, "out_edges", {k: tuple(sorted(v)) for k, v in out.items()})
        object.__setattr__(self, "in_edges", {k: tuple(sorted(v)) for k, v in inc.items()})

    @property
    def targets(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.kind == TARGET)

    @property
    def anchors(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.kind == ANCHOR)

    def roots(self) -> tuple[int, ...]:
        return tuple(sorted(n.id for n in self.nodes if not self.in_edges[n.id]))

    def leaves(self) -> tuple[int, ...]:
        return tuple(sorted(n.id for n in self.nodes if not self.out_edges[n.id]))


def _topological_order(dag: QueryDag) -> list[int]:
    indeg = {n.id: len(dag.in_edges[n.id]) for n in dag.nodes}
    frontier = sorted(nid for nid, d in indeg.items() if d == 0)
    order: list[int] = []
    while frontier:
        nid = frontier.pop(0)
        order.append(nid)
        for _, dst in dag.out_edges[nid]:
            indeg[dst] -= 1
            if indeg[dst] == 0:
                frontier.append(dst)
        frontier.sort()
    if len(order) != len(dag.nodes):
        raise CycleError("query graph contains a directed cycle")
    return order


def node_depths(dag: QueryDag) -> dict[int, int]:
    """Longest-path depth of each node from the root layer (roots are 0)."""
    depths: dict[int, int] = {}
    for nid in _topological_order(dag):
        preds = dag.in_edges[nid]
        depths[nid] = 0 if not preds else 1 + max(depths[src] for _, src in preds)
    return depths


def validate(
    dag: QueryDag,
    enforce_depth_uniqueness: bool = False,
    allow_anchor_free: bool = False,
) -> list[str]:
    """Return a list of structural violations; an empty list means valid."""
    violations: list[str] = []

    cyclic = False
    try:
        _topological_order(dag)
    except CycleError:
        violations.append("cycle: query graph contains a directed cycle")
        cyclic = True

    if len(dag.nodes) > 1:
        # connectivity over the undirected skeleton
        adjacency: dict[int, set[int]] = {n.id: set() for n in dag.nodes}
        for src, _, dst in dag.edges:
            adjacency[src].add(dst)
            adjacency[dst].add(src)
        seen = {dag.nodes[0].id}
        stack = [dag.nodes[0].id]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(dag.nodes):
            violations.append("disconnected: query graph has more than one component")

    if not allow_anchor_free and not dag.anchors:
        violations.append("anchor-free: query has no anchor node")

    for src, rel, dst in dag.edges:
        if dag.node_by_id[src].kind == ANCHOR and dag.node_by_id[dst].kind == ANCHOR:
            violations.append(
                f"constant edge: ({src}, {rel}, {dst}) joins two anchors and predicts nothing"
            )

    if enforce_depth_uniqueness and not cyclic:
        depths = node_depths(dag)
        by_depth: dict[int, list[int]] = {}
        for t in dag.targets:
            by_depth.setdefault(depths[t], []).append(t)
        for depth, nodes in sorted(by_depth.items()):
            if len(nodes) > 1:
                violations.append(
                    f"depth collision: targets {sorted(nodes)} share depth {depth}"
                )

    return violations


def decompose(dag: QueryDag, max_paths: int = 64) -> list[QueryPath]:
    """All simple root-to-leaf paths, lexicographic by node id sequence.

    Parallel edges yield one path per relation (ties broken by relation id).
    Raises PathExplosionError when more than `max_paths` paths exist.
    """
    _topological_order(dag)  # reject cyclic input up front
    paths: list[QueryPath] = []
    node_stack: list[int] = []
    rel_stack: list[int] = []

    def walk(nid: int) -> None:
        node_stack.append(nid)
        out = dag.out_edges[nid]
        if not out:
            if len(paths) >= max_paths:
                raise PathExplosionError(
                    f"query decomposes into more than {max_paths} paths"
                )
            paths.append(QueryPath(nodes=tuple(node_stack), relations=tuple(rel_stack)))
        else:
            # sorted by (destination, relation) keeps node-sequence order primary
            for rel, dst in sorted(out, key=lambda e: (e[1], e[0])):
                rel_stack.append(rel)
                walk(dst)
                rel_stack.pop()
        node_stack.pop()

    for root in dag.roots():
        walk(root)
    return paths


def relatives(dag: QueryDag, node: int) -> tuple[set[int], set[int]]:
    """(ancestors, descendants) of `node`, excluding the node itself."""
    if node not in dag.node_by_id:
        raise ValueError(f"unknown node id {node}")

    def reach(start: int, edges: dict[int, tuple[tuple[int, int], ...]]) -> set[int]:
        seen: set[int] = set()
        stack = [start]
        while stack:
            for _, nxt in edges[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    return reach(node, dag.in_edges), reach(node, dag.out_edges)


def ground_answers(dag: QueryDag, kg: KnowledgeGraph) -> dict[int, set[int]]:
    """Entities each target can take in a complete satisfying assignment.

    Exact under homomorphism semantics (distinct variables may share an
    entity).  Candidate domains are narrowed to an arc-consistent fixpoint,
    then each surviving target candidate is confirmed with an early-exit
    backtracking search over the remaining variables.
    """
    violations = validate(dag)
    if violations:
        raise ValueError("invalid query: " + "; ".join(violations))

    all_entities = frozenset(range(kg.num_entities))
    domains: dict[int, frozenset[int]] = {}
    for n in dag.nodes:
        if n.kind == ANCHOR:
            if n.entity >= kg.num_entities:
                raise ValueError(f"anchor entity {n.entity} not in graph")
            domains[n.id] = frozenset((n.entity,))
        else:
            domains[n.id] = all_entities

    def narrow() -> bool:
        changed = True
        while changed:
            changed = False
            for src, rel, dst in dag.edges:
                fwd = frozenset(
                    t for s in domains[src] for t in kg.out_by_rel.get((s, rel), ())
                )
                new_dst = domains[dst] & fwd
                if new_dst != domains[dst]:
                    domains[dst] = new_dst
                    changed = True
                bwd = frozenset(
                    s for t in domains[dst] for s in kg.in_by_rel.get((t, rel), ())
                )
                new_src = domains[src] & bwd
                if new_src != domains[src]:
                    domains[src] = new_src
                    changed = True
                if not domains[dst] or not domains[src]:
                    return False
        return True

    targets = dag.targets
    if not narrow():
        return {t: set() for t in targets}

    depths = node_depths(dag)
    variable_order = sorted(
        (n.id for n in dag.nodes if n.kind != ANCHOR), key=lambda v: (depths[v], v)
    )

    def satisfiable(assignment: dict[int, int]) -> bool:
        unassigned = [v for v in variable_order if v not in assignment]

        def extend(i: int) -> bool:
            if i == len(unassigned):
                return True
            v = unassigned[i]
            candidates: set[int] | frozenset[int] = domains[v]
            for rel, src in dag.in_edges[v]:
                if src in assignment:
                    candidates = candidates & set(
                        kg.out_by_rel.get((assignment[src], rel), ())
                    )
            for rel, dst in dag.out_edges[v]:
                if dst in assignment:
                    candidates = candidates & set(
                        kg.in_by_rel.get((assignment[dst], rel), ())
                    )
            for value in candidates:
                assignment[v] = value
                if extend(i + 1):
                    del assignment[v]
                    return True
                del assignment[v]
            return False

        return extend(0)

    base = {n.id: n.entity for n in dag.nodes if n.kind == ANCHOR}
    answers: dict[int, set[int]] = {}
    for t in targets:
        found: set[int] = set()
        for value in sorted(domains[t]):
            if satisfiable({**base, t: value}):
                found.add(value)
        answers[t] = found
    return answers


def dag_to_json(dag: QueryDag) -> dict:
    """Serializable query object: {nodes, edges, targets}."""
    nodes = []
    for n in sorted(dag.nodes, key=lambda n: n.id):
        obj: dict = {"id": n.id, "kind": n.kind}
        if n.entity is not None:
            obj["entity"] = n.entity
        nodes.append(obj)
    return {
        "nodes": nodes,
        "edges": [list(e) for e in dag.edges],
        "targets": list(dag.targets),
    }


def dag_from_json(obj: dict) -> QueryDag:
    try:
        nodes = tuple(
            QueryNode(
                id=int(n["id"]),
                kind=str(n["kind"]),
                entity=None if n.get("entity") is None else int(n["entity"]),
            )
            for n in obj["nodes"]
        )
        edges = tuple((int(s), int(r), int(d)) for s, r, d in obj["edges"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed query object: {exc}") from exc
    dag = QueryDag(nodes=nodes, edges=edges)
    declared = sorted(int(t) for t in obj.get("targets", dag.targets))
    if declared != sorted(dag.targets):
        raise ValueError("targets list disagrees with node kinds")
    return dag


def write_query_file(path: str | Path, dags: list[QueryDag]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for dag in dags:
            fh.write(json.dumps(dag_to_json(dag), sort_keys=True) + "\n")


def read_query_file(path: str | Path) -> list[QueryDag]:
    dags = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                dags.append(dag_from_json(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return dags
