"""Shared fixtures and random-structure generators for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from dagquery.kg import build_graph, build_vocab
from dagquery.querydag import ANCHOR, EXISTENTIAL, TARGET, QueryDag, QueryNode

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


def chain_dag(anchor_entity: int, relations: list[int]) -> QueryDag:
    """anchor -[r]-> target -[r]-> target ... single-path chain query."""
    nodes = [QueryNode(0, ANCHOR, anchor_entity)]
    nodes += [QueryNode(i, TARGET) for i in range(1, len(relations) + 1)]
    edges = tuple((i, rel, i + 1) for i, rel in enumerate(relations))
    return QueryDag(nodes=tuple(nodes), edges=edges)


def random_dag(
    rng: np.random.Generator,
    max_nodes: int = 12,
    num_entities: int = 30,
    num_relations: int = 4,
    extra_edge_prob: float = 0.15,
    existential_prob: float = 0.3,
) -> QueryDag:
    """Random valid query DAG: anchors at the roots, random interior kinds.

    Edges only run from lower to higher node id, so the graph is acyclic by
    construction; every non-root picks at least one parent, so it is
    connected.  Parallel edges (same endpoints, different relation) occur.
    """
    n = int(rng.integers(2, max_nodes + 1))
    edges = {
        (int(rng.integers(0, j)), int(rng.integers(num_relations)), j)
        for j in range(1, n)
    }
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra_edge_prob:
                edges.add((i, int(rng.integers(num_relations)), j))
    has_parent = {dst for _, _, dst in edges}
    nodes = []
    for nid in range(n):
        if nid not in has_parent:
            nodes.append(QueryNode(nid, ANCHOR, int(rng.integers(num_entities))))
        elif rng.random() < existential_prob:
            nodes.append(QueryNode(nid, EXISTENTIAL))
        else:
            nodes.append(QueryNode(nid, TARGET))
    return QueryDag(nodes=tuple(nodes), edges=tuple(sorted(edges)))


def star_dag() -> QueryDag:
    """Two anchors meeting at a shared center, plus a tail hop."""
    return QueryDag(
        nodes=(
            QueryNode(0, ANCHOR, 1),
            QueryNode(1, ANCHOR, 2),
            QueryNode(2, TARGET),
            QueryNode(3, TARGET),
        ),
        edges=((0, 0, 2), (1, 1, 2), (2, 0, 3)),
    )


def mixed_batch(vocab, max_len=16):
    """Four structurally different queries collated with random gold labels."""
    from dagquery.encoding import collate, encode_query
    from dagquery.seeding import substream

    dags = [
        chain_dag(4, [1, 0]),
        chain_dag(0, [0]),
        QueryDag(
            nodes=(
                QueryNode(0, ANCHOR, 5),
                QueryNode(1, EXISTENTIAL),
                QueryNode(2, EXISTENTIAL),
                QueryNode(3, TARGET),
            ),
            edges=((0, 0, 1), (0, 1, 2), (1, 0, 3), (2, 1, 3)),
        ),
        star_dag(),
    ]
    batch = collate([encode_query(dag, vocab, max_len=max_len) for dag in dags])
    labels = substream(99, "labels").integers(vocab.num_entities, size=batch.num_slots)
    return batch, labels


def gradcheck_errors(params, batch, labels, step=1e-3) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per group.

    The error of each parameter group is normalized by that group's own
    gradient magnitude, so groups with tiny gradients are not judged
    against an absolute yardstick they never reach.
    """
    from dagquery.transformer import forward, loss_and_grads, loss_masked_ce

    def batch_loss() -> float:
        fr = forward(params, batch, train=False)
        return loss_masked_ce(fr.logits, labels, params.config.num_entities)

    analytic = loss_and_grads(params, batch, labels, train=False).grads
    errors: dict[str, float] = {}
    for name, grad in analytic.items():
        flat = params.arrays[name].reshape(-1)
        fd = np.empty(flat.size, dtype=np.float64)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            up = batch_loss()
            flat[k] = original - step
            down = batch_loss()
            flat[k] = original
            fd[k] = (up - down) / (2.0 * step)
        a = grad.reshape(-1).astype(np.float64)
        scale = max(np.abs(a).max(), np.abs(fd).max(), 1e-12)
        errors[name] = float(np.abs(a - fd).max() / scale)
    return errors


def distributions_under_order(params, dag, vocab, order, max_len=64):
    """Per-variable aggregated distributions for one explicit path order."""
    import dagquery.kernels as kernels
    from dagquery.encoding import aggregate_mask_distributions, collate, encode_query
    from dagquery.transformer import forward

    seq = encode_query(dag, vocab, max_len=max_len, path_order=order)
    batch = collate([seq])
    fr = forward(params, batch, train=False)
    probs = kernels.masked_softmax(fr.logits, np.ones(fr.logits.shape, dtype=bool))
    slots = [(int(var), probs[i]) for i, var in enumerate(batch.slot_variables)]
    return aggregate_mask_distributions(slots, expected_variables=dag.targets)


def enumerate_paths_oracle(dag: QueryDag) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Exhaustive root-to-leaf enumeration via an explicit worklist.

    Independent of the production recursion; returns (nodes, relations)
    pairs sorted by the interleaved (next node, relation) sequence, which
    is the documented output order.
    """
    complete = []
    frontier = [((root,), ()) for root in dag.roots()]
    while frontier:
        nodes, rels = frontier.pop()
        out = dag.out_edges[nodes[-1]]
        if not out:
            complete.append((nodes, rels))
        for rel, dst in out:
            frontier.append((nodes + (dst,), rels + (rel,)))
    complete.sort(key=lambda p: (p[0][:1],) + tuple(zip(p[0][1:], p[1])))
    return complete


def brute_force_answers(dag: QueryDag, kg) -> dict[int, set[int]]:
    """Ground a query by checking every assignment of entities to variables."""
    import itertools

    triple_set = set(kg.triples)
    variables = [n.id for n in dag.nodes if n.kind != ANCHOR]
    base = {n.id: n.entity for n in dag.nodes if n.kind == ANCHOR}
    answers: dict[int, set[int]] = {t: set() for t in dag.targets}
    for combo in itertools.product(range(kg.num_entities), repeat=len(variables)):
        assignment = dict(base)
        assignment.update(zip(variables, combo))
        if all(
            (assignment[src], rel, assignment[dst]) in triple_set
            for src, rel, dst in dag.edges
        ):
            for t in answers:
                answers[t].add(assignment[t])
    return answers


def random_kg(rng: np.random.Generator, num_entities=30, num_relations=3, num_triples=90):
    """A random multigraph dense enough that small queries often ground."""
    triples = set()
    while len(triples) < num_triples:
        h, t = rng.integers(num_entities, size=2)
        if h != t:
            triples.add((f"e{h}", f"r{int(rng.integers(num_relations))}", f"e{t}"))
    return build_graph(sorted(triples))


TINY_TRIPLES = [
    ("alice", "knows", "bob"),
    ("alice", "knows", "carol"),
    ("bob", "knows", "carol"),
    ("bob", "works_at", "shop"),
    ("carol", "works_at", "shop"),
    ("carol", "knows", "dave"),
    ("dave", "works_at", "mill"),
]


@pytest.fixture
def tiny_kg():
    return build_graph(TINY_TRIPLES)


@pytest.fixture
def tiny_vocab(tiny_kg):
    return build_vocab(tiny_kg)


@pytest.fixture
def tiny_triples_file(tmp_path):
    path = tmp_path / "triples.tsv"
    path.write_text(
        "".join(f"{h}\t{r}\t{t}\n" for h, r, t in TINY_TRIPLES), encoding="utf-8"
    )
    return path
