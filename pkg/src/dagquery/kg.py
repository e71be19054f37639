"""Knowledge graph loading, adjacency indexing and the token vocabulary.

Entities and relations get dense integer ids in order of first appearance
in the triple file.  The token vocabulary maps those ids plus the two
special tokens into one contiguous id space:

    [PAD]=0, [MASK]=1, entities [2, 2+|E|), relations [2+|E|, 2+|E|+|R|).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

PAD_TOKEN = 0
MASK_TOKEN = 1
NUM_SPECIAL_TOKENS = 2
PAD_NAME = "[PAD]"
MASK_NAME = "[MASK]"

Triple = tuple[int, int, int]


class TripleFileError(ValueError):
    """Malformed or inconsistent triple file."""


@dataclass(frozen=True)
class KnowledgeGraph:
    """An immutable directed multigraph of (head, relation, tail) triples.

    `out_index` / `in_index` map an entity id to its outgoing / incoming
    (relation, neighbor) pairs sorted ascending; `out_by_rel` / `in_by_rel`
    map (entity, relation) to the sorted neighbor ids on that relation.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    triples: tuple[Triple, ...]
    out_index: dict[int, tuple[tuple[int, int], ...]] = field(repr=False)
    in_index: dict[int, tuple[tuple[int, int], ...]] = field(repr=False)
    out_by_rel: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)
    in_by_rel: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def neighbors(self, entity: int, direction: str = "out") -> tuple[tuple[int, int], ...]:
        """Sorted (relation, neighbor) pairs for `entity` in `direction`."""
        if not 0 <= entity < self.num_entities:
            raise ValueError(f"unknown entity id {entity}")
        if direction == "out":
            return self.out_index.get(entity, ())
        if direction == "in":
            return self.in_index.get(entity, ())
        raise ValueError(f"direction must be 'out' or 'in', got {direction!r}")


def build_graph(
    named_triples: list[tuple[str, str, str]],
    entity_names: list[str] | None = None,
    relation_names: list[str] | None = None,
) -> KnowledgeGraph:
    """Index a list of (head, relation, tail) name triples.

    Ids are assigned densely in order of first appearance unless explicit
    name lists pin the id assignment (used when a split graph must share
    the full graph's ids).  Duplicate triples are rejected.
    """
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    preset_ids = entity_names is not None
    if entity_names is not None:
        ent_ids = {name: i for i, name in enumerate(entity_names)}
        if len(ent_ids) != len(entity_names):
            raise TripleFileError("duplicate entity name in vocabulary")
    if relation_names is not None:
        rel_ids = {name: i for i, name in enumerate(relation_names)}
        if len(rel_ids) != len(relation_names):
            raise TripleFileError("duplicate relation name in vocabulary")

    def ent(name: str) -> int:
        if name not in ent_ids:
            if preset_ids:
                raise TripleFileError(f"entity {name!r} missing from vocabulary")
            ent_ids[name] = len(ent_ids)
        return ent_ids[name]

    def rel(name: str) -> int:
        if name not in rel_ids:
            if relation_names is not None:
                raise TripleFileError(f"relation {name!r} missing from vocabulary")
            rel_ids[name] = len(rel_ids)
        return rel_ids[name]

    triples: list[Triple] = []
    seen: set[Triple] = set()
    for lineno, (h, r, t) in enumerate(named_triples, start=1):
        triple = (ent(h), rel(r), ent(t))
        if triple in seen:
            raise TripleFileError(f"duplicate triple at entry {lineno}: {h!r} {r!r} {t!r}")
        seen.add(triple)
        triples.append(triple)

    out: dict[int, list[tuple[int, int]]] = {}
    inc: dict[int, list[tuple[int, int]]] = {}
    out_rel: dict[tuple[int, int], list[int]] = {}
    in_rel: dict[tuple[int, int], list[int]] = {}
    for h, r, t in triples:
        out.setdefault(h, []).append((r, t))
        inc.setdefault(t, []).append((r, h))
        out_rel.setdefault((h, r), []).append(t)
        in_rel.setdefault((t, r), []).append(h)

    return KnowledgeGraph(
        entity_names=tuple(sorted(ent_ids, key=ent_ids.get)),
        relation_names=tuple(sorted(rel_ids, key=rel_ids.get)),
        triples=tuple(triples),
        out_index={e: tuple(sorted(v)) for e, v in out.items()},
        in_index={e: tuple(sorted(v)) for e, v in inc.items()},
        out_by_rel={k: tuple(sorted(v)) for k, v in out_rel.items()},
        in_by_rel={k: tuple(sorted(v)) for k, v in in_rel.items()},
    )


def read_named_triples(path: str | Path) -> list[tuple[str, str, str]]:
    """Parse a tab-separated triple file; empty lines are skipped."""
    path = Path(path)
    named: list[tuple[str, str, str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleFileError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            if any(not f for f in fields):
                raise TripleFileError(f"{path}:{lineno}: empty field")
            named.append((fields[0], fields[1], fields[2]))
    if not named:
        raise TripleFileError(f"{path}: no triples found")
    return named


def load_triples(path: str | Path) -> KnowledgeGraph:
    """Load a triple file into an indexed knowledge graph."""
    named = read_named_triples(path)
    try:
        kg = build_graph(named)
    except TripleFileError as exc:
        raise TripleFileError(f"{path}: {exc}") from exc
    logger.info(
        "loaded %s: %d triples, %d entities, %d relations",
        path, len(kg.triples), kg.num_entities, kg.num_relations,
    )
    return kg


def write_triples(path: str | Path, named_triples: list[tuple[str, str, str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for h, r, t in named_triples:
            fh.write(f"{h}\t{r}\t{t}\n")


@dataclass(frozen=True)
class Vocabulary:
    """Token id space over entities, relations and the two special tokens."""

    num_entities: int
    num_relations: int

    @property
    def size(self) -> int:
        return self.num_entities + self.num_relations + NUM_SPECIAL_TOKENS

    @property
    def entity_range(self) -> tuple[int, int]:
        """Half-open token id interval covering exactly the entity tokens."""
        return (NUM_SPECIAL_TOKENS, NUM_SPECIAL_TOKENS + self.num_entities)

    @property
    def relation_range(self) -> tuple[int, int]:
        lo = NUM_SPECIAL_TOKENS + self.num_entities
        return (lo, lo + self.num_relations)

    def entity_token(self, entity: int) -> int:
        if not 0 <= entity < self.num_entities:
            raise ValueError(f"unknown entity id {entity}")
        return NUM_SPECIAL_TOKENS + entity

    def relation_token(self, relation: int) -> int:
        if not 0 <= relation < self.num_relations:
            raise ValueError(f"unknown relation id {relation}")
        return NUM_SPECIAL_TOKENS + self.num_entities + relation

    def token_entity(self, token: int) -> int:
        lo, hi = self.entity_range
        if not lo <= token < hi:
            raise ValueError(f"token {token} is not an entity token")
        return token - lo


def build_vocab(kg: KnowledgeGraph) -> Vocabulary:
    return Vocabulary(num_entities=kg.num_entities, num_relations=kg.num_relations)


def write_vocab(path: str | Path, kg: KnowledgeGraph) -> None:
    """Dump the token id assignment as 'token<TAB>id' lines for audit."""
    vocab = build_vocab(kg)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{PAD_NAME}\t{PAD_TOKEN}\n")
        fh.write(f"{MASK_NAME}\t{MASK_TOKEN}\n")
        for e, name in enumerate(kg.entity_names):
            fh.write(f"{name}\t{vocab.entity_token(e)}\n")
        for r, name in enumerate(kg.relation_names):
            fh.write(f"{name}\t{vocab.relation_token(r)}\n")


def read_vocab_names(path: str | Path) -> list[str]:
    """Read back a vocab dump; returns the entity+relation names in id order.

    Relies on the fixed id layout: specials, then entities, then relations.
    The caller splits the list using the manifest's entity/relation counts.
    """
    rows: list[tuple[str, int]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            name, _, id_str = line.rpartition("\t")
            if not name:
                raise TripleFileError(f"{path}:{lineno}: malformed vocab line")
            rows.append((name, int(id_str)))
    rows.sort(key=lambda item: item[1])
    ids = [i for _, i in rows]
    if ids != list(range(len(rows))) or len(rows) < NUM_SPECIAL_TOKENS:
        raise TripleFileError(f"{path}: vocab ids are not dense from 0")
    if rows[PAD_TOKEN][0] != PAD_NAME or rows[MASK_TOKEN][0] != MASK_NAME:
        raise TripleFileError(f"{path}: special tokens out of place")
    return [name for name, _ in rows[NUM_SPECIAL_TOKENS:]]


def split_vocab_names(
    names: list[str], num_entities: int, num_relations: int
) -> tuple[list[str], list[str]]:
    if len(names) != num_entities + num_relations:
        raise TripleFileError("vocab dump size does not match manifest counts")
    return names[:num_entities], names[num_entities:]
