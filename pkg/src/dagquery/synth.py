"""Synthetic knowledge graph with compositional group structure.

Entities are laid out as (group, slot) pairs; each relation acts as a fixed
permutation on groups and usually preserves the slot.  The group of any
walk's endpoint is therefore determined by its start group and relation
sequence, and the slot carries most of the remaining information, so
held-out edges are predictable from structure rather than memorization.
The group permutations are arbitrary (not cyclic shifts), which keeps the
task outside what a pure translation model can represent exactly, and
fan-out per (head, relation) pair is heavy-tailed like real graph degree
distributions, so chains that cross a wide hop admit many valid
completions while intersections of several chains pin down few.
"""

from __future__ import annotations

from pathlib import Path

from dagquery.kg import write_triples
from dagquery.seeding import substream


def make_synthetic_kg(
    num_entities: int = 100,
    num_relations: int = 8,
    num_triples: int = 600,
    num_groups: int = 10,
    seed: int = 0,
    slot_fidelity: float = 0.7,
    narrow_fan: tuple[int, int] = (1, 2),
    wide_fan: tuple[int, int] = (6, 10),
    wide_fraction: float = 0.12,
) -> list[tuple[str, str, str]]:
    """Build a deterministic named triple list with group-permutation structure.

    Entity ``i`` encodes the pair ``(group, slot) = divmod(i, group_size)``;
    relation ``r`` maps group ``g`` to group ``perm_r[g]``.  A populated
    (head, relation) pair is usually narrow — the same-slot entity with
    probability ``slot_fidelity`` plus a few extra slots up to a fan-out
    drawn from ``narrow_fan`` — but a ``wide_fraction`` of pairs fan out to
    ``wide_fan`` tails.  The heavy-tailed fan-out mirrors the degree skew
    of real graphs: chains that cross a wide hop admit many valid
    completions, while intersections of several chains pin down few.
    Pairs are filled in seeded random order until exactly ``num_triples``
    edges exist; self-loops are skipped.
    """
    if num_entities < num_groups or num_groups < 2:
        raise ValueError("need at least two groups and one entity per group")
    if num_entities % num_groups:
        raise ValueError("num_groups must divide num_entities")
    if num_triples < 1:
        raise ValueError("num_triples must be positive")
    if not 0.0 <= slot_fidelity <= 1.0:
        raise ValueError("slot_fidelity must lie in [0, 1]")
    if not 0.0 <= wide_fraction <= 1.0:
        raise ValueError("wide_fraction must lie in [0, 1]")
    group_size = num_entities // num_groups
    for lo, hi in (narrow_fan, wide_fan):
        if not 1 <= lo <= hi <= group_size:
            raise ValueError("fan bounds must satisfy 1 <= lo <= hi <= group size")
    rng = substream(seed, "synth")
    perms = [rng.permutation(num_groups) for _ in range(num_relations)]
    ent_name = [f"e{i:03d}" for i in range(num_entities)]
    rel_name = [f"r{j}" for j in range(num_relations)]

    pair_order = rng.permutation(num_entities * num_relations)
    triples: list[tuple[int, int, int]] = []
    for code in pair_order:
        if len(triples) >= num_triples:
            break
        h, r = divmod(int(code), num_relations)
        g, slot = divmod(h, group_size)
        image = int(perms[r][g])
        lo, hi = wide_fan if rng.random() < wide_fraction else narrow_fan
        width = int(rng.integers(lo, hi + 1))
        slots = [slot] if rng.random() < slot_fidelity else []
        others = [j for j in range(group_size) if j != slot]
        extra = rng.permutation(len(others))[: max(0, width - len(slots))]
        slots.extend(others[i] for i in sorted(extra))
        for tail_slot in sorted(slots):
            t = image * group_size + tail_slot
            if t != h:
                triples.append((h, r, t))
    if len(triples) < num_triples:
        raise ValueError(
            f"asked for {num_triples} triples but this size only supports "
            f"{len(triples)}"
        )
    del triples[num_triples:]
    return [(ent_name[h], rel_name[r], ent_name[t]) for h, r, t in triples]


def write_synthetic_kg(path: str | Path, **kwargs) -> list[tuple[str, str, str]]:
    triples = make_synthetic_kg(**kwargs)
    write_triples(path, triples)
    return triples
