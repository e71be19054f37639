"""Dataset generation: mining, star synthesis, splits, filters, manifests."""

from __future__ import annotations

import filecmp
import json
from pathlib import Path

import pytest

from dagquery.datagen import (
    MinedPath,
    example_from_json,
    example_to_json,
    generate_dataset,
    load_dataset,
    mine_paths,
    path_example,
    synthesize_dags,
    triple_example,
)
from dagquery.kg import build_graph, load_triples
from dagquery.querydag import ANCHOR, TARGET, ground_answers, node_depths, validate
from dagquery.synth import write_synthetic_kg


@pytest.fixture(scope="module")
def medium_kg(tmp_path_factory):
    path = tmp_path_factory.mktemp("kg") / "triples.tsv"
    write_synthetic_kg(
        path,
        num_entities=30,
        num_relations=4,
        num_triples=120,
        num_groups=6,
        wide_fan=(3, 5),
        seed=0,
    )
    return path, load_triples(path)


@pytest.fixture(scope="module")
def dataset(medium_kg, tmp_path_factory):
    path, _ = medium_kg
    out = tmp_path_factory.mktemp("data") / "d0"
    manifest = generate_dataset(path, out, seed=5, path_limit=60)
    return out, manifest, load_dataset(out)


class TestMinePaths:
    def test_walks_are_real_and_deduplicated(self, medium_kg):
        _, kg = medium_kg
        mined = mine_paths(kg, seed=0, limit=50)
        assert len(mined) == 50  # the graph is rich enough to hit the limit
        seen = set()
        for walk in mined:
            assert 2 <= walk.depth <= 5
            key = (walk.entities, walk.relations)
            assert key not in seen
            seen.add(key)
            for i, rel in enumerate(walk.relations):
                assert walk.entities[i + 1] in kg.out_by_rel[(walk.entities[i], rel)]

    def test_deterministic_and_stream_separated(self, medium_kg):
        _, kg = medium_kg
        a = mine_paths(kg, seed=0, limit=30)
        b = mine_paths(kg, seed=0, limit=30)
        c = mine_paths(kg, seed=0, limit=30, stream="dev")
        d = mine_paths(kg, seed=1, limit=30)
        assert a == b
        assert a != c
        assert a != d

    def test_depth_bounds_are_respected(self, medium_kg):
        _, kg = medium_kg
        for walk in mine_paths(kg, seed=2, limit=40, min_depth=3, max_depth=3):
            assert walk.depth == 3

    def test_dead_ends_are_discarded(self):
        kg = build_graph([("a", "r", "b"), ("b", "r", "c")])
        mined = mine_paths(kg, seed=0, limit=10, min_depth=2, max_depth=2)
        assert [(m.entities, m.relations) for m in mined] == [((0, 1, 2), (0, 0))]

    def test_zero_limit(self, medium_kg):
        _, kg = medium_kg
        assert mine_paths(kg, seed=0, limit=0) == []

    def test_bad_arguments(self, medium_kg):
        _, kg = medium_kg
        with pytest.raises(ValueError):
            mine_paths(kg, seed=0, limit=-1)
        with pytest.raises(ValueError):
            mine_paths(kg, seed=0, limit=5, min_depth=0)
        with pytest.raises(ValueError):
            mine_paths(kg, seed=0, limit=5, min_depth=4, max_depth=2)


class TestExampleBuilders:
    def test_triple_example_masks_the_tail(self):
        ex = triple_example("t-0", head=3, relation=1, tail=5)
        assert ex.kind == "triple"
        assert ex.dag.anchors == (0,)
        assert ex.dag.node_by_id[0].entity == 3
        assert ex.dag.edges == ((0, 1, 1),)
        assert ex.gold == {1: 5}
        assert ex.center is None

    def test_path_example_masks_everything_but_the_source(self):
        walk = MinedPath(entities=(7, 2, 9, 4), relations=(0, 1, 0))
        ex = path_example("p-0", walk)
        assert ex.kind == "path"
        assert ex.dag.node_by_id[0].kind == ANCHOR
        assert ex.dag.node_by_id[0].entity == 7
        assert all(ex.dag.node_by_id[i].kind == TARGET for i in (1, 2, 3))
        assert ex.gold == {1: 2, 2: 9, 3: 4}
        assert [e for e in ex.dag.edges] == [(0, 0, 1), (1, 1, 2), (2, 0, 3)]
        assert ex.pair == (ex.dag, ex.gold)

    def test_example_json_round_trip(self, dataset):
        _, _, bundle = dataset
        for kind in ("triples", "paths", "dags"):
            for ex in bundle.examples["train"][kind][:5]:
                clone = example_from_json(example_to_json(ex))
                assert clone.qid == ex.qid
                assert clone.dag == ex.dag
                assert clone.gold == ex.gold
                assert clone.kind == ex.kind
                assert clone.center == ex.center


@pytest.fixture(scope="module")
def stars(medium_kg):
    _, kg = medium_kg
    mined = mine_paths(kg, seed=3, limit=80)
    return kg, mined, synthesize_dags(mined, kg, seed=3)


class TestSynthesizeDags:

    def test_star_structure(self, stars):
        kg, _, examples = stars
        assert examples, "expected at least one intersection query"
        for ex in examples:
            dag = ex.dag
            assert validate(dag) == []
            center, tail = ex.center, max(n.id for n in dag.nodes)
            # node ids are dense; the tail sits right after the center
            assert sorted(n.id for n in dag.nodes) == list(range(len(dag.nodes)))
            assert tail == center + 1
            # between 2 and 3 branches converge on the center, plus one tail hop
            assert 2 <= len(dag.in_edges[center]) <= 3
            assert [dst for _, dst in dag.out_edges[center]] == [tail]
            assert dag.out_edges[tail] == ()
            # anchors are exactly the branch sources; everything else is a target
            for node in dag.nodes:
                if node.kind == ANCHOR:
                    assert not dag.in_edges[node.id]
                else:
                    assert node.kind == TARGET
                    assert node.id in ex.gold

    def test_golds_satisfy_the_split_graph(self, stars):
        kg, _, examples = stars
        triple_set = set(kg.triples)
        for ex in examples:
            value = {n.id: n.entity for n in ex.dag.nodes if n.kind == ANCHOR}
            value.update(ex.gold)
            for src, rel, dst in ex.dag.edges:
                assert (value[src], rel, value[dst]) in triple_set

    def test_branch_cap_is_respected(self, stars):
        kg, mined, _ = stars
        capped = synthesize_dags(mined, kg, seed=3, max_branches=2)
        assert capped
        for ex in capped:
            assert len(ex.dag.in_edges[ex.center]) == 2

    def test_min_branch_depth_drops_shallow_branches(self, stars):
        kg, mined, _ = stars
        deep = synthesize_dags(mined, kg, seed=3, min_branch_depth=2)
        for ex in deep:
            # every branch contributes at least two hops before the center
            depths = node_depths(ex.dag)
            assert depths[ex.center] >= 2
            for anchor in ex.dag.anchors:
                hops = 0
                node = anchor
                while node != ex.center:
                    ((_, node),) = ex.dag.out_edges[node]
                    hops += 1
                assert hops >= 2

    def test_deterministic(self, stars):
        kg, mined, examples = stars
        again = synthesize_dags(mined, kg, seed=3)
        assert [example_to_json(e) for e in again] == [
            example_to_json(e) for e in examples
        ]


class TestGenerateDataset:
    def test_layout_and_manifest(self, dataset):
        out, manifest, bundle = dataset
        for name in ("manifest.json", "vocab.tsv", "filters.jsonl"):
            assert (out / name).exists(), name
        for split in ("train", "dev", "test"):
            for fname in ("triples.tsv", "paths.jsonl", "dags.jsonl"):
                assert (out / split / fname).exists()
            counts = manifest["counts"][split]
            assert counts["triples"] == len(bundle.split_kgs[split].triples)
            assert counts["paths"] == len(bundle.examples[split]["paths"])
            assert counts["dags"] == len(bundle.examples[split]["dags"])
        assert manifest["limits"] == {
            "path_limit": 60,
            "max_branches": 3,
            "min_branch_depth": 1,
            "min_depth": 2,
            "max_depth": 5,
        }
        assert len(manifest["dataset_hash"]) == 64

    def test_split_sizes_follow_fractions(self, dataset):
        _, manifest, bundle = dataset
        total = sum(manifest["counts"][s]["triples"] for s in ("train", "dev", "test"))
        assert total == 120
        assert manifest["counts"]["train"]["triples"] == round(0.7 * 120)
        assert manifest["counts"]["dev"]["triples"] == round(0.15 * 120)
        # splits partition the full graph's triples
        union = [t for s in ("train", "dev", "test") for t in bundle.split_kgs[s].triples]
        assert sorted(union) == sorted(bundle.full_kg.triples)
        assert len(set(union)) == len(union)

    def test_path_limit_is_respected_exactly(self, dataset):
        _, manifest, _ = dataset
        for split in ("train", "dev", "test"):
            assert manifest["counts"][split]["paths"] <= 60

    def test_every_query_has_a_full_graph_answer(self, dataset):
        _, _, bundle = dataset
        for split in ("train", "dev", "test"):
            for ex in bundle.split_examples(split):
                for target in ex.dag.targets:
                    positives = bundle.filters[(ex.qid, target)]
                    assert positives
                    assert ex.gold[target] in positives

    def test_filters_match_exhaustive_grounding(self, dataset):
        _, _, bundle = dataset
        sample = bundle.split_examples("dev")[:10]
        for ex in sample:
            answers = ground_answers(ex.dag, bundle.full_kg)
            for target, values in answers.items():
                assert bundle.filters[(ex.qid, target)] == sorted(values)

    def test_mask_policy(self, dataset):
        _, manifest, bundle = dataset
        assert manifest["mask_policy"] == {
            "triple": "tail",
            "path": "all-but-source",
            "dag": "all-non-anchors",
        }
        for ex in bundle.examples["train"]["triples"][:5]:
            assert set(ex.gold) == {1}
        for ex in bundle.examples["train"]["paths"][:5]:
            non_source = {n.id for n in ex.dag.nodes if n.kind != ANCHOR}
            assert set(ex.gold) == non_source
        for ex in bundle.examples["train"]["dags"][:5]:
            non_anchor = {n.id for n in ex.dag.nodes if n.kind != ANCHOR}
            assert set(ex.gold) == non_anchor

    def test_regeneration_is_byte_identical(self, medium_kg, dataset, tmp_path):
        path, _ = medium_kg
        out, _, _ = dataset
        again = tmp_path / "d1"
        generate_dataset(path, again, seed=5, path_limit=60)
        files = sorted(
            str(p.relative_to(out)) for p in Path(out).rglob("*") if p.is_file()
        )
        again_files = sorted(
            str(p.relative_to(again)) for p in Path(again).rglob("*") if p.is_file()
        )
        assert files == again_files
        match, mismatch, errors = filecmp.cmpfiles(out, again, files, shallow=False)
        assert mismatch == [] and errors == []
        assert sorted(match) == files

    def test_different_seed_changes_the_dataset(self, medium_kg, dataset, tmp_path):
        path, _ = medium_kg
        _, manifest, _ = dataset
        other = generate_dataset(path, tmp_path / "d2", seed=6, path_limit=60)
        assert other["dataset_hash"] != manifest["dataset_hash"]

    def test_load_round_trip_preserves_ids(self, dataset):
        _, manifest, bundle = dataset
        assert bundle.full_kg.num_entities == manifest["num_entities"]
        assert bundle.vocab.num_entities == manifest["num_entities"]
        for split in ("train", "dev", "test"):
            assert bundle.split_kgs[split].entity_names == bundle.full_kg.entity_names

    def test_bad_fractions_rejected(self, medium_kg, tmp_path):
        path, _ = medium_kg
        with pytest.raises(ValueError, match="fractions"):
            generate_dataset(path, tmp_path / "x", seed=0, fractions=(0.9, 0.2, 0.1))
