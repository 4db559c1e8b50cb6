import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import lowest_common, path_distance, random_tree, weighted_depth
from pilotdata.errors import NotFoundError, ValidationError
from pilotdata.topology import AffinityLabel, TopologyTree, nearest, sort_labels, tree_from_config


def build(rng, max_nodes=60):
    labels, parent, weight = random_tree(rng, max_nodes)
    tree = TopologyTree(labels, {l: w for l, w in weight.items() if w != 1})
    return tree, labels, parent, weight


def test_label_parsing_and_prefix():
    label = AffinityLabel.parse("xsede/tacc/lonestar")
    assert str(label) == "xsede/tacc/lonestar"
    assert label.depth == 3
    assert str(label.parent) == "xsede/tacc"
    assert label.is_within(AffinityLabel.parse("xsede"))
    assert not AffinityLabel.parse("xsede/tacc2").is_within(AffinityLabel.parse("xsede/tacc/lonestar"))
    for bad in ["", "a//b", "/a", "a/"]:
        with pytest.raises(ValidationError):
            AffinityLabel.parse(bad)


def test_two_sites_distance():
    tree = TopologyTree(["xsede/tacc/lonestar", "xsede/tacc/stampede", "osg/purdue"])
    assert tree.distance("xsede/tacc/lonestar", "xsede/tacc/lonestar") == 0
    assert tree.distance("xsede/tacc/lonestar", "xsede/tacc/stampede") == 2
    assert tree.distance("xsede/tacc/lonestar", "osg/purdue") == 5
    assert str(tree.lca("xsede/tacc/lonestar", "xsede/tacc/stampede")) == "xsede/tacc"
    assert tree.lca("xsede/tacc", "osg") is None


def test_unknown_label_raises():
    tree = TopologyTree(["a/b"])
    with pytest.raises(NotFoundError):
        tree.distance("a/b", "c")


def test_nonpositive_weight_rejected():
    with pytest.raises(ValidationError):
        TopologyTree(["a/b"], {"a/b": 0})


def test_insert_is_persistent():
    tree = TopologyTree(["a/b"])
    bigger = tree.insert_label("a/c/d")
    assert "a/c/d" not in tree
    assert "a/c/d" in bigger and "a/c" in bigger
    assert bigger.insert_label("a/c") is bigger


def test_nearest_ties_go_to_smallest_label():
    tree = TopologyTree(["r/x", "r/b", "r/a"])
    assert str(nearest(tree, "r/x", ["r/b", "r/a"])) == "r/a"
    with pytest.raises(ValueError):
        tree.nearest("r/x", [])


def test_config_round_trip():
    tree = TopologyTree(["a/b/c", "a/d"], {"a/d": 2.5})
    assert tree_from_config(tree.to_config()) == tree
    assert tree_from_config(["a/b/c", "a/d"]).distance("a/b/c", "a/d") == 3


def test_sort_labels_is_canonical():
    assert [str(l) for l in sort_labels(["b", "a/z", "a"])] == ["a", "a/z", "b"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_distance_matches_path_oracle(seed):
    rng = random.Random(seed)
    tree, labels, parent, weight = build(rng)
    for _ in range(10):
        a, b = rng.choice(labels), rng.choice(labels)
        assert tree.distance(a, b) == pytest.approx(path_distance(a, b, parent, weight), abs=1e-12)
        lca = tree.lca(a, b)
        assert (None if lca is None else str(lca)) == lowest_common(a, b, parent)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_laws(seed):
    rng = random.Random(seed)
    tree, labels, _, _ = build(rng)
    for _ in range(10):
        a, b, c = (rng.choice(labels) for _ in range(3))
        assert tree.distance(a, a) == 0
        assert tree.distance(a, b) == tree.distance(b, a)
        assert tree.distance(a, c) <= tree.distance(a, b) + tree.distance(b, c) + 1e-12
        if a != b:
            assert tree.distance(a, b) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_lca_closed_form(seed):
    rng = random.Random(seed)
    tree, labels, parent, weight = build(rng)
    for _ in range(10):
        a, b = rng.choice(labels), rng.choice(labels)
        lca = tree.lca(a, b)
        depth_lca = 0 if lca is None else weighted_depth(str(lca), parent, weight)
        expected = weighted_depth(a, parent, weight) + weighted_depth(b, parent, weight) - 2 * depth_lca
        assert tree.distance(a, b) == pytest.approx(expected, abs=1e-12)
