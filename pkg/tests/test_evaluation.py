import functools
import itertools

import pytest

from facadegram import generator
from facadegram.evaluation import (
    FrequencyTable,
    noise_robustness_curve,
    pixel_classification_error,
    production_frequency,
    tree_edit_distance,
)
from facadegram.grammar import Node, Rect, RectLayout, execute


# ---------------------------------------------------------------------------
# Brute-force oracle: forest edit distance straight from the definition
# (delete rightmost root / insert / match), memoized on forest pairs.
# Trees are (label, (children...)) tuples.

@functools.lru_cache(maxsize=None)
def slow_forest_distance(f1: tuple, f2: tuple) -> int:
    if not f1 and not f2:
        return 0
    if not f1:
        return sum(_size(t) for t in f2)
    if not f2:
        return sum(_size(t) for t in f1)
    l1, v = f1[:-1], f1[-1]
    l2, w = f2[:-1], f2[-1]
    delete = slow_forest_distance(l1 + v[1], f2) + 1
    insert = slow_forest_distance(f1, l2 + w[1]) + 1
    match = (slow_forest_distance(l1, l2) + slow_forest_distance(v[1], w[1])
             + (0 if v[0] == w[0] else 1))
    return min(delete, insert, match)


def _size(t: tuple) -> int:
    return 1 + sum(_size(c) for c in t[1])


def slow_ted(a: tuple, b: tuple) -> int:
    return slow_forest_distance((a,), (b,))


def _to_plain(node: Node) -> tuple:
    return ((node.prod, node.structural), tuple(_to_plain(c) for c in node.children))


def all_trees(n_nodes: int, labels=("A", "B", "C")):
    """Every ordered tree with exactly n_nodes nodes over the label set."""
    if n_nodes == 1:
        for l in labels:
            yield (l, ())
        return
    for root_label in labels:
        for split in _forests(n_nodes - 1, labels):
            yield (root_label, split)


def _forests(n_nodes: int, labels):
    if n_nodes == 0:
        yield ()
        return
    for first_size in range(1, n_nodes + 1):
        for first in all_trees(first_size, labels):
            for rest in _forests(n_nodes - first_size, labels):
                yield (first,) + rest


def _plain_to_node(t: tuple) -> Node:
    return Node(t[0], (), (), tuple(_plain_to_node(c) for c in t[1]))


def test_identical_trees_distance_zero():
    tree = generator.make_record(80, 0).tree
    assert tree_edit_distance(tree, tree) == 0


def test_single_relabel_costs_one():
    cell8 = Node("P8", (), (), (Node("P15"), Node("P16"), Node("P15")))
    cell9 = Node("P9", (), (), (Node("P18"), Node("P16"), Node("P15")))
    # P8 -> P9 changes the production AND its first child's label: 2 edits
    assert tree_edit_distance(cell8, cell9) == 2
    relabeled = Node("P9", (), (), (Node("P15"), Node("P16"), Node("P15")))
    assert tree_edit_distance(cell8, relabeled) == 1


def test_extra_leaf_costs_one():
    a = Node("P4", (2,), (), (Node("P10"), Node("P10")))
    b = Node("P4", (2,), (), (Node("P10"), Node("P10"), Node("P10")))
    assert tree_edit_distance(a, b) == 1


def test_structural_argument_change_is_one_relabel():
    a = Node("P4", (2,), (), (Node("P10"), Node("P10")))
    b = Node("P4", (3,), (), (Node("P10"), Node("P10")))
    assert tree_edit_distance(a, b) == 1


def test_ted_matches_bruteforce_on_small_trees():
    trees3 = [_plain_to_node(t) for t in all_trees(3, ("A", "B"))]
    plain3 = [_to_plain(t) for t in trees3]
    for (ta, pa), (tb, pb) in itertools.product(zip(trees3, plain3), repeat=2):
        assert tree_edit_distance(ta, tb) == slow_ted(pa, pb)


def test_ted_metric_axioms_on_random_triples():
    import random

    rng = random.Random(0)
    pool = [generator.make_record(81, i).tree for i in range(40)]
    for _ in range(120):
        a, b, c = (rng.choice(pool) for _ in range(3))
        dab = tree_edit_distance(a, b)
        dba = tree_edit_distance(b, a)
        assert dab == dba
        assert (dab == 0) == (strip(a) == strip(b))
        assert dab <= tree_edit_distance(a, c) + tree_edit_distance(c, b)


def strip(node: Node) -> tuple:
    return ((node.prod, node.structural), tuple(strip(c) for c in node.children))


def test_ted_upper_bound_total_nodes():
    from facadegram.grammar import tree_size

    a = generator.make_record(82, 0).tree
    b = generator.make_record(82, 1).tree
    assert tree_edit_distance(a, b) <= tree_size(a) + tree_size(b)


def test_production_frequency_empty():
    table = production_frequency([])
    assert table.counts == {}


def test_production_frequency_linearity():
    tree = generator.make_record(83, 0).tree
    one = production_frequency([tree]).counts
    five = production_frequency([tree] * 5).counts
    assert five == {k: 5 * v for k, v in one.items()}


def test_production_frequency_paired_zero_difference():
    trees = [generator.make_record(83, i).tree for i in range(10)]
    table = production_frequency(trees, recon=trees)
    diff = table.normalized_difference()
    assert all(v == 0.0 for v in diff.values())


def test_pixel_error_identity_and_swap():
    layout = generator.make_record(84, 0).layout
    assert pixel_classification_error(layout, layout, 64) == 0.0
    wall = RectLayout((Rect("Wall", 0, 0, 1, 1),))
    window = RectLayout((Rect("Window", 0, 0, 1, 1),))
    assert pixel_classification_error(wall, window, 64) == 1.0


def test_pixel_error_half_swap():
    a = RectLayout((Rect("Wall", 0, 0, 1, 1),))
    b = RectLayout((Rect("Window", 0, 0, 0.5, 1), Rect("Wall", 0.5, 0, 0.5, 1)))
    err = pixel_classification_error(a, b, 64)
    assert err == pytest.approx(0.5, abs=1 / 64)


def test_pixel_error_rejects_tiny_resolution():
    layout = generator.make_record(84, 0).layout
    with pytest.raises(ValueError):
        pixel_classification_error(layout, layout, 8)


def test_noise_curve_level_zero_equals_clean(small_model, vocab):
    testset = [generator.make_record(85, i) for i in range(6)]
    curve = noise_robustness_curve(small_model, testset, [0.0, 0.1], seed=3,
                                   vocab=vocab)
    assert [lvl for lvl, _, _ in curve] == [0.0, 0.1]
    assert all(n == 6 for _, _, n in curve)

    from facadegram.decode import DecodeConfig, infer_procedures

    trees = infer_procedures(small_model, [r.layout for r in testset], vocab,
                             DecodeConfig())
    clean = sum(tree_edit_distance(t, r.tree) for t, r in zip(trees, testset)) / 6
    assert curve[0][1] == clean


def test_noise_curve_rejects_bad_levels(small_model, vocab):
    with pytest.raises(ValueError):
        noise_robustness_curve(small_model, [], [0.1, 0.0], seed=0, vocab=vocab)
