import pytest
from hypothesis import given, strategies as st

from facadegram import generator
from facadegram.grammar import Node, Rect, RectLayout, canonical_rect_order, default_sizing
from facadegram.tokenizer import (
    MalformedSequence,
    TokenSeq,
    TooManyRects,
    Vocabulary,
    build_vocabulary,
    decode_layout,
    decode_tree,
    encode_layout,
    encode_tree,
)


def test_vocabulary_ranges_disjoint_and_bijective(vocab):
    assert len(set(vocab.tokens)) == len(vocab.tokens)
    assert vocab.tokens[vocab.pad_id] == "<pad>"
    assert vocab.tokens[vocab.bos_id] == "<bos>"
    assert vocab.tokens[vocab.eos_id] == "<eos>"
    assert vocab.tokens[vocab.sep_id] == "<sep>"
    for tok in vocab.tokens:
        assert vocab.id(tok) == vocab.tokens.index(tok)


def test_vocabulary_rejects_unknown_resolution():
    with pytest.raises(ValueError):
        build_vocabulary(128)


def test_vocabulary_json_round_trip(vocab):
    assert Vocabulary.from_json(vocab.to_json()) == vocab


def test_encode_single_rect_quantization(vocab):
    layout = RectLayout((Rect("Window", 0.25, 0.5, 0.1, 0.2),))
    seq = encode_layout(layout, vocab)
    names = [vocab.tokens[t] for t in seq.tokens]
    assert names == ["T:Window", "B:25", "B:50", "B:10", "B:20"]
    assert seq.local_pos == (0, 1, 2, 3, 4)
    assert seq.global_pos == (0, 1, 2, 3, 4)


def test_y_major_sort_order(vocab):
    a = Rect("Wall", 0.5, 0.0, 0.5, 0.5)
    b = Rect("Wall", 0.0, 0.5, 0.5, 0.5)
    seq = encode_layout(RectLayout((b, a)), vocab)
    xs = [vocab.bin_value(seq.tokens[i]) for i in (1, 6)]
    assert xs == [50, 0]  # (0.5, 0) sorts before (0, 0.5)


def test_resolution_changes_bins_not_structure():
    layout = generator.make_record(4, 7).layout
    seq50 = encode_layout(layout, build_vocabulary(50))
    seq1000 = encode_layout(layout, build_vocabulary(1000))
    assert len(seq50) == len(seq1000)
    assert seq50.tokens != seq1000.tokens


@given(st.integers(0, 400), st.permutations(range(5)))
def test_sort_canonicalization_under_permutation(seed, perm):
    layout = generator.make_record(13, seed % 100).layout
    rects = list(layout.rects)
    # permute a prefix slice to keep the test cheap on big layouts
    head = [rects[perm[i]] for i in range(min(5, len(rects)))]
    shuffled = RectLayout(tuple(head + rects[5:]))
    vocab = build_vocabulary(100)
    assert encode_layout(shuffled, vocab) == encode_layout(layout, vocab)


@pytest.mark.parametrize("resolution", [50, 100, 1000])
def test_layout_round_trip_half_bin(resolution, records_200):
    vocab = build_vocabulary(resolution)
    bound = 0.5 / resolution + 1e-12
    for rec in records_200[:50]:
        seq = encode_layout(rec.layout, vocab)
        back = decode_layout(seq, vocab)
        orig = canonical_rect_order(rec.layout.rects)
        for a, b in zip(orig, back.rects):
            assert a.label == b.label
            for va, vb in zip((a.x, a.y, a.w, a.h), (b.x, b.y, b.w, b.h)):
                assert abs(va - vb) <= bound


def test_decode_layout_empty(vocab):
    assert decode_layout((), vocab).rects == ()


def test_decode_layout_malformed(vocab):
    with pytest.raises(MalformedSequence):
        decode_layout((vocab.label_id("Wall"),), vocab)  # not a multiple of 5
    bad = (vocab.label_id("Wall"), vocab.sep_id, vocab.bin_id(1), vocab.bin_id(1),
           vocab.bin_id(1))
    with pytest.raises(MalformedSequence):
        decode_layout(bad, vocab)


def test_too_many_rects(vocab):
    layout = generator.make_record(4, 7).layout
    with pytest.raises(TooManyRects):
        encode_layout(layout, vocab, max_tokens=len(layout.rects) * 5 - 1)


def test_encode_smallest_tree(vocab):
    seq = encode_tree(Node("P15"), vocab)
    assert [vocab.tokens[t] for t in seq.tokens] == ["<bos>", "P15", "<sep>", "<eos>"]
    assert seq.local_pos == (0, 0, 1, 0)


def test_encode_tree_breadth_first_group_order(vocab):
    door = Node("P12", (), (0.8, 0.2), (Node("P17"), Node("P15")))
    shop = Node("P11", (), (1, 1, 1), (Node("P15"), Node("P19"), Node("P15")))
    ground = Node("P6", (2, "ShopCell", "DoorCell"), (1.0, 1.0), (shop, door))
    upper = Node("P3", (1,), (1.0,), (Node("P4", (1,), (1.0,), (Node("P10"),)),))
    tree = Node("P1", (), (0.3, 0.7), (ground, upper))
    seq = encode_tree(tree, vocab)
    names = [vocab.tokens[t] for t in seq.tokens]
    prods = [n for n in names if n.startswith("P")]
    # Root, then its children left-to-right, then grandchildren, etc.
    assert prods == ["P1", "P6", "P3", "P11", "P12", "P4", "P15", "P19", "P15",
                     "P17", "P15", "P10"]
    k6 = names.index("P6")
    assert names[k6 + 1:k6 + 4] == ["I:2", "K:ShopCell", "K:DoorCell"]


def test_local_positions_reset_per_group(vocab):
    rec = generator.make_record(3, 11)
    seq = encode_tree(rec.tree, vocab)
    for i, tok in enumerate(seq.tokens):
        if vocab.tokens[tok].startswith("P"):
            assert seq.local_pos[i] == 0
    assert seq.global_pos == tuple(range(len(seq)))


@given(st.integers(0, 5000))
def test_tree_round_trip(seed):
    vocab = build_vocabulary(100)
    rec = generator.make_record(55, seed % 500)
    back = decode_tree(encode_tree(rec.tree, vocab), vocab)
    assert default_sizing(back) == default_sizing(rec.tree)


def test_decode_tree_dangling_children(vocab):
    # P12 announces two children, but the sequence ends after one.
    toks = [vocab.bos_id, vocab.prod_id("P12"), vocab.sep_id,
            vocab.prod_id("P17"), vocab.sep_id, vocab.eos_id]
    with pytest.raises(MalformedSequence, match="dangling"):
        decode_tree(tuple(toks), vocab)


def test_decode_tree_early_end(vocab):
    toks = [vocab.bos_id, vocab.prod_id("P12"), vocab.sep_id]
    with pytest.raises(MalformedSequence, match="early end"):
        decode_tree(tuple(toks), vocab)


def test_decode_tree_trailing_tokens(vocab):
    toks = [vocab.bos_id, vocab.prod_id("P15"), vocab.sep_id, vocab.eos_id,
            vocab.prod_id("P15")]
    with pytest.raises(MalformedSequence, match="trailing"):
        decode_tree(tuple(toks), vocab)


def test_decode_tree_bad_argument(vocab):
    toks = [vocab.bos_id, vocab.prod_id("P4"), vocab.kind_id("Tile"), vocab.sep_id,
            vocab.eos_id]
    with pytest.raises(MalformedSequence, match="count token"):
        decode_tree(tuple(toks), vocab)


def test_decode_tree_wrong_child_symbol(vocab):
    toks = [vocab.bos_id, vocab.prod_id("P12"), vocab.sep_id,
            vocab.prod_id("P15"), vocab.sep_id, vocab.prod_id("P15"), vocab.sep_id,
            vocab.eos_id]
    with pytest.raises(MalformedSequence, match="expected Door"):
        decode_tree(tuple(toks), vocab)


def test_layout_order_ablation_variants(vocab):
    layout = generator.make_record(4, 3).layout
    canonical = encode_layout(layout, vocab)
    shuffled = encode_layout(layout, vocab, order="random", seed=1)
    by_label = encode_layout(layout, vocab, order="label")
    assert sorted(shuffled.tokens) == sorted(canonical.tokens)
    assert shuffled.tokens != canonical.tokens
    labels = [vocab.tokens[t] for t in by_label.tokens[::5]]
    assert labels == sorted(labels)
