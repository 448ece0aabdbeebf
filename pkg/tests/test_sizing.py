import math

import numpy as np
import pytest

from facadegram import generator, raster
from facadegram.evaluation import pixel_classification_error
from facadegram.grammar import Node, default_sizing, execute
from facadegram.sizing import (
    DimensionMismatch,
    NonFiniteLoss,
    OptimizeConfig,
    SizingVector,
    apply_sizing,
    loss_and_grad,
    loss_value,
    optimize_sizing,
    sizing_vector_from_tree,
    soft_rasterize,
)

CFG48 = OptimizeConfig(raster_w=48, raster_h=48)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_deep_interior_coverage_matches_sigmoid_power():
    # A pixel at least 10*tau from every edge has coverage >= sigmoid(10)^4.
    # (That bound is 0.999818..., crossing 0.9999 needs ~12.2*tau.)
    tree = Node("P16")  # full-square window
    cfg = OptimizeConfig(raster_w=32, raster_h=32, tau=0.01)
    out = soft_rasterize(tree, None, cfg)
    win = out[1]
    center = win[16, 16]  # 0.515625: >= 10 tau from each edge
    floor = _sigmoid(10.0) ** 4
    assert floor == pytest.approx(0.9998184, abs=1e-7)
    assert center >= floor


def test_edge_pixel_coverage_half():
    # A 9x9 grid puts the center pixel of row/col 4 exactly on the 0.5 edge
    # of an even two-way split: each side contributes sigmoid(0) = 0.5 there.
    cfg = OptimizeConfig(raster_w=9, raster_h=9, tau=0.004)
    tree_x = Node("P4", (2,), (1.0, 1.0), (Node("P10"), Node("P10")))
    same_label = soft_rasterize(tree_x, None, cfg)
    assert same_label[0][4, 4] == pytest.approx(1.0, abs=0.01)  # halves sum

    tree_y = Node("P12", (), (1.0, 1.0), (Node("P17"), Node("P15")))
    split = soft_rasterize(tree_y, None, cfg)
    assert split[2][4, 4] == pytest.approx(0.5, abs=0.01)  # Door channel
    assert split[0][4, 4] == pytest.approx(0.5, abs=0.01)  # Wall channel


def test_soft_raster_approaches_hard_raster_as_tau_shrinks():
    rec = generator.make_record(70, 0)
    cfg = OptimizeConfig(raster_w=32, raster_h=32, tau=1e-4)
    soft = soft_rasterize(rec.tree, sizing_vector_from_tree(rec.tree), cfg)
    hard = raster.one_hot(rec.layout, 32, 32)
    # agreement off the edges: allow a thin band of disagreement
    assert np.mean(np.abs(soft - hard) > 0.01) < 0.02


def test_self_match_loss_and_grad_zero():
    rec = generator.make_record(70, 1)
    vec = sizing_vector_from_tree(rec.tree)
    target = soft_rasterize(rec.tree, vec, CFG48)
    loss, grad = loss_and_grad(rec.tree, vec, target, CFG48)
    assert loss == 0.0
    assert np.allclose(grad, 0.0)


def test_symmetric_split_gradient_components_equal():
    # Uniform two-way wall split against a symmetric target: the two weights
    # push equally, so their gradient components match.
    tree = Node("P4", (2,), (1.0, 1.0), (Node("P10"), Node("P10")))
    vec = sizing_vector_from_tree(tree)
    target = raster.one_hot(execute(tree), 48, 48)
    _, grad = loss_and_grad(tree, vec, target, CFG48)
    assert grad[0] == pytest.approx(grad[1], abs=1e-12)


def test_gradient_matches_finite_differences():
    cfg = OptimizeConfig(raster_w=40, raster_h=40)
    rng = np.random.default_rng(4)
    for i in range(10):
        rec = generator.make_record(71, i)
        vec = sizing_vector_from_tree(rec.tree)
        vec.values[:] += rng.normal(0, 0.2, len(vec.values))
        target = raster.one_hot(rec.layout, 40, 40)
        _, grad = loss_and_grad(rec.tree, vec, target, cfg)
        h = 1e-5
        for k in rng.choice(len(vec.values), size=min(6, len(vec.values)), replace=False):
            vp = SizingVector(vec.values.copy(), vec.slots)
            vp.values[k] += h
            vm = SizingVector(vec.values.copy(), vec.slots)
            vm.values[k] -= h
            fd = (loss_value(rec.tree, vp, target, cfg)
                  - loss_value(rec.tree, vm, target, cfg)) / (2 * h)
            rel = abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-8)
            assert rel < 1e-4, (i, k, rel)


def test_log_space_shift_invariance():
    # Adding a constant to one node's log-weights leaves the raster unchanged
    # (softmax shift); exact for integer-grid values, tiny rounding otherwise.
    rec = generator.make_record(70, 2)
    vec = sizing_vector_from_tree(rec.tree)
    target = raster.one_hot(rec.layout, 48, 48)
    base = loss_value(rec.tree, vec, target, CFG48)
    slot = next(s for s in vec.slots if s is not None and s[1] >= 2)
    off, n = slot
    shifted = SizingVector(vec.values.copy(), vec.slots)
    shifted.values[off:off + n] += 3.0
    assert loss_value(rec.tree, shifted, target, CFG48) == pytest.approx(base, abs=1e-12)

    exact = SizingVector(np.zeros_like(vec.values), vec.slots)
    exact_shift = SizingVector(np.zeros_like(vec.values), vec.slots)
    exact_shift.values[off:off + n] += 2.0  # 0 and 2 are exact in binary
    a = loss_value(rec.tree, exact, target, CFG48)
    b = loss_value(rec.tree, exact_shift, target, CFG48)
    assert a == b


def test_loss_bounded_for_hard_targets():
    for i in range(5):
        rec = generator.make_record(72, i)
        other = generator.make_record(72, i + 100)
        vec = sizing_vector_from_tree(rec.tree)
        target = raster.one_hot(other.layout, 48, 48)
        loss = loss_value(rec.tree, vec, target, CFG48)
        assert 0.0 <= loss <= 1.0 + 1e-9


def test_dimension_mismatch():
    rec = generator.make_record(70, 3)
    vec = sizing_vector_from_tree(rec.tree)
    target = raster.one_hot(rec.layout, 32, 32)
    with pytest.raises(DimensionMismatch):
        loss_and_grad(rec.tree, vec, target, CFG48)


def test_apply_sizing_round_trip():
    rec = generator.make_record(70, 4)
    vec = sizing_vector_from_tree(rec.tree)
    rebuilt = apply_sizing(rec.tree, vec.values)
    # weights reproduce up to exp(log(w)) rounding; execution must agree
    for a, b in zip(execute(rebuilt).rects, rec.layout.rects):
        assert a.label == b.label
        assert a.x == pytest.approx(b.x, abs=1e-12)
        assert a.w == pytest.approx(b.w, abs=1e-12)


def test_optimize_already_optimal_stops_fast():
    # Target rendered from the default sizing itself: the first loss is tiny
    # and a 2-iteration window stops the loop almost immediately.
    rec = generator.make_record(73, 0)
    tree = default_sizing(rec.tree)
    target_layout = execute(tree)
    cfg = OptimizeConfig(raster_w=64, raster_h=64, window=2, tolerance=1e-4,
                         max_iterations=50)
    fitted, trace = optimize_sizing(tree, target_layout, cfg)
    assert len(trace) <= 5
    assert trace[0] < 0.01
    assert pixel_classification_error(execute(fitted), target_layout, 128) < 0.02


def test_optimize_recovers_perturbed_sizing():
    hits = 0
    for i in range(8):
        rec = generator.make_record(74, i)
        cfg = OptimizeConfig(raster_w=64, raster_h=64, max_iterations=800)
        fitted, trace = optimize_sizing(default_sizing(rec.tree), rec.layout, cfg)
        err = pixel_classification_error(execute(fitted), rec.layout, 128)
        assert trace[-1] <= trace[0]
        if err < 0.02:
            hits += 1
    assert hits >= 7


def test_optimize_trace_mostly_monotone():
    rec = generator.make_record(74, 20)
    cfg = OptimizeConfig(raster_w=48, raster_h=48, max_iterations=300)
    _, trace = optimize_sizing(default_sizing(rec.tree), rec.layout, cfg)
    assert trace[-1] < trace[0]
    increases = sum(1 for a, b in zip(trace, trace[1:]) if b > a + 1e-9)
    assert increases < len(trace) * 0.25
