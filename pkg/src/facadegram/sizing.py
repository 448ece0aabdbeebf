"""Differentiable sizing refit.

The structural tree is executed symbolically: every split's proportions come
from a softmax over log-space weights, so each leaf rectangle's coordinates
are differentiable functions of one flat parameter vector. Leaves are drawn
with sigmoid-soft edges (coverage = product of four edge sigmoids), the mean
square error against a hard one-hot raster of the target is back-propagated,
and Adam walks the weights until the loss plateaus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import raster
from .grammar import (
    InvalidTree,
    Node,
    PROD_BY_ID,
    RectLayout,
    TERMINALS,
    TERMINAL_INDEX,
)


class DimensionMismatch(Exception):
    """Target raster dimensions disagree with the configuration."""


class NonFiniteLoss(Exception):
    """Optimization produced a NaN or infinite loss."""


@dataclass(frozen=True)
class OptimizeConfig:
    raster_w: int = 128
    raster_h: int = 128
    tau: float | None = None  # sigmoid temperature; default is half a pixel
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 2000
    tolerance: float = 1e-6
    window: int = 50
    dtype: str = "float64"

    @property
    def effective_tau(self) -> float:
        return self.tau if self.tau is not None else 0.5 / max(self.raster_w, self.raster_h)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class SizingVector:
    """All sizing weights of a tree, flattened in BFS order, in log-space."""

    values: np.ndarray
    slots: tuple  # per BFS node: (offset, count), or None for sizing-free nodes

    def __len__(self) -> int:
        return len(self.values)


class _Plan:
    """Static BFS layout of a tree: who owns which parameter slice, which
    children, and which leaf paints which label."""

    def __init__(self, tree: Node):
        nodes = []
        queue = [tree]
        i = 0
        while i < len(queue):
            nodes.append(queue[i])
            queue.extend(queue[i].children)
            i += 1
        self.nodes = nodes
        self.child_start = []
        self.slots: list[tuple[int, int] | None] = []
        offset = 0
        next_child = 1
        for node in nodes:
            spec = PROD_BY_ID.get(node.prod)
            if spec is None:
                raise InvalidTree(f"unknown production {node.prod!r}")
            syms = spec.child_symbols(node.structural)
            if len(node.children) != len(syms):
                raise InvalidTree(
                    f"{spec.id}: expected {len(syms)} children, got {len(node.children)}")
            self.child_start.append(next_child)
            next_child += len(node.children)
            arity = spec.sizing_arity(node.structural)
            if arity:
                self.slots.append((offset, arity))
                offset += arity
            else:
                self.slots.append(None)
        self.n_params = offset
        self.leaf_labels = [
            TERMINAL_INDEX[PROD_BY_ID[n.prod].terminal]
            for n in nodes if PROD_BY_ID[n.prod].terminal is not None
        ]

    def leaf_coords(self, theta: torch.Tensor):
        """Differentiable (x0, x1, y0, y1) per leaf, each a stacked tensor."""
        dtype = theta.dtype
        zero = torch.zeros(1, dtype=dtype)
        one = torch.ones((), dtype=dtype)
        regions: list[tuple] = [None] * len(self.nodes)
        regions[0] = (torch.zeros((), dtype=dtype), torch.zeros((), dtype=dtype), one, one)
        leaves = []
        for i, node in enumerate(self.nodes):
            spec = PROD_BY_ID[node.prod]
            x, y, w, h = regions[i]
            if spec.terminal is not None:
                leaves.append((x, x + w, y, y + h))
                continue
            off, n = self.slots[i]
            frac = torch.softmax(theta[off:off + n], dim=0)
            cum = torch.cat([zero, torch.cumsum(frac, dim=0)])
            start = self.child_start[i]
            if spec.horizontal:
                edges = x + w * cum
                for j in range(n):
                    regions[start + j] = (edges[j], y, edges[j + 1] - edges[j], h)
            else:
                edges = y + h * cum
                for j in range(n):
                    regions[start + j] = (x, edges[j], w, edges[j + 1] - edges[j])
        x0 = torch.stack([c[0] for c in leaves])
        x1 = torch.stack([c[1] for c in leaves])
        y0 = torch.stack([c[2] for c in leaves])
        y1 = torch.stack([c[3] for c in leaves])
        return x0, x1, y0, y1


def sizing_vector_from_tree(tree: Node) -> SizingVector:
    """Collect the tree's sizing weights (log-space) in BFS slot order."""
    plan = _Plan(tree)
    values = np.zeros(plan.n_params, dtype=np.float64)
    slots = []
    for node, slot in zip(plan.nodes, plan.slots):
        slots.append(slot)
        if slot is None:
            continue
        off, n = slot
        if len(node.sizing) != n:
            raise InvalidTree(f"{node.prod}: expected {n} sizing weights")
        for k, w in enumerate(node.sizing):
            if not w > 0:
                raise InvalidTree(f"{node.prod}: sizing weight {w!r} is not positive")
            values[off + k] = math.log(w)
    return SizingVector(values, tuple(slots))


def apply_sizing(tree: Node, values: np.ndarray) -> Node:
    """Rebuild the tree with sizing = exp(values) read in BFS slot order."""
    plan = _Plan(tree)
    if len(values) != plan.n_params:
        raise ValueError(f"expected {plan.n_params} parameters, got {len(values)}")
    sizings: list[tuple] = []
    for node, slot in zip(plan.nodes, plan.slots):
        if slot is None:
            sizings.append(())
        else:
            off, n = slot
            sizings.append(tuple(float(math.exp(v)) for v in values[off:off + n]))

    def build(i: int) -> Node:
        node = plan.nodes[i]
        start = plan.child_start[i]
        return Node(node.prod, node.structural, sizings[i],
                    tuple(build(start + j) for j in range(len(node.children))))

    return build(0)


def _soft_raster_torch(plan: _Plan, theta: torch.Tensor, cfg: OptimizeConfig) -> torch.Tensor:
    tau = cfg.effective_tau
    dtype = theta.dtype
    w, h = cfg.raster_w, cfg.raster_h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    x0, x1, y0, y1 = plan.leaf_coords(theta)
    fx = torch.sigmoid((xs[None, :] - x0[:, None]) / tau) \
        * torch.sigmoid((x1[:, None] - xs[None, :]) / tau)
    fy = torch.sigmoid((ys[None, :] - y0[:, None]) / tau) \
        * torch.sigmoid((y1[:, None] - ys[None, :]) / tau)
    out = torch.zeros((len(TERMINALS), h, w), dtype=dtype)
    labels = np.asarray(plan.leaf_labels)
    for lbl in range(len(TERMINALS)):
        sel = np.nonzero(labels == lbl)[0]
        if len(sel):
            out[lbl] = torch.einsum("rh,rw->hw", fy[sel], fx[sel])
    return out


def soft_rasterize(tree: Node, sizing: SizingVector | None, cfg: OptimizeConfig) -> np.ndarray:
    """Per-label soft coverage raster, shape (labels, H, W)."""
    plan = _Plan(tree)
    vec = sizing if sizing is not None else sizing_vector_from_tree(tree)
    theta = torch.tensor(vec.values, dtype=cfg.torch_dtype)
    with torch.no_grad():
        return _soft_raster_torch(plan, theta, cfg).numpy()


def _check_target(target: np.ndarray, cfg: OptimizeConfig) -> torch.Tensor:
    expected = (len(TERMINALS), cfg.raster_h, cfg.raster_w)
    if tuple(target.shape) != expected:
        raise DimensionMismatch(f"target shape {target.shape}, expected {expected}")
    return torch.tensor(target, dtype=cfg.torch_dtype)


def loss_value(tree: Node, sizing: SizingVector, target: np.ndarray,
               cfg: OptimizeConfig = OptimizeConfig()) -> float:
    """MSE of the soft raster against the target; forward only."""
    plan = _Plan(tree)
    tgt = _check_target(target, cfg)
    theta = torch.tensor(sizing.values, dtype=cfg.torch_dtype)
    with torch.no_grad():
        render = _soft_raster_torch(plan, theta, cfg)
        return float(torch.mean((render - tgt) ** 2))


def loss_and_grad(tree: Node, sizing: SizingVector, target: np.ndarray,
                  cfg: OptimizeConfig = OptimizeConfig()) -> tuple[float, np.ndarray]:
    """Loss plus its exact reverse-mode gradient w.r.t. the log-space sizing."""
    plan = _Plan(tree)
    tgt = _check_target(target, cfg)
    theta = torch.tensor(sizing.values, dtype=cfg.torch_dtype, requires_grad=True)
    render = _soft_raster_torch(plan, theta, cfg)
    loss = torch.mean((render - tgt) ** 2)
    loss.backward()
    grad = theta.grad.detach().numpy().copy() if theta.grad is not None \
        else np.zeros(len(sizing.values))
    return float(loss.detach()), grad


def optimize_sizing(tree: Node, target_layout: RectLayout,
                    cfg: OptimizeConfig = OptimizeConfig()) -> tuple[Node, list[float]]:
    """Fit the tree's sizing to a target layout from the uniform default.

    Returns the refit tree and the per-iteration loss trace. Stops when the
    relative improvement across ``cfg.window`` iterations drops below
    ``cfg.tolerance``, or at ``cfg.max_iterations``.
    """
    plan = _Plan(tree)
    target = raster.one_hot(target_layout, cfg.raster_w, cfg.raster_h)
    tgt = _check_target(target, cfg)
    theta = torch.zeros(plan.n_params, dtype=cfg.torch_dtype, requires_grad=True)
    opt = torch.optim.Adam([theta], lr=cfg.step_size,
                           betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    trace: list[float] = []
    for it in range(cfg.max_iterations):
        opt.zero_grad()
        render = _soft_raster_torch(plan, theta, cfg)
        loss = torch.mean((render - tgt) ** 2)
        val = float(loss)
        if not math.isfinite(val):
            raise NonFiniteLoss(f"loss became {val} at iteration {it}")
        trace.append(val)
        if it >= cfg.window:
            prev = trace[it - cfg.window]
            if prev - val < cfg.tolerance * max(prev, 1e-12):
                break
        loss.backward()
        opt.step()
    fitted = apply_sizing(tree, theta.detach().numpy())
    return fitted, trace
