"""Split grammar for facade layouts.

A facade is derived from the axiom symbol by productions that either split a
region along one axis (SplitX/SplitY), repeat a child symbol n times along an
axis (RepeatX/RepeatY), or assign a terminal label to the region (Assign).
Executing a derivation tree over the unit square yields a flat list of
labeled, axis-aligned rectangles that tile the square exactly.

Continuous split proportions are stored on each node as unnormalized positive
weights ("sizing"); discrete choices (repeat counts, per-child symbol picks)
are "structural" arguments. Normalizing weights inside ``execute`` keeps
every tree executable regardless of sizing scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

TERMINALS = ("Wall", "Window", "Door", "Balcony", "Shop")
TERMINAL_INDEX = {t: i for i, t in enumerate(TERMINALS)}

AXIOM = "Facade"

SPLIT_X = "SplitX"
SPLIT_Y = "SplitY"
REPEAT_X = "RepeatX"
REPEAT_Y = "RepeatY"
ASSIGN = "Assign"


class InvalidTree(Exception):
    """Tree uses an unknown production or violates an arity/symbol rule."""


class NonPositiveSizing(Exception):
    """A sizing weight is zero or negative."""


@dataclass(frozen=True)
class ProductionSpec:
    """One production rule.

    Exactly one of the child descriptions applies:
      * ``terminal`` set         -> Assign, no children
      * ``children`` non-empty   -> fixed ordered child symbols
      * ``child_symbol`` set     -> repeat: count copies of one symbol
      * ``child_options`` set    -> split with per-child symbol choice

    Structural arguments are ``()`` for fixed/assign productions, ``(count,)``
    for repeats, and ``(count, kind_1, ..., kind_count)`` for choice splits.
    Sizing arity equals the child count (0 for Assign).
    """

    id: str
    lhs: str
    kind: str
    terminal: str | None = None
    children: tuple[str, ...] = ()
    child_symbol: str | None = None
    count_range: tuple[int, int] | None = None
    child_options: tuple[str, ...] = ()

    @property
    def has_count(self) -> bool:
        return self.count_range is not None

    @property
    def horizontal(self) -> bool:
        return self.kind in (SPLIT_X, REPEAT_X)

    def structural_arity(self, structural: tuple) -> int:
        if not self.has_count:
            return 0
        if self.child_options:
            if not structural:
                raise InvalidTree(f"{self.id}: missing count argument")
            return 1 + int(structural[0])
        return 1

    def check_structural(self, structural: tuple) -> None:
        if not self.has_count:
            if structural:
                raise InvalidTree(f"{self.id}: takes no structural arguments")
            return
        if not structural or not isinstance(structural[0], int):
            raise InvalidTree(f"{self.id}: first structural argument must be an int count")
        lo, hi = self.count_range
        n = structural[0]
        if not lo <= n <= hi:
            raise InvalidTree(f"{self.id}: count {n} outside [{lo}, {hi}]")
        if self.child_options:
            if len(structural) != 1 + n:
                raise InvalidTree(
                    f"{self.id}: expected {n} child kinds, got {len(structural) - 1}"
                )
            for k in structural[1:]:
                if k not in self.child_options:
                    raise InvalidTree(f"{self.id}: unknown child kind {k!r}")
        elif len(structural) != 1:
            raise InvalidTree(f"{self.id}: expected a single count argument")

    def child_symbols(self, structural: tuple) -> tuple[str, ...]:
        self.check_structural(structural)
        if self.terminal is not None:
            return ()
        if self.children:
            return self.children
        if self.child_options:
            return tuple(structural[1:])
        return (self.child_symbol,) * structural[0]

    def sizing_arity(self, structural: tuple) -> int:
        if self.terminal is not None:
            return 0
        return len(self.child_symbols(structural))


PRODUCTIONS = (
    ProductionSpec("P1", "Facade", SPLIT_Y, children=("GroundFloor", "UpperBody")),
    ProductionSpec("P2", "Facade", SPLIT_Y, children=("GroundFloor", "UpperBody", "Attic")),
    ProductionSpec("P3", "UpperBody", REPEAT_Y, child_symbol="Floor", count_range=(1, 6)),
    ProductionSpec("P4", "Floor", REPEAT_X, child_symbol="Tile", count_range=(1, 8)),
    ProductionSpec("P5", "Floor", SPLIT_X, count_range=(2, 8), child_options=("Tile", "WallCell")),
    ProductionSpec(
        "P6", "GroundFloor", SPLIT_X, count_range=(2, 8),
        child_options=("ShopCell", "DoorCell", "WallCell"),
    ),
    ProductionSpec("P7", "Tile", SPLIT_X, children=("Wall", "Cell", "Wall")),
    ProductionSpec("P8", "Cell", SPLIT_Y, children=("Wall", "Window", "Wall")),
    ProductionSpec("P9", "Cell", SPLIT_Y, children=("Balcony", "Window", "Wall")),
    ProductionSpec("P10", "Tile", ASSIGN, terminal="Wall"),
    ProductionSpec("P11", "ShopCell", SPLIT_Y, children=("Wall", "Shop", "Wall")),
    ProductionSpec("P12", "DoorCell", SPLIT_Y, children=("Door", "Wall")),
    ProductionSpec("P13", "Attic", REPEAT_X, child_symbol="Cell", count_range=(1, 8)),
    ProductionSpec("P14", "WallCell", ASSIGN, terminal="Wall"),
    ProductionSpec("P15", "Wall", ASSIGN, terminal="Wall"),
    ProductionSpec("P16", "Window", ASSIGN, terminal="Window"),
    ProductionSpec("P17", "Door", ASSIGN, terminal="Door"),
    ProductionSpec("P18", "Balcony", ASSIGN, terminal="Balcony"),
    ProductionSpec("P19", "Shop", ASSIGN, terminal="Shop"),
)

PROD_BY_ID = {p.id: p for p in PRODUCTIONS}

PRODS_BY_LHS: dict[str, tuple[ProductionSpec, ...]] = {}
for _p in PRODUCTIONS:
    PRODS_BY_LHS[_p.lhs] = PRODS_BY_LHS.get(_p.lhs, ()) + (_p,)

# Assign production for each terminal symbol, used when a split lists a
# terminal among its children.
ASSIGN_PROD = {p.terminal: p.id for p in PRODUCTIONS if p.kind == ASSIGN and p.lhs == p.terminal}

NONTERMINALS = tuple(s for s in PRODS_BY_LHS if s not in TERMINALS)


@dataclass(frozen=True)
class Node:
    """A production application: the derivation tree is its root node."""

    prod: str
    structural: tuple = ()
    sizing: tuple = ()
    children: tuple = ()


DerivationTree = Node


@dataclass(frozen=True)
class Rect:
    label: str
    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class RectLayout:
    rects: tuple[Rect, ...]

    def __len__(self) -> int:
        return len(self.rects)


@dataclass(frozen=True)
class Violation:
    path: tuple[int, ...]
    message: str


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def canonical_rect_order(rects) -> list[Rect]:
    """Total order on rects: bottom-left corner Y, then X, then label, w, h."""
    return sorted(rects, key=lambda r: (r.y, r.x, TERMINAL_INDEX[r.label], r.w, r.h))


def _edges(origin: float, extent: float, weights: tuple, prod: str) -> list[float]:
    # Children share edges exactly: edge_i = origin + extent * (cum_i / total),
    # so adjacent rects cannot overlap and widths telescope to the extent.
    total = 0.0
    cum = [0.0]
    for w in weights:
        if not w > 0:
            raise NonPositiveSizing(f"{prod}: sizing weight {w!r} is not positive")
        total += w
        cum.append(total)
    return [origin + extent * (c / total) for c in cum]


def _exec(node: Node, x: float, y: float, w: float, h: float, out: list) -> None:
    spec = PROD_BY_ID.get(node.prod)
    if spec is None:
        raise InvalidTree(f"unknown production {node.prod!r}")
    syms = spec.child_symbols(node.structural)
    if len(node.children) != len(syms):
        raise InvalidTree(f"{spec.id}: expected {len(syms)} children, got {len(node.children)}")
    if spec.terminal is not None:
        out.append(Rect(spec.terminal, x, y, w, h))
        return
    if len(node.sizing) != len(syms):
        raise InvalidTree(
            f"{spec.id}: expected {len(syms)} sizing weights, got {len(node.sizing)}"
        )
    for child, sym in zip(node.children, syms):
        cspec = PROD_BY_ID.get(child.prod)
        if cspec is None:
            raise InvalidTree(f"unknown production {child.prod!r}")
        if cspec.lhs != sym:
            raise InvalidTree(f"{spec.id}: child {cspec.id} derives {cspec.lhs}, expected {sym}")
    if spec.horizontal:
        e = _edges(x, w, node.sizing, spec.id)
        for i, child in enumerate(node.children):
            _exec(child, e[i], y, e[i + 1] - e[i], h, out)
    else:
        e = _edges(y, h, node.sizing, spec.id)
        for i, child in enumerate(node.children):
            _exec(child, x, e[i], w, e[i + 1] - e[i], out)


def execute(tree: Node, region: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)) -> RectLayout:
    """Expand a derivation tree over ``region`` into its leaf rectangles."""
    x, y, w, h = region
    if not (w > 0 and h > 0):
        raise ValueError("region must have positive extent")
    out: list[Rect] = []
    _exec(tree, x, y, w, h, out)
    return RectLayout(tuple(out))


def _validate(node: Node, path: tuple[int, ...], out: list, structural_only: bool) -> None:
    spec = PROD_BY_ID.get(node.prod)
    if spec is None:
        out.append(Violation(path, f"unknown production {node.prod!r}"))
        return
    try:
        syms = spec.child_symbols(node.structural)
    except InvalidTree as e:
        out.append(Violation(path, str(e)))
        return
    if len(node.children) != len(syms):
        out.append(Violation(
            path, f"{spec.id}: expected {len(syms)} children, got {len(node.children)}"))
        return
    if spec.terminal is None and not node.children:
        out.append(Violation(path, f"{spec.id}: leaf is not an Assign production"))
    if not structural_only:
        arity = spec.sizing_arity(node.structural)
        if len(node.sizing) != arity:
            out.append(Violation(
                path, f"{spec.id}: expected {arity} sizing weights, got {len(node.sizing)}"))
        for wgt in node.sizing:
            if not (isinstance(wgt, (int, float)) and wgt > 0):
                out.append(Violation(path, f"{spec.id}: sizing weight {wgt!r} is not positive"))
                break
    for i, (child, sym) in enumerate(zip(node.children, syms)):
        cspec = PROD_BY_ID.get(child.prod)
        if cspec is not None and cspec.lhs != sym:
            out.append(Violation(
                path + (i,), f"child {cspec.id} derives {cspec.lhs}, expected {sym}"))
        _validate(child, path + (i,), out, structural_only)


def validate_tree(tree: Node, structural_only: bool = False, axiom: str | None = None) -> ValidityReport:
    """Collect every grammar violation in the tree; empty report means executable.

    With the default arguments the report is empty exactly when ``execute``
    succeeds. Pass ``axiom="Facade"`` to additionally require the tree to be a
    derivation of the grammar's start symbol.
    """
    out: list[Violation] = []
    if axiom is not None:
        spec = PROD_BY_ID.get(tree.prod)
        if spec is not None and spec.lhs != axiom:
            out.append(Violation((), f"root derives {spec.lhs}, expected axiom {axiom}"))
    _validate(tree, (), out, structural_only)
    return ValidityReport(tuple(out))


def default_sizing(tree: Node) -> Node:
    """Reset every sizing weight to 1.0 (uniform splits); structure unchanged."""
    spec = PROD_BY_ID.get(tree.prod)
    if spec is None:
        raise InvalidTree(f"unknown production {tree.prod!r}")
    syms = spec.child_symbols(tree.structural)
    if len(tree.children) != len(syms):
        raise InvalidTree(f"{spec.id}: expected {len(syms)} children, got {len(tree.children)}")
    return Node(
        prod=tree.prod,
        structural=tree.structural,
        sizing=(1.0,) * spec.sizing_arity(tree.structural),
        children=tuple(default_sizing(c) for c in tree.children),
    )


def iter_bfs(tree: Node):
    """Yield nodes in breadth-first order starting at the root."""
    queue = [tree]
    i = 0
    while i < len(queue):
        node = queue[i]
        i += 1
        yield node
        queue.extend(node.children)


def tree_size(tree: Node) -> int:
    return sum(1 for _ in iter_bfs(tree))


# ---------------------------------------------------------------------------
# JSON wire formats. Floats go through Python's repr (shortest round-trip
# form), so coordinates and sizing survive serialization bit-exactly.

class SchemaError(ValueError):
    """Raised with the JSON path of the offending element."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _node_to_json(node: Node) -> dict:
    return {
        "prod": node.prod,
        "structural": list(node.structural),
        "sizing": list(node.sizing),
        "children": [_node_to_json(c) for c in node.children],
    }


def tree_to_json(tree: Node) -> dict:
    return {"root": _node_to_json(tree)}


def _node_from_json(obj, path: str) -> Node:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    prod = obj.get("prod")
    if not isinstance(prod, str):
        raise SchemaError(path + ".prod", "expected a production id string")
    structural = obj.get("structural", [])
    if not isinstance(structural, list):
        raise SchemaError(path + ".structural", "expected a list")
    for i, a in enumerate(structural):
        if not isinstance(a, (int, str)) or isinstance(a, bool):
            raise SchemaError(f"{path}.structural[{i}]", "expected an int or kind string")
    sizing = obj.get("sizing", [])
    if not isinstance(sizing, list):
        raise SchemaError(path + ".sizing", "expected a list")
    for i, s in enumerate(sizing):
        if not isinstance(s, (int, float)) or isinstance(s, bool):
            raise SchemaError(f"{path}.sizing[{i}]", "expected a number")
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise SchemaError(path + ".children", "expected a list")
    return Node(
        prod=prod,
        structural=tuple(structural),
        sizing=tuple(float(s) for s in sizing),
        children=tuple(
            _node_from_json(c, f"{path}.children[{i}]") for i, c in enumerate(children)
        ),
    )


def tree_from_json(obj) -> Node:
    if not isinstance(obj, dict) or "root" not in obj:
        raise SchemaError("root", "expected an object with a 'root' key")
    return _node_from_json(obj["root"], "root")


def layout_to_json(layout: RectLayout) -> dict:
    return {
        "rects": [
            {"label": r.label, "x": r.x, "y": r.y, "w": r.w, "h": r.h}
            for r in layout.rects
        ]
    }


def layout_from_json(obj) -> RectLayout:
    if not isinstance(obj, dict) or not isinstance(obj.get("rects"), list):
        raise SchemaError("rects", "expected an object with a 'rects' list")
    rects = []
    for i, r in enumerate(obj["rects"]):
        path = f"rects[{i}]"
        if not isinstance(r, dict):
            raise SchemaError(path, "expected an object")
        label = r.get("label")
        if label not in TERMINAL_INDEX:
            raise SchemaError(path + ".label", f"unknown terminal label {label!r}")
        vals = []
        for key in ("x", "y", "w", "h"):
            v = r.get(key)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise SchemaError(f"{path}.{key}", "expected a number")
            vals.append(float(v))
        x, y, w, h = vals
        if x < -1e-9 or y < -1e-9 or w <= 0 or h <= 0 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
            raise SchemaError(path, "rect outside the unit square or empty")
        rects.append(Rect(label, x, y, w, h))
    return RectLayout(tuple(rects))


def production_table() -> list[dict]:
    """Machine-readable grammar description (served at GET /grammar)."""
    table = []
    for p in PRODUCTIONS:
        table.append({
            "id": p.id,
            "lhs": p.lhs,
            "kind": p.kind,
            "terminal": p.terminal,
            "children": list(p.children),
            "child_symbol": p.child_symbol,
            "count_range": list(p.count_range) if p.count_range else None,
            "child_options": list(p.child_options),
            "sizing": "per-child" if p.terminal is None else "none",
        })
    return table


def grammar_hash() -> str:
    """Stable digest of the production table; stamped into datasets/checkpoints."""
    blob = json.dumps(production_table(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
