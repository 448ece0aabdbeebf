"""Stochastic facade generator: the data oracle the model learns to invert.

A style record bounds the architectural choices (floor/tile counts, balcony
and shop frequency, margins, symmetry); two heuristic layers then derive a
coherent facade: production choice is a per-symbol categorical whose weights
come from the style, and argument choice samples counts/kinds/sizing inside
the style ranges while respecting grammar domains and the token budget.

Coherence rules enforced by construction: exactly one door on the ground
floor, shared window margins per floor, identical floor structure and sizing
when column symmetry is set, and a total tile budget so every facade encodes
inside the model's input/output sequence limits.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from . import raster
from .grammar import (
    ASSIGN_PROD,
    Node,
    RectLayout,
    Rect,
    execute,
    grammar_hash,
    layout_from_json,
    layout_to_json,
    tree_from_json,
    tree_to_json,
)
from .tokenizer import DEFAULT_MAX_INPUT_TOKENS

SCHEMA_VERSION = 1
STYLE_POLICY = "default"

# Global style bounds; sampled style ranges stay inside these.
FLOOR_BOUNDS = (1, 6)
TILE_BOUNDS = (1, 8)
GROUND_HEIGHT_BOUNDS = (0.2, 0.45)
WINDOW_MARGIN_BOUNDS = (0.06, 0.3)

# Upper-body tiles across all floors; keeps the 5-rects-per-tile worst case
# plus ground floor and attic inside DEFAULT_MAX_INPUT_TOKENS // 5 rects.
TILE_BUDGET = (DEFAULT_MAX_INPUT_TOKENS // 5 - 48) // 5

# Policy constants not exposed per style.
P5_FLOOR_PROB = 0.3
WALL_TILE_PROB = 0.12
P5_WALL_KIND_PROB = 0.18


class SinkFailure(Exception):
    """The record consumer raised while storing a record."""


class UnreachableNoiseLevel(Exception):
    """Noise search could not hit the target pixel-difference band."""

    def __init__(self, message: str, best_layout: RectLayout, measured: float):
        super().__init__(message)
        self.best_layout = best_layout
        self.measured = measured


@dataclass(frozen=True)
class StyleParams:
    floor_count_range: tuple[int, int]
    tiles_per_floor_range: tuple[int, int]
    ground_floor_height_range: tuple[float, float]
    balcony_probability: float
    attic_probability: float
    shop_probability: float
    window_margin_range: tuple[float, float]
    column_symmetry: bool

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "StyleParams":
        return StyleParams(
            floor_count_range=tuple(obj["floor_count_range"]),
            tiles_per_floor_range=tuple(obj["tiles_per_floor_range"]),
            ground_floor_height_range=tuple(obj["ground_floor_height_range"]),
            balcony_probability=float(obj["balcony_probability"]),
            attic_probability=float(obj["attic_probability"]),
            shop_probability=float(obj["shop_probability"]),
            window_margin_range=tuple(obj["window_margin_range"]),
            column_symmetry=bool(obj["column_symmetry"]),
        )


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    tree: Node
    layout: RectLayout
    style: StyleParams
    seed: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed,
            "style": self.style.to_json(),
            "tree": tree_to_json(self.tree),
            "layout": layout_to_json(self.layout),
        }

    @staticmethod
    def from_json(obj: dict) -> "DatasetRecord":
        return DatasetRecord(
            id=int(obj["id"]),
            seed=int(obj["seed"]),
            style=StyleParams.from_json(obj["style"]),
            tree=tree_from_json(obj["tree"]),
            layout=layout_from_json(obj["layout"]),
        )


def sample_style(seed: int) -> StyleParams:
    """Draw one style record; deterministic in the seed."""
    rng = random.Random(seed)
    f_lo = rng.randint(1, 4)
    f_hi = rng.randint(f_lo, min(f_lo + 2, FLOOR_BOUNDS[1]))
    t_lo = rng.randint(1, 4)
    t_hi = rng.randint(t_lo, min(t_lo + 2, TILE_BOUNDS[1]))
    g_lo = rng.uniform(GROUND_HEIGHT_BOUNDS[0], 0.35)
    g_hi = rng.uniform(g_lo, GROUND_HEIGHT_BOUNDS[1])
    m_lo = rng.uniform(WINDOW_MARGIN_BOUNDS[0], 0.18)
    m_hi = rng.uniform(m_lo, WINDOW_MARGIN_BOUNDS[1])
    return StyleParams(
        floor_count_range=(f_lo, f_hi),
        tiles_per_floor_range=(t_lo, t_hi),
        ground_floor_height_range=(g_lo, g_hi),
        balcony_probability=rng.random(),
        attic_probability=rng.uniform(0.05, 0.6),
        shop_probability=rng.random(),
        window_margin_range=(m_lo, m_hi),
        column_symmetry=rng.random() < 0.7,
    )


def _assign(symbol: str) -> Node:
    return Node(ASSIGN_PROD[symbol])


def _cell(rng: random.Random, balcony_p: float, weights8: tuple, weights9: tuple) -> Node:
    if rng.random() < balcony_p:
        return Node("P9", (), weights9,
                    (_assign("Balcony"), _assign("Window"), _assign("Wall")))
    return Node("P8", (), weights8,
                (_assign("Wall"), _assign("Window"), _assign("Wall")))


def _tile(rng: random.Random, style: StyleParams, margin: float,
          weights8: tuple, weights9: tuple) -> Node:
    if rng.random() < WALL_TILE_PROB:
        return Node("P10")
    cell = _cell(rng, style.balcony_probability, weights8, weights9)
    return Node("P7", (), (margin, 1.0 - 2.0 * margin, margin),
                (_assign("Wall"), cell, _assign("Wall")))


def _floor(rng: random.Random, style: StyleParams, m: int) -> Node:
    margin = rng.uniform(*style.window_margin_range)
    wb = rng.uniform(0.15, 0.3)
    wt = rng.uniform(0.1, 0.25)
    weights8 = (wb, 1.0 - wb - wt, wt)
    bb = rng.uniform(0.18, 0.3)
    bt = rng.uniform(0.08, 0.2)
    weights9 = (bb, 1.0 - bb - bt, bt)
    if m >= 2 and rng.random() < P5_FLOOR_PROB:
        kinds = tuple(
            "WallCell" if rng.random() < P5_WALL_KIND_PROB else "Tile" for _ in range(m)
        )
        children = tuple(
            Node("P14") if k == "WallCell" else _tile(rng, style, margin, weights8, weights9)
            for k in kinds
        )
        sizing = tuple(rng.uniform(0.85, 1.2) for _ in range(m))
        return Node("P5", (m,) + kinds, sizing, children)
    children = tuple(_tile(rng, style, margin, weights8, weights9) for _ in range(m))
    sizing = tuple(rng.uniform(0.85, 1.2) for _ in range(m))
    return Node("P4", (m,), sizing, children)


def _ground(rng: random.Random, style: StyleParams, m_ref: int) -> Node:
    g = min(max(m_ref + rng.randint(-1, 1), 2), 8)
    door_pos = rng.randrange(g)
    kinds = []
    children = []
    sizing = []
    for i in range(g):
        base = rng.uniform(0.85, 1.2)
        if i == door_pos:
            kinds.append("DoorCell")
            d = rng.uniform(0.75, 0.9)
            children.append(Node("P12", (), (d, 1.0 - d), (_assign("Door"), _assign("Wall"))))
            sizing.append(base * 0.7)
        elif rng.random() < style.shop_probability:
            kinds.append("ShopCell")
            sb = rng.uniform(0.05, 0.15)
            st = rng.uniform(0.08, 0.2)
            children.append(Node(
                "P11", (), (sb, 1.0 - sb - st, st),
                (_assign("Wall"), _assign("Shop"), _assign("Wall"))))
            sizing.append(base)
        else:
            kinds.append("WallCell")
            children.append(Node("P14"))
            sizing.append(base)
    return Node("P6", (g,) + tuple(kinds), tuple(sizing), tuple(children))


def _attic(rng: random.Random, style: StyleParams, m_ref: int) -> Node:
    a = min(max(m_ref + rng.randint(-1, 1), 1), 8)
    wb = rng.uniform(0.2, 0.35)
    wt = rng.uniform(0.1, 0.25)
    weights8 = (wb, 1.0 - wb - wt, wt)
    weights9 = (rng.uniform(0.18, 0.3), 0.6, rng.uniform(0.08, 0.2))
    cells = tuple(
        _cell(rng, 0.3 * style.balcony_probability, weights8, weights9) for _ in range(a)
    )
    sizing = tuple(rng.uniform(0.85, 1.2) for _ in range(a))
    return Node("P13", (a,), sizing, cells)


def _build_facade(style: StyleParams, rng: random.Random) -> Node:
    n = rng.randint(*style.floor_count_range)
    cap = max(1, TILE_BUDGET // n)

    def pick_m(hi_cap: int) -> int:
        lo, hi = style.tiles_per_floor_range
        hi = min(hi, hi_cap)
        lo = min(lo, hi)
        return rng.randint(lo, hi)

    if style.column_symmetry:
        m = pick_m(cap)
        shared = _floor(rng, style, m)
        floors = (shared,) * n
        m_ref = m
    else:
        budget = TILE_BUDGET
        floors_l = []
        ms = []
        for i in range(n):
            hi_cap = max(1, budget - (n - 1 - i))
            m_i = pick_m(hi_cap)
            budget -= m_i
            ms.append(m_i)
            floors_l.append(_floor(rng, style, m_i))
        floors = tuple(floors_l)
        m_ref = max(ms)
    floor_weights = tuple(rng.uniform(0.9, 1.1) for _ in range(n))
    upper = Node("P3", (n,), floor_weights, floors)

    ground = _ground(rng, style, m_ref)
    gh = rng.uniform(*style.ground_floor_height_range)
    if rng.random() < style.attic_probability:
        attic = _attic(rng, style, m_ref)
        ah = rng.uniform(0.04, 0.1)
        return Node("P2", (), (gh, 1.0 - gh - ah, ah), (ground, upper, attic))
    return Node("P1", (), (gh, 1.0 - gh), (ground, upper))


def generate_facade(style: StyleParams, seed: int, record_id: int = 0) -> DatasetRecord:
    """Derive one coherent facade; deterministic in (style, seed)."""
    rng = random.Random(seed)
    tree = _build_facade(style, rng)
    return DatasetRecord(id=record_id, tree=tree, layout=execute(tree), style=style, seed=seed)


def record_seed(master_seed: int, index: int, tag: str = "tree") -> int:
    digest = hashlib.sha256(f"{master_seed}:{index}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def make_record(master_seed: int, index: int) -> DatasetRecord:
    """The per-index record function; dataset output is independent of how
    indices are distributed over workers."""
    style = sample_style(record_seed(master_seed, index, "style"))
    return generate_facade(style, record_seed(master_seed, index, "tree"), record_id=index)


@dataclass
class DatasetStats:
    count: int
    production_counts: dict[str, int]
    rect_count_hist: dict[int, int]
    node_count_hist: dict[int, int]

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "production_counts": dict(sorted(self.production_counts.items())),
            "rect_count_hist": {str(k): v for k, v in sorted(self.rect_count_hist.items())},
            "node_count_hist": {str(k): v for k, v in sorted(self.node_count_hist.items())},
        }


def generate_dataset(
    count: int,
    master_seed: int,
    sink: Callable[[DatasetRecord], None],
) -> DatasetStats:
    """Emit ``count`` records through ``sink`` and return corpus statistics."""
    if count < 1:
        raise ValueError("count must be >= 1")
    prod_counts: dict[str, int] = {}
    rect_hist: dict[int, int] = {}
    node_hist: dict[int, int] = {}
    for i in range(count):
        rec = make_record(master_seed, i)
        try:
            sink(rec)
        except Exception as e:
            raise SinkFailure(f"sink failed on record {i}: {e}") from e
        nodes = 0
        stack = [rec.tree]
        while stack:
            node = stack.pop()
            nodes += 1
            prod_counts[node.prod] = prod_counts.get(node.prod, 0) + 1
            stack.extend(node.children)
        node_hist[nodes] = node_hist.get(nodes, 0) + 1
        nrects = len(rec.layout.rects)
        rect_hist[nrects] = rect_hist.get(nrects, 0) + 1
    return DatasetStats(count, prod_counts, rect_hist, node_hist)


def dataset_header() -> dict:
    return {"schema_version": SCHEMA_VERSION, "grammar_hash": grammar_hash(),
            "style_policy": STYLE_POLICY}


def write_dataset_jsonl(path, count: int, master_seed: int) -> DatasetStats:
    with open(path, "w") as f:
        f.write(json.dumps(dataset_header()) + "\n")

        def sink(rec: DatasetRecord) -> None:
            f.write(json.dumps(rec.to_json()) + "\n")

        return generate_dataset(count, master_seed, sink)


def read_dataset_jsonl(path) -> Iterator[DatasetRecord]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {header.get('schema_version')}")
        if header.get("grammar_hash") != grammar_hash():
            raise ValueError("dataset was generated with a different grammar")
        for line in f:
            if line.strip():
                yield DatasetRecord.from_json(json.loads(line))


# ---------------------------------------------------------------------------
# Controlled noise injection for robustness studies.

_MIN_EXTENT = 2e-3


def _jitter(layout: RectLayout, units: np.ndarray, sigma: float) -> RectLayout:
    rects = []
    for r, u in zip(layout.rects, units):
        x0 = r.x + sigma * u[0]
        y0 = r.y + sigma * u[1]
        x1 = r.x + r.w + sigma * u[2]
        y1 = r.y + r.h + sigma * u[3]
        x0, x1 = min(x0, x1), max(x0, x1)
        y0, y1 = min(y0, y1), max(y0, y1)
        x0 = min(max(x0, 0.0), 1.0 - _MIN_EXTENT)
        y0 = min(max(y0, 0.0), 1.0 - _MIN_EXTENT)
        x1 = min(max(x1, x0 + _MIN_EXTENT), 1.0)
        y1 = min(max(y1, y0 + _MIN_EXTENT), 1.0)
        rects.append(Rect(r.label, x0, y0, x1 - x0, y1 - y0))
    return RectLayout(tuple(rects))


def measure_noise(original: RectLayout, noisy: RectLayout, eval_res: int) -> float:
    """Fraction of pixels whose label changed between the two layouts."""
    return raster.pixel_diff(
        raster.label_map(original, eval_res), raster.label_map(noisy, eval_res)
    )


def inject_noise(
    layout: RectLayout,
    target_noise: float,
    seed: int,
    eval_res: int = 256,
    tolerance: float = 0.01,
) -> RectLayout:
    """Jitter rect corners so the pixel difference hits ``target_noise``.

    One fixed unit Gaussian perturbation per corner is scaled by a magnitude
    found by geometric ramp-up plus bisection against the measured pixel
    difference at ``eval_res``; raises ``UnreachableNoiseLevel`` (carrying the
    closest layout found) if the band ``target +- tolerance`` cannot be hit.
    """
    if not 0.0 <= target_noise <= 0.3:
        raise ValueError("target_noise must be in [0, 0.3]")
    if target_noise == 0.0:
        return layout
    rng = np.random.default_rng(seed)
    units = rng.standard_normal((len(layout.rects), 4))
    base = raster.label_map(layout, eval_res)

    def measure(sigma: float) -> tuple[float, RectLayout]:
        noisy = _jitter(layout, units, sigma)
        return raster.pixel_diff(base, raster.label_map(noisy, eval_res)), noisy

    best_err = float("inf")
    best: tuple[float, RectLayout] | None = None

    lo, hi = 0.0, 0.002
    for _ in range(16):
        diff, noisy = measure(hi)
        if abs(diff - target_noise) < best_err:
            best_err, best = abs(diff - target_noise), (diff, noisy)
        if diff >= target_noise:
            break
        lo, hi = hi, hi * 2.0
    for _ in range(40):
        if best_err <= 0.25 * tolerance:
            break
        mid = 0.5 * (lo + hi)
        diff, noisy = measure(mid)
        if abs(diff - target_noise) < best_err:
            best_err, best = abs(diff - target_noise), (diff, noisy)
        if diff < target_noise:
            lo = mid
        else:
            hi = mid
    diff, noisy = best
    if abs(diff - target_noise) > tolerance:
        raise UnreachableNoiseLevel(
            f"closest achievable noise {diff:.4f} for target {target_noise:.4f}",
            best_layout=noisy, measured=diff)
    return noisy
