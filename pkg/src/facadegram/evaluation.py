"""Reconstruction quality metrics.

Tree edit distance uses the ordered-tree keyroot dynamic program with unit
insert/delete/relabel costs; node labels are (production id, structural
args), so a changed repeat count or child-kind pattern counts as one relabel.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .decode import DecodeConfig, infer_procedures
from .generator import DatasetRecord, inject_noise, record_seed
from .grammar import Node, RectLayout


def _node_label(node: Node) -> tuple:
    return (node.prod, node.structural)


class _Annotated:
    """Postorder labels, leftmost-leaf-descendant indices, and keyroots."""

    def __init__(self, root: Node):
        labels: list = []
        lmds: list[int] = []

        def walk(node: Node) -> int:
            first = None
            for child in node.children:
                li = walk(child)
                if first is None:
                    first = li
            idx = len(labels)
            labels.append(_node_label(node))
            lmds.append(first if first is not None else idx)
            return lmds[idx]

        walk(root)
        self.labels = labels
        self.lmds = lmds
        last_for_lmd: dict[int, int] = {}
        for i, l in enumerate(lmds):
            last_for_lmd[l] = i
        self.keyroots = sorted(last_for_lmd.values())


def tree_edit_distance(a: Node, b: Node) -> int:
    """Minimal number of node insertions, deletions and relabels turning the
    ordered tree ``a`` into ``b``."""
    ta, tb = _Annotated(a), _Annotated(b)
    n, m = len(ta.labels), len(tb.labels)
    td = [[0] * m for _ in range(n)]
    al, bl = ta.lmds, tb.lmds
    an, bn = ta.labels, tb.labels

    for i in ta.keyroots:
        for j in tb.keyroots:
            ioff = al[i] - 1
            joff = bl[j] - 1
            p = i - ioff + 1
            q = j - joff + 1
            fd = [[0] * q for _ in range(p)]
            for x in range(1, p):
                fd[x][0] = fd[x - 1][0] + 1
            for y in range(1, q):
                fd[0][y] = fd[0][y - 1] + 1
            for x in range(1, p):
                ai = x + ioff
                for y in range(1, q):
                    bj = y + joff
                    if al[i] == al[ai] and bl[j] == bl[bj]:
                        cost = 0 if an[ai] == bn[bj] else 1
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[x - 1][y - 1] + cost)
                        td[ai][bj] = fd[x][y]
                    else:
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[al[ai] - 1 - ioff][bl[bj] - 1 - joff] + td[ai][bj])
    return td[n - 1][m - 1]


@dataclass
class FrequencyTable:
    """Per-production node counts; optionally paired with reconstructions."""

    counts: dict = field(default_factory=dict)
    recon_counts: dict | None = None
    num_inferences: int = 0

    def normalized_difference(self) -> dict:
        if self.recon_counts is None or not self.num_inferences:
            raise ValueError("no paired reconstruction counts")
        prods = set(self.counts) | set(self.recon_counts)
        return {
            p: (self.recon_counts.get(p, 0) - self.counts.get(p, 0)) / self.num_inferences
            for p in sorted(prods)
        }

    def to_json(self) -> dict:
        out = {"counts": dict(sorted(self.counts.items()))}
        if self.recon_counts is not None:
            out["recon_counts"] = dict(sorted(self.recon_counts.items()))
            out["num_inferences"] = self.num_inferences
            out["normalized_difference"] = self.normalized_difference()
        return out


def _count_productions(trees) -> Counter:
    counts: Counter = Counter()
    for tree in trees:
        stack = [tree]
        while stack:
            node = stack.pop()
            counts[node.prod] += 1
            stack.extend(node.children)
    return counts


def production_frequency(trees, recon=None) -> FrequencyTable:
    trees = list(trees)
    table = FrequencyTable(counts=dict(_count_productions(trees)))
    if recon is not None:
        recon = list(recon)
        table.recon_counts = dict(_count_productions(recon))
        table.num_inferences = len(recon)
    return table


def pixel_classification_error(a: RectLayout, b: RectLayout, res: int) -> float:
    """Fraction of pixels whose labels differ on a res x res hard raster."""
    if res < 16:
        raise ValueError("res must be >= 16")
    return raster.pixel_diff(raster.label_map(a, res), raster.label_map(b, res))


def noise_robustness_curve(
    model,
    testset: list[DatasetRecord],
    noise_levels,
    seed: int,
    vocab,
    decode_cfg: DecodeConfig = DecodeConfig(),
    eval_res: int = 256,
) -> list[tuple[float, float, int]]:
    """Mean tree edit distance to ground truth per noise level.

    Level 0 runs the clean pipeline unchanged, so its entry equals the clean
    inference mean exactly. Returns (level, mean_ted, sample_count) tuples.
    """
    levels = list(noise_levels)
    if levels != sorted(levels) or (levels and levels[0] != 0):
        raise ValueError("noise levels must be ascending and start at 0")
    out = []
    for level in levels:
        layouts = [
            inject_noise(rec.layout, level, seed=record_seed(seed, rec.id, f"noise{level}"),
                         eval_res=eval_res)
            for rec in testset
        ]
        trees = infer_procedures(model, layouts, vocab, decode_cfg)
        teds = [tree_edit_distance(t, rec.tree) for t, rec in zip(trees, testset)]
        out.append((level, float(np.mean(teds)), len(teds)))
    return out
