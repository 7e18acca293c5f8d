"""Evaluation: confusion metrics, skeleton graphs and tree detection rates.

Undefined rates are ``None`` and drop out of aggregation. Connectivity is
26-neighbourhood everywhere.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import networkx as nx
import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.morphology import skeletonize as _lee_skeletonize

from .errors import ContractError, ShapeError, logger

TREE_TARGETS = ("airway", "vessel")
RATE_FIELDS = ("dice", "fpe", "fne", "sensitivity", "specificity", "td", "bd", "slicewise_dice")

# one offset per neighbour pair
_HALF_OFFSETS = [o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)]


@dataclass
class MetricsConfig:
    branch_fraction: float = 0.8
    min_branch_length: float = 3.0
    slicewise: bool = False


@dataclass
class SegReport:
    target: str
    tp: int
    fp: int
    fn: int
    tn: int
    dice: float | None
    fpe: float | None
    fne: float | None
    sensitivity: float | None
    specificity: float | None
    td: float | None = None
    bd: float | None = None
    slicewise_dice: float | None = None
    branch_fraction: float | None = None
    volume: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def _pair(pred, target):
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def confusion(pred, target) -> tuple[int, int, int, int]:
    pred, target = _pair(pred, target)
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def _ratio(num, den):
    return num / den if den else None


def dice(pred, target) -> float:
    """2·TP / (2·TP + FP + FN); 1 when both masks are empty."""
    tp, fp, fn, _ = confusion(pred, target)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def fpe_fne(pred, target) -> tuple[float | None, float | None]:
    tp, fp, fn, _ = confusion(pred, target)
    return _ratio(fp, tp + fp), _ratio(fn, tp + fn)


def sens_spec(pred, target) -> tuple[float | None, float | None]:
    tp, fp, fn, tn = confusion(pred, target)
    return _ratio(tp, tp + fn), _ratio(tn, tn + fp)


def slicewise_dice(pred, target) -> float:
    """Mean 2D Dice over axial slices (empty/empty slices count as 1)."""
    pred, target = _pair(pred, target)
    if pred.shape[0] == 0:
        raise ShapeError("Cannot compute slice-wise Dice of an empty volume")
    return float(np.mean([dice(p, t) for p, t in zip(pred, target)]))


def largest_cc(mask) -> np.ndarray:
    """Largest 26-connected component; ties go to the earliest component in raster order."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    structure = ndimage.generate_binary_structure(mask.ndim, mask.ndim)
    labels, _ = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


@dataclass(frozen=True)
class Branch:
    voxels: tuple[tuple[int, int, int], ...]
    length: float
    terminal: bool


@dataclass(eq=False)
class SkeletonGraph:
    graph: nx.Graph
    spacing: tuple[float, float, float]
    branches: list[Branch] = field(default_factory=list)

    @property
    def voxels(self) -> np.ndarray:
        return np.array(sorted(self.graph.nodes), dtype=np.int64).reshape(-1, 3)

    @property
    def degrees(self) -> dict:
        return dict(self.graph.degree)

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    def voxel_weights(self) -> dict:
        """Per-voxel length: mean of the incident step lengths (0 for an isolated voxel)."""
        weights = {}
        for v in self.graph.nodes:
            steps = [w for _, _, w in self.graph.edges(v, data="weight")]
            weights[v] = float(np.mean(steps)) if steps else 0.0
        return weights

    @property
    def total_length(self) -> float:
        return float(sum(self.voxel_weights().values()))

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        if self.graph.number_of_nodes():
            out[tuple(self.voxels.T)] = True
        return out


def _thin(mask) -> np.ndarray:
    padded = np.pad(mask, 1)
    skel = _lee_skeletonize(padded, method="lee")[1:-1, 1:-1, 1:-1] > 0
    skel &= mask
    # every input component keeps at least one voxel
    structure = ndimage.generate_binary_structure(3, 3)
    labels, n = ndimage.label(mask, structure=structure)
    if n:
        kept = np.unique(labels[skel])
        missing = np.setdiff1d(np.arange(1, n + 1), kept)
        if missing.size:
            depth = ndimage.distance_transform_edt(mask)
            for label in missing:
                idx = np.argmax(np.where(labels == label, depth, -1.0))
                skel[np.unravel_index(idx, mask.shape)] = True
    return skel


def _voxel_graph(skel, spacing) -> nx.Graph:
    graph = nx.Graph()
    nodes = [tuple(int(c) for c in v) for v in np.argwhere(skel)]
    present = set(nodes)
    graph.add_nodes_from(nodes)
    for v in nodes:
        for o in _HALF_OFFSETS:
            u = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
            if u in present:
                step = math.sqrt(sum((d * s) ** 2 for d, s in zip(o, spacing)))
                graph.add_edge(v, u, weight=step)
    # thinned junctions keep voxel triangles and small loops; only the shortest steps survive
    return nx.minimum_spanning_tree(graph, weight="weight")


def _path_length(graph, path) -> float:
    return float(sum(graph[a][b]["weight"] for a, b in zip(path[:-1], path[1:])))


def _trace(graph: nx.Graph, min_link: float = 0.0) -> list[Branch]:
    """Split the voxel forest into chains between endpoints and branch points.

    Junction voxels that touch, or that are joined by a chain shorter than
    ``min_link``, act as a single branch point.
    """
    junctions = [v for v, d in graph.degree if d >= 3]
    cluster_of = {}
    for k, cluster in enumerate(nx.connected_components(graph.subgraph(junctions))):
        for v in cluster:
            cluster_of[v] = k

    def is_node(v):
        return graph.degree(v) != 2

    branches, seen = [], set()
    for start in sorted(v for v in graph.nodes if is_node(v)):
        if graph.degree(start) == 0:
            branches.append(Branch((start,), 0.0, terminal=False))
            continue
        for nxt in sorted(graph.neighbors(start)):
            edge = frozenset((start, nxt))
            if edge in seen:
                continue
            seen.add(edge)
            if start in cluster_of and cluster_of.get(nxt) == cluster_of[start]:
                continue
            path = [start, nxt]
            while not is_node(path[-1]):
                cur = path[-1]
                step = next(u for u in graph.neighbors(cur) if frozenset((cur, u)) not in seen)
                seen.add(frozenset((cur, step)))
                path.append(step)
            ends = (graph.degree(path[0]), graph.degree(path[-1]))
            length = _path_length(graph, path)
            if min(ends) >= 3 and length < min_link:
                continue
            terminal = min(ends) == 1 and max(ends) >= 3
            branches.append(Branch(tuple(path), length, terminal))
    return branches


def skeletonize(mask, spacing=(1.0, 1.0, 1.0), min_branch_length: float = 3.0) -> SkeletonGraph:
    """Thin ``mask`` to a medial curve and decompose it into branches.

    Terminal branches shorter than ``min_branch_length`` (mm) are thinning
    spurs. Each round removes the shortest spur at every branch point, until
    none remain; junctions closer than that length merge into one.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ShapeError(f"Skeletonization needs a 3D mask, got shape {mask.shape}")
    if not mask.any():
        raise ContractError("Cannot skeletonize an empty mask")
    spacing = tuple(float(s) for s in spacing)

    graph = _voxel_graph(_thin(mask), spacing)
    while True:
        branches = _trace(graph, min_branch_length)
        spurs = [b for b in branches if b.terminal and b.length < min_branch_length]
        if len(branches) <= 1 or not spurs:
            break
        cut, anchors = [], set()
        for spur in sorted(spurs, key=lambda b: (b.length, b.voxels)):
            anchor = max((spur.voxels[0], spur.voxels[-1]), key=graph.degree)
            if anchor in anchors:
                continue
            anchors.add(anchor)
            cut.extend(v for v in spur.voxels if graph.degree(v) < 3)
        graph.remove_nodes_from(cut)
    logger.debug(f"Skeleton: {graph.number_of_nodes()} voxels, {len(branches)} branches")
    return SkeletonGraph(graph=graph, spacing=spacing, branches=branches)


def tree_metrics(pred, target, spacing=(1.0, 1.0, 1.0), cfg: MetricsConfig | None = None):
    """(TD, BD) of the target skeleton against the prediction's largest component."""
    cfg = cfg or MetricsConfig()
    pred, target = _pair(pred, target)
    if not target.any():
        return None, None

    detected = largest_cc(pred)
    skel = skeletonize(target, spacing, cfg.min_branch_length)
    weights = skel.voxel_weights()

    ref = sum(weights.values())
    if ref > 0:
        td = sum(w for v, w in weights.items() if detected[v]) / ref
    else:
        td = float(np.mean([detected[v] for v in weights]))

    hits = 0
    for branch in skel.branches:
        inside = sum(1 for v in branch.voxels if detected[v])
        if inside >= cfg.branch_fraction * len(branch.voxels):
            hits += 1
    bd = hits / skel.branch_count if skel.branch_count else None
    return float(td), bd


def evaluate(pred_masks: Mapping[str, np.ndarray], truth_masks: Mapping[str, np.ndarray],
             spacing=(1.0, 1.0, 1.0), cfg: MetricsConfig | None = None, volume: str = "") -> list[SegReport]:
    """One SegReport per target present in both mappings."""
    cfg = cfg or MetricsConfig()
    reports = []
    for name in truth_masks:
        if name not in pred_masks:
            continue
        pred, target = _pair(pred_masks[name], truth_masks[name])
        tp, fp, fn, tn = confusion(pred, target)
        fpe, fne = fpe_fne(pred, target)
        sens, spec = sens_spec(pred, target)
        report = SegReport(target=name, tp=tp, fp=fp, fn=fn, tn=tn, dice=dice(pred, target),
                           fpe=fpe, fne=fne, sensitivity=sens, specificity=spec, volume=volume)
        if name in TREE_TARGETS:
            report.td, report.bd = tree_metrics(pred, target, spacing, cfg)
            report.branch_fraction = cfg.branch_fraction
        if cfg.slicewise:
            report.slicewise_dice = slicewise_dice(pred, target)
        reports.append(report)
    return reports


def summarize(reports: Sequence[SegReport]) -> pd.DataFrame:
    """Mean and standard deviation per target; undefined values are skipped."""
    if not reports:
        return pd.DataFrame(columns=["target"])
    frame = pd.DataFrame([r.to_json() for r in reports])
    fields = [f for f in RATE_FIELDS if f in frame and frame[f].notna().any()]
    frame[fields] = frame[fields].astype(float)
    table = frame.groupby("target", sort=False)[fields].agg(["mean", "std"])
    table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
    table["count"] = frame.groupby("target", sort=False).size()
    return table.reset_index()
