"""Graph data model: samples, masks, class grids, edge vectorization, JSONL IO.

Discrete node and edge attributes are 1-based class indices.  Class 1 on the
edge channel is the designated "no edge" class: a pair absent from a dataset
record is treated as class 1, and validity/hashing treat class-1 pairs as
non-adjacent.  This convention is a repository decision; the choice of which
class encodes "no edge" is otherwise arbitrary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


NO_EDGE_CLASS = 1

SYMMETRY_TOL = 1e-9


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


def upper_triangle_pairs(n):
    """Return (rows, cols) index arrays for all pairs i < j, lexicographic."""
    iu, ju = np.triu_indices(n, k=1)
    return iu.astype(np.int64), ju.astype(np.int64)


@dataclass(frozen=True)
class ClassGrid:
    """Class centers and interval boundaries partitioning [-1, 1].

    Class k (1-based) has center (2k-1)/K - 1 and occupies the interval
    [center - 1/K, center + 1/K]; adjacent boundaries coincide bitwise.
    """

    K: int
    centers: np.ndarray
    lowers: np.ndarray
    uppers: np.ndarray

    @property
    def boundaries(self):
        """The K+1 interval boundaries from -1 to 1."""
        return np.concatenate([self.lowers, self.uppers[-1:]])


def build_class_grid(K):
    """Build the K-class grid of centers and interval boundaries in [-1, 1]."""
    if K < 1:
        raise ValueError(f"class count must be >= 1, got {K}")
    k = np.arange(1, K + 1, dtype=float)
    centers = (2.0 * k - 1.0) / K - 1.0
    # computed so that uppers[k] and lowers[k+1] are bitwise identical
    lowers = 2.0 * (k - 1.0) / K - 1.0
    uppers = 2.0 * k / K - 1.0
    return ClassGrid(K=int(K), centers=centers, lowers=lowers, uppers=uppers)


def nearest_class(values, grid):
    """Round continuous values to the nearest class center (1-based indices)."""
    values = np.asarray(values, dtype=float)
    d = np.abs(values[..., None] - grid.centers)
    return np.argmin(d, axis=-1) + 1


@dataclass
class GraphSample:
    """One (possibly padded) graph with validity masks.

    ``node_classes`` holds 1-based class indices of shape (max_n,) for a
    discrete node channel, or real coordinates of shape (max_n, d_x) for a
    continuous one.  ``edge_classes`` is a symmetric (max_n, max_n) array of
    1-based indices; entries outside ``edge_mask`` are ignored.
    """

    n: int
    max_n: int
    node_classes: np.ndarray
    edge_classes: np.ndarray
    node_mask: np.ndarray
    edge_mask: np.ndarray

    @property
    def continuous_nodes(self):
        return self.node_classes.ndim == 2

    def edge_list(self):
        """Valid pairs (i, j, class) with i < j and class != NO_EDGE_CLASS."""
        iu, ju = upper_triangle_pairs(self.max_n)
        keep = (self.edge_mask[iu, ju] > 0) & (self.edge_classes[iu, ju] != NO_EDGE_CLASS)
        return [(int(i), int(j), int(self.edge_classes[i, j]))
                for i, j in zip(iu[keep], ju[keep])]


def build_masks(n, max_n, mask_diag_edges=True):
    """Node and edge validity masks for an n-node graph padded to max_n."""
    if not 1 <= n <= max_n:
        raise ValueError(f"need 1 <= n <= max_n, got n={n}, max_n={max_n}")
    node_mask = np.zeros(max_n, dtype=np.int8)
    node_mask[:n] = 1
    edge_mask = np.outer(node_mask, node_mask).astype(np.int8)
    if mask_diag_edges:
        np.fill_diagonal(edge_mask, 0)
    return node_mask, edge_mask


def make_sample(n, max_n, node_classes=None, edges=(), node_coords=None,
                mask_diag_edges=True):
    """Assemble a GraphSample from an edge list of (i, j, class) triples."""
    node_mask, edge_mask = build_masks(n, max_n, mask_diag_edges)
    if node_coords is not None:
        coords = np.zeros((max_n, np.asarray(node_coords).shape[1]), dtype=float)
        coords[:n] = np.asarray(node_coords, dtype=float)
        node_attr = coords
    else:
        node_attr = np.full(max_n, NO_EDGE_CLASS, dtype=np.int64)
        if node_classes is not None:
            node_attr[:n] = np.asarray(node_classes, dtype=np.int64)
    edge_classes = np.full((max_n, max_n), NO_EDGE_CLASS, dtype=np.int64)
    for i, j, cls in edges:
        if not (0 <= i < j < n):
            raise ValueError(f"edge ({i}, {j}) must satisfy 0 <= i < j < n={n}")
        edge_classes[i, j] = cls
        edge_classes[j, i] = cls
    return GraphSample(n=int(n), max_n=int(max_n), node_classes=node_attr,
                       edge_classes=edge_classes, node_mask=node_mask,
                       edge_mask=edge_mask)


@dataclass(frozen=True)
class ContinuousGraph:
    """Class-center (or raw continuous) encoding of one graph, masked to zero."""

    x_c: np.ndarray        # (max_n * d_x,)
    a_c: np.ndarray        # (max_n, max_n)
    node_mask: np.ndarray
    edge_mask: np.ndarray


def encode_continuous(sample, grid_x, grid_a):
    """Map class indices to their grid centers; masked entries become zero.

    A continuous node channel is passed through unchanged (flattened row
    major, so entry (i, c) lands at position i * d_x + c).
    """
    if sample.continuous_nodes:
        x = sample.node_classes * sample.node_mask[:, None]
        x_c = x.reshape(-1).astype(float)
    else:
        cls = sample.node_classes
        valid = sample.node_mask > 0
        _check_class_range(cls[valid], grid_x.K, "node")
        x_c = np.where(valid, grid_x.centers[np.clip(cls, 1, grid_x.K) - 1], 0.0)
    ecls = sample.edge_classes
    evalid = sample.edge_mask > 0
    _check_class_range(ecls[evalid], grid_a.K, "edge")
    a_c = np.where(evalid, grid_a.centers[np.clip(ecls, 1, grid_a.K) - 1], 0.0)
    return ContinuousGraph(x_c=x_c, a_c=a_c, node_mask=sample.node_mask.copy(),
                           edge_mask=sample.edge_mask.copy())


def _check_class_range(cls, K, channel):
    if cls.size and (cls.min() < 1 or cls.max() > K):
        raise ValueError(f"{channel} class index out of range [1, {K}]")


@dataclass(frozen=True)
class EdgeVectorization:
    """Bijection between valid upper-triangle pairs (i < j) and flat slots."""

    max_n: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def size(self):
        return int(self.rows.shape[0])

    def pair_of(self, slot):
        return int(self.rows[slot]), int(self.cols[slot])


def edge_vectorization(mask):
    """Vectorization over the mask's valid upper-triangle slots."""
    mask = np.asarray(mask)
    n = mask.shape[0]
    iu, ju = upper_triangle_pairs(n)
    keep = mask[iu, ju] > 0
    return EdgeVectorization(max_n=n, rows=iu[keep], cols=ju[keep])


def vectorize_edges(a, mask):
    """Flatten a symmetric masked edge array into its valid i < j slots."""
    a = np.asarray(a)
    ev = edge_vectorization(mask)
    asym = np.abs(a[ev.rows, ev.cols] - a[ev.cols, ev.rows])
    if asym.size and asym.max() > SYMMETRY_TOL:
        raise ValueError(
            f"edge array asymmetric beyond {SYMMETRY_TOL:g} on valid entries")
    return np.array(a[ev.rows, ev.cols]), ev


def unvectorize_edges(vec, ev, dtype=None):
    """Scatter a slot vector back to a symmetric array with zero diagonal."""
    vec = np.asarray(vec)
    if vec.shape[0] != ev.size:
        raise ValueError(f"vector length {vec.shape[0]} != slot count {ev.size}")
    out = np.zeros((ev.max_n, ev.max_n), dtype=dtype or vec.dtype)
    out[ev.rows, ev.cols] = vec
    out[ev.cols, ev.rows] = vec
    return out


@dataclass(frozen=True)
class DatasetMeta:
    k_node: int
    k_edge: int
    max_n: int
    node_channel: str = "discrete"   # or "continuous"
    d_x: int = 1
    mask_diag_edges: bool = True


@dataclass
class Dataset:
    """A sequence of GraphSamples plus channel metadata."""

    samples: list = field(default_factory=list)
    meta: DatasetMeta = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    def __iter__(self):
        return iter(self.samples)


def infer_meta(records):
    max_n = max(r["n"] for r in records)
    k_edge = max([NO_EDGE_CLASS + 1]
                 + [c for r in records for (_, _, c) in r.get("edges", [])])
    continuous = any("node_coords" in r for r in records)
    if continuous:
        d_x = len(records[0]["node_coords"][0])
        return DatasetMeta(k_node=0, k_edge=k_edge, max_n=max_n,
                           node_channel="continuous", d_x=d_x)
    k_node = max([1] + [c for r in records for c in r.get("node_classes", [])])
    return DatasetMeta(k_node=k_node, k_edge=k_edge, max_n=max_n)


def read_dataset(path):
    """Read a JSON-lines dataset; order is the file order, padded to max_n.

    The optional first line {"meta": {...}} fixes class counts and padding;
    otherwise they are inferred from the records.
    """
    records = []
    meta_rec = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc})")
            if "meta" in rec:
                if meta_rec is not None or records:
                    raise DatasetFormatError(
                        f"line {lineno}: meta must be the single first line")
                meta_rec = rec["meta"]
                continue
            if "n" not in rec:
                raise DatasetFormatError(f"line {lineno}: record missing 'n'")
            records.append(rec)
    if not records:
        return Dataset(samples=[], meta=_meta_from_record(meta_rec) if meta_rec else None)
    if meta_rec is not None:
        meta = _meta_from_record(meta_rec)
    else:
        meta = infer_meta(records)
    samples = []
    for rec in records:
        n = int(rec["n"])
        edges = [tuple(e) for e in rec.get("edges", [])]
        if meta.node_channel == "continuous":
            samples.append(make_sample(n, meta.max_n, edges=edges,
                                       node_coords=rec["node_coords"],
                                       mask_diag_edges=meta.mask_diag_edges))
        else:
            classes = rec.get("node_classes", [NO_EDGE_CLASS] * n)
            samples.append(make_sample(n, meta.max_n, node_classes=classes,
                                       edges=edges,
                                       mask_diag_edges=meta.mask_diag_edges))
    return Dataset(samples=samples, meta=meta)


def _meta_from_record(m):
    try:
        return DatasetMeta(k_node=int(m.get("K_X", 1)), k_edge=int(m["K_A"]),
                           max_n=int(m["max_n"]),
                           node_channel=m.get("node_channel", "discrete"),
                           d_x=int(m.get("d_x", 1)),
                           mask_diag_edges=bool(m.get("mask_diag_edges", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: bad meta header ({exc!r})")


def write_samples(path, samples, meta):
    """Write samples as JSON-lines with a leading meta header."""
    header = {"meta": {"K_X": meta.k_node, "K_A": meta.k_edge,
                       "max_n": meta.max_n, "node_channel": meta.node_channel,
                       "d_x": meta.d_x, "mask_diag_edges": meta.mask_diag_edges}}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            rec = {"n": s.n}
            if s.continuous_nodes:
                rec["node_coords"] = [list(map(float, row)) for row in s.node_classes[:s.n]]
            else:
                rec["node_classes"] = [int(c) for c in s.node_classes[:s.n]]
            rec["edges"] = [[i, j, c] for (i, j, c) in s.edge_list()]
            fh.write(json.dumps(rec) + "\n")


def size_histogram(samples):
    """Counts of node counts, used to draw sizes at generation time."""
    hist = {}
    for s in samples:
        hist[s.n] = hist.get(s.n, 0) + 1
    return hist
