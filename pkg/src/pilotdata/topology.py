"""Logical resource topology and affinity distances.

Resources are placed in a tree by a path-like affinity label such as
``us/tacc/lonestar``. The affinity between two resources is the inverse of
their tree distance: the sum of edge weights on the path joining them.
"""

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import NotFoundError, ValidationError

SEPARATOR = "/"


@dataclass(frozen=True, order=True)
class AffinityLabel:
    """Hierarchical location, outermost segment first."""

    segments: tuple

    def __post_init__(self):
        segments = tuple(self.segments)
        object.__setattr__(self, "segments", segments)
        problems = []
        if not segments:
            problems.append("affinity label needs at least one segment")
        for seg in segments:
            if not isinstance(seg, str) or not seg:
                problems.append(f"empty segment in affinity label {segments!r}")
            elif SEPARATOR in seg:
                problems.append(f"segment {seg!r} contains {SEPARATOR!r}")
        if problems:
            raise ValidationError(problems)

    @classmethod
    def parse(cls, text):
        if isinstance(text, AffinityLabel):
            return text
        if not isinstance(text, str):
            raise ValidationError(f"affinity label must be a string, got {type(text).__name__}")
        return cls(tuple(text.split(SEPARATOR)))

    @property
    def depth(self):
        return len(self.segments)

    @property
    def parent(self):
        """Parent label, or ``None`` for a top-level label."""
        if len(self.segments) == 1:
            return None
        return AffinityLabel(self.segments[:-1])

    def is_within(self, other):
        """True if this label equals ``other`` or lies in its subtree."""
        other = AffinityLabel.parse(other)
        return self.segments[: other.depth] == other.segments

    def __str__(self):
        return SEPARATOR.join(self.segments)


def as_label(value):
    return AffinityLabel.parse(value)


class TopologyTree:
    """Immutable affinity tree.

    Nodes are keyed by segment tuples; the synthetic root is ``()``. Each
    non-root node carries the weight of the edge to its parent.
    """

    __slots__ = ("_parent", "_children", "_weight")

    def __init__(self, labels=(), weights=None):
        self._parent = {(): None}
        self._children = {(): ()}
        self._weight = {}
        for label in labels:
            self._add(as_label(label))
        for label, weight in (weights or {}).items():
            key = as_label(label).segments
            if key not in self._parent:
                self._add(AffinityLabel(key))
            self._set_weight(key, weight)

    def _add(self, label):
        key = label.segments
        for i in range(1, len(key) + 1):
            node = key[:i]
            if node in self._parent:
                continue
            parent = node[:-1]
            self._parent[node] = parent
            self._children[node] = ()
            self._children[parent] = tuple(sorted(self._children[parent] + (node,)))
            self._weight[node] = 1

    def _set_weight(self, key, weight):
        if not weight > 0:
            raise ValidationError(f"edge weight for {SEPARATOR.join(key)!r} must be positive, got {weight!r}")
        self._weight[key] = weight

    def _copy(self):
        new = TopologyTree.__new__(TopologyTree)
        new._parent = dict(self._parent)
        new._children = dict(self._children)
        new._weight = dict(self._weight)
        return new

    def insert_label(self, label):
        """Return a tree that also contains ``label`` and its ancestors."""
        label = as_label(label)
        if label.segments in self._parent:
            return self
        new = self._copy()
        new._add(label)
        return new

    def with_weight(self, label, weight):
        """Return a tree whose edge from ``label`` to its parent has ``weight``."""
        key = self._key(label)
        new = self._copy()
        new._set_weight(key, weight)
        return new

    def _key(self, label):
        key = as_label(label).segments
        if key not in self._parent:
            raise NotFoundError(f"unknown affinity label {SEPARATOR.join(key)!r}")
        return key

    def __contains__(self, label):
        try:
            return as_label(label).segments in self._parent
        except ValidationError:
            return False

    def __len__(self):
        """Number of nodes, including the synthetic root."""
        return len(self._parent)

    def __eq__(self, other):
        if not isinstance(other, TopologyTree):
            return NotImplemented
        return self._parent == other._parent and self._weight == other._weight

    def __hash__(self):
        return hash(frozenset(self._parent))

    def labels(self):
        """All non-root labels in canonical sort order."""
        return [AffinityLabel(k) for k in sorted(self._parent) if k]

    def children(self, label=None):
        key = () if label is None else self._key(label)
        return [AffinityLabel(k) for k in self._children[key]]

    def leaves(self):
        return [AffinityLabel(k) for k in sorted(self._parent) if k and not self._children[k]]

    def weight(self, label):
        """Weight of the edge from ``label`` to its parent."""
        return self._weight[self._key(label)]

    def depth(self, label):
        return len(self._key(label))

    def lca(self, a, b):
        """Lowest common ancestor, ``None`` when it is the synthetic root."""
        ka, kb = self._key(a), self._key(b)
        n = 0
        for x, y in zip(ka, kb):
            if x != y:
                break
            n += 1
        return AffinityLabel(ka[:n]) if n else None

    def distance(self, a, b):
        """Sum of edge weights on the tree path between ``a`` and ``b``."""
        ka, kb = self._key(a), self._key(b)
        n = 0
        for x, y in zip(ka, kb):
            if x != y:
                break
            n += 1
        total = 0
        for key in (ka, kb):
            while len(key) > n:
                total += self._weight[key]
                key = key[:-1]
        return total

    def nearest(self, origin, candidates):
        """Candidate closest to ``origin``; ties go to the smallest canonical label."""
        candidates = [as_label(c) for c in candidates]
        if not candidates:
            raise ValueError("nearest() needs at least one candidate")
        return min(candidates, key=lambda c: (self.distance(origin, c), str(c)))

    def to_config(self):
        """Serializable form accepted by :func:`tree_from_config`."""
        weights = [[str(AffinityLabel(k)), w] for k, w in sorted(self._weight.items()) if w != 1]
        return {"labels": [str(l) for l in self.leaves()], "weights": weights}


def insert_label(tree, label):
    return tree.insert_label(label)


def distance(tree, a, b):
    return tree.distance(a, b)


def nearest(tree, origin, candidates):
    return tree.nearest(origin, candidates)


def tree_from_config(config):
    """Build a tree from ``{"labels": [...], "weights": [[label, w], ...]}``.

    A bare list of labels is accepted as well.
    """
    if isinstance(config, Mapping):
        labels: Iterable = config.get("labels", ())
        raw = config.get("weights", ())
        weights = dict(raw.items()) if isinstance(raw, Mapping) else {l: w for l, w in raw}
    else:
        labels, weights = config, {}
    return TopologyTree(labels, weights)


def sort_labels(labels: Sequence):
    return sorted((as_label(l) for l in labels), key=str)
