"""Per-group training objectives.

All losses are batch means. Peer quantities (teacher distributions and
peer features) are plain arrays, so no gradient can reach the peer group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .corpus import SOURCE, TARGET

VARIANTS = ("naive", "dann", "ne", "sml", "fa", "daml")
PROBER_DOMAINS = ("target", "source", "both")


@dataclass
class LossWeights:
    eta: float = 0.005
    lambda_d: float = 1.0
    lambda_m: float = 1.0

    def __post_init__(self):
        if min(self.eta, self.lambda_d, self.lambda_m) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BatchOutputs:
    """One group's forward pass over a batch.

    ``dom`` already sits behind the gradient reversal layer. ``labels`` are
    ratings 1..K with -1 for unlabeled documents.
    """

    d: Node
    cls: Node
    dom: Node | None
    prob: Node | None
    domains: np.ndarray
    labels: np.ndarray

    def snapshot(self) -> "PeerSnapshot":
        return PeerSnapshot(self.d.value.copy(), self.cls.value.copy())


@dataclass
class PeerSnapshot:
    d: np.ndarray
    cls: np.ndarray


def _rows(x: Node, rows: np.ndarray) -> Node:
    if len(rows) == x.shape[0]:
        return x
    return ad.index(x, rows)


def cls_loss(outputs: BatchOutputs, rows=None) -> Node:
    """Mean negative log-likelihood of the true ratings."""
    rows = np.arange(len(outputs.labels)) if rows is None else np.asarray(rows)
    labels = outputs.labels[rows]
    if len(rows) == 0:
        raise ValueError("cls_loss: no documents")
    if (labels < 1).any():
        raise ValueError("cls_loss: unlabeled document included")
    probs = _rows(outputs.cls, rows)
    k = probs.shape[1]
    if labels.max() > k:
        raise ValueError(f"cls_loss: label {labels.max()} exceeds {k} classes")
    onehot = np.eye(k, dtype=probs.value.dtype)[labels - 1]
    return -ad.mean(ad.sum(onehot * ad.log(probs), axis=1))


def dom_loss(outputs: BatchOutputs) -> Node:
    """Mean binary cross-entropy of the discriminator against the domain flags."""
    if outputs.dom is None:
        raise ValueError("dom_loss: no discriminator outputs")
    z = outputs.domains.astype(outputs.dom.value.dtype)
    dom = outputs.dom
    ll = z * ad.log(dom) + (1.0 - z) * ad.log(1.0 - dom)
    return -ad.mean(ll)


def kl_loss(teacher, student: Node) -> Node:
    """Mean over rows of KL(teacher || student); the teacher is a constant."""
    t = teacher.value if isinstance(teacher, Node) else np.asarray(teacher)
    if t.shape != student.shape:
        raise ShapeError("kl_loss", t.shape, student.shape)
    t = t.astype(student.value.dtype, copy=False)
    neg_entropy = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0).sum(axis=1)
    cross = ad.sum(t * ad.log(student), axis=1)
    return ad.mean(ad.const(neg_entropy, student.value.dtype) - cross)


def fa_loss(d1: Node, d2) -> Node:
    """Mean squared Euclidean distance between paired feature vectors."""
    other = d2.value if isinstance(d2, Node) else np.asarray(d2)
    if other.shape != d1.shape:
        raise ShapeError("fa_loss", d1.shape, other.shape)
    diff = d1 - other.astype(d1.value.dtype, copy=False)
    return ad.mean(ad.sum(diff * diff, axis=1))


def mutual_rows(domains: np.ndarray, prober_domain: str) -> np.ndarray:
    if prober_domain == "target":
        return np.flatnonzero(domains == TARGET)
    if prober_domain == "source":
        return np.flatnonzero(domains == SOURCE)
    if prober_domain == "both":
        return np.arange(len(domains))
    raise ValueError(f"unknown prober domain {prober_domain!r}")


def group_objective(variant: str, own: BatchOutputs, peers, w: LossWeights,
                    prober_domain: str = "target") -> tuple[Node, dict]:
    """Hybrid objective of one group; returns the scalar and its float components.

    ``peers`` is a list of :class:`PeerSnapshot`. With several peers the
    teacher is the uniform mixture of their classifier distributions and the
    feature-alignment term averages over peers.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if isinstance(peers, (PeerSnapshot, BatchOutputs)):
        peers = [peers]
    peers = [p.snapshot() if isinstance(p, BatchOutputs) else p for p in peers]

    dtype = own.cls.value.dtype
    total = ad.const(np.zeros((), dtype=dtype))
    parts = {}
    src = np.flatnonzero((own.domains == SOURCE) & (own.labels >= 1))
    if len(src):
        l_cls = cls_loss(own, src)
        total = total + l_cls
        parts["cls"] = float(l_cls.value)

    if variant != "naive":
        l_dom = dom_loss(own)
        total = total + w.lambda_d * l_dom
        parts["dom"] = float(l_dom.value)

    if variant in ("sml", "fa", "daml"):
        if not peers:
            raise ValueError(f"variant {variant!r} needs at least one peer group")
        if variant == "fa":
            l_mut = ad.mean(ad.stack([fa_loss(own.d, p.d) for p in peers]))
            total = total + w.lambda_m * l_mut
            parts["mut"] = float(l_mut.value)
        else:
            rows = mutual_rows(own.domains, prober_domain)
            if len(rows):
                student = own.cls if variant == "sml" else own.prob
                if student is None:
                    raise ValueError("daml objective needs prober outputs")
                teacher = np.mean([p.cls[rows] for p in peers], axis=0)
                l_mut = kl_loss(teacher, _rows(student, rows))
                total = total + w.lambda_m * l_mut
                parts["mut"] = float(l_mut.value)

    parts["total"] = float(total.value)
    return total, parts
