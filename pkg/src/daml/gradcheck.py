"""Finite-difference checks of every primitive and of the full per-batch objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import SOURCE, TARGET, Document, pad_documents
from .objectives import group_objective
from .trainer import COUPLED, TrainConfig, forward, init_groups


@dataclass
class CheckResult:
    name: str
    worst: float
    worst_param: str
    passed: bool


def _op_suite() -> dict:
    m = np.array([[True, False, True, True], [False, True, True, False]])
    gm = np.array([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    return {
        "add": ([(2, 3), (3,)], ad.add),
        "sub": ([(2, 3), (2, 1)], ad.sub),
        "mul": ([(2, 3), (2, 3)], ad.mul),
        "matmul": ([(2, 3), (3, 4)], ad.matmul),
        "tanh": ([(3, 2)], ad.tanh),
        "sigmoid": ([(3, 2)], ad.sigmoid),
        "exp": ([(3, 2)], ad.exp),
        "log": ([(3, 2)], lambda a: ad.log(ad.exp(a))),
        "softmax": ([(2, 4)], ad.softmax),
        "masked_softmax": ([(2, 4)], lambda a: ad.masked_softmax(a, m)),
        "sum": ([(2, 3)], lambda a: ad.sum(a, axis=1)),
        "mean": ([(2, 3)], lambda a: ad.mean(a, axis=0)),
        "concat": ([(2, 3), (2, 2)], lambda a, b: ad.concat([a, b], axis=1)),
        "stack": ([(2, 3), (2, 3)], lambda a, b: ad.stack([a, b], axis=0)),
        "reshape": ([(2, 3)], lambda a: ad.reshape(a, (3, 2))),
        "transpose": ([(2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
        "index": ([(3, 4)], lambda a: ad.index(a, (slice(None), slice(1, 3)))),
        "take_rows": ([(5, 3)], lambda a: ad.take_rows(a, np.array([[0, 4], [4, 2]]))),
        "scatter_rows": ([(2, 3)], lambda a: ad.scatter_rows(a, np.array([3, 0]), 4)),
        "gru_scan": ([(4, 3, 6), (2, 6)], lambda a, b: ad.gru_scan(a, b, gm, False)),
        "gru_scan_reverse": ([(4, 3, 6), (2, 6)], lambda a, b: ad.gru_scan(a, b, gm, True)),
        "grad_reverse": ([(2, 3)], lambda a: ad.grad_reverse(a, 0.5)),
    }


def check_ops(tolerance: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (shapes, fn) in _op_suite().items():
        xs = [ad.param(rng.uniform(-1.5, 1.5, size=s)) for s in shapes]
        weights = rng.normal(size=fn(*xs).shape)
        build = lambda: ad.sum(fn(*xs) * weights)
        params = {f"x{i}": x for i, x in enumerate(xs)}
        reference = None
        if name == "grad_reverse":
            # the intended gradient is the reversed one
            reference = lambda: float(-0.5 * np.sum(xs[0].value * weights))
        rep = ad.finite_diff_check(build, params, tolerance, reference=reference)
        worst = max(rep.errors, key=rep.errors.get)
        results.append(CheckResult(f"op:{name}", rep.errors[worst], worst, rep.passed))
    return results


def micro_setup(variant: str = "daml", vocab: int = 10, dim: int = 3, seed: int = 0):
    """Two groups of width ``dim`` and a two-document batch (one source, one target)."""
    cfg = TrainConfig(variant=variant, embed_dim=dim, word_hidden=dim, sent_hidden=dim,
                      attn_dim=dim, batch_size=2, seed=seed)
    groups = init_groups(cfg, vocab)
    rng = np.random.default_rng(seed)
    # larger weights than training init so every path carries a visible gradient
    for g in groups:
        for p in g.named_parameters().values():
            p.value[...] = rng.uniform(-0.8, 0.8, size=p.shape)
    docs = [
        Document("s0", [[2, 3, 4], [5, 6]], label=4, domain=SOURCE),
        Document("t0", [[7, 8], [9, 2, 3], [4]], label=None, domain=TARGET),
    ]
    return cfg, groups, pad_documents(docs)


def check_objective(variant: str = "daml", tolerance: float = 1e-4, vocab: int = 10, dim: int = 3,
                    seed: int = 0) -> list[CheckResult]:
    """Check group 1's full objective against central differences.

    Head parameters are checked against the objective itself. Extractor
    parameters sit below the gradient reversal, so their reference scalar is
    ``L_CLS - eta * lambda_d * L_DOM + lambda_m * L_MUT``.
    """
    cfg, groups, batch = micro_setup(variant, vocab, dim, seed)
    w = cfg.weights
    with ad.no_grad():
        peers = [forward(g, batch, cfg).snapshot() for g in groups[1:]] if variant in COUPLED else []
    me = groups[0]

    def build():
        return group_objective(variant, forward(me, batch, cfg), peers, cfg.weights, cfg.prober_domain)[0]

    def surrogate():
        _, parts = group_objective(variant, forward(me, batch, cfg), peers, cfg.weights, cfg.prober_domain)
        return (parts.get("cls", 0.0) - w.eta * w.lambda_d * parts.get("dom", 0.0)
                + w.lambda_m * parts.get("mut", 0.0))

    results = []
    for bundle, params in me.bundles().items():
        ref = {name: surrogate for name in params} if bundle == "fe" else None
        rep = ad.finite_diff_check(build, params, tolerance, reference=ref)
        worst = max(rep.errors, key=rep.errors.get)
        results.append(CheckResult(f"{variant}:{bundle}", rep.errors[worst], worst, rep.passed))
    return results


def run_all(tolerance: float = 1e-4, variants=("daml",)) -> list[CheckResult]:
    out = check_ops(tolerance)
    for v in variants:
        out += check_objective(v, tolerance)
    return out
