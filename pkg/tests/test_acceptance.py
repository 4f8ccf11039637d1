"""One test per acceptance criterion.  Each prints a single PASS/FAIL line before asserting.

Criterion 5 trains 9 full-size models and takes several minutes; the rest run in seconds.
"""
import json
import math
import time

import numpy as np
import pytest

from daml import autodiff as ad
from daml.cli import main
from daml.corpus import SOURCE, TARGET, Document, SynthSpec, align_labels, pad_documents
from daml.gradcheck import micro_setup, run_all
from daml.layers import extract, head_forward
from daml.metrics import read_report_csv
from daml.objectives import BatchOutputs, cls_loss, dom_loss, kl_loss
from daml.trainer import (Checkpoint, TrainConfig, forward, init_groups, restore_groups, snapshot,
                          train_step)

# criterion 5 training length; every other TrainConfig field stays at its default (dims 16)
DIRECTION_EPOCHS = 15


def verdict(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def test_criterion_1_gradcheck():
    t0 = time.perf_counter()
    results = run_all(1e-4, variants=("daml",))
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.worst)
    ok = all(r.passed for r in results) and worst.worst < 1e-4 and elapsed < 60
    assert verdict(1, ok, f"{len(results)} checks, worst {worst.name} {worst.worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_grl_contract():
    rng = np.random.default_rng(0)
    eta = 0.37
    x = ad.param(rng.normal(size=(4, 3)))
    up = rng.normal(size=(4, 3))
    y = ad.grad_reverse(x, eta)
    ad.backward(ad.sum(y * ad.const(up)))
    bitwise = np.array_equal(x.grad, -eta * up) and np.array_equal(y.value, x.value)

    # end to end: extractor gradient of lambda_d * L_DOM against the unreversed gradient
    ld = 0.6
    cfg, groups, batch = micro_setup("daml")
    g = groups[0]
    own = forward(g, batch, cfg)
    ad.backward(ld * dom_loss(own))
    rev = {k: p.grad.copy() for k, p in g.bundles()["fe"].items()}
    for p in g.named_parameters().values():
        p.zero_grad()
    d = extract(batch, g.extractor)
    plain = BatchOutputs(d, own.cls, head_forward(d, g.discriminator), None, batch.domains, batch.labels)
    ad.backward(dom_loss(plain))
    gap = max(np.abs(rev[k] - (-cfg.eta * ld) * p.grad).max() for k, p in g.bundles()["fe"].items())
    assert verdict(2, bitwise and gap < 1e-10, f"bitwise={bitwise}, end-to-end max gap {gap:.1e}")


def _values(params):
    return {k: p.value.copy() for k, p in params.items()}


def _target_only_batch():
    docs = [Document(f"t{i}", [[2 + i, 3 + i, 4], [5 + i]], None, TARGET) for i in range(4)]
    return pad_documents(docs)


def test_criterion_3_classifier_isolation():
    small = dict(embed_dim=4, word_hidden=4, sent_hidden=4, batch_size=4)
    batch = _target_only_batch()

    cfg = TrainConfig(variant="daml", **small)
    groups = init_groups(cfg, 12)
    before = [{b: _values(p) for b, p in g.bundles().items()} for g in groups]
    train_step(groups, batch, cfg)
    c_same = p_moved = fe_moved = True
    for g, old in zip(groups, before):
        now = {b: _values(p) for b, p in g.bundles().items()}
        c_same &= all(np.array_equal(now["cls"][k], old["cls"][k]) for k in old["cls"])
        p_moved &= any(not np.array_equal(now["prb"][k], old["prb"][k]) for k in old["prb"])
        fe_moved &= any(not np.array_equal(now["fe"][k], old["fe"][k]) for k in old["fe"])

    cfg = TrainConfig(variant="sml", **small)
    groups = init_groups(cfg, 12)
    old = _values(groups[0].bundles()["cls"])
    train_step(groups, batch, cfg)
    sml_moved = any(not np.array_equal(v, old[k]) for k, v in _values(groups[0].bundles()["cls"]).items())
    ok = c_same and p_moved and fe_moved and sml_moved
    assert verdict(3, ok, f"daml C unchanged={c_same} P moved={p_moved} FE moved={fe_moved}; "
                          f"sml C moved={sml_moved}")


def test_criterion_4_loss_unit_values():
    def outs(cls=None, dom=None, domains=(1,), labels=(1,)):
        n = len(domains)
        return BatchOutputs(ad.param(np.zeros((n, 2))),
                            ad.param(np.full((n, 5), 0.2) if cls is None else np.asarray(cls, float)),
                            None if dom is None else ad.param(np.asarray(dom, float)), None,
                            np.asarray(domains), np.asarray(labels))

    cls = float(cls_loss(outs()).value)
    dom = float(dom_loss(outs(dom=[0.5, 0.5], domains=[1, 0], labels=[1, -1])).value)
    p = np.array([[0.1, 0.2, 0.3, 0.4, 0.0], [0.5, 0.5, 0.0, 0.0, 0.0]])
    kl = float(kl_loss(p, ad.const(p)).value)
    labels = [align_labels(r) for r in range(1, 11)]
    ok = (abs(cls - math.log(5)) <= 1e-9 and abs(dom - math.log(2)) <= 1e-9 and abs(kl) <= 1e-12
          and labels == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5])
    assert verdict(4, ok, f"cls={cls:.12f} dom={dom:.12f} kl={kl:.1e} align={labels}")


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    (root / "spec.cfg").write_text("")  # generator defaults
    assert main(["gen-data", "--config", str(root / "spec.cfg"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def direction(synthetic):
    spec = SynthSpec()
    assert (spec.train_docs, spec.dev_docs, spec.test_docs, spec.p_priv) == (2000, 250, 250, 0.8)
    cfg = synthetic / "direction.cfg"
    cfg.write_text(f"max_epochs={DIRECTION_EPOCHS}\n")
    base = TrainConfig()
    assert (base.embed_dim, base.word_hidden, base.sent_hidden, base.num_labels) == (16, 16, 16, 5)
    out = synthetic / "direction"
    rc = main(["compare", "--config", str(cfg), "--data", str(synthetic / "data"), "--out", str(out),
               "--variants", "naive,dann,daml", "--seeds", "0,1,2"])
    assert rc == 0
    rows = [r for r in read_report_csv(out / "compare.csv") if r["split"] == "target_test"]
    acc = {v: [float(r["acc"]) for r in rows if r["variant"] == v and r["seed"] != "mean"]
           for v in ("naive", "dann", "daml")}
    runs = json.loads((out / "manifest.json").read_text())["runs"]
    slowest = max(r["wall_clock_s"] for r in runs)
    return {v: float(np.mean(a)) for v, a in acc.items()}, acc, slowest


def test_criterion_5a_daml_beats_naive(direction):
    mean, acc, slowest = direction
    gain = mean["daml"] - mean["naive"]
    ok = gain >= 0.05 and slowest < 15 * 60
    assert verdict("5a", ok, f"DAML {mean['daml']:.4f} - Naive {mean['naive']:.4f} = {gain:+.4f} "
                             f"(per seed {acc}); slowest run {slowest:.0f}s")


def test_criterion_5b_daml_matches_dann(direction):
    mean, acc, slowest = direction
    ok = mean["daml"] >= mean["dann"] - 0.01 and slowest < 15 * 60
    assert verdict("5b", ok, f"DAML {mean['daml']:.4f} vs DANN {mean['dann']:.4f} - 0.01; "
                             f"slowest run {slowest:.0f}s")


SHORT = "max_steps=40\neval_every=10\nembed_dim=8\nword_hidden=8\nsent_hidden=8\n"


def test_criterion_6_training_curves(synthetic):
    (synthetic / "short.cfg").write_text(SHORT)
    out = synthetic / "curves"
    rc = main(["compare", "--config", str(synthetic / "short.cfg"), "--data", str(synthetic / "data"),
               "--out", str(out), "--variants", "dann,sml,daml", "--seeds", "0"])
    curves = read_report_csv(out / "curves.csv")
    found = {}
    for r in curves:
        step, acc = int(r["step"]), float(r["target_dev_acc"])
        assert 0.0 <= acc <= 1.0
        found.setdefault(r["variant"], set()).add(step)
    ok = rc == 0 and set(found) == {"dann", "sml", "daml"} and all(s == {10, 20, 30, 40} for s in found.values())
    assert verdict(6, ok, f"rc={rc}, curve steps per variant {{{', '.join(f'{k}: {sorted(v)}' for k, v in sorted(found.items()))}}}")


def test_criterion_7_determinism(synthetic):
    (synthetic / "short.cfg").write_text(SHORT)
    outs = [synthetic / f"det{i}" for i in (1, 2)]
    rcs = [main(["train", "--config", str(synthetic / "short.cfg"), "--data", str(synthetic / "data"),
                 "--out", str(o), "--variant", "daml", "--seed", "4", "--quiet"]) for o in outs]
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
            for f in ("train_log.jsonl", "checkpoint.ckpt")}
    assert verdict(7, rcs == [0, 0] and all(same.values()), f"rc={rcs}, identical={same}")


def test_criterion_8_prober_ablation(synthetic):
    (synthetic / "short.cfg").write_text(SHORT)
    out = synthetic / "prober"
    rc = main(["ablate-prober", "--config", str(synthetic / "short.cfg"), "--data", str(synthetic / "data"),
               "--out", str(out), "--seeds", "0"])
    rows = read_report_csv(out / "prober_ablation.csv")
    cols = list(rows[0]) if rows else []
    filled = all(0.0 <= float(r[k]) <= 1.0 for r in rows for k in ("target", "source", "both"))
    ok = rc == 0 and cols == ["task", "seed", "target", "source", "both"] and filled
    assert verdict(8, ok, f"rc={rc}, columns={cols}, rows={len(rows)}")


def test_criterion_9_checkpoint_round_trip(tmp_path):
    from daml.corpus import Vocab
    cfg = TrainConfig(variant="daml", embed_dim=5, word_hidden=4, sent_hidden=3, batch_size=4)
    vocab = Vocab([f"w{i}" for i in range(10)])
    groups = init_groups(cfg, len(vocab))
    docs = [Document("s", [[2, 3, 4], [5]], 2, SOURCE), Document("t", [[6, 7], [8, 9, 10]], None, TARGET)]
    train_step(groups, pad_documents(docs), cfg)  # move away from the init values
    path = tmp_path / "m.ckpt"
    snapshot(groups, cfg, 1, {}, vocab).save(path)
    back = restore_groups(Checkpoint.load(path))
    probe = pad_documents(docs + [Document("x", [[11]], 1, SOURCE)])
    ok = True
    with ad.no_grad():
        for g_live, g_new in zip(groups, back):
            a, b = forward(g_live, probe, cfg), forward(g_new, probe, cfg)
            for x, y in ((a.d, b.d), (a.cls, b.cls), (a.dom, b.dom), (a.prob, b.prob)):
                ok &= np.array_equal(x.value, y.value)
    assert verdict(9, ok, f"{len(groups)} groups, forward outputs bit-identical={ok}")
