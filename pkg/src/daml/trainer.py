"""Group construction, the simultaneous-snapshot training step, early stopping,
checkpoints and model selection."""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Node, NumericError
from .config import ConfigError, config_hash, substream
from .corpus import SOURCE, Batch, Document, Vocab, iter_chunks, make_batches, pad_documents
from .layers import (EmbeddingTable, ExtractorParams, HeadParams, extract, head_forward,
                     init_extractor, init_head, load_embeddings)
from .metrics import Metrics, metrics_from_predictions
from .objectives import (PROBER_DOMAINS, VARIANTS, BatchOutputs, LossWeights,
                         group_objective)

COUPLED = ("sml", "fa", "daml")
SINGLE = ("naive", "dann")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "daml"
    num_groups: int = 0  # 0 picks 1 for naive/dann and 2 otherwise
    eta: float = 0.005
    lambda_d: float = 1.0
    lambda_m: float = 1.0
    prober_domain: str = "target"
    batch_size: int = 32
    max_epochs: int = 10
    max_steps: int = 0
    eval_every: int = 50
    patience: int = 10
    embed_dim: int = 16
    word_hidden: int = 16
    sent_hidden: int = 16
    attn_dim: int = 0
    head_layers: int = 1
    num_labels: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    share_embedding: bool = False
    dtype: str = "float64"
    embeddings: str = ""
    min_count: int = 1
    eval_batch: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.num_groups == 0:
            self.num_groups = 1 if self.variant in SINGLE else 2
        if self.variant in SINGLE and self.num_groups != 1:
            raise ConfigError(f"variant {self.variant!r} trains exactly one group")
        if self.variant not in SINGLE and self.num_groups < 2:
            raise ConfigError(f"variant {self.variant!r} needs num_groups >= 2")
        if self.prober_domain not in PROBER_DOMAINS:
            raise ConfigError(f"prober_domain must be one of {', '.join(PROBER_DOMAINS)}")
        if min(self.eta, self.lambda_d, self.lambda_m) < 0:
            raise ConfigError("eta, lambda_d and lambda_m must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        for name in ("max_epochs", "eval_every", "patience", "embed_dim", "word_hidden",
                     "sent_hidden", "num_labels", "eval_batch", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_layers < 0 or self.attn_dim < 0 or self.max_steps < 0:
            raise ConfigError("head_layers, attn_dim and max_steps must be >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.eta, self.lambda_d, self.lambda_m)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Group:
    gid: int
    extractor: ExtractorParams
    classifier: HeadParams
    discriminator: HeadParams | None = None
    prober: HeadParams | None = None
    owns_embedding: bool = True
    optim: dict = field(default_factory=dict)

    def bundles(self) -> dict[str, dict[str, Node]]:
        fe = self.extractor.named_parameters("fe")
        if not self.owns_embedding:
            fe.pop("fe.embedding.weights")
        out = {"fe": fe, "cls": self.classifier.named_parameters("cls")}
        if self.discriminator is not None:
            out["dom"] = self.discriminator.named_parameters("dom")
        if self.prober is not None:
            out["prb"] = self.prober.named_parameters("prb")
        return out

    def named_parameters(self) -> dict[str, Node]:
        out = {}
        for b in self.bundles().values():
            out.update(b)
        return out


def init_groups(cfg: TrainConfig, vocab_size: int, seeds: Sequence | None = None) -> list[Group]:
    """Group ``g`` (1-based) draws its parameters from the ``init-group-g`` stream.

    ``seeds`` overrides the per-group streams (anything ``default_rng`` accepts).
    """
    if seeds is None:
        seeds = [group_stream(cfg.seed, g) for g in range(1, cfg.num_groups + 1)]
    seeds = list(seeds)
    dt = cfg.np_dtype
    feat = 2 * cfg.sent_hidden
    shared: EmbeddingTable | None = None
    groups = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        fe = init_extractor(rng, vocab_size, cfg.embed_dim, cfg.word_hidden, cfg.sent_hidden,
                            cfg.attn_dim or None, dt, embedding=shared)
        if cfg.share_embedding and shared is None:
            shared = fe.embedding
        c = init_head(rng, feat, cfg.num_labels, cfg.head_layers, feat, "softmax", dt)
        d = init_head(rng, feat, 1, cfg.head_layers, feat, "sigmoid", dt) if cfg.variant != "naive" else None
        p = init_head(rng, feat, cfg.num_labels, cfg.head_layers, feat, "softmax", dt) if cfg.variant == "daml" else None
        g = Group(i + 1, fe, c, d, p, owns_embedding=not (cfg.share_embedding and i > 0))
        g.optim = {name: AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) for name in g.bundles()}
        groups.append(g)
    return groups


def forward(group: Group, batch: Batch, cfg: TrainConfig) -> BatchOutputs:
    d = extract(batch, group.extractor)
    cls = head_forward(d, group.classifier)
    dom = None
    if group.discriminator is not None and cfg.variant != "naive":
        dom = head_forward(ad.grad_reverse(d, cfg.eta), group.discriminator)
    prob = head_forward(d, group.prober) if group.prober is not None else None
    return BatchOutputs(d, cls, dom, prob, batch.domains, batch.labels)


def train_step(groups: list[Group], batch: Batch, cfg: TrainConfig) -> list[dict]:
    """One update of every group against the same pre-step peer snapshots."""
    if cfg.variant == "naive":
        batch = pad_documents([d for d in batch.docs if d.domain == SOURCE])
    records: list[dict] = []
    try:
        outs = [forward(g, batch, cfg) for g in groups]
        snaps = [o.snapshot() for o in outs]
        for i, (g, out) in enumerate(zip(groups, outs)):
            peers = [s for j, s in enumerate(snaps) if j != i] if cfg.variant in COUPLED else []
            total, parts = group_objective(cfg.variant, out, peers, cfg.weights, cfg.prober_domain)
            records.append(parts)
            if not np.isfinite(total.value):
                raise NumericError(f"non-finite objective {parts}")
            ad.backward(total)
    except NumericError as e:
        for g in groups:
            ad.zero_grads(g.named_parameters().values())
        raise TrainingError(f"numeric failure after components {records}: {e}") from e
    for g in groups:
        for name, bundle in g.bundles().items():
            params = list(bundle.values())
            ad.adam_step(params, g.optim[name])
            ad.zero_grads(params)
    return records


# --- inference --------------------------------------------------------------


def _map_docs(fn, docs: Sequence[Document], batch_size: int) -> np.ndarray:
    out = []
    with ad.no_grad():
        for chunk in iter_chunks(docs, batch_size):
            out.append(fn(pad_documents(chunk)))
    return np.concatenate(out, axis=0)


def features(group: Group, docs: Sequence[Document], batch_size: int = 128) -> np.ndarray:
    return _map_docs(lambda b: extract(b, group.extractor).value, docs, batch_size)


def class_probs(group: Group, docs: Sequence[Document], batch_size: int = 128) -> np.ndarray:
    return _map_docs(lambda b: head_forward(extract(b, group.extractor), group.classifier).value,
                     docs, batch_size)


def predict_labels(group: Group, docs: Sequence[Document], batch_size: int = 128) -> np.ndarray:
    return class_probs(group, docs, batch_size).argmax(axis=1) + 1


def ensemble_probs(dists: Sequence[np.ndarray]) -> np.ndarray:
    total = np.sum(dists, axis=0)
    return total / total.sum(axis=-1, keepdims=True)


def ne_predict(groups: Sequence[Group], docs, batch_size: int = 128) -> np.ndarray:
    """Summed and renormalised classifier distributions; one row per document."""
    single = isinstance(docs, Document)
    docs = [docs] if single else list(docs)
    probs = ensemble_probs([class_probs(g, docs, batch_size) for g in groups])
    return probs[0] if single else probs


def ensemble_labels(groups: Sequence[Group], docs: Sequence[Document], batch_size: int = 128) -> np.ndarray:
    return ne_predict(groups, docs, batch_size).argmax(axis=1) + 1


def group_metrics(groups, docs, cfg: TrainConfig) -> dict[int, Metrics]:
    truth = [d.label for d in docs]
    return {g.gid: metrics_from_predictions(truth, predict_labels(g, docs, cfg.eval_batch), cfg.num_labels)
            for g in groups}


# --- checkpoints ------------------------------------------------------------

MAGIC = b"DAMLCKPT1\n"


@dataclass
class Checkpoint:
    """Parameters of every group at one training step.

    File layout: ``MAGIC``, a little-endian uint64 header length, a UTF-8
    JSON header (config, hash, step, metrics, vocab, tensor index), then the
    tensors as contiguous row-major little-endian float64 in index order.
    """

    config: dict
    step: int
    params: dict            # "g1/fe.word_fwd.wz" -> ndarray
    metrics: dict           # "1" -> {"acc": .., "rmse": ..}
    vocab: list
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def save(self, path) -> None:
        index, offset = [], 0
        names = sorted(self.params)
        for name in names:
            arr = self.params[name]
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = {"format": 1, "config": self.config, "config_hash": self.config_hash,
                  "step": self.step, "metrics": self.metrics, "vocab": self.vocab, "tensors": index}
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in names:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        pos = len(MAGIC)
        (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        base = pos + hlen
        params = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            start = base + t["offset"]
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
            params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
        return cls(header["config"], header["step"], params, header["metrics"], header["vocab"],
                   header["config_hash"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)

    def group_ids(self) -> list[int]:
        return sorted({int(k.split("/")[0][1:]) for k in self.params})


def snapshot(groups: Sequence[Group], cfg: TrainConfig, step: int, metrics: dict, vocab: Vocab) -> Checkpoint:
    params = {}
    for g in groups:
        for name, p in g.named_parameters().items():
            params[f"g{g.gid}/{name}"] = p.value.astype(np.float64, copy=True)
    return Checkpoint(cfg.as_dict(), step, params, metrics, vocab.tokens())


def restore_groups(ckpt: Checkpoint) -> list[Group]:
    cfg = ckpt.train_config()
    groups = init_groups(cfg, len(ckpt.vocab) + 2)
    for g in groups:
        for name, p in g.named_parameters().items():
            p.value[...] = ckpt.params[f"g{g.gid}/{name}"]
    return groups


def select_best(accuracies: dict[int, float]) -> int:
    """Highest accuracy wins; ties go to the lowest group id."""
    return min(accuracies, key=lambda gid: (-accuracies[gid], gid))


def select_model(ckpt: Checkpoint, source_dev: Sequence[Document] | None = None) -> int:
    """Group whose classifier scores best on the source development set.

    Without ``source_dev`` the accuracies stored in the checkpoint (measured on
    the source dev set when it was saved) are used.
    """
    if source_dev is None:
        accs = {int(k): v["acc"] for k, v in ckpt.metrics.items() if k.isdigit()}
    else:
        cfg = ckpt.train_config()
        accs = {gid: m.accuracy for gid, m in group_metrics(restore_groups(ckpt), source_dev, cfg).items()}
    return select_best(accs)


# --- fit --------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list
    steps: int
    groups: list


def group_stream(seed: int, gid: int) -> np.random.SeedSequence:
    return substream(seed, f"init-group-{gid}")


def batch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return substream(seed, "batching", epoch)


def _evaluate(groups, cfg, splits) -> tuple[dict, float]:
    src = group_metrics(groups, splits["source_dev"], cfg)
    rec = {str(gid): {"source_dev_acc": m.accuracy, "source_dev_rmse": m.rmse} for gid, m in src.items()}
    tdev = splits.get("target_dev")
    if tdev and all(d.label is not None for d in tdev):
        for gid, m in group_metrics(groups, tdev, cfg).items():
            rec[str(gid)].update(target_dev_acc=m.accuracy, target_dev_rmse=m.rmse)
    if cfg.variant == "ne":
        truth = [d.label for d in splits["source_dev"]]
        ens = metrics_from_predictions(truth, ensemble_labels(groups, splits["source_dev"], cfg.eval_batch),
                                       cfg.num_labels)
        rec["ensemble"] = {"source_dev_acc": ens.accuracy, "source_dev_rmse": ens.rmse}
        if tdev and all(d.label is not None for d in tdev):
            tm = metrics_from_predictions([d.label for d in tdev],
                                          ensemble_labels(groups, tdev, cfg.eval_batch), cfg.num_labels)
            rec["ensemble"].update(target_dev_acc=tm.accuracy, target_dev_rmse=tm.rmse)
        score = ens.accuracy
    else:
        score = max(m.accuracy for m in src.values())
    return rec, score


def fit(cfg: TrainConfig, splits: dict, vocab: Vocab,
        log: Callable[[dict], None] | None = None, seeds: Sequence | None = None) -> FitResult:
    """Train with early stopping on the source dev set.

    ``splits`` needs ``source_train``, ``source_dev`` and ``target_train``;
    ``target_dev`` is optional and only logged. Target training labels are
    never read. ``seeds`` overrides the per-group init streams.
    """
    for key in ("source_train", "source_dev", "target_train"):
        if not splits.get(key):
            raise ValueError(f"split {key!r} is empty or missing")
    if any(d.label is None for d in splits["source_train"] + splits["source_dev"]):
        raise ValueError("source train/dev documents must be labeled")
    train_docs = [d for d in splits["source_train"] if d.domain == SOURCE]
    train_docs += [Document(d.doc_id, d.sentences, None, d.domain) for d in splits["target_train"]]
    if len(train_docs) != len(splits["source_train"]) + len(splits["target_train"]):
        raise ValueError("source_train must hold source-domain documents")

    groups = init_groups(cfg, len(vocab), seeds)
    if cfg.embeddings:
        for g in groups:
            if g.owns_embedding:
                load_embeddings(cfg.embeddings, vocab, g.extractor.embedding)

    history: list[dict] = []
    best, bad, step, epoch = -np.inf, 0, 0, 0
    ckpt: Checkpoint | None = None
    running = [defaultdict(list) for _ in groups]
    last_eval = -1

    def do_eval() -> bool:
        nonlocal best, bad, ckpt, last_eval
        rec, score = _evaluate(groups, cfg, splits)
        for g, acc in zip(groups, running):
            rec[str(g.gid)]["loss"] = {k: float(np.mean(v)) for k, v in sorted(acc.items())}
            acc.clear()
        improved = score > best
        entry = {"step": step, "epoch": epoch, "score": score, "checkpoint": improved, "groups": rec}
        history.append(entry)
        if log is not None:
            log(entry)
        last_eval = step
        if improved:
            best, bad = score, 0
            metrics = {k: {"acc": v["source_dev_acc"], "rmse": v["source_dev_rmse"]} for k, v in rec.items()}
            ckpt = snapshot(groups, cfg, step, metrics, vocab)
            return False
        bad += 1
        return bad >= cfg.patience

    stop = False
    for epoch in range(1, cfg.max_epochs + 1):
        for batch in make_batches(train_docs, cfg.batch_size, batch_seed(cfg.seed, epoch)):
            for acc, parts in zip(running, train_step(groups, batch, cfg)):
                for k, v in parts.items():
                    acc[k].append(v)
            step += 1
            if step % cfg.eval_every == 0:
                stop = do_eval()
            if stop or (cfg.max_steps and step >= cfg.max_steps):
                stop = True
                break
        if stop:
            break
    if last_eval != step:
        do_eval()
    return FitResult(ckpt, history, step, groups)
