"""Documents, vocabulary, batching and the synthetic two-domain review generator.

Corpus files hold one document per line::

    label<TAB>sentence<TAB>sentence...

where ``label`` is an integer rating or ``-`` for unlabeled documents and
each sentence is whitespace-separated tokens.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .config import ConfigError, substream

PAD, UNK = 0, 1
SOURCE, TARGET = 1, 0
DOMAIN_NAMES = {SOURCE: "source", TARGET: "target"}

_SENT_SPLIT = re.compile(r"[.!?]+")


@dataclass
class Document:
    doc_id: str
    sentences: list  # list of lists of token ids
    label: int | None = None
    domain: int = SOURCE

    def __post_init__(self):
        if not self.sentences or any(len(s) == 0 for s in self.sentences):
            raise ValueError(f"document {self.doc_id}: empty document or sentence")


@dataclass
class RawDoc:
    """Token strings before vocabulary lookup."""

    label: int | None
    sentences: list


class Vocab:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = ["<pad>", "<unk>"]
        self.stoi = {"<pad>": PAD, "<unk>": UNK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def get(self, token: str, default=None):
        return self.stoi.get(token, default)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def __len__(self):
        return len(self.itos)

    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[2:]

    @classmethod
    def build(cls, docs: Iterable[RawDoc], min_count: int = 1) -> "Vocab":
        counts = Counter(t for d in docs for s in d.sentences for t in s)
        # count desc, then token, so the id assignment is reproducible
        ranked = sorted((t for t, c in counts.items() if c >= min_count),
                        key=lambda t: (-counts[t], t))
        return cls(ranked)


def tokenize(field_text: str) -> list[list[str]]:
    """Lowercase, split sentences on ``.!?``, then tokens on whitespace."""
    out = []
    for piece in _SENT_SPLIT.split(field_text.lower()):
        toks = piece.split()
        if toks:
            out.append(toks)
    return out


def read_raw(path, num_labels: int = 5) -> list[RawDoc]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>sentence[<TAB>sentence...]")
            label_txt = parts[0].strip()
            if label_txt == "-":
                label = None
            else:
                try:
                    label = int(label_txt)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad label {label_txt!r}") from None
                if not 1 <= label <= num_labels:
                    raise ValueError(f"{path}:{lineno}: label {label} outside 1..{num_labels}")
            sentences = [s for p in parts[1:] for s in tokenize(p)]
            if not sentences:
                raise ValueError(f"{path}:{lineno}: document has no tokens")
            docs.append(RawDoc(label, sentences))
    return docs


def encode_docs(raw: Sequence[RawDoc], vocab: Vocab, domain: int, prefix: str = "") -> list[Document]:
    return [Document(f"{prefix}{i}", [vocab.encode(s) for s in r.sentences], r.label, domain)
            for i, r in enumerate(raw)]


def parse_corpus(path, vocab: Vocab | None = None, *, domain: int = SOURCE,
                 num_labels: int = 5, min_count: int = 1) -> tuple[list[Document], Vocab]:
    """Read a corpus file. With ``vocab=None`` a vocabulary is built from it."""
    raw = read_raw(path, num_labels)
    if vocab is None:
        vocab = Vocab.build(raw, min_count)
    prefix = f"{Path(path).stem}:"
    return encode_docs(raw, vocab, domain, prefix), vocab


def format_doc(label: int | None, sentences: Sequence[Sequence[str]]) -> str:
    lab = "-" if label is None else str(label)
    return "\t".join([lab] + [" ".join(s) for s in sentences])


def write_corpus(path, docs: Sequence[RawDoc | Document], vocab: Vocab | None = None,
                 drop_labels: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            sents = d.sentences if isinstance(d, RawDoc) else [vocab.decode(s) for s in d.sentences]
            fh.write(format_doc(None if drop_labels else d.label, sents) + "\n")


def align_labels(label: int) -> int:
    """Map a 1..10 rating onto 1..5 by halving and rounding up."""
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)) or not 1 <= label <= 10:
        raise ValueError(f"label must be an integer in 1..10, got {label!r}")
    return math.ceil(int(label) / 2)


# --- batching ---------------------------------------------------------------


@dataclass
class Batch:
    docs: list
    tokens: np.ndarray      # (B, S, W) int64, 0 = pad
    word_mask: np.ndarray   # (B, S, W) bool
    sent_mask: np.ndarray   # (B, S) bool
    labels: np.ndarray      # (B,) int64 ratings, -1 if unlabeled
    domains: np.ndarray     # (B,) int64

    def __len__(self):
        return len(self.docs)


def pad_documents(docs: Sequence[Document]) -> Batch:
    if not docs:
        raise ValueError("cannot pad an empty document list")
    n_s = max(len(d.sentences) for d in docs)
    n_w = max(len(s) for d in docs for s in d.sentences)
    tokens = np.zeros((len(docs), n_s, n_w), dtype=np.int64)
    for i, d in enumerate(docs):
        for j, s in enumerate(d.sentences):
            tokens[i, j, :len(s)] = s
    word_mask = np.zeros(tokens.shape, dtype=bool)
    sent_mask = np.zeros((len(docs), n_s), dtype=bool)
    for i, d in enumerate(docs):
        sent_mask[i, :len(d.sentences)] = True
        for j, s in enumerate(d.sentences):
            word_mask[i, j, :len(s)] = True
    labels = np.array([-1 if d.label is None else d.label for d in docs], dtype=np.int64)
    domains = np.array([d.domain for d in docs], dtype=np.int64)
    return Batch(list(docs), tokens, word_mask, sent_mask, labels, domains)


def _recycling_stream(items: Sequence, rng: np.random.Generator) -> Iterator:
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def make_batches(docs: Sequence[Document], batch_size: int, seed: int,
                 mix: str = "half") -> list[Batch]:
    """Split ``docs`` into padded mini-batches.

    ``mix="half"``: every batch holds ``batch_size/2`` source and
    ``batch_size/2`` target documents; the epoch length follows the longer
    domain and both streams recycle with a fresh shuffle when exhausted.
    ``mix="shuffle"``: one shuffled stream, last batch may be short.
    """
    rng = np.random.default_rng(seed)
    if mix == "shuffle":
        order = rng.permutation(len(docs))
        return [pad_documents([docs[i] for i in order[k:k + batch_size]])
                for k in range(0, len(docs), batch_size)]
    if mix != "half":
        raise ValueError(f"unknown mix policy {mix!r}")
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"half-half batching needs an even batch size >= 2, got {batch_size}")
    src = [d for d in docs if d.domain == SOURCE]
    tgt = [d for d in docs if d.domain == TARGET]
    if not src or not tgt:
        raise ValueError("half-half batching needs documents from both domains")
    half = batch_size // 2
    n_batches = math.ceil(max(len(src), len(tgt)) / half)
    s_stream, t_stream = _recycling_stream(src, rng), _recycling_stream(tgt, rng)
    batches = []
    for _ in range(n_batches):
        part = [next(s_stream) for _ in range(half)] + [next(t_stream) for _ in range(half)]
        batches.append(pad_documents(part))
    return batches


def iter_chunks(docs: Sequence, size: int) -> Iterator[list]:
    for k in range(0, len(docs), size):
        yield list(docs[k:k + size])


# --- synthetic generator ----------------------------------------------------


@dataclass
class SynthSpec:
    num_labels: int = 5
    pivot_size: int = 20
    private_size: int = 20
    neutral_size: int = 200
    train_docs: int = 2000
    dev_docs: int = 250
    test_docs: int = 250
    sent_min: int = 2
    sent_max: int = 5
    len_min: int = 4
    len_max: int = 10
    words_per_level: int = 3
    p_priv: float = 0.8
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("train_docs", "dev_docs", "test_docs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_labels < 2:
            raise ConfigError("num_labels must be >= 2")
        for name in ("pivot_size", "private_size"):
            v = getattr(self, name)
            if v < 2 or v % 2:
                raise ConfigError(f"{name} must be an even number >= 2 (half positive, half negative)")
        if self.neutral_size < 1:
            raise ConfigError("neutral_size must be >= 1")
        if not 1 <= self.sent_min <= self.sent_max:
            raise ConfigError("need 1 <= sent_min <= sent_max")
        if not 1 <= self.len_min <= self.len_max:
            raise ConfigError("need 1 <= len_min <= len_max")
        if self.words_per_level < 0:
            raise ConfigError("words_per_level must be >= 0")
        for name in ("p_priv", "noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class SynthCorpus:
    splits: dict = field(default_factory=dict)     # "source_train" -> list[RawDoc]
    lexicons: dict = field(default_factory=dict)   # "pivot_pos" -> list[str]


SPLIT_NAMES = tuple(f"{dom}_{part}" for dom in ("source", "target") for part in ("train", "dev", "test"))


def make_lexicons(spec: SynthSpec) -> dict[str, list[str]]:
    lex = {}
    hp, hq = spec.pivot_size // 2, spec.private_size // 2
    for pol in ("pos", "neg"):
        lex[f"pivot_{pol}"] = [f"piv_{pol}_{i:03d}" for i in range(hp)]
    for dom in ("source", "target"):
        for pol in ("pos", "neg"):
            lex[f"{dom}_{pol}"] = [f"{dom[:3]}_{pol}_{i:03d}" for i in range(hq)]
    lex["neutral"] = [f"w{i:04d}" for i in range(spec.neutral_size)]
    return lex


def _polarity_of(rating: int, k: int) -> tuple[int, float]:
    center = (k + 1) / 2
    diff = rating - center
    return (int(np.sign(diff)), abs(diff))


def _gen_doc(rng: np.random.Generator, spec: SynthSpec, lex: dict, domain: str) -> RawDoc:
    rating = int(rng.integers(1, spec.num_labels + 1))
    pol, strength = _polarity_of(rating, spec.num_labels)
    n_senti = int(round(spec.words_per_level * strength))
    n_sent = int(rng.integers(spec.sent_min, spec.sent_max + 1))
    lengths = rng.integers(spec.len_min, spec.len_max + 1, size=n_sent)
    slots = int(lengths.sum())
    if slots < n_senti:
        lengths[-1] += n_senti - slots
        slots = n_senti
    flat = list(rng.choice(lex["neutral"], size=slots))
    positions = rng.choice(slots, size=n_senti, replace=False)
    for pos in positions:
        word_pol = pol if rng.random() >= spec.noise else -pol
        tag = "pos" if word_pol > 0 else "neg"
        pool = lex[f"{domain}_{tag}"] if rng.random() < spec.p_priv else lex[f"pivot_{tag}"]
        flat[pos] = pool[int(rng.integers(len(pool)))]
    sentences, k = [], 0
    for n in lengths:
        sentences.append([str(t) for t in flat[k:k + n]])
        k += n
    return RawDoc(rating, sentences)


def gen_synthetic(spec: SynthSpec) -> SynthCorpus:
    """Two review domains that share pivot sentiment words and differ in private ones.

    Per document the rating is drawn first; ratings above/below the middle
    get ``words_per_level * |rating - middle|`` positive/negative words, each
    drawn from the domain's private lexicon with probability ``p_priv`` and
    from the shared pivot lexicon otherwise. The rest is neutral filler.
    """
    lex = make_lexicons(spec)
    sizes = {"train": spec.train_docs, "dev": spec.dev_docs, "test": spec.test_docs}
    root = substream(spec.seed, "synth")
    streams = root.spawn(len(SPLIT_NAMES))
    corpus = SynthCorpus(lexicons=lex)
    for name, ss in zip(SPLIT_NAMES, streams):
        domain, part = name.split("_")
        rng = np.random.default_rng(ss)
        corpus.splits[name] = [_gen_doc(rng, spec, lex, domain) for _ in range(sizes[part])]
    return corpus


def write_synthetic(corpus: SynthCorpus, out_dir) -> dict[str, Path]:
    """Write the six split files plus ``lexicons.txt``; target train is unlabeled."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLIT_NAMES:
        p = out_dir / f"{name}.tsv"
        write_corpus(p, corpus.splits[name], drop_labels=(name == "target_train"))
        paths[name] = p
    lp = out_dir / "lexicons.txt"
    with open(lp, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(corpus.lexicons):
            fh.write(f"{key}\t{' '.join(corpus.lexicons[key])}\n")
    paths["lexicons"] = lp
    return paths


def read_lexicons(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, _, toks = line.rstrip("\n").partition("\t")
            out[key] = toks.split()
    return out
