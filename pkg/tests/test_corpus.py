import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daml.config import ConfigError, from_mapping, parse_kv_text
from daml.corpus import (SOURCE, TARGET, Document, SynthSpec, Vocab, align_labels, encode_docs,
                         gen_synthetic, make_batches, pad_documents, parse_corpus, read_lexicons,
                         tokenize, write_corpus, write_synthetic)


def test_parse_one_line(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("4\tgreat phone\tbattery lasts\n")
    docs, vocab = parse_corpus(p)
    assert len(docs) == 1
    assert docs[0].label == 4
    assert [vocab.decode(s) for s in docs[0].sentences] == [["great", "phone"], ["battery", "lasts"]]


def test_parse_empty_file(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("")
    assert parse_corpus(p)[0] == []


def test_parse_unlabeled_and_sentence_punctuation(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("-\tGood. Really good!\n")
    docs, vocab = parse_corpus(p, domain=TARGET)
    assert docs[0].label is None and docs[0].domain == TARGET
    assert len(docs[0].sentences) == 2


@pytest.mark.parametrize("line, msg", [("6\tfoo\n", "outside 1..5"), ("x\tfoo\n", "bad label"),
                                       ("3\n", "expected label")])
def test_parse_errors_carry_line_number(tmp_path, line, msg):
    p = tmp_path / "c.tsv"
    p.write_text("1\tok\n" + line)
    with pytest.raises(ValueError, match=f"c.tsv:2: .*{msg}"):
        parse_corpus(p)


def test_unknown_tokens_map_to_unk(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("2\tnever seen\n")
    docs, _ = parse_corpus(p, Vocab(["seen"]))
    assert docs[0].sentences == [[1, 2]]


def test_tokenize():
    assert tokenize("The Food.  was GOOD?! ok") == [["the", "food"], ["was", "good"], ["ok"]]


def test_vocab_build_is_count_then_alpha():
    from daml.corpus import RawDoc
    v = Vocab.build([RawDoc(1, [["b", "a", "c", "a"]]), RawDoc(2, [["c"]])])
    assert v.tokens() == ["a", "c", "b"]
    assert v.get("<pad>") == 0 and v.get("<unk>") == 1


def test_write_parse_round_trip(tmp_path):
    corpus = gen_synthetic(SynthSpec(train_docs=20, dev_docs=5, test_docs=5))
    raw = corpus.splits["source_train"]
    vocab = Vocab.build(raw)
    docs = encode_docs(raw, vocab, SOURCE)
    p = tmp_path / "rt.tsv"
    write_corpus(p, docs, vocab)
    back, _ = parse_corpus(p, vocab)
    assert [d.sentences for d in back] == [d.sentences for d in docs]
    assert [d.label for d in back] == [d.label for d in docs]


# --- labels -----------------------------------------------------------------


def test_align_labels_table():
    assert [align_labels(i) for i in range(1, 11)] == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
    assert align_labels(7) == 4


@pytest.mark.parametrize("bad", [0, 11, -3, 2.5, True])
def test_align_labels_out_of_range(bad):
    with pytest.raises(ValueError):
        align_labels(bad)


# --- batching ---------------------------------------------------------------


def docs_of(n_src, n_tgt):
    src = [Document(f"s{i}", [[2 + i]], 1, SOURCE) for i in range(n_src)]
    tgt = [Document(f"t{i}", [[2 + i]], None, TARGET) for i in range(n_tgt)]
    return src + tgt


def test_balanced_batches():
    batches = make_batches(docs_of(4, 4), 4, seed=0)
    assert len(batches) == 2
    for b in batches:
        assert sorted(b.domains.tolist()) == [0, 0, 1, 1]
    ids = sorted(d.doc_id for b in batches for d in b.docs)
    assert ids == sorted(d.doc_id for d in docs_of(4, 4))


def test_short_stream_recycles():
    batches = make_batches(docs_of(6, 2), 4, seed=1)
    assert len(batches) == 3
    for b in batches:
        assert sorted(b.domains.tolist()) == [0, 0, 1, 1]
    src_ids = [d.doc_id for b in batches for d in b.docs if d.domain == SOURCE]
    tgt_ids = [d.doc_id for b in batches for d in b.docs if d.domain == TARGET]
    assert sorted(src_ids) == [f"s{i}" for i in range(6)]
    # 6 target slots from 2 documents: three full passes, each a permutation
    for k in range(0, 6, 2):
        assert sorted(tgt_ids[k:k + 2]) == ["t0", "t1"]


def test_batches_are_deterministic():
    a = make_batches(docs_of(7, 5), 4, seed=3)
    b = make_batches(docs_of(7, 5), 4, seed=3)
    assert [[d.doc_id for d in x.docs] for x in a] == [[d.doc_id for d in x.docs] for x in b]


def test_half_half_needs_both_domains():
    with pytest.raises(ValueError):
        make_batches(docs_of(4, 0), 4, seed=0)
    with pytest.raises(ValueError):
        make_batches(docs_of(4, 4), 3, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([2, 4, 6]))
def test_every_document_appears_each_epoch(ns, nt, bs):
    docs = docs_of(ns, nt)
    batches = make_batches(docs, bs, seed=0)
    seen = {d.doc_id for b in batches for d in b.docs}
    assert seen == {d.doc_id for d in docs}


def test_pad_documents_masks():
    b = pad_documents([Document("a", [[2, 3, 4], [5]], 2), Document("b", [[6]], None, TARGET)])
    assert b.tokens.shape == (2, 2, 3)
    assert b.word_mask[0].tolist() == [[True, True, True], [True, False, False]]
    assert b.sent_mask.tolist() == [[True, True], [True, False]]
    assert b.labels.tolist() == [2, -1]


def test_document_must_have_tokens():
    with pytest.raises(ValueError):
        Document("x", [])
    with pytest.raises(ValueError):
        Document("x", [[]])


# --- synthetic generator ----------------------------------------------------


def small(**kw):
    base = dict(train_docs=60, dev_docs=20, test_docs=20)
    base.update(kw)
    return SynthSpec(**base)


def test_lexicons_disjoint():
    lex = gen_synthetic(small()).lexicons
    groups = {
        "pivot": lex["pivot_pos"] + lex["pivot_neg"],
        "source": lex["source_pos"] + lex["source_neg"],
        "target": lex["target_pos"] + lex["target_neg"],
        "neutral": lex["neutral"],
    }
    seen = {}
    for name, words in groups.items():
        for w in words:
            assert w not in seen, (w, name, seen.get(w))
            seen[w] = name


def test_domains_never_share_private_words():
    c = gen_synthetic(small())
    lex = c.lexicons
    tgt_priv = set(lex["target_pos"] + lex["target_neg"])
    src_priv = set(lex["source_pos"] + lex["source_neg"])
    for name, docs in c.splits.items():
        other = tgt_priv if name.startswith("source") else src_priv
        assert not any(t in other for d in docs for s in d.sentences for t in s)


def test_noise_free_rating_five_is_all_positive():
    c = gen_synthetic(small(noise=0.0))
    lex = c.lexicons
    negative = set(lex["pivot_neg"] + lex["source_neg"] + lex["target_neg"])
    positive = set(lex["pivot_pos"] + lex["source_pos"] + lex["target_pos"])
    fives = [d for docs in c.splits.values() for d in docs if d.label == 5]
    assert fives
    for d in fives:
        toks = [t for s in d.sentences for t in s]
        assert not negative.intersection(toks)
        assert positive.intersection(toks)


def test_no_private_words_when_p_priv_zero():
    c = gen_synthetic(small(p_priv=0.0))
    lex = c.lexicons
    private = set(lex["source_pos"] + lex["source_neg"] + lex["target_pos"] + lex["target_neg"])
    assert not any(t in private for docs in c.splits.values() for d in docs for s in d.sentences for t in s)


def test_generation_is_byte_identical(tmp_path):
    a = write_synthetic(gen_synthetic(small(seed=5)), tmp_path / "a")
    b = write_synthetic(gen_synthetic(small(seed=5)), tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()
    c = write_synthetic(gen_synthetic(small(seed=6)), tmp_path / "c")
    assert a["source_train"].read_bytes() != c["source_train"].read_bytes()


def test_written_splits(tmp_path):
    paths = write_synthetic(gen_synthetic(small()), tmp_path)
    assert len([n for n in paths if n != "lexicons"]) == 6
    target_train, _ = parse_corpus(paths["target_train"], domain=TARGET)
    assert len(target_train) == 60 and all(d.label is None for d in target_train)
    source_test, _ = parse_corpus(paths["source_test"])
    assert len(source_test) == 20 and all(1 <= d.label <= 5 for d in source_test)
    lex = read_lexicons(paths["lexicons"])
    assert len(lex["pivot_pos"]) == SynthSpec().pivot_size // 2


@pytest.mark.parametrize("bad", [dict(train_docs=0), dict(p_priv=1.5), dict(noise=-0.1),
                                 dict(private_size=3), dict(sent_min=3, sent_max=2)])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        SynthSpec(**bad)


def test_spec_from_key_value_text():
    spec = from_mapping(SynthSpec, parse_kv_text("p_priv = 0.5  # half\ntrain_docs=10\n"))
    assert spec.p_priv == 0.5 and spec.train_docs == 10
    with pytest.raises(ConfigError, match="bogus"):
        from_mapping(SynthSpec, {"bogus": "1"})


def test_bag_of_words_oracle_sees_the_shift():
    """Logistic regression over sentiment-lexicon counts: strong on source, weak on target."""
    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression

    c = gen_synthetic(SynthSpec(train_docs=200, dev_docs=200, test_docs=200, p_priv=0.8))
    lex = c.lexicons
    vocab = sorted({w for k, words in lex.items() if k != "neutral" for w in words})
    text = lambda n: [" ".join(" ".join(s) for s in d.sentences) for d in c.splits[n]]
    labels = lambda n: [d.label for d in c.splits[n]]
    vec = CountVectorizer(token_pattern=r"\S+", vocabulary=vocab)
    clf = LogisticRegression(max_iter=10000, C=1e4).fit(vec.transform(text("source_train")),
                                                       labels("source_train"))
    src = clf.score(vec.transform(text("source_test")), labels("source_test"))
    tgt = clf.score(vec.transform(text("target_test")), labels("target_test"))
    assert src >= 0.9
    assert tgt <= src - 0.3
