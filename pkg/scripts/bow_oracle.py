"""Bag-of-words logistic regression on the synthetic corpus: how large is the shift?

Fits on source train and scores source test and target test, once over the sentiment
lexicon only and once over every word.  Needs scikit-learn.

    python scripts/bow_oracle.py --docs 2000
"""
import argparse

from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from daml.corpus import SynthSpec, gen_synthetic


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=2000)
    ap.add_argument("--p-priv", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    c = gen_synthetic(SynthSpec(train_docs=args.docs, dev_docs=250, test_docs=250,
                                p_priv=args.p_priv, seed=args.seed))
    text = lambda n: [" ".join(" ".join(s) for s in d.sentences) for d in c.splits[n]]
    labels = lambda n: [d.label for d in c.splits[n]]
    lexicon = sorted({w for k, ws in c.lexicons.items() if k != "neutral" for w in ws})
    for name, vocab in (("lexicon", lexicon), ("all words", None)):
        vec = CountVectorizer(token_pattern=r"\S+", vocabulary=vocab)
        x = vec.fit_transform(text("source_train"))
        clf = LogisticRegression(max_iter=10000, C=1e4).fit(x, labels("source_train"))
        src = clf.score(vec.transform(text("source_test")), labels("source_test"))
        tgt = clf.score(vec.transform(text("target_test")), labels("target_test"))
        print(f"{name:10s} source_test={src:.3f} target_test={tgt:.3f}")


if __name__ == "__main__":
    run()
