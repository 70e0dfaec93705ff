import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kbqa.corpus import Corpus, Provenance, QDPair, Query
from kbqa.encoder import (NegativeMiningError, NonFiniteStepError, ParameterGradients, TrainableEncoder, TrainBatch,
                          infonce_grad, infonce_loss, mine_negatives, sample_negatives, train_step)
from kbqa.sparse import build_sparse
from oracles import gradient_errors, infonce_mp, random_instance


def test_infonce_identities():
    assert infonce_loss(3.7, []) == 0.0
    assert abs(infonce_loss(1.25, [1.25]) - math.log(2)) < 1e-12
    base = infonce_loss(0.3, [1.1, -0.4, 2.0])
    assert abs(infonce_loss(100.3, [101.1, 99.6, 102.0]) - base) < 1e-9


def test_infonce_matches_high_precision():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(scale=20, size=int(rng.integers(1, 9)))
        t = float(rng.uniform(0.05, 2))
        assert infonce_loss(s[0], s[1:], t) == pytest.approx(infonce_mp(s[0], s[1:], t), rel=1e-12, abs=1e-12)


def test_infonce_is_stable_for_large_scores():
    assert math.isfinite(infonce_loss(1000.0, [-1000.0, 999.0]))
    with pytest.raises(ValueError):
        infonce_loss(float("nan"), [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    enc, batch, corpus = random_instance(seed, n_neg=1 + seed % 3)
    _, n_bad = gradient_errors(enc, batch, corpus)
    assert n_bad == 0


def test_fit_builds_vocab_with_unk_row():
    enc = TrainableEncoder(dim=8).fit(["b a", "a c"])
    assert enc.vocab_ == {"<unk>": 0, "b": 1, "a": 2, "c": 3}
    assert enc.embedding_table_.shape == (4, 8)
    assert list(enc.token_ids("a zzz")) == [2, 0]


def test_encode_truncates_and_rejects_empty():
    enc = TrainableEncoder(dim=4, max_len=3).fit(["a b c d e"])
    assert enc.encode("a b c d e").shape == (3, 4)
    assert enc.encode("a b c d e", max_len=5).shape == (5, 4)
    with pytest.raises(ValueError, match="empty"):
        enc.encode("!!!")


def test_transform_and_clone():
    enc = TrainableEncoder(dim=4, random_state=3)
    with pytest.raises(NotFittedError):
        enc.encode("a")
    out = enc.fit(["x y", "z"]).transform(["x y", "z"])
    assert [o.shape for o in out] == [(2, 4), (1, 4)]
    params = clone(enc).get_params()
    assert params["dim"] == 4 and params["random_state"] == 3


def test_same_seed_same_init():
    a = TrainableEncoder(dim=6, random_state=5).fit(["p q r"])
    b = TrainableEncoder(dim=6, random_state=5).fit(["p q r"])
    assert np.array_equal(a.embedding_table_, b.embedding_table_)
    assert np.array_equal(a.projection_, b.projection_)


def make_toy():
    corpus = Corpus.from_texts([("pos", "vpn password reset guide"), ("n1", "printer toner jam"),
                                ("n2", "email quota limit"), ("n3", "vpn client install")])
    enc = TrainableEncoder(dim=8, random_state=0).fit([d.text for d in corpus] + ["reset vpn password"])
    batch = TrainBatch(Query("q", "reset vpn password"), "pos", ["n1", "n2", "n3"])
    return enc, batch, corpus


def test_train_step_lowers_loss():
    enc, batch, corpus = make_toy()
    before = enc.batch_loss(batch, corpus)
    for _ in range(30):
        train_step(enc, batch, 0.05, corpus)
    assert enc.batch_loss(batch, corpus) < before
    assert enc.version_ == 30
    assert enc.version_tag.endswith("step=30")


def test_non_finite_step_rolls_back():
    enc, batch, corpus = make_toy()
    grads = infonce_grad(enc, batch, corpus)
    table = enc.embedding_table_.copy()
    bad = ParameterGradients(np.full_like(grads.table, np.nan), grads.projection, 0.0, 0.0)
    with pytest.raises(NonFiniteStepError):
        enc.apply_gradients(bad, 0.1)
    assert np.array_equal(enc.embedding_table_, table)
    assert enc.version_ == 0


def test_checkpoint_roundtrip(tmp_path):
    enc, batch, corpus = make_toy()
    train_step(enc, batch, 0.05, corpus)
    enc.save(tmp_path / "e.ckpt")
    back = TrainableEncoder.load(tmp_path / "e.ckpt")
    assert back.vocab_ == enc.vocab_ and back.version_ == 1 and back.dim == 8
    assert np.allclose(back.encode("vpn reset"), enc.encode("vpn reset"), atol=1e-6)
    (tmp_path / "bad.ckpt").write_bytes(b"xxxx")
    with pytest.raises(ValueError):
        TrainableEncoder.load(tmp_path / "bad.ckpt")


def test_batch_validation():
    with pytest.raises(ValueError, match="positive"):
        TrainBatch(Query("q", "x"), "a", ["a"])
    with pytest.raises(ValueError, match="distinct"):
        TrainBatch(Query("q", "x"), "a", ["b", "b"])


def test_sample_negatives():
    rng = np.random.default_rng(0)
    negs, short = sample_negatives(["a", "b", "c", "d"], "a", 2, rng)
    assert len(negs) == 2 and "a" not in negs and not short
    negs, short = sample_negatives(["a", "b"], "a", 5, rng)
    assert negs == ["b"] and short
    with pytest.raises(NegativeMiningError):
        sample_negatives(["a"], "a", 3, rng)


def test_mine_negatives_from_bm25_pool():
    _, _, corpus = make_toy()
    sparse = build_sparse(corpus)
    pair = QDPair(Query("q", "vpn reset"), "pos", Provenance.GENERATED)
    batch = mine_negatives(sparse, pair, k_neg=7, pool=10, rng=0)
    # only n3 shares a term with the query besides the positive
    assert batch.negatives == ["n3"] and batch.short
