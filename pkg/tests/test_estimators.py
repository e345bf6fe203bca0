import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bptrank.errors import ValidationError
from bptrank.estimators import BM25Retriever, CrossEncoderReranker
from bptrank.mining import TripletRecord

from conftest import TINY_TEXTS, tiny_model

SMALL = dict(d_model=16, n_heads=2, n_layers=1, chunk_size=8, max_seq_len=32, epochs=2, batch_size=2)


def triplets():
    t = TINY_TEXTS
    return [{"query": t[i], "pos": [t[(i + 1) % 4]], "neg": [t[(i + 2) % 4]]} for i in range(4)]


def test_params_and_clone():
    est = CrossEncoderReranker(**SMALL)
    assert est.get_params()["d_model"] == 16
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    est.set_params(epochs=5)
    assert est.epochs == 5


def test_fit_predict_transform_rerank():
    est = CrossEncoderReranker(**SMALL).fit(triplets())
    assert len(est.trace_.epoch_means()) == 2
    scores = est.predict([(TINY_TEXTS[0], TINY_TEXTS[1]), (TINY_TEXTS[0], TINY_TEXTS[2])])
    assert scores.shape == (2,) and np.all(np.isfinite(scores))
    assert est.transform(TINY_TEXTS).shape == (4, 16)
    ranked = est.rerank(TINY_TEXTS[0], TINY_TEXTS[1:])
    assert sorted(i for i, _ in ranked) == [0, 1, 2]
    assert [s for _, s in ranked] == sorted((s for _, s in ranked), reverse=True)


def test_fit_accepts_records_and_is_reproducible():
    recs = [TripletRecord(d["query"], d["pos"], d["neg"]) for d in triplets()]
    a = CrossEncoderReranker(**SMALL).fit(recs)
    b = CrossEncoderReranker(**SMALL).fit(triplets())
    pairs = [(TINY_TEXTS[0], TINY_TEXTS[3])]
    assert np.array_equal(a.predict(pairs), b.predict(pairs))


def test_from_model():
    m = tiny_model()
    est = CrossEncoderReranker.from_model(m)
    assert est.d_model == 16 and est.predict([("hà nội", "thủ đô")]).shape == (1,)


def test_validation_errors():
    est = CrossEncoderReranker(**SMALL)
    with pytest.raises(NotFittedError):
        est.predict([("a", "b")])
    with pytest.raises(ValidationError):
        est.fit([])
    with pytest.raises(ValidationError):
        est.fit([{"query": "q", "pos": ["p"]}])
    with pytest.raises(ValidationError):
        est.fit([{"query": "q", "pos": ["p"], "neg": ["p"]}])
    with pytest.raises(ValidationError):
        est.fit(["not a triplet"])
    est = CrossEncoderReranker.from_model(tiny_model())
    with pytest.raises(ValidationError):
        est.predict([("only one",)])
    with pytest.raises(ValidationError):
        est.transform("a single string")
    with pytest.raises(ValidationError):
        est.transform([1, 2])


def test_bm25_retriever():
    r = BM25Retriever()
    with pytest.raises(NotFittedError):
        r.search("x")
    r.fit(["mưa to gió lớn", "trời nắng đẹp", "mưa phùn"])
    m = r.predict(["mưa", "nắng"])
    assert m.shape == (2, 3)
    assert m[0, 1] == 0 and m[0, 0] > 0 and m[1, 1] > 0
    assert [c.chunk_id for c in r.search("mưa", 5)] == ["000002", "000000"]
    assert clone(r).get_params() == {"k1": 1.2, "b": 0.75}
