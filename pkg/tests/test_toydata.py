from bptrank import toydata
from bptrank.corpus import normalize_text, prepare_chunks, write_documents
from bptrank.pipeline import bundled_corpus_path, load_documents



def test_bundled_corpus_matches_generator(tmp_path):
    path = tmp_path / "gen.jsonl"
    write_documents(toydata.generate_corpus(), path)
    assert path.read_bytes() == bundled_corpus_path().read_bytes()



def test_generator_is_seeded():
    a = toydata.generate_corpus(n_docs=10, seed=3)
    assert a == toydata.generate_corpus(n_docs=10, seed=3)
    assert a != toydata.generate_corpus(n_docs=10, seed=4)



def test_toy_documents_are_single_chunks():
    docs = load_documents()
    assert len({d.id for d in docs}) == 200
    assert {d.source for d in docs} == {"wiki", "repo", "book"}
    chunks, discards = prepare_chunks(docs, 32, 64)
    assert len(chunks) == 200 and not discards
    assert all(len(c.sentences) == 5 for c in chunks)



def test_toy_text_is_already_normalized():
    for d in load_documents()[:50]:
        assert normalize_text(d.text) == d.text



def test_syllables_unique():
    pool = toydata.syllables(0)
    assert len(pool) == len(set(pool)) > 1000
    assert all(s == normalize_text(s) for s in pool[:500])
