"""Synthetic Vietnamese-flavored corpus for offline end-to-end runs.

Each document has a topic (a private pool of content syllables) and one
named entity; sentences mix topic words, corpus-wide filler, function
words and an occasional number. Numbers are rare and shared at random across
documents, so they create lexical collisions that carry no topical meaning.
"""

from __future__ import annotations

import itertools

import numpy as np

from .corpus import SOURCES, RawDocument

FUNCTION_WORDS = (
    "của là và được trong có cho với những các một này đã sẽ không khi để từ theo về "
    "như nhiều cũng đến tại rất vào ra đó sau trên nhưng hơn bởi vì thì mà lại"
).split()

_ONSETS = "b c ch d đ g gh h k kh l m n ng ngh nh ph qu r s t th tr v x".split()
_RHYMES = (
    "a ai am an ang anh ao au ay e em en eo i ia im in inh it o oi om on ong "
    "ot u ui um un ung ut ưa ưng ươi ươm uôn uông ênh ôn ơi"
).split()
_TONES = {"a": "aàáảãạ", "e": "eèéẻẽẹ", "i": "iìíỉĩị", "o": "oòóỏõọ", "u": "uùúủũụ",
          "ư": "ưừứửữự", "ê": "êềếểễệ", "ô": "ôồốổỗộ", "ơ": "ơờớởỡợ", "y": "yỳýỷỹỵ"}


def _with_tone(rhyme, tone):
    vowels = [i for i, ch in enumerate(rhyme) if ch in _TONES]
    if len(vowels) == 3 or (len(vowels) == 2 and vowels[-1] < len(rhyme) - 1):
        i = vowels[1]
    else:
        i = vowels[0]
    return rhyme[:i] + _TONES[rhyme[i]][tone] + rhyme[i + 1 :]


def _spelled(onset, rhyme):
    front = rhyme[0] in "eiê"
    if onset in ("gh", "k", "ngh"):
        return front
    return not (front and onset in ("c", "g", "ng", "qu"))


def syllables(seed=0):
    """Deterministic shuffled stream of distinct syllables."""
    pool = sorted({o + _with_tone(r, t) for o, r, t in itertools.product(_ONSETS, _RHYMES, range(6))
                   if _spelled(o, r)})
    pool = [s for s in pool if s not in FUNCTION_WORDS]
    order = np.random.default_rng(seed).permutation(len(pool))
    return [pool[i] for i in order]


def generate_corpus(n_docs=200, n_topics=20, concepts=12, variants=3, n_filler=80, n_entities=100,
                    n_numbers=600, sentences_per_doc=5, seed=0) -> list[RawDocument]:
    """Documents built from topic concepts, each written in one of several variant spellings.

    Variants of a concept behave like regional synonyms: a document mixes
    them freely, so exact-term overlap between two passages of one document
    is weaker than their shared topic.
    """
    rng = np.random.default_rng(seed)
    syl = iter(syllables(seed))
    topics = [[[next(syl) for _ in range(variants)] for _ in range(concepts)] for _ in range(n_topics)]
    filler = [next(syl) for _ in range(n_filler)]
    entities = [next(syl).capitalize() for _ in range(n_entities)]
    numbers = [str(x) for x in rng.choice(np.arange(100, 10000), size=n_numbers, replace=False)]

    docs = []
    for d in range(n_docs):
        topic = topics[int(rng.integers(n_topics))]
        entity = entities[int(rng.integers(n_entities))]
        sentences = []
        for _ in range(sentences_per_doc):
            words = [topic[c][int(rng.integers(variants))] for c in rng.choice(concepts, size=3, replace=False)]
            words += list(rng.choice(filler, size=1, replace=False))
            words += list(rng.choice(FUNCTION_WORDS, size=int(rng.integers(3, 5))))
            if rng.random() < 0.8:
                words.append(entity)
            if rng.random() < 0.5:
                words.append(numbers[int(rng.integers(n_numbers))])
            words = [words[i] for i in rng.permutation(len(words))]
            first = words[0]
            words[0] = first if first[0].isdigit() else first[0].upper() + first[1:]
            sentences.append(" ".join(words) + ".")
        docs.append(RawDocument(f"doc{d:04d}", SOURCES[d % 3], " ".join(sentences)))
    return docs
