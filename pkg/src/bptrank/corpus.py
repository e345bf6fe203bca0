"""Text ingestion: normalization, sentence segmentation, chunking and ICT seeds."""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractError, EncodingError, IngestionError, ParseError
from .model import count_tokens

log = logging.getLogger(__name__)

SOURCES = ("wiki", "repo", "book", "other")

DEFAULT_ABBREVIATIONS = frozenset(
    {"TP.", "GS.", "PGS.", "TS.", "ThS.", "BS.", "KS.", "ThS", "Th.S.", "St.", "Mr.", "Mrs.", "Dr.", "Tp.", "Q.", "P.", "TT.", "v.v."}
)

TERMINATORS = ".!?…"
_CLOSERS = "\"'”’»)]"
_OPENERS = "\"“«([‘'"


@dataclass(frozen=True)
class RawDocument:
    id: str
    source: str
    text: str


@dataclass(frozen=True)
class Chunk:
    id: str
    doc_id: str
    sentences: tuple
    token_len: int

    @property
    def text(self):
        return " ".join(self.sentences)

    def to_json(self):
        return {"id": self.id, "doc_id": self.doc_id, "sentences": list(self.sentences), "token_len": self.token_len}


@dataclass(frozen=True)
class Discard:
    doc_id: str
    reason: str
    token_len: int
    n_sentences: int

    def to_line(self):
        return f"{self.doc_id}\t{self.reason}\t{self.token_len}\t{self.n_sentences}"


# ------------------------------------------------------------ normalization


@dataclass(frozen=True)
class Rewrite:
    source: str
    target: str
    not_after: str = ""


def load_rewrite_table(path=None) -> list[Rewrite]:
    """Read a ``from<TAB>to[<TAB>not_after]`` table; ``#`` starts a comment."""
    if path is None:
        text = resources.files("bptrank").joinpath("data/diacritics.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2 or not cols[0]:
            raise ParseError("expected from<TAB>to", n)
        table.append(Rewrite(unicodedata.normalize("NFC", cols[0]), unicodedata.normalize("NFC", cols[1]),
                             cols[2] if len(cols) > 2 else ""))
    return table


_DEFAULT_TABLE = None


def default_rewrite_table():
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_rewrite_table()
    return _DEFAULT_TABLE


def normalize_text(text, rewrite_table=None) -> str:
    """NFC-compose, then rewrite tone placements from the table in one pass.

    A table entry fires only where its match ends a syllable (the next
    character is not a letter) and the preceding character is not listed in
    its ``not_after`` guard. Longer entries win at each position.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(f"invalid UTF-8 at byte offset {exc.start}", exc.start) from None
    table = default_rewrite_table() if rewrite_table is None else rewrite_table
    table = [r if isinstance(r, Rewrite) else Rewrite(*r) for r in table]
    text = unicodedata.normalize("NFC", text)
    by_first = {}
    for r in sorted(table, key=lambda r: -len(r.source)):
        by_first.setdefault(r.source[0], []).append(r)
    out = []
    i, n = 0, len(text)
    while i < n:
        for r in by_first.get(text[i], ()):
            end = i + len(r.source)
            if text.startswith(r.source, i) and not (end < n and text[end].isalpha()):
                if not (r.not_after and i > 0 and text[i - 1] in r.not_after):
                    out.append(r.target)
                    i = end
                    break
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def spell_correct(text: str) -> str:
    """Pass-through stand-in for the external spelling-correction stage."""
    return text


# ------------------------------------------------------------ segmentation


def sentence_spans(text: str, abbreviations=DEFAULT_ABBREVIATIONS) -> list[tuple[int, int]]:
    """(start, end) offsets of sentences; the gaps between spans are whitespace."""
    spans = []
    n = len(text)
    start = 0
    while start < n and text[start].isspace():
        start += 1
    i = start
    while i < n:
        if text[i] not in TERMINATORS:
            i += 1
            continue
        end = i
        while end < n and text[end] in TERMINATORS:
            end += 1
        while end < n and text[end] in _CLOSERS:
            end += 1
        j = end
        while j < n and text[j].isspace():
            j += 1
        if j == end or j >= n:
            i = end
            continue
        k = j
        while k < n - 1 and text[k] in _OPENERS:
            k += 1
        nxt = text[k]
        if not (nxt.isupper() or nxt.isdigit()):
            i = end
            continue
        word_start = text.rfind(" ", start, i) + 1
        word = text[max(word_start, start) : end]
        if word in abbreviations or word.rstrip(_CLOSERS) in abbreviations:
            i = end
            continue
        spans.append((start, end))
        start = i = j
    stop = n
    while stop > start and text[stop - 1].isspace():
        stop -= 1
    if stop > start:
        spans.append((start, stop))
    return spans


def segment_sentences(text: str, abbreviations=DEFAULT_ABBREVIATIONS) -> list[str]:
    """Split after ``. ! ? …`` when whitespace and an uppercase letter or digit follow."""
    return [text[s:e] for s, e in sentence_spans(text, abbreviations)]


# ---------------------------------------------------------------- chunking


def chunk_segments(sentences, min_len=512, max_len=1024, doc_id="doc", discard_log=None) -> list[Chunk]:
    """Greedily merge adjacent sentences into chunks of ``min_len..max_len`` tokens.

    A chunk is closed when the next sentence would overflow ``max_len``.
    Closed chunks shorter than ``min_len`` or with a single sentence are
    discarded; a sentence longer than ``max_len`` is dropped (and breaks
    adjacency). Discards are appended to ``discard_log`` when given.
    """
    if not min_len < max_len:
        raise ContractError("min_len must be smaller than max_len")
    chunks = []
    cur, cur_len = [], 0

    def discard(reason, length, count):
        entry = Discard(doc_id, reason, length, count)
        if discard_log is not None:
            discard_log.append(entry)

    def close():
        nonlocal cur, cur_len
        if cur:
            if cur_len < min_len:
                discard("under_min_len", cur_len, len(cur))
            elif len(cur) < 2:
                discard("single_sentence", cur_len, 1)
            else:
                chunks.append(Chunk(f"{doc_id}-{len(chunks):04d}", doc_id, tuple(cur), cur_len))
        cur, cur_len = [], 0

    for sent in sentences:
        n = count_tokens(sent)
        if n > max_len:
            log.warning("dropping oversize sentence (%d tokens) in %s", n, doc_id)
            close()
            discard("oversize_sentence", n, 1)
            continue
        if cur_len + n > max_len:
            close()
        cur.append(sent)
        cur_len += n
    close()
    return chunks


def ict_seed(chunk: Chunk, rng: np.random.Generator) -> tuple[str, str]:
    """Sample one sentence as pseudo-query; the rest, in order, is the positive.

    Sentences contained verbatim in another sentence of the chunk are not
    eligible as the query, so the query never occurs inside its positive.
    """
    sents = list(chunk.sentences)
    if len(sents) < 2:
        raise ContractError(f"chunk {chunk.id} has fewer than 2 sentences")
    eligible = [i for i, s in enumerate(sents) if not any(s in t for j, t in enumerate(sents) if j != i)]
    if not eligible:
        raise ContractError(f"chunk {chunk.id} has no sentence usable as a query")
    idx = eligible[int(rng.integers(len(eligible)))]
    return sents[idx], " ".join(s for i, s in enumerate(sents) if i != idx)


# --------------------------------------------------------------- pipeline


def prepare_chunks(documents, min_len=512, max_len=1024, rewrite_table=None, abbreviations=DEFAULT_ABBREVIATIONS):
    """normalize -> spell-correct -> segment -> chunk, in document-id order."""
    chunks, discards = [], []
    for doc in sorted(documents, key=lambda d: d.id):
        text = spell_correct(normalize_text(doc.text, rewrite_table))
        chunks.extend(chunk_segments(segment_sentences(text, abbreviations), min_len, max_len, doc.id, discards))
    return chunks, discards


# --------------------------------------------------------------------- I/O


def _lines(source):
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from enumerate(fh, 1)
    else:
        yield from enumerate(source, 1)


def read_documents(source) -> list[RawDocument]:
    docs, seen = [], set()
    for n, line in _lines(source):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", n) from None
        if not isinstance(obj, dict) or not {"id", "text"} <= obj.keys():
            raise ParseError("document needs 'id' and 'text'", n)
        doc = RawDocument(str(obj["id"]), obj.get("source", "other"), obj["text"])
        if doc.source not in SOURCES:
            raise IngestionError(f"line {n}: unknown source {doc.source!r}")
        if doc.id in seen:
            raise IngestionError(f"line {n}: duplicate document id {doc.id!r}")
        if not doc.text.strip():
            raise IngestionError(f"line {n}: document {doc.id!r} has empty text")
        seen.add(doc.id)
        docs.append(doc)
    if not docs:
        raise IngestionError("no documents in input")
    return docs


def write_documents(docs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "source": d.source, "text": d.text}, ensure_ascii=False) + "\n")


def write_chunks(chunks, path):
    with open(path, "w", encoding="utf-8") as fh:
        for c in chunks:
            fh.write(json.dumps(c.to_json(), ensure_ascii=False) + "\n")


def read_chunks(source) -> list[Chunk]:
    chunks = []
    for n, line in _lines(source):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            chunks.append(Chunk(obj["id"], obj["doc_id"], tuple(obj["sentences"]), int(obj["token_len"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad chunk record: {exc}", n) from None
    return chunks


def write_discards(discards, path):
    with open(path, "w", encoding="utf-8") as fh:
        for d in discards:
            fh.write(d.to_line() + "\n")
