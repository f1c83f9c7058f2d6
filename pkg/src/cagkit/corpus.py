"""Document collections and QA pairs, with JSONL loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


@dataclass(frozen=True)
class QAPair:
    question: str
    answers: tuple[str, ...]
    doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.answers:
            raise ValidationError("QAPair needs at least one gold answer")


@dataclass(frozen=True)
class Corpus:
    docs: tuple[Document, ...] = ()
    _by_id: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        by_id = {}
        for doc in self.docs:
            if not doc.id:
                raise ValidationError("document id must be non-empty")
            if doc.id in by_id:
                raise ValidationError(f"duplicate document id {doc.id!r}")
            if not doc.text:
                raise ValidationError(f"document {doc.id!r} has empty text")
            by_id[doc.id] = doc
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs)

    def __getitem__(self, i: int) -> Document:
        return self.docs[i]

    def by_id(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise ValidationError(f"unknown document id {doc_id!r}") from None


def _require(obj: dict, key: str, line_no: int) -> str:
    if key not in obj:
        raise ParseError(f"missing field {key!r}", line_no)
    val = obj[key]
    if not isinstance(val, str):
        raise ParseError(f"field {key!r} must be a string", line_no)
    return val


def load_corpus(path) -> Corpus:
    """Read one JSON document per line: {"id", "title", "text"}.

    An empty file yields an empty corpus; malformed lines raise ParseError
    with a 1-based line number.
    """
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from None
            if not isinstance(obj, dict):
                raise ParseError("line is not a JSON object", line_no)
            docs.append(Document(id=_require(obj, "id", line_no),
                                 title=_require(obj, "title", line_no),
                                 text=_require(obj, "text", line_no)))
    return Corpus(tuple(docs))


def load_qa(path) -> list[QAPair]:
    """Read QA pairs, one JSON object per line.

    Expected fields: "question" (string), "answers" (list of strings),
    optional "doc_ids" (list of strings).
    """
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from None
            if not isinstance(obj, dict):
                raise ParseError("line is not a JSON object", line_no)
            question = _require(obj, "question", line_no)
            answers = obj.get("answers")
            if (not isinstance(answers, list) or not answers
                    or not all(isinstance(a, str) for a in answers)):
                raise ParseError("field 'answers' must be a non-empty list "
                                 "of strings", line_no)
            doc_ids = obj.get("doc_ids", [])
            if (not isinstance(doc_ids, list)
                    or not all(isinstance(d, str) for d in doc_ids)):
                raise ParseError("field 'doc_ids' must be a list of strings",
                                 line_no)
            pairs.append(QAPair(question=question, answers=tuple(answers),
                                doc_ids=tuple(doc_ids)))
    return pairs
