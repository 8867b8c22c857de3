"""JSON-lines corpora: one ``{"text", "label", "meta"}`` object per line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .detector import Sample
from .tokenspace import Bridge, Vocabulary, VocabError, encode_llm


class CorpusError(ValueError):
    pass


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(rec, dict) or "text" not in rec:
                raise CorpusError(f"{path}:{lineno}: expected an object with a 'text' field")
            if "label" in rec and rec["label"] not in (0, 1):
                raise CorpusError(f"{path}:{lineno}: label must be 0 or 1")
            out.append(rec)
    return out


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def sample_to_record(s: Sample) -> dict:
    meta = dict(s.meta)
    meta["ref_ids"] = list(s.ref_ids)
    return {"text": s.text, "label": int(s.label), "meta": meta}


def record_to_sample(rec: dict, llm_vocab: Vocabulary | None = None, ref_vocab: Vocabulary | None = None,
                     bridge_n: int = 30) -> Sample:
    """Use stored reference ids when present, otherwise bridge-encode the text."""
    meta = dict(rec.get("meta") or {})
    ids = meta.pop("ref_ids", None)
    if ids is None:
        if llm_vocab is None or ref_vocab is None:
            raise CorpusError("record has no ref_ids and no vocabularies were given to encode it")
        ids = Bridge(llm_vocab, ref_vocab, bridge_n).encode(list(encode_llm(rec["text"], llm_vocab).ids))
    elif ref_vocab is not None and any(not 0 <= int(i) < ref_vocab.n_ids for i in ids):
        raise VocabError("stored ref_ids fall outside the reference vocabulary")
    return Sample(tuple(int(i) for i in ids), int(rec.get("label", 0)), rec["text"], meta)


def read_samples(path: str | Path, llm_vocab=None, ref_vocab=None, bridge_n: int = 30) -> list[Sample]:
    return [record_to_sample(r, llm_vocab, ref_vocab, bridge_n) for r in read_jsonl(path)]


def write_samples(samples: Iterable[Sample], path: str | Path) -> None:
    write_jsonl((sample_to_record(s) for s in samples), path)
