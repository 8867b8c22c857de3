"""Regenerate the bundled fixture files under src/smoothmark/data/."""

import json
from pathlib import Path

from smoothmark import synth
from smoothmark.tokenspace import save_vocab

OUT = Path(__file__).resolve().parents[1] / "src" / "smoothmark" / "data"


def main() -> None:
    save_vocab(synth.build_reference_vocab(), OUT / "ref_vocab.txt")
    save_vocab(synth.build_llm_vocab(), OUT / "llm_vocab.txt")
    docs = synth.HumanSource(seed=0).documents(200, 250, seed=1)
    with (OUT / "human_corpus.jsonl").open("w", encoding="utf-8") as fh:
        for i, text in enumerate(docs):
            fh.write(json.dumps({"text": text, "label": 0, "meta": {"doc": i}}) + "\n")


if __name__ == "__main__":
    main()
