import json

import numpy as np
import pytest

from smoothmark import bundle, records
from smoothmark.bundle import Bundle, ChecksumError, CorruptBundleError, VersionError
from smoothmark.detector import DetectorModel, Sample
from smoothmark.tokenspace import VocabError


@pytest.fixture
def det(ref_vocab):
    return DetectorModel(ref_vocab.table, seed=2, embedding_checksum=ref_vocab.checksum())


def test_model_round_trips(tmp_path, det, gen, lm, ref_vocab, llm_vocab):
    for model, kind, vocab in ((det, "detector", ref_vocab), (gen, "generator", ref_vocab), (lm, "lm", llm_vocab)):
        path = tmp_path / f"{kind}.json"
        bundle.save_model(model, path, {"note": kind})
        again = bundle.load_model(path, kind, vocab)
        assert bundle.digest(again.to_payload()) == bundle.digest(model.to_payload())
        assert bundle.load_bundle(path).meta == {"note": kind}


def test_save_is_byte_stable(tmp_path, det):
    bundle.save_model(det, tmp_path / "a.json")
    bundle.save_model(det, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_tampered_payload_detected(tmp_path, det, ref_vocab):
    path = tmp_path / "d.json"
    bundle.save_model(det, path)
    doc = json.loads(path.read_text())
    doc["payload"]["weights"]["W1"]["data"][0] += 1e-9
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptBundleError, match="digest"):
        bundle.load_model(path, "detector", ref_vocab)


def test_truncated_file_detected(tmp_path, det, ref_vocab):
    path = tmp_path / "d.json"
    bundle.save_model(det, path)
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(CorruptBundleError):
        bundle.load_model(path, "detector", ref_vocab)
    path.write_text('{"kind": "detector"}')
    with pytest.raises(CorruptBundleError, match="missing"):
        bundle.load_bundle(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "x.json"
    bundle.save_bundle(Bundle("lm", {"a": 1}, format_version=99), path)
    with pytest.raises(VersionError):
        bundle.load_bundle(path)


def test_checksum_and_kind_mismatch(tmp_path, det, ref_vocab, llm_vocab):
    path = tmp_path / "d.json"
    bundle.save_model(det, path)
    with pytest.raises(ChecksumError):
        bundle.load_model(path, "detector", llm_vocab)
    with pytest.raises(bundle.BundleError, match="expected 'generator'"):
        bundle.load_model(path, "generator", ref_vocab)


def test_non_finite_payload_refused(tmp_path):
    with pytest.raises(ValueError):
        bundle.save_bundle(Bundle("lm", {"x": float("nan")}), tmp_path / "n.json")
    with pytest.raises(bundle.BundleError):
        bundle.save_bundle(Bundle("tokenizer", {}), tmp_path / "n.json")
    with pytest.raises(TypeError):
        bundle.save_model(object(), tmp_path / "n.json")


def test_jsonl_round_trip(tmp_path, ref_vocab, llm_vocab):
    samples = [Sample((1, 2, 3), 1, "a b c", {"source": "x"}), Sample((4, 5), 0, "d e", {})]
    records.write_samples(samples, tmp_path / "s.jsonl")
    back = records.read_samples(tmp_path / "s.jsonl", llm_vocab, ref_vocab)
    assert back == samples


def test_jsonl_bridge_encodes_plain_text(tmp_path, ref_vocab, llm_vocab):
    records.write_jsonl([{"text": "the cat said", "label": 1}], tmp_path / "t.jsonl")
    (s,) = records.read_samples(tmp_path / "t.jsonl", llm_vocab, ref_vocab)
    assert s.ref_ids == tuple(ref_vocab.id_of(w) for w in ("the", "cat", "said"))
    with pytest.raises(records.CorpusError):
        records.read_samples(tmp_path / "t.jsonl")


@pytest.mark.parametrize("line,msg", [("{bad", ":1:"), ('{"label": 1}', "text"), ('{"text": "a", "label": 3}', "label")])
def test_jsonl_errors(tmp_path, line, msg):
    p = tmp_path / "bad.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(records.CorpusError, match=msg):
        records.read_jsonl(p)


def test_stored_ids_checked_against_vocab(tmp_path, ref_vocab):
    records.write_jsonl([{"text": "", "label": 0, "meta": {"ref_ids": [ref_vocab.n_ids]}}], tmp_path / "o.jsonl")
    with pytest.raises(VocabError):
        records.read_samples(tmp_path / "o.jsonl", None, ref_vocab)


def test_rng_streams_are_keyed():
    from smoothmark.rng import as_rng, make_rng
    a = make_rng(1, 2).random(4)
    assert np.array_equal(a, make_rng(1, 2).random(4))
    assert not np.array_equal(a, make_rng(1, 3).random(4))
    g = make_rng(5)
    assert as_rng(g) is g
    assert np.array_equal(as_rng(7).random(3), make_rng(7).random(3))
