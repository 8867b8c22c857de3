"""Versioned JSON bundles for language models, generators and detectors.

A bundle is one JSON object::

    {"format_version": 1, "kind": "detector", "vocab_checksum": "...",
     "payload_sha256": "...", "meta": {...}, "payload": {...}}

The digest covers the canonical serialization of ``payload``; loading
refuses unknown versions, corrupted files and vocabulary mismatches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

FORMAT_VERSION = 1
KINDS = ("lm", "generator", "detector")


class BundleError(ValueError):
    pass


class VersionError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


class CorruptBundleError(BundleError):
    pass


@dataclass
class Bundle:
    kind: str
    payload: dict
    vocab_checksum: str = ""
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj) -> str:
    return hashlib.sha256(canonical(obj).encode("utf-8")).hexdigest()


def save_bundle(bundle: Bundle, path: str | Path) -> str:
    """Write ``bundle`` and return its payload digest."""
    if bundle.kind not in KINDS:
        raise BundleError(f"unknown bundle kind {bundle.kind!r}")
    sha = digest(bundle.payload)
    doc = {
        "format_version": bundle.format_version,
        "kind": bundle.kind,
        "vocab_checksum": bundle.vocab_checksum,
        "payload_sha256": sha,
        "meta": bundle.meta,
        "payload": bundle.payload,
    }
    Path(path).write_text(canonical(doc) + "\n", encoding="utf-8")
    return sha


def load_bundle(path: str | Path, kind: str | None = None, vocab_checksum: str | None = None) -> Bundle:
    """Read and verify a bundle.

    ``kind`` and ``vocab_checksum``, when given, must match the stored values.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBundleError(f"{path}: not a readable bundle ({exc})") from None
    if not isinstance(doc, dict) or not {"format_version", "kind", "payload", "payload_sha256"} <= doc.keys():
        raise CorruptBundleError(f"{path}: missing bundle fields")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {doc['format_version']!r} is not supported "
                           f"(expected {FORMAT_VERSION})")
    try:
        ok = digest(doc["payload"]) == doc["payload_sha256"]
    except ValueError:
        ok = False
    if not ok:
        raise CorruptBundleError(f"{path}: payload digest mismatch")
    if kind is not None and doc["kind"] != kind:
        raise BundleError(f"{path}: holds a {doc['kind']!r} bundle, expected {kind!r}")
    stored = doc.get("vocab_checksum", "")
    if vocab_checksum is not None and stored != vocab_checksum:
        raise ChecksumError(f"{path}: saved under vocabulary {stored[:12]}..., "
                            f"loaded with {vocab_checksum[:12]}...")
    return Bundle(doc["kind"], doc["payload"], stored, doc.get("meta", {}), doc["format_version"])


# --- typed helpers -------------------------------------------------------------

def save_model(model, path: str | Path, meta: dict | None = None) -> str:
    from .detector import DetectorModel
    from .toylm import ToyLM
    from .wmgen import GeneratorModel

    if isinstance(model, DetectorModel):
        b = Bundle("detector", model.to_payload(), model.embedding_checksum)
    elif isinstance(model, GeneratorModel):
        b = Bundle("generator", model.to_payload(), model.vocab_checksum)
    elif isinstance(model, ToyLM):
        b = Bundle("lm", model.to_payload(), model.vocab_checksum)
    else:
        raise TypeError(f"cannot bundle {type(model).__name__}")
    b.meta = dict(meta or {})
    return save_bundle(b, path)


def load_model(path: str | Path, kind: str, vocab):
    """Load a model of ``kind`` bound to ``vocab`` (whose checksum must match)."""
    from .detector import DetectorModel
    from .toylm import ToyLM
    from .wmgen import GeneratorModel

    b = load_bundle(path, kind, vocab.checksum())
    try:
        if kind == "detector":
            return DetectorModel.from_payload(b.payload, vocab)
        if kind == "generator":
            return GeneratorModel.from_payload(b.payload, vocab)
        return ToyLM.from_payload(b.payload, b.vocab_checksum)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptBundleError(f"{path}: malformed {kind} payload ({exc})") from None
