"""``smoothmark`` command-line tool.

Every subcommand accepts ``--config FILE`` (``key = value`` lines, keys named
like the long flags) and explicit flags override the file.  The resolved
configuration is printed to standard error as one JSON line before work
starts.  Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import EDIT_KINDS, AttackSpec, apply_edit, copy_paste
from .bundle import load_model, save_model
from .detector import DetectorModel, Sample, TrainConfig, TrainingError, build_dataset, train
from .evalkit import (EvalReport, emit_report, embedding_stats, evaluate, load_report,
                      sliding_window_detect, tokens_tolerated, z_score)
from .records import read_jsonl, read_samples, write_jsonl, write_samples
from .rng import make_rng
from .smoothing import NoiseConfig, smoothed_predict, timed_certify
from .synth import (FIXTURE_SCALE, HumanSource, build_llm_vocab, build_reference_vocab, data_path,
                    human_corpus)
from .tokenspace import Bridge, TokenSeq, decode_llm, encode_llm, load_vocab, ref_words, save_vocab
from .toylm import DecodeConfig, train_toy_lm
from .wmgen import CalibrationError, GenParams, generate_watermarked, generate_with_markers, init_generator

log = logging.getLogger("smoothmark")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


# --- argument parsing -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="threads for Monte-Carlo certification")
    p.add_argument("-v", "--verbose", action="store_true")


def _vocabs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ref-vocab", default=None, help="reference vocabulary (default: bundled)")
    p.add_argument("--llm-vocab", default=None, help="llm vocabulary (default: bundled)")
    p.add_argument("--bridge-n", type=int, default=30, help="llm-token context for bridging (N)")


def _noise(p: argparse.ArgumentParser, certify_opts: bool = True) -> None:
    p.add_argument("--sigma", type=float, default=15.0, help="Gaussian noise std (default 15)")
    p.add_argument("--lambda", dest="lam", type=int, default=8,
                   help="shuffle group length (default 8; 200 at full scale)")
    if certify_opts:
        p.add_argument("--n0", type=int, default=1000, help="Monte-Carlo draws (default 1000)")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--mode", choices=("single", "two_stage"), default="single")


def _gen(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, default=2.0, help="green logit bias")
    p.add_argument("--top-k", "--topk", type=int, default=20)
    p.add_argument("--window", type=int, default=2, help="generator window w")
    p.add_argument("--strategy", choices=("sample", "beam"), default="sample")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--beam-width", type=int, default=3)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--prompt-len", type=int, default=30)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoothmark",
                                     description="Certified detection of green-token watermarks at desk scale.")
    parser.add_argument("--version", action="version", version=f"smoothmark {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("build-vocab", help="write reference (and llm) vocabulary files")
    _common(p)
    p.add_argument("--out", required=True, help="reference vocabulary output")
    p.add_argument("--llm-out", help="also write the sub-word vocabulary here")
    p.add_argument("--corpus", help="JSON-lines corpus; keep its --size most frequent words")
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--scale", type=float, default=FIXTURE_SCALE, help="per-entry embedding std")

    p = sub.add_parser("train-lm", help="fit the n-gram language model")
    _common(p)
    _vocabs(p)
    p.add_argument("--corpus", help="JSON-lines corpus (default: bundled)")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("init-generator", help="create and calibrate a keyed green-token generator")
    _common(p)
    _vocabs(p)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="watermarked generation from prompts")
    _common(p)
    _vocabs(p)
    _gen(p)
    p.add_argument("--lm", required=True)
    p.add_argument("--generator", "--gen", required=True)
    p.add_argument("--prompts", help="JSON-lines prompt texts (default: synthetic human text)")
    p.add_argument("--n", type=int, default=10, help="number of generations")
    p.add_argument("--markers", action="store_true", help="emoji attack: marker after every token, stripped")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-dataset", help="balanced watermarked/human dataset for the detector")
    _common(p)
    _vocabs(p)
    _gen(p)
    p.set_defaults(temperature=1.0)
    p.add_argument("--lm", required=True)
    p.add_argument("--generator", "--gen", required=True)
    p.add_argument("--human", help="JSON-lines human texts (default: synthetic)")
    p.add_argument("--n-pos", type=int, default=2000)
    p.add_argument("--n-neg", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-detector", help="noise-injected detector training")
    _common(p)
    _vocabs(p)
    _noise(p, certify_opts=False)
    p.add_argument("--train", "--corpus", required=True, help="JSON-lines dataset")
    p.add_argument("--noise-strategy", "--strategy", choices=("duplicate", "joint"), default="duplicate")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--trace", help="write the per-epoch loss trace (JSON) here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="apply an edit or copy-paste attack")
    _common(p)
    _vocabs(p)
    p.add_argument("--input", "--in", required=True)
    p.add_argument("--kind", choices=EDIT_KINDS + ("copy_paste",), required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--n-wm", type=int, default=150)
    p.add_argument("--human-len", type=int, default=600)
    p.add_argument("--out", required=True)

    for name, text in (("detect", "base or smoothed detection"), ("certify", "certified detection")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _vocabs(p)
        _noise(p)
        p.add_argument("--detector", required=True)
        p.add_argument("--input", "--in", required=True)
        p.add_argument("--out", required=True)
        if name == "detect":
            p.add_argument("--smoothed", action="store_true", help="smoothed majority with abstention")
            p.add_argument("--sliding", action="store_true", help="sliding-window detection for long texts")
            p.add_argument("--window-len", type=int, default=200)
            p.add_argument("--stride", type=int, default=100)

    p = sub.add_parser("evaluate", help="metrics and certified accuracy report")
    _common(p)
    _vocabs(p)
    _noise(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--input", "--dataset", required=True)
    p.add_argument("--generator", "--gen", help="also report z-scores")
    p.add_argument("--attack", help="kind:fraction or copy_paste:n_wm:human_len")
    p.add_argument("--plain", action="store_true", help="score the base detector without smoothing")
    p.add_argument("--window-len", type=int, default=200)
    p.add_argument("--stride", type=int, default=100)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="convert reports or summarize embedding statistics")
    _common(p)
    _vocabs(p)
    p.add_argument("--input", help="JSON report from evaluate")
    p.add_argument("--format", choices=("json", "csv", "summary"), default="summary")
    p.add_argument("--embedding-stats", action="store_true", help="norms and pairwise distances")
    p.add_argument("--radius", type=float, action="append", default=[],
                   help="embedding radius to convert to tolerated substitutions (repeatable)")
    p.add_argument("--out")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    # find --config and the subcommand before required flags are enforced
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in read_config_file(known.config).items():
        if key == "lambda":
            key = "lam"
        if key not in actions:
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [action.type(v) for v in value.split(",")] if action.type else value.split(",")
        else:
            defaults[key] = action.type(value) if action.type else value
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{known.config}: {key} must be one of {list(action.choices)}")
    sp.set_defaults(**defaults)
    # required flags may be satisfied by the file
    for a in sp._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


# --- helpers ------------------------------------------------------------------------

def _ref_vocab(args):
    return load_vocab(args.ref_vocab or data_path("ref_vocab.txt"), "ref")


def _llm_vocab(args):
    return load_vocab(args.llm_vocab or data_path("llm_vocab.txt"), "llm", oov_buckets=0)


def _sha_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _human_docs(args, n_docs: int, seed_key: int) -> list[str]:
    return HumanSource(seed=0).documents(n_docs, 500, seed=1000 + args.seed * 7 + seed_key)


def _gen_params(args) -> GenParams:
    return GenParams(args.window, args.delta, args.top_k, args.bridge_n)


# --- commands -----------------------------------------------------------------------

def cmd_build_vocab(args) -> None:
    words = None
    if args.corpus:
        from collections import Counter
        counts = Counter(w for rec in read_jsonl(args.corpus) for w in ref_words(rec["text"]))
        if not counts:
            raise ValueError(f"{args.corpus}: no words")
        words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: args.size]]
    elif args.size != 2000:
        raise UsageError("--size applies only with --corpus")
    ref = build_reference_vocab(words, dim=args.dim, scale=args.scale, seed=args.seed)
    save_vocab(ref, args.out)
    out = {"ref_vocab": args.out, "entries": ref.size, "dim": ref.dim, "checksum": ref.checksum()}
    if args.llm_out:
        llm = build_llm_vocab(dim=args.dim, seed=args.seed)
        save_vocab(llm, args.llm_out)
        out.update({"llm_vocab": args.llm_out, "llm_entries": llm.size})
    _emit(out)


def cmd_train_lm(args) -> None:
    llm = _llm_vocab(args)
    texts = [r["text"] for r in read_jsonl(args.corpus)] if args.corpus else human_corpus()
    corpus = [encode_llm(t, llm) for t in texts]
    lm = train_toy_lm(corpus, args.order, args.smoothing, llm)
    save_model(lm, args.out, {"tokens": int(sum(len(c) for c in corpus)), "order": args.order})
    _emit({"lm": args.out, "documents": len(corpus), "tokens": int(sum(len(c) for c in corpus))})


def cmd_init_generator(args) -> None:
    ref = _ref_vocab(args)
    gen = init_generator(args.seed, ref, args.gamma, args.window)
    save_model(gen, args.out)
    _emit({"generator": args.out, "threshold": gen.threshold, "gamma": gen.gamma})


def _prompts(args, llm) -> list[TokenSeq]:
    texts = [r["text"] for r in read_jsonl(args.prompts)] if args.prompts else _human_docs(args, args.n, 1)
    out = []
    for t in texts[: args.n]:
        ids = encode_llm(t, llm)
        if len(ids) < max(args.prompt_len, args.window):
            raise ValueError(f"prompt text shorter than {args.prompt_len} tokens")
        out.append(ids[: args.prompt_len])
    if len(out) < args.n:
        raise ValueError(f"only {len(out)} prompts available, --n is {args.n}")
    return out


def cmd_generate(args) -> None:
    ref, llm = _ref_vocab(args), _llm_vocab(args)
    lm = load_model(args.lm, "lm", llm)
    gen = load_model(args.generator, "generator", ref)
    params = _gen_params(args)
    bridge = Bridge(llm, ref, args.bridge_n)
    records, zs = [], []
    for j, prompt in enumerate(_prompts(args, llm)):
        cfg = DecodeConfig(args.strategy, args.temperature, args.beam_width, args.max_len, args.seed + j)
        if args.markers:
            marked, out = generate_with_markers(lm, gen, prompt, params, cfg, llm, ref)
        else:
            out = generate_watermarked(lm, gen, prompt, params, cfg, llm, ref)
        ids = list(prompt.ids) + list(out.ids)
        ref_ids = bridge.encode(ids)[len(prompt):]
        z = z_score(ref_ids, gen)
        zs.append(z)
        meta = {"llm_ids": list(out.ids), "prompt_ids": list(prompt.ids), "z": z,
                "green_fraction": float(np.mean(_green(gen, ref_ids))), "seed": cfg.seed,
                "source": "markers_stripped" if args.markers else "generated", "ref_ids": ref_ids}
        if args.markers:
            mref = bridge.encode(list(prompt.ids) + list(marked.ids))[len(prompt):]
            meta["marked_green_fraction"] = float(np.mean(_green(gen, mref)))
        records.append({"text": decode_llm(out.ids, llm), "label": int(params.delta > 0), "meta": meta})
    write_jsonl(records, args.out)
    _emit({"generated": len(records), "out": args.out, "mean_z": float(np.mean(zs))})


def _green(gen, ref_ids):
    from .wmgen import green_mask
    return green_mask(gen, ref_ids)


def cmd_build_dataset(args) -> None:
    ref, llm = _ref_vocab(args), _llm_vocab(args)
    lm = load_model(args.lm, "lm", llm)
    gen = load_model(args.generator, "generator", ref)
    if args.human:
        texts = [r["text"] for r in read_jsonl(args.human)]
    else:
        texts = _human_docs(args, (args.n_pos + args.n_neg) // 2 + 100, 2)
    human = [encode_llm(t, llm) for t in texts]
    cfg = DecodeConfig(args.strategy, args.temperature, args.beam_width, args.max_len, args.seed)
    data = build_dataset(lm, gen, args.n_pos, args.n_neg, human, _gen_params(args), cfg, llm, ref,
                         args.prompt_len, args.seed)
    write_samples(data, args.out)
    zs = [s.meta["z"] for s in data if s.label == 1]
    _emit({"samples": len(data), "out": args.out, "mean_z_pos": float(np.mean(zs))})


def cmd_train_detector(args) -> None:
    ref, llm = _ref_vocab(args), _llm_vocab(args)
    data = read_samples(args.train, llm, ref, args.bridge_n)
    det = DetectorModel(ref.table, args.window, args.max_len, seed=args.seed,
                        embedding_checksum=ref.checksum())
    cfg = TrainConfig(NoiseConfig(args.sigma, args.lam), args.noise_strategy, args.lr, args.epochs,
                      args.batch_size, args.seed)
    det, trace = train(det, [Sample(s.ref_ids[: args.max_len], s.label) for s in data], cfg,
                       progress=lambda e, loss, n: log.info("epoch %d loss %.4f", e, loss))
    save_model(det, args.out, {"loss_trace": trace, "train_sha256": _sha_file(args.train)})
    if args.trace:
        Path(args.trace).write_text(json.dumps({"loss": trace}) + "\n", encoding="utf-8")
    _emit({"detector": args.out, "loss": trace})


def cmd_attack(args) -> None:
    ref, llm = _ref_vocab(args), _llm_vocab(args)
    data = read_samples(args.input, llm, ref, args.bridge_n)
    spec = AttackSpec(args.kind, args.fraction if args.kind != "copy_paste" else 0.0, args.seed,
                      args.n_wm, args.human_len)
    out = []
    if args.kind == "copy_paste":
        from .evalkit import _human_material
        negatives = [s.ref_ids for s in data if s.label == 0]
        for i, s in enumerate(x for x in data if x.label == 1):
            host = _human_material(negatives, i % max(1, len(negatives)), args.human_len)
            seq, at = copy_paste(TokenSeq(s.ref_ids, "ref"), host, args.n_wm, args.human_len,
                                 make_rng(args.seed, 0xA77, i))
            out.append(Sample(seq.ids, 1, "", {"attack": "copy_paste", "insert_at": at}))
    else:
        for i, s in enumerate(data):
            seq = apply_edit(TokenSeq(s.ref_ids, "ref"), spec, ref, make_rng(args.seed, 0xA77, i))
            out.append(Sample(seq.ids, s.label, "", {"attack": args.kind, "fraction": args.fraction}))
    write_samples(out, args.out)
    _emit({"attacked": len(out), "out": args.out})


def _load_detector(args):
    ref = _ref_vocab(args)
    return ref, load_model(args.detector, "detector", ref)


def cmd_detect(args) -> None:
    ref, det = _load_detector(args)
    data = read_samples(args.input, _llm_vocab(args), ref, args.bridge_n)
    noise = NoiseConfig(args.sigma, args.lam)

    def one(seq: TokenSeq, i: int, start: int) -> int:
        if args.smoothed:
            return smoothed_predict(det, seq, noise, args.n0, args.alpha, make_rng(args.seed, 0xCE7, i, start),
                                    args.workers)
        return int(det.classify(det.embed(seq.ids))[0])

    recs = []
    for i, s in enumerate(data):
        seq = TokenSeq(s.ref_ids, "ref")
        if args.sliding:
            pred, per = sliding_window_detect(lambda seg, st: one(seg, i, st), seq, args.window_len, args.stride)
            recs.append({"index": i, "label": s.label, "pred": pred, "windows": per})
        else:
            recs.append({"index": i, "label": s.label, "pred": one(seq[: det.max_len], i, 0)})
    write_jsonl(recs, args.out)
    _emit({"detected": len(recs), "positives": sum(r["pred"] == 1 for r in recs), "out": args.out})


def cmd_certify(args) -> None:
    ref, det = _load_detector(args)
    data = read_samples(args.input, _llm_vocab(args), ref, args.bridge_n)
    noise = NoiseConfig(args.sigma, args.lam)
    recs = []
    for i, s in enumerate(data):
        r, secs = timed_certify(det, TokenSeq(s.ref_ids[: det.max_len], "ref"), noise, args.n0, args.alpha,
                                args.mode, rng=make_rng(args.seed, 0xCE7, i, 0), workers=args.workers)
        d = r.to_dict()
        d.update({"index": i, "truth": s.label, "wall_time_s": round(secs, 6)})
        recs.append({k: (str(v) if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()})
    write_jsonl(recs, args.out)
    _emit({"certified": sum(r["label"] != -1 for r in recs), "abstained": sum(r["label"] == -1 for r in recs),
           "out": args.out})


def cmd_evaluate(args) -> None:
    ref, det = _load_detector(args)
    data = read_samples(args.input, _llm_vocab(args), ref, args.bridge_n)
    gen = load_model(args.generator, "generator", ref) if args.generator else None
    attack = AttackSpec.parse(args.attack, args.seed) if args.attack else None
    meta = {
        "version": __version__,
        "detector_sha256": _sha_file(args.detector),
        "dataset_sha256": _sha_file(args.input),
        "vocab_checksum": ref.checksum(),
    }
    report = evaluate(det, data, NoiseConfig(args.sigma, args.lam), args.n0, args.alpha, args.mode,
                      args.seed, attack, ref, gen, smoothed=not args.plain, window=args.window_len,
                      stride=args.stride, workers=args.workers, metadata=meta)
    emit_report(report, args.out, args.format)
    _emit({"out": args.out, **{k: v for k, v in report.aggregates["whole"].items() if k in ("f1", "tpr", "fpr")}})


def cmd_report(args) -> None:
    if args.embedding_stats:
        ref = _ref_vocab(args)
        stats = embedding_stats(ref.vectors, seed=args.seed)
        summary = {k: v for k, v in stats.items() if not k.endswith("_hist")}
        summary["tokens_tolerated"] = {str(r): tokens_tolerated(r, stats["distance_mean"]) for r in args.radius}
        text = json.dumps(stats if args.format == "json" else summary, sort_keys=True, indent=2) + "\n"
    elif args.input:
        report = load_report(args.input)
        if args.format == "summary":
            text = json.dumps({"metadata": report.metadata, "aggregates": report.aggregates},
                              sort_keys=True, indent=2) + "\n"
        else:
            text = emit_report(EvalReport(report.metadata, report.aggregates, report.records), None, args.format)
    else:
        raise UsageError("report needs --input or --embedding-stats")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train-lm": cmd_train_lm,
    "init-generator": cmd_init_generator,
    "generate": cmd_generate,
    "build-dataset": cmd_build_dataset,
    "train-detector": cmd_train_detector,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "certify": cmd_certify,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _error(kind: str, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        _error("usage", exc)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        _error("data", exc)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    sys.stderr.write("config " + json.dumps(resolved, sort_keys=True) + "\n")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        _error("usage", exc)
        return EXIT_USAGE
    except (TrainingError, CalibrationError, FloatingPointError, OverflowError) as exc:
        _error("numeric", exc)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _error("data", exc)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
