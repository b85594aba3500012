"""Batch command-line interface.

Subcommands cover the whole experiment lifecycle: corpus synthesis,
BPE training, model training per objective variant, beam-search
translation, BLEU/WER scoring, embedding-space analysis, and a
`pipeline` command chaining everything for all four variants.

Exit codes: 0 success, 1 runtime failure (JSON error on stderr),
2 usage or configuration error.  Heavy imports happen inside the
subcommands so thread limits apply before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("embst.cli")

VARIANTS = ("se", "me", "cd", "cs")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def build_parser():
    p = argparse.ArgumentParser(prog="embst",
                                description="speech-to-text translation workbench")
    p.add_argument("--seed", type=int, default=None,
                   help="override the seeds in the config")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread cap (default 1, for reproducibility)")
    p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic parallel speech corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bpe", help="train a byte-pair-encoding model on the target side")
    s.add_argument("--data", required=True)
    s.add_argument("--merges", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bpe)

    s = sub.add_parser("train", help="train one objective variant")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--out", required=True)
    s.add_argument("--bpe", default=None, help="BPE model file for the target side")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="beam-search decode a data split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--beam", type=int, default=4)
    s.add_argument("--split", default="test", choices=("train", "dev", "test"))
    s.add_argument("--bpe", default=None)
    s.add_argument("--max-len", type=int, default=48)
    s.add_argument("--out", default=None, help="hypotheses JSON (default: stdout)")
    s.add_argument("--recognize", action="store_true",
                   help="emit source-language recognition instead of translation")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("score", help="BLEU and WER for a hypotheses file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--refs", required=True, nargs="+")
    s.add_argument("--force", action="store_true",
                   help="ignore config-hash mismatches between artifacts")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("analyze", help="embedding-space report for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--split", default="test", choices=("train", "dev", "test"))
    s.add_argument("--force", action="store_true",
                   help="ignore config-hash mismatches between artifacts")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("pipeline", help="synth + bpe + train/translate/score/analyze for all variants")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def _setup_logging(quiet):
    level_name = os.environ.get("ST_LOG", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    if quiet:
        level = max(level, logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, args.threads))
    _setup_logging(args.quiet)
    from .config import ConfigError
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: structured report on stderr
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        if os.environ.get("ST_LOG", "").upper() == "DEBUG":
            raise
        return 1


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _load_cfg(path, seed):
    from . import config as C
    cfg = C.load_config(path)
    if seed is not None:
        cfg["synth"]["seed"] = seed
        cfg["train"]["seed"] = seed
    return cfg, C.config_hash(cfg)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    from .config import make_synth_spec
    from .data import save_dataset, synth_corpus

    cfg, h = _load_cfg(args.config, args.seed)
    result = synth_corpus(make_synth_spec(cfg))
    save_dataset(args.out, result, make_synth_spec(cfg), h)
    with open(os.path.join(args.out, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    _emit({"checksums": manifest["checksums"], "config_hash": h, "out": args.out})
    return 0


def _bpe_corpus_text(corpus):
    return "\n".join(" ".join(u.targets[0]) for u in corpus.utterances)


def cmd_bpe(args):
    from .bpe import bpe_train, save_bpe
    from .data import load_dataset

    result, _, manifest = load_dataset(args.data)
    model = bpe_train(_bpe_corpus_text(result.train), args.merges)
    save_bpe(model, args.out, config_hash=manifest["config_hash"])
    _emit({"config_hash": manifest["config_hash"], "exhausted": model.exhausted,
           "merges": len(model.merges), "out": args.out, "subwords": len(model.subwords)})
    return 0


def _prepare_training(cfg, result, variant, bpe_model):
    """Apply BPE to both corpora and build the model config."""
    from .config import make_model_config
    from .data import apply_bpe_to_corpus

    train_c, dev_c = result.train, result.dev
    dev_word_refs = [u.targets for u in result.dev.utterances]
    if bpe_model is not None:
        train_c = apply_bpe_to_corpus(train_c, bpe_model)
        dev_c = apply_bpe_to_corpus(dev_c, bpe_model)
    mc = make_model_config(cfg, variant, len(result.table.vocab), len(train_c.tgt_vocab))
    return train_c, dev_c, dev_word_refs, mc


def _run_training(cfg, cfg_hash, result, variant, bpe_model, out_dir):
    from . import training as T

    train_c, dev_c, dev_word_refs, mc = _prepare_training(cfg, result, variant, bpe_model)
    t = cfg["train"]
    os.makedirs(out_dir, exist_ok=True)
    run = T.train(train_c, dev_c, mc, result.table,
                  steps=t["steps"], ckpt_every=t["ckpt_every"], seed=t["seed"],
                  batch_size=t["batch_size"], beam=t["beam"],
                  decode_max_len=t["decode_max_len"], clip_norm=t["clip_norm"],
                  rho=t["rho"], eps=t["eps"], weight_decay=t["weight_decay"],
                  bpe_model=bpe_model, dev_word_refs=dev_word_refs,
                  out_dir=out_dir, config_hash=cfg_hash)
    return run, T.select_best(run), mc


def cmd_train(args):
    from .bpe import load_bpe
    from .data import load_dataset
    from .training import TrainingError

    cfg, h = _load_cfg(args.config, args.seed)
    result, _, manifest = load_dataset(args.data)
    if manifest["config_hash"] != h:
        log.warning("data was generated under a different config (%s vs %s)",
                    manifest["config_hash"][:12], h[:12])
    bpe_model = load_bpe(args.bpe) if args.bpe else None
    run, best, _ = _run_training(cfg, h, result, args.variant, bpe_model, args.out)
    if run.failed:
        raise TrainingError("training diverged (non-finite loss); partial run saved")
    _emit({"config_hash": h, "dev_bleu": best.dev_bleu, "out": args.out,
           "selected_step": best.step, "steps": run.steps})
    return 0


def _checkpoint_model(path):
    from .model import ModelConfig, load_checkpoint

    params, meta = load_checkpoint(path)
    mc = ModelConfig(**meta["config"])
    return params, meta, mc


def _target_vocab(manifest, bpe_model):
    from .embeddings import Vocab

    if bpe_model is not None:
        return Vocab.build(bpe_model.subwords)
    return Vocab.build(tuple(manifest["target_words"]))


def _decode_split(params, mc, table, corpus, tgt_vocab, bpe_model, beam, max_len):
    """Beam-decode every utterance; returns word-level hypotheses plus the
    recognition byproduct (empty for se)."""
    from .bpe import bpe_decode
    from .model import translate

    hyps, recognized = [], []
    for u in corpus.utterances:
        tr = translate(u.frames, params, mc, table, beam=beam, max_len=max_len)
        toks = tgt_vocab.decode(tr.token_ids)
        hyps.append(bpe_decode(bpe_model, toks) if bpe_model else " ".join(toks))
        if mc.objective != "se":
            recognized.append(" ".join(table.vocab.decode(tr.src_token_ids)))
    return hyps, recognized


def cmd_translate(args):
    from .bpe import load_bpe
    from .data import load_dataset
    from .model import ModelError, recognize_frames

    params, meta, mc = _checkpoint_model(args.ckpt)
    result, _, manifest = load_dataset(args.data)
    h = meta.get("config_hash") or manifest["config_hash"]
    corpus = getattr(result, args.split)
    bpe_model = load_bpe(args.bpe) if args.bpe else None
    if args.recognize:
        if mc.objective == "se":
            raise ModelError("the se variant has no recognition decoder")
        hyps = []
        for u in corpus.utterances:
            ids, _ = recognize_frames(u.frames, params, mc, result.table)
            hyps.append(" ".join(result.table.vocab.decode(ids)))
        recognized = []
    else:
        tgt_vocab = _target_vocab(manifest, bpe_model)
        if len(tgt_vocab) != mc.tgt_vocab_size:
            raise ModelError(f"target vocab size {len(tgt_vocab)} does not match "
                             f"checkpoint ({mc.tgt_vocab_size}); wrong --bpe or --data?")
        hyps, recognized = _decode_split(params, mc, result.table, corpus,
                                         tgt_vocab, bpe_model, args.beam, args.max_len)
    payload = {"beam": args.beam, "config_hash": h, "hypotheses": hyps,
               "recognize": args.recognize, "recognized": recognized or None,
               "split": args.split}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
        _emit({"config_hash": h, "out": args.out, "utterances": len(hyps)})
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def _read_token_lines(path):
    """Hypothesis/reference file: either a translate artifact (JSON) or plain
    text, one sentence per line.  Returns (token sequences, config hash)."""
    with open(path, encoding="utf-8") as f:
        raw = f.read()
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(raw)
        lines = doc.get("hypotheses", doc.get("references"))
        if lines is None:
            raise ValueError(f"{path}: JSON artifact lacks 'hypotheses'/'references'")
        return [str(s).split() for s in lines], doc.get("config_hash")
    return [line.split() for line in raw.splitlines()], None


def _check_hashes(hashes, force):
    from .config import ConfigError

    seen = sorted({h for h in hashes if h})
    if len(seen) > 1 and not force:
        raise ConfigError("config hash mismatch between artifacts: "
                          + ", ".join(h[:12] for h in seen) + " (use --force to override)")


def cmd_score(args):
    from .config import ConfigError
    from .metrics import bleu, wer

    hyps, hyp_hash = _read_token_lines(args.hyp)
    ref_streams = []
    hashes = [hyp_hash]
    for path in args.refs:
        stream, h = _read_token_lines(path)
        ref_streams.append(stream)
        hashes.append(h)
    _check_hashes(hashes, args.force)
    for path, stream in zip(args.refs, ref_streams):
        if len(stream) != len(hyps):
            raise ConfigError(f"{path}: {len(stream)} lines, expected {len(hyps)}")
    ref_sets = [[s[i] for s in ref_streams] for i in range(len(hyps))]
    wer_mean = sum(min(wer(h, r) for r in refs if r) if any(refs) else 0.0
                   for h, refs in zip(hyps, ref_sets)) / max(len(hyps), 1)
    _emit({"bleu": bleu(hyps, ref_sets), "config_hash": hyp_hash,
           "utterances": len(hyps), "wer_mean": wer_mean})
    return 0


def cmd_analyze(args):
    from .analysis import analyze_model
    from .data import load_dataset
    from .embeddings import load_vec

    params, meta, mc = _checkpoint_model(args.ckpt)
    result, _, manifest = load_dataset(args.data)
    _check_hashes([meta.get("config_hash"), manifest["config_hash"]], args.force)
    table = load_vec(args.embeddings)
    if table.vocab.tokens == result.table.vocab.tokens:
        # .vec files only carry real-token rows; keep the synthetic reserved
        # rows consistent with the ones the model was trained against.
        table.vectors[:4] = result.table.vectors[:4]
    report = analyze_model(params, mc, table, result.train, getattr(result, args.split),
                           config_hash=meta.get("config_hash"))
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Pipeline


def _format_cell(value, width=9):
    if value is None:
        return "-".rjust(width)
    return f"{value:.2f}".rjust(width)


def _format_table(rows):
    header = "variant" + "".join(s.rjust(10) for s in
                                 ("bleu", "wer", "eig-sim", "p@1", "p@5"))
    lines = [header]
    for name, r in rows.items():
        cells = (r["bleu"], r["wer"], r["eigenvector_similarity"], r["p_at_1"], r["p_at_5"])
        lines.append(name.ljust(7) + " " + " ".join(_format_cell(c) for c in cells))
    return "\n".join(lines)


def cmd_pipeline(args):
    from .analysis import analyze_model
    from .bpe import bpe_train, save_bpe
    from .config import make_synth_spec
    from .data import save_dataset, synth_corpus
    from .metrics import bleu, wer

    cfg, h = _load_cfg(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    data_dir = os.path.join(args.out, "data")

    spec = make_synth_spec(cfg)
    result = synth_corpus(spec)
    save_dataset(data_dir, result, spec, h)
    log.info("pipeline: corpus written to %s", data_dir)

    bpe_model = None
    if cfg["bpe"]["merges"] > 0:
        bpe_model = bpe_train(_bpe_corpus_text(result.train), cfg["bpe"]["merges"])
        save_bpe(bpe_model, os.path.join(args.out, "bpe.json"), config_hash=h)
        log.info("pipeline: bpe model with %d merges", len(bpe_model.merges))

    test_refs = [[list(r) for r in u.targets] for u in result.test.utterances]
    rows = {}
    for variant in VARIANTS:
        run_dir = os.path.join(args.out, "runs", variant)
        run, best, mc = _run_training(cfg, h, result, variant, bpe_model, run_dir)
        if run.failed:
            log.warning("pipeline: %s diverged; scoring last checkpoint anyway", variant)
        tgt_vocab = _target_vocab({"target_words": result.target_words}, bpe_model)
        hyps, recognized = _decode_split(best.params, mc, result.table, result.test,
                                         tgt_vocab, bpe_model, cfg["train"]["beam"],
                                         cfg["train"]["decode_max_len"])
        hyp_path = os.path.join(run_dir, "hyps_test.json")
        with open(hyp_path, "w", encoding="utf-8") as f:
            json.dump({"beam": cfg["train"]["beam"], "config_hash": h,
                       "hypotheses": hyps, "recognize": False,
                       "recognized": recognized or None, "split": "test"},
                      f, sort_keys=True, indent=2)
            f.write("\n")
        test_bleu = bleu([s.split() for s in hyps], test_refs)
        row = {"bleu": test_bleu, "dev_bleu": best.dev_bleu, "selected_step": best.step,
               "wer": None, "eigenvector_similarity": None, "hubness_skewness": None,
               "p_at_1": None, "p_at_5": None, "word_count": None}
        if variant != "se":
            wers = [wer(rec.split(), list(u.source))
                    for rec, u in zip(recognized, result.test.utterances)]
            row["wer"] = sum(wers) / len(wers)
            report = analyze_model(best.params, mc, result.table,
                                   result.train, result.test, config_hash=h)
            for key in ("eigenvector_similarity", "hubness_skewness",
                        "p_at_1", "p_at_5", "word_count"):
                row[key] = report[key]
        rows[variant] = row
        log.info("pipeline: %s bleu=%.2f wer=%s", variant, test_bleu,
                 "-" if row["wer"] is None else f"{row['wer']:.2f}")

    report = {"config_hash": h, "variants": rows}
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    print(_format_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
