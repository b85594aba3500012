"""Adadelta training loop with checkpointing and dev-BLEU model selection."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .bpe import bpe_decode
from .data import batch_stream
from .metrics import bleu

log = logging.getLogger("embst.training")


class TrainingError(Exception):
    pass


@dataclass
class ParamState:
    """Adadelta accumulators for one parameter."""

    eg2: np.ndarray
    ex2: np.ndarray
    rho: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 1e-6


def init_adadelta(params, rho=0.95, eps=1e-6, weight_decay=1e-6):
    return {
        name: ParamState(np.zeros_like(p.data), np.zeros_like(p.data), rho, eps, weight_decay)
        for name, p in params.items()
    }


def adadelta_step(param, grad, state):
    """One update: decay-averaged squared grads and deltas, no learning rate.

    Returns the updated parameter array; the accumulators in ``state``
    are modified in place.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise TrainingError(f"adadelta_step: param {param.shape} vs grad {grad.shape}")
    if not np.isfinite(grad).all():
        raise TrainingError("adadelta_step: non-finite gradient, step aborted")
    g = grad + state.weight_decay * param
    state.eg2[...] = state.rho * state.eg2 + (1.0 - state.rho) * g * g
    dx = -np.sqrt(state.ex2 + state.eps) / np.sqrt(state.eg2 + state.eps) * g
    state.ex2[...] = state.rho * state.ex2 + (1.0 - state.rho) * dx * dx
    return param + dx


def clip_gradients(grads, max_norm):
    """Global L2 clipping; returns (possibly scaled grads, original norm)."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {k: v * scale for k, v in grads.items()}
    return grads, norm


@dataclass
class Checkpoint:
    step: int
    params: dict          # name -> np.ndarray snapshot
    dev_bleu: float | None
    file: str | None = None


@dataclass
class TrainRun:
    steps: int
    seed: int
    config: M.ModelConfig
    checkpoints: list
    losses: list
    failed: bool = False
    clamp_warnings: int = 0


def select_best(run):
    """Highest dev BLEU; ties go to the earliest step."""
    scored = [c for c in run.checkpoints if c.dev_bleu is not None]
    if not scored:
        raise TrainingError("select_best: no checkpoint carries a dev BLEU")
    return max(scored, key=lambda c: (c.dev_bleu, -c.step))


def _decode_corpus(params, config, table, corpus, beam, max_len, bpe_model):
    """Beam-decode every utterance; returns word-level hypothesis tuples."""
    hyps = []
    for u in corpus.utterances:
        res = M.translate(u.frames, params, config, table, beam=beam, max_len=max_len)
        toks = corpus.tgt_vocab.decode(res.token_ids)
        if bpe_model is not None:
            hyps.append(tuple(bpe_decode(bpe_model, toks).split()))
        else:
            hyps.append(tuple(toks))
    return hyps


def _dev_bleu(params, config, table, dev, beam, max_len, bpe_model, word_refs):
    hyps = _decode_corpus(params, config, table, dev, beam, max_len, bpe_model)
    refs = word_refs if word_refs is not None else [u.targets for u in dev.utterances]
    return bleu(hyps, refs)


def train(corpus, dev, config, table, steps, ckpt_every, seed=0, batch_size=16,
          beam=4, decode_max_len=48, clip_norm=5.0, rho=0.95, eps=1e-6,
          weight_decay=1e-6, bpe_model=None, dev_word_refs=None, out_dir=None,
          config_hash=None):
    """Run the optimization loop and record scored checkpoints.

    ``dev_word_refs`` (with ``bpe_model``) lets dev BLEU be computed on
    detokenized words when the corpus target side is subwords.  With a
    fixed seed the whole trajectory, checkpoint set, and dev scores are
    reproducible.
    """
    config.validate()
    if len(corpus) == 0:
        raise TrainingError("train: empty corpus")
    if len(dev) == 0:
        raise TrainingError("train: empty dev set")
    if ckpt_every < 1:
        raise TrainingError("train: ckpt_every must be >= 1")

    ss = np.random.SeedSequence(seed).spawn(3)
    rng_init = np.random.default_rng(ss[0])
    rng_sample = np.random.default_rng(ss[2])
    params = M.init_params(config, rng_init)
    opt = init_adadelta(params, rho=rho, eps=eps, weight_decay=weight_decay)
    stream = batch_stream(corpus, batch_size, int(ss[1].generate_state(1)[0]))

    run = TrainRun(steps=steps, seed=seed, config=config, checkpoints=[], losses=[])
    M.reset_clamp_warnings()

    def record(step):
        score = _dev_bleu(params, config, table, dev, beam, decode_max_len,
                          bpe_model, dev_word_refs)
        snap = {k: v.data.copy() for k, v in params.items()}
        ckpt = Checkpoint(step=step, params=snap, dev_bleu=score)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            fname = f"ckpt_{step}.params"
            meta = {
                "step": step,
                "dev_bleu": score,
                "config": _config_dict(config),
                "config_hash": config_hash,
                "seed": seed,
            }
            M.save_checkpoint(os.path.join(out_dir, fname), params, meta)
            ckpt.file = fname
        run.checkpoints.append(ckpt)
        log.info("step %d: dev BLEU %.2f", step, score)
        return score

    record(0)
    with ad.finite_checks(False):
        for step in range(1, steps + 1):
            batch = next(stream)
            loss, stats = M.batch_loss(params, config, batch, table, rng=rng_sample)
            if not np.isfinite(loss.data):
                run.failed = True
                log.error("step %d: non-finite loss, stopping", step)
                break
            run.losses.append(float(loss.data))
            loss.backward()
            grads = {}
            for name in sorted(params):
                p = params[name]
                grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad
                p.grad = None
            grads, _ = clip_gradients(grads, clip_norm)
            try:
                for name in sorted(params):
                    params[name].data = adadelta_step(params[name].data, grads[name], opt[name])
            except TrainingError:
                run.failed = True
                log.error("step %d: non-finite gradient, stopping", step)
                break
            if step % ckpt_every == 0:
                record(step)
        else:
            if steps > 0 and steps % ckpt_every != 0:
                record(steps)

    run.clamp_warnings = M.clamp_warning_count()
    if out_dir is not None:
        _write_run_manifest(out_dir, run, config_hash)
    return run


def _config_dict(config):
    return asdict(config)


def _write_run_manifest(out_dir, run, config_hash):
    doc = {
        "checkpoints": [
            {"step": c.step, "dev_bleu": c.dev_bleu, "file": c.file} for c in run.checkpoints
        ],
        "clamp_warnings": run.clamp_warnings,
        "config": _config_dict(run.config),
        "config_hash": config_hash,
        "failed": run.failed,
        "seed": run.seed,
        "selected_step": select_best(run).step,
        "steps": run.steps,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
