"""Multitask speech-to-text translation network.

A pyramidal bidirectional LSTM encoder (2x time reduction per layer)
feeds two attention decoders: a one-layer recognition decoder over
source words and a two-layer translation decoder over target subwords.
The recognition side can be supervised four ways: not at all (se),
with a word softmax (me), by cosine distance to pre-trained embeddings
(cd), or by a temperature cosine softmax over the embedding table (cs).
For cd/cs a linear projection f maps decoder states into embedding
space; the translation decoder attends over those projected states.

All forward code is built from the autodiff primitives, so one
``backward()`` on the scalar loss yields every parameter gradient.
Tensors carry a leading batch axis unless noted.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import BOS_ID, EOS_ID, PAD_ID

log = logging.getLogger("embst.model")

OBJECTIVES = ("se", "me", "cd", "cs")
PROB_FLOOR = 1e-12
CKPT_FORMAT_VERSION = 1

_clamp_warnings = 0


def clamp_warning_count():
    return _clamp_warnings


def reset_clamp_warnings():
    global _clamp_warnings
    _clamp_warnings = 0


def _note_clamped(n):
    global _clamp_warnings
    if n > 0:
        _clamp_warnings += int(n)
        log.warning("clamped %d zero probabilities at %g", n, PROB_FLOOR)


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    objective: str
    src_vocab_size: int        # full vocab incl reserved ids
    tgt_vocab_size: int
    embed_dim: int             # D; also the frame width
    enc_hidden: int = 32
    enc_layers: int = 3
    downsample_per_layer: int = 2
    src_dec_layers: int = 1
    tgt_dec_layers: int = 2
    dec_hidden: int = 48
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    scheduled_sampling_p: float = 0.8
    attend_raw_states: bool = False  # target decoder attends raw states even for cd/cs
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ModelError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("src_vocab_size", "tgt_vocab_size", "embed_dim", "enc_hidden",
                     "enc_layers", "dec_hidden"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.tau <= 0:
            raise ModelError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ModelError("alpha and beta must be >= 0")
        if not 0.0 <= self.scheduled_sampling_p <= 1.0:
            raise ModelError("scheduled_sampling_p must be in [0, 1]")
        if self.downsample_per_layer != 2:
            raise ModelError("only downsample_per_layer=2 is supported")
        if self.src_dec_layers != 1 or self.tgt_dec_layers != 2:
            raise ModelError("decoder depths are fixed at 1 (recognition) and 2 (translation)")
        return self

    @property
    def downsample_total(self):
        return self.downsample_per_layer ** self.enc_layers

    @property
    def src_value_width(self):
        """Width of the recognition-side vectors the translation decoder attends."""
        if self.objective == "se":
            return 0
        if self.objective == "me" or self.attend_raw_states:
            return self.dec_hidden
        return self.embed_dim


@dataclass
class EncoderOutput:
    states: Tensor        # B x T' x 2*enc_hidden
    mask: np.ndarray      # B x T', 1.0 on valid positions


@dataclass
class SourceDecoderOutput:
    states: Tensor                 # M x dec_hidden
    projected: Tensor | None       # M x D for cd/cs
    distributions: Tensor | None   # M x V for me/cs
    token_ids: tuple | None        # emitted ids when free-running (EOS excluded)
    truncated: bool = False


@dataclass
class TargetDecoderOutput:
    states: Tensor          # Q x dec_hidden
    distributions: Tensor   # Q x V_tgt


@dataclass(frozen=True)
class TranslationResult:
    token_ids: tuple
    score: float            # length-normalized log-probability
    truncated: bool
    src_token_ids: tuple | None = None
    src_truncated: bool = False


# ---------------------------------------------------------------------------
# Parameters


def init_params(config, rng):
    """Uniform(+-init_scale) weights, zero biases, forget-gate bias preset."""
    config.validate()
    s = config.init_scale
    he, hd, d = config.enc_hidden, config.dec_hidden, config.embed_dim
    attn = hd
    params = {}

    def mat(name, rows, cols):
        params[name] = Tensor(rng.uniform(-s, s, size=(rows, cols)), requires_grad=True)

    def lstm(prefix, in_width, hidden):
        mat(f"{prefix}_Wx", in_width, 4 * hidden)
        mat(f"{prefix}_Wh", hidden, 4 * hidden)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = config.forget_bias
        params[f"{prefix}_b"] = Tensor(b, requires_grad=True)

    def attention(prefix, q_width, k_width):
        mat(f"{prefix}_Wq", q_width, attn)
        mat(f"{prefix}_Wk", k_width, attn)
        mat(f"{prefix}_w", attn, 1)

    for layer in range(config.enc_layers):
        in_width = 2 * d if layer == 0 else 4 * he
        lstm(f"enc{layer}_f", in_width, he)
        lstm(f"enc{layer}_b", in_width, he)

    sw = config.src_value_width
    if config.objective != "se":
        mat("src_emb", config.src_vocab_size, d)
        attention("src_att", hd, 2 * he)
        lstm("src_lstm", d + 2 * he, hd)
        if config.objective == "me":
            mat("src_out_W", hd, config.src_vocab_size)
            params["src_out_b"] = Tensor(np.zeros(config.src_vocab_size), requires_grad=True)
        else:
            mat("proj_W", hd, d)
            params["proj_b"] = Tensor(np.zeros(d), requires_grad=True)
        attention("tgt_att_s", hd, sw)

    mat("tgt_emb", config.tgt_vocab_size, d)
    attention("tgt_att_h", hd, 2 * he)
    lstm("tgt_lstm1", d + 2 * he + sw, hd)
    lstm("tgt_lstm2", hd, hd)
    mat("tgt_out_W", hd, config.tgt_vocab_size)
    params["tgt_out_b"] = Tensor(np.zeros(config.tgt_vocab_size), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Recurrent cores


def _lstm_step(params, prefix, x, h, c, mask_col=None):
    hidden = params[f"{prefix}_Wh"].data.shape[0]
    z = ad.add(ad.linear(x, params[f"{prefix}_Wx"]),
               ad.linear(h, params[f"{prefix}_Wh"], params[f"{prefix}_b"]))
    i = ad.sigmoid(ad.narrow(z, -1, 0, hidden))
    f = ad.sigmoid(ad.narrow(z, -1, hidden, hidden))
    g = ad.tanh(ad.narrow(z, -1, 2 * hidden, hidden))
    o = ad.sigmoid(ad.narrow(z, -1, 3 * hidden, hidden))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    if mask_col is not None and not np.all(mask_col == 1.0):
        keep = 1.0 - mask_col
        h_new = ad.add(ad.mul(h_new, mask_col), ad.mul(h, keep))
        c_new = ad.add(ad.mul(c_new, mask_col), ad.mul(c, keep))
    return h_new, c_new


def _run_lstm(params, prefix, xs, mask, reverse=False):
    """Batched pass over time; padded steps leave the state untouched."""
    b, t, width = xs.data.shape
    hidden = params[f"{prefix}_Wh"].data.shape[0]
    h = Tensor(np.zeros((b, hidden)))
    c = Tensor(np.zeros((b, hidden)))
    outputs = [None] * t
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for step in steps:
        x = ad.reshape(ad.narrow(xs, 1, step, 1), (b, width))
        h, c = _lstm_step(params, prefix, x, h, c, mask[:, step : step + 1])
        outputs[step] = ad.reshape(h, (b, 1, hidden))
    return ad.concat(outputs, axis=1)


def encode_batch(params, config, frames, frame_mask):
    """Pyramid encoder: pad time to a multiple of the total reduction,
    then before each bidirectional layer concatenate adjacent time pairs."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1] < 1:
        raise ModelError(f"encode: need B x T x F frames with T >= 1, got {frames.shape}")
    b, t, width = frames.shape
    if width != config.embed_dim:
        raise ModelError(f"encode: frame width {width} != configured {config.embed_dim}")
    total = config.downsample_total
    t_pad = -(-t // total) * total
    if t_pad != t:
        frames = np.concatenate([frames, np.zeros((b, t_pad - t, width))], axis=1)
        frame_mask = np.concatenate([frame_mask, np.zeros((b, t_pad - t))], axis=1)

    x = Tensor(frames)
    mask = np.asarray(frame_mask, dtype=np.float64)
    for layer in range(config.enc_layers):
        bb, tt, ww = x.data.shape
        x = ad.reshape(x, (bb, tt // 2, 2 * ww))
        mask = mask.reshape(bb, tt // 2, 2).max(axis=2)
        fwd = _run_lstm(params, f"enc{layer}_f", x, mask, reverse=False)
        bwd = _run_lstm(params, f"enc{layer}_b", x, mask, reverse=True)
        x = ad.concat([fwd, bwd], axis=-1)
    return EncoderOutput(states=x, mask=mask)


def encode(frames, params, config):
    """Single-utterance wrapper; output keeps the leading batch axis (B=1)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ModelError(f"encode: need T x F frames with T >= 1, got {frames.shape}")
    return encode_batch(params, config, frames[None, :, :], np.ones((1, frames.shape[0])))


# ---------------------------------------------------------------------------
# Attention


def _attend(wq, wk_keys, w, query, values, mask):
    """Additive attention given pre-projected keys; returns (context, weights)."""
    b, t, _ = wk_keys.data.shape
    if not (mask.sum(axis=1) > 0).all():
        raise ModelError("attention: an utterance has no unmasked positions")
    q = ad.reshape(ad.linear(query, wq), (b, 1, wq.data.shape[1]))
    scores = ad.reshape(ad.linear(ad.tanh(ad.add(wk_keys, q)), w), (b, t))
    weights = ad.softmax(scores, mask=mask)
    vwidth = values.data.shape[-1]
    context = ad.tsum(ad.mul(ad.reshape(weights, (b, t, 1)), values), axis=1)
    context = ad.reshape(context, (b, vwidth))
    return context, weights


def attend(query, keys, values, mask, wq, wk, w):
    """Single-utterance additive attention: score_i = w^T tanh(Wq q + Wk k_i)."""
    query = ad.reshape(query if isinstance(query, Tensor) else Tensor(query), (1, -1))
    keys = keys if isinstance(keys, Tensor) else Tensor(keys)
    values = values if isinstance(values, Tensor) else Tensor(values)
    t = keys.data.shape[0]
    if values.data.shape[0] != t:
        raise ModelError(f"attend: {t} keys vs {values.data.shape[0]} values")
    m = np.ones((1, t)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(1, t)
    keys3 = ad.reshape(keys, (1, t, keys.data.shape[1]))
    vals3 = ad.reshape(values, (1, t, values.data.shape[1]))
    ctx, wts = _attend(wq, ad.linear(keys3, wk), w, query, vals3, m)
    return ad.reshape(ctx, (values.data.shape[1],)), ad.reshape(wts, (t,))


# ---------------------------------------------------------------------------
# Inference-side numpy mirrors (control flow and beam scoring only)


def _np_softmax(z, temperature=1.0, mask=None):
    z = z / temperature
    if mask is not None:
        z = np.where(mask > 0, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_log_softmax(z, mask=None):
    if mask is not None:
        z = np.where(mask > 0, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _np_cosine_rows(x, rows):
    """cos(x, rows_v) with the same epsilon convention as the autodiff op."""
    nx = np.sqrt((x * x).sum() + ad.NORM_EPS)
    nr = np.sqrt((rows * rows).sum(axis=-1) + ad.NORM_EPS)
    return (rows @ x) / (nx * nr)


def _vocab_mask(size):
    m = np.ones(size)
    m[PAD_ID] = 0.0
    return m


# ---------------------------------------------------------------------------
# Recognition decoder


def _src_step(params, enc, keys_proj, emb, h, c):
    ctx, _ = _attend(params["src_att_Wq"], keys_proj, params["src_att_w"], h, enc.states, enc.mask)
    x = ad.concat([emb, ctx], axis=-1)
    return _lstm_step(params, "src_lstm", x, h, c)


def decode_source_batch(params, config, enc, in_ids):
    """Teacher-forced recognition pass; returns states B x M x dec_hidden."""
    b, m = in_ids.shape
    hd = config.dec_hidden
    h = Tensor(np.zeros((b, hd)))
    c = Tensor(np.zeros((b, hd)))
    keys_proj = ad.linear(enc.states, params["src_att_Wk"])
    states = []
    for step in range(m):
        emb = ad.take_rows(params["src_emb"], in_ids[:, step])
        h, c = _src_step(params, enc, keys_proj, emb, h, c)
        states.append(ad.reshape(h, (b, 1, hd)))
    return ad.concat(states, axis=1)


def source_heads(params, config, states3, table):
    """Per-variant outputs over stacked recognition states.

    Returns (projected B x M x D or None, distributions B x M x V or None).
    """
    if config.objective == "me":
        logits = ad.linear(states3, params["src_out_W"], params["src_out_b"])
        mask = np.broadcast_to(_vocab_mask(config.src_vocab_size), logits.data.shape)
        return None, ad.softmax(logits, mask=mask)
    projected = ad.linear(states3, params["proj_W"], params["proj_b"])
    if config.objective == "cd":
        return projected, None
    b, m, _ = projected.data.shape
    v = table.vectors.shape[0]
    cos = ad.cosine_similarity(ad.reshape(projected, (b, m, 1, config.embed_dim)),
                               Tensor(table.vectors))
    mask = np.broadcast_to(_vocab_mask(v), (b, m, v))
    return projected, ad.softmax(cos, temperature=config.tau, mask=mask)


def cs_prob(state, table, proj_w, proj_b, tau):
    """Temperature softmax over cosine similarity to every embedding row.

    ``state`` is a raw decoder state; the linear projection maps it into
    embedding space first.  The padding row is excluded.
    """
    if tau <= 0:
        raise ModelError("cs_prob: tau must be > 0")
    state = state if isinstance(state, Tensor) else Tensor(state)
    proj = ad.linear(ad.reshape(state, (1, -1)), proj_w, proj_b)
    cos = ad.cosine_similarity(ad.reshape(proj, (1, 1, -1)), Tensor(table.vectors))
    v = table.vectors.shape[0]
    dist = ad.softmax(cos, temperature=tau, mask=np.broadcast_to(_vocab_mask(v), (1, v)))
    return ad.reshape(dist, (v,))


def _free_run_source(params, config, enc, table, max_len):
    """Greedy recognition decode for one utterance (enc has B=1)."""
    hd = config.dec_hidden
    h = Tensor(np.zeros((1, hd)))
    c = Tensor(np.zeros((1, hd)))
    keys_proj = ad.linear(enc.states, params["src_att_Wk"])
    vmask = _vocab_mask(config.src_vocab_size)
    states, dist_rows, ids = [], [], []
    prev = BOS_ID
    truncated = True
    for _ in range(max_len):
        emb = ad.take_rows(params["src_emb"], np.asarray([prev]))
        h, c = _src_step(params, enc, keys_proj, emb, h, c)
        states.append(h)
        row = h.data[0]
        if config.objective == "me":
            logits = row @ params["src_out_W"].data + params["src_out_b"].data
            scores = _np_softmax(logits, mask=vmask)
            dist_rows.append(scores)
        else:
            proj = row @ params["proj_W"].data + params["proj_b"].data
            cos = _np_cosine_rows(proj, table.vectors)
            if config.objective == "cs":
                scores = _np_softmax(cos, temperature=config.tau, mask=vmask)
                dist_rows.append(scores)
            else:
                scores = np.where(vmask > 0, cos, -np.inf)
        pick = int(np.argmax(scores))
        ids.append(pick)
        if pick == EOS_ID:
            truncated = False
            break
        prev = pick
    return states, dist_rows, ids, truncated


def decode_source(enc, teacher, params, config, table=None, max_len=64):
    """Recognition decode for one utterance.

    With a teacher sequence (token ids) the decoder is forced and emits
    exactly ``len(teacher)`` states; the trainer appends EOS itself.
    Without one it runs greedily until EOS or ``max_len`` (then flagged
    truncated, not fatal).
    """
    if config.objective == "se":
        raise ModelError("the se variant has no recognition decoder")
    if config.objective != "me" and table is None:
        raise ModelError(f"{config.objective} decoding requires the embedding table")
    hd = config.dec_hidden
    if teacher is not None:
        teacher = tuple(int(i) for i in teacher)
        if not teacher:
            raise ModelError("decode_source: empty teacher sequence")
        in_ids = np.asarray([(BOS_ID,) + teacher[:-1]])
        states3 = decode_source_batch(params, config, enc, in_ids)
        projected, dists = source_heads(params, config, states3, table)
        m = len(teacher)
        return SourceDecoderOutput(
            states=ad.reshape(states3, (m, hd)),
            projected=None if projected is None else ad.reshape(projected, (m, config.embed_dim)),
            distributions=None if dists is None else ad.reshape(dists, (m, dists.data.shape[-1])),
            token_ids=None,
        )
    with ad.no_grad():
        states, dist_rows, ids, truncated = _free_run_source(params, config, enc, table, max_len)
        states3 = ad.reshape(ad.concat([ad.reshape(s, (1, 1, hd)) for s in states], axis=1),
                             (len(states), hd))
        projected, dists = (None, None)
        if config.objective != "me":
            projected = ad.linear(states3, params["proj_W"], params["proj_b"])
        if dist_rows:
            dists = Tensor(np.stack(dist_rows))
        emitted = tuple(i for i in ids if i != EOS_ID)
    return SourceDecoderOutput(
        states=states3,
        projected=projected,
        distributions=dists,
        token_ids=emitted,
        truncated=truncated,
    )


def recognize(src, table=None):
    """Greedy token readout from a recognition pass: per-step argmax,
    stop at EOS.  Falls back to cosine scores against the table when the
    variant has no distribution (cd)."""
    if src.distributions is not None:
        rows = np.asarray(src.distributions.data)
    else:
        if table is None or src.projected is None:
            raise ModelError("recognize: need distributions or projected states plus a table")
        proj = np.asarray(src.projected.data)
        rows = np.stack([_np_cosine_rows(p, table.vectors) for p in proj])
        rows = np.where(_vocab_mask(rows.shape[1]) > 0, rows, -np.inf)
    out = []
    for row in rows:
        pick = int(np.argmax(row))
        if pick == EOS_ID:
            break
        out.append(pick)
    return tuple(out)


# ---------------------------------------------------------------------------
# Translation decoder


def _tgt_step(params, config, enc, keys_h, src_vals, keys_s, src_mask, emb, state):
    h1, c1, h2, c2 = state
    ctx_h, _ = _attend(params["tgt_att_h_Wq"], keys_h, params["tgt_att_h_w"], h2, enc.states, enc.mask)
    parts = [emb, ctx_h]
    if src_vals is not None:
        ctx_s, _ = _attend(params["tgt_att_s_Wq"], keys_s, params["tgt_att_s_w"], h2, src_vals, src_mask)
        parts.append(ctx_s)
    x = ad.concat(parts, axis=-1)
    h1, c1 = _lstm_step(params, "tgt_lstm1", x, h1, c1)
    h2, c2 = _lstm_step(params, "tgt_lstm2", h1, h2, c2)
    return (h1, c1, h2, c2)


def _zero_tgt_state(b, hd):
    return tuple(Tensor(np.zeros((b, hd))) for _ in range(4))


def decode_target_batch(params, config, enc, src_vals, src_mask, in_ids,
                        sampling_p=1.0, rng=None):
    """Teacher-forced translation pass with scheduled sampling.

    Per step and per sentence, with probability 1 - sampling_p the input
    token is replaced by the previous step's argmax prediction.  Returns
    states B x Q x dec_hidden.
    """
    if config.objective != "se":
        if src_vals is None or src_vals.data.shape[1] == 0:
            raise ModelError("decode_target: recognition states required for this variant")
    elif src_vals is not None:
        raise ModelError("decode_target: the se variant does not attend recognition states")
    b, q = in_ids.shape
    hd = config.dec_hidden
    state = _zero_tgt_state(b, hd)
    keys_h = ad.linear(enc.states, params["tgt_att_h_Wk"])
    keys_s = None if src_vals is None else ad.linear(src_vals, params["tgt_att_s_Wk"])
    out_w, out_b = params["tgt_out_W"].data, params["tgt_out_b"].data

    ids = in_ids.copy()
    prev_pred = None
    states = []
    for step in range(q):
        col = ids[:, step].copy()
        if rng is not None and sampling_p < 1.0 and step > 0:
            use_model = rng.random(b) >= sampling_p
            col[use_model] = prev_pred[use_model]
        emb = ad.take_rows(params["tgt_emb"], col)
        state = _tgt_step(params, config, enc, keys_h, src_vals, keys_s, src_mask, emb, state)
        h2 = state[2]
        states.append(ad.reshape(h2, (b, 1, hd)))
        prev_pred = np.argmax(h2.data @ out_w + out_b, axis=1)
    return ad.concat(states, axis=1)


def target_distributions(params, states3):
    logits = ad.linear(states3, params["tgt_out_W"], params["tgt_out_b"])
    mask = np.broadcast_to(_vocab_mask(logits.data.shape[-1]), logits.data.shape)
    return ad.softmax(logits, mask=mask)


def decode_target(enc, src, teacher, sampling_p, params, config, rng=None):
    """Translation decode for one utterance under teacher forcing.

    ``src`` is the recognition output (None for se).  Emits exactly
    ``len(teacher)`` distributions.
    """
    teacher = tuple(int(i) for i in teacher)
    if not teacher:
        raise ModelError("decode_target: empty teacher sequence")
    src_vals = None
    src_mask = None
    if config.objective != "se":
        if src is None or src.states.data.shape[0] == 0:
            raise ModelError("decode_target: recognition states required for this variant")
        vals2 = _src_attention_values(src, config)
        m = vals2.data.shape[0]
        src_vals = ad.reshape(vals2, (1, m, vals2.data.shape[1]))
        src_mask = np.ones((1, m))
    elif src is not None:
        raise ModelError("decode_target: the se variant does not attend recognition states")
    in_ids = np.asarray([(BOS_ID,) + teacher[:-1]])
    states3 = decode_target_batch(params, config, enc, src_vals, src_mask, in_ids,
                                  sampling_p=sampling_p, rng=rng)
    dists = target_distributions(params, states3)
    qn = len(teacher)
    return TargetDecoderOutput(
        states=ad.reshape(states3, (qn, config.dec_hidden)),
        distributions=ad.reshape(dists, (qn, config.tgt_vocab_size)),
    )


def _src_attention_values(src, config):
    """What the translation decoder attends on the recognition side."""
    if config.objective == "me" or config.attend_raw_states:
        return src.states
    return src.projected


# ---------------------------------------------------------------------------
# Losses (single-utterance forms; the trainer builds batched equivalents)


def _neg_log(probs):
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    _note_clamped(int((probs.data < PROB_FLOOR).sum()))
    return ad.neg(ad.log(ad.clamp_min(probs, PROB_FLOOR)))


def multitask_loss(src_probs, tgt_probs, alpha, beta):
    """alpha * mean_m(-log P(y^_m)) + beta * mean_q(-log P(y_q))."""
    src_nll = _neg_log(src_probs)
    tgt_nll = _neg_log(tgt_probs)
    if src_nll.data.size < 1 or tgt_nll.data.size < 1:
        raise ModelError("multitask_loss: need at least one step on each side")
    return ad.add(ad.mul(Tensor(float(alpha)), ad.tmean(src_nll)),
                  ad.mul(Tensor(float(beta)), ad.tmean(tgt_nll)))


def _gather_steps(dists3_data, out_ids):
    """Probability assigned to each realized token: (B, N) from (B, N, V)."""
    b, n = out_ids.shape
    return dists3_data[np.arange(b)[:, None], np.arange(n)[None, :], out_ids]


def cd_loss(projected, refs):
    """Sum over steps of (1 - cos) between projections and reference embeddings."""
    projected = projected if isinstance(projected, Tensor) else Tensor(projected)
    refs = refs if isinstance(refs, Tensor) else Tensor(np.asarray(refs, dtype=np.float64))
    if projected.data.shape != refs.data.shape:
        raise ModelError(f"cd_loss: shapes {projected.data.shape} vs {refs.data.shape}")
    cos = ad.cosine_similarity(projected, refs)
    return ad.tsum(ad.add(Tensor(1.0), ad.neg(cos)))


def cs_loss(distributions, target_ids):
    """Sum over steps of -log P_CS(target)."""
    if isinstance(distributions, (list, tuple)):
        rows = [d if isinstance(d, Tensor) else Tensor(d) for d in distributions]
        dists = ad.concat([ad.reshape(r, (1, r.data.size)) for r in rows], axis=0)
    elif isinstance(distributions, Tensor):
        dists = distributions
    else:
        dists = Tensor(np.asarray(distributions, dtype=np.float64))
    ids = np.asarray(target_ids, dtype=np.intp)
    rows = dists.data[np.arange(len(ids)), ids]
    _note_clamped(int((rows < PROB_FLOOR).sum()))
    lp = ad.log(ad.clamp_min(dists, PROB_FLOOR))
    return ad.cross_entropy_from_log_probs(lp, ids)


def se_loss(tgt_probs):
    """Per-token target cross-entropy: mean_q(-log P(y_q))."""
    nll = _neg_log(tgt_probs)
    if nll.data.size < 1:
        raise ModelError("se_loss: need at least one step")
    return ad.tmean(nll)


# ---------------------------------------------------------------------------
# Batched training objective


def _shift_ids(ids, mask):
    """BOS-prefixed inputs and EOS-terminated outputs for teacher forcing."""
    b, n = ids.shape
    lens = mask.sum(axis=1).astype(int)
    in_ids = np.full((b, n + 1), PAD_ID, dtype=np.int64)
    out_ids = np.full((b, n + 1), PAD_ID, dtype=np.int64)
    out_mask = np.zeros((b, n + 1))
    in_ids[:, 0] = BOS_ID
    in_ids[:, 1:] = ids
    for i, ln in enumerate(lens):
        out_ids[i, :ln] = ids[i, :ln]
        out_ids[i, ln] = EOS_ID
        out_mask[i, : ln + 1] = 1.0
    return in_ids, out_ids, out_mask, lens + 1


def _weighted_ce(dists3, out_ids, weights):
    """Clamped cross-entropy over flattened step distributions."""
    b, n, v = dists3.data.shape
    flat_ids = out_ids.reshape(-1)
    flat_w = weights.reshape(-1)
    picked = _gather_steps(dists3.data, out_ids).reshape(-1)
    _note_clamped(int(((picked < PROB_FLOOR) & (flat_w > 0)).sum()))
    lp = ad.log(ad.clamp_min(dists3, PROB_FLOOR))
    return ad.cross_entropy_from_log_probs(ad.reshape(lp, (b * n, v)), flat_ids, flat_w)


def batch_loss(params, config, batch, table, rng=None):
    """Variant objective averaged over the batch.

    Each sentence's side losses are normalized by its own step count
    (EOS included), then averaged over sentences, so the value is
    comparable across batch sizes.  Returns (loss Tensor, stats dict).
    """
    b = batch.frames.shape[0]
    enc = encode_batch(params, config, batch.frames, batch.frame_mask)
    tgt_in, tgt_out, tgt_mask, tgt_counts = _shift_ids(batch.tgt_ids, batch.tgt_mask)
    stats = {}
    parts = []

    src_vals = None
    src_att_mask = None
    if config.objective != "se":
        src_in, src_out, src_mask, src_counts = _shift_ids(batch.src_ids, batch.src_mask)
        states3 = decode_source_batch(params, config, enc, src_in)
        projected, dists = source_heads(params, config, states3, table)
        src_w = src_mask * (config.alpha / src_counts[:, None]) / b
        if config.objective == "cd":
            refs = ad.take_rows(Tensor(table.vectors), src_out)
            cos = ad.cosine_similarity(projected, refs)
            dist = ad.add(Tensor(1.0), ad.neg(cos))
            parts.append(ad.tsum(ad.mul(Tensor(src_w), dist)))
            stats["cd_mean_cos"] = float((cos.data * src_mask).sum() / src_mask.sum())
        else:
            parts.append(_weighted_ce(dists, src_out, src_w))
            nll = -np.log(np.maximum(_gather_steps(dists.data, src_out), PROB_FLOOR))
            stats["src_token_nll"] = float((nll * src_mask).sum() / src_mask.sum())
        src_vals = states3 if (config.objective == "me" or config.attend_raw_states) else projected
        src_att_mask = src_mask

    tstates = decode_target_batch(params, config, enc, src_vals, src_att_mask, tgt_in,
                                  sampling_p=config.scheduled_sampling_p, rng=rng)
    tdists = target_distributions(params, tstates)
    tgt_w = tgt_mask * (config.beta / tgt_counts[:, None]) / b
    parts.append(_weighted_ce(tdists, tgt_out, tgt_w))

    nll = -np.log(np.maximum(_gather_steps(tdists.data, tgt_out), PROB_FLOOR))
    stats["tgt_token_nll"] = float((nll * tgt_mask).sum() / tgt_mask.sum())

    loss = parts[0]
    for p in parts[1:]:
        loss = ad.add(loss, p)
    stats["loss"] = float(loss.data)
    return loss, stats


# ---------------------------------------------------------------------------
# Search


def translate(frames, params, config, table, beam=4, max_len=64, src_max_len=None):
    """Length-normalized beam search over the translation decoder.

    The recognition decoder runs free (greedy) first for non-se
    variants.  Returns the best hypothesis with its normalized score.
    """
    if beam < 1:
        raise ModelError(f"translate: beam must be >= 1, got {beam}")
    if src_max_len is None:
        src_max_len = max_len
    with ad.no_grad():
        enc = encode(frames, params, config)
        src_vals = None
        src_mask = None
        src_ids = None
        src_trunc = False
        if config.objective != "se":
            src = decode_source(enc, None, params, config, table=table, max_len=src_max_len)
            src_ids, src_trunc = src.token_ids, src.truncated
            vals2 = _src_attention_values(src, config)
            m = vals2.data.shape[0]
            src_vals = ad.reshape(vals2, (1, m, vals2.data.shape[1]))
            src_mask = np.ones((1, m))

        keys_h = ad.linear(enc.states, params["tgt_att_h_Wk"])
        keys_s = None if src_vals is None else ad.linear(src_vals, params["tgt_att_s_Wk"])
        out_w, out_b = params["tgt_out_W"].data, params["tgt_out_b"].data
        hd = config.dec_hidden
        vmask = _vocab_mask(config.tgt_vocab_size)

        # hypothesis: (tokens, logp, state, prev_id, steps)
        live = [((), 0.0, _zero_tgt_state(1, hd), BOS_ID, 0)]
        done = []
        for _ in range(max_len):
            if not live:
                break
            candidates = []
            for tokens, logp, state, prev, steps in live:
                emb = ad.take_rows(params["tgt_emb"], np.asarray([prev]))
                nstate = _tgt_step(params, config, enc, keys_h, src_vals, keys_s, src_mask,
                                   emb, state)
                lp = _np_log_softmax(nstate[2].data[0] @ out_w + out_b, mask=vmask)
                top = np.lexsort((np.arange(lp.size), -lp))[:beam]
                for tid in top:
                    tid = int(tid)
                    candidates.append((tokens + (tid,), logp + float(lp[tid]), nstate, tid, steps + 1))
            candidates.sort(key=lambda h: (-h[1], h[0]))
            live = []
            for tokens, logp, state, prev, steps in candidates[:beam]:
                if prev == EOS_ID:
                    done.append((tokens[:-1], logp / steps, False))
                else:
                    live.append((tokens, logp, state, prev, steps))
        for tokens, logp, _, _, steps in live:
            done.append((tokens, logp / max(steps, 1), True))
        done.sort(key=lambda h: (-h[1], h[0]))
        best_tokens, best_score, truncated = done[0]
    return TranslationResult(
        token_ids=best_tokens,
        score=best_score,
        truncated=truncated,
        src_token_ids=src_ids,
        src_truncated=src_trunc,
    )


def recognize_frames(frames, params, config, table, max_len=64):
    """Free-running recognition readout for one utterance."""
    with ad.no_grad():
        enc = encode(frames, params, config)
        src = decode_source(enc, None, params, config, table=table, max_len=max_len)
    return src.token_ids, src.truncated


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params, meta):
    """Binary container: parameter arrays plus a JSON metadata blob."""
    arrays = {f"param/{k}": np.ascontiguousarray(v.data) for k, v in sorted(params.items())}
    blob = json.dumps({"format_version": CKPT_FORMAT_VERSION, "meta": meta},
                      sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (params dict of trainable Tensors, meta dict)."""
    with np.load(path) as z:
        if "__meta__" not in z:
            raise ModelError(f"{path}: not a checkpoint (missing metadata)")
        blob = json.loads(bytes(z["__meta__"].tobytes()).decode("utf-8"))
        if blob.get("format_version") != CKPT_FORMAT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
        params = {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = Tensor(z[key].astype(np.float64),
                                                     requires_grad=True)
    return params, blob["meta"]
