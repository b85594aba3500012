"""Byte-pair encoding: learn merges on word frequencies, segment, undo.

Words are split into characters plus a separate end-of-word marker
symbol; merges are learned greedily by pair frequency and applied in
training order.  On output a bare trailing marker is fused into the
last piece, so every emitted word ends with a marker-suffixed token and
decode can restore spaces exactly.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .embeddings import UNK

MARKER = "</w>"


class BpeModelError(ValueError):
    """A merge references symbols that could never have been produced."""


@dataclass(frozen=True)
class BpeModel:
    merges: tuple          # ordered (left, right) symbol pairs
    alphabet: frozenset    # characters seen at training time
    subwords: tuple        # emitted pieces over the training corpus, sorted
    marker: str = MARKER
    exhausted: bool = False  # corpus ran out of pairs before num_merges
    requested_merges: int = 0


def _merge_pass(syms, left, right):
    # single left-to-right pass; one pass removes every occurrence
    merged = left + right
    out = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def _emit(syms, marker):
    if len(syms) >= 2 and syms[-1] == marker:
        syms = syms[:-2] + [syms[-2] + marker]
    return syms


def _encode_word(word, model):
    syms = [c if c in model.alphabet else UNK for c in word]
    syms.append(model.marker)
    for left, right in model.merges:
        if len(syms) < 2:
            break
        syms = _merge_pass(syms, left, right)
    return _emit(syms, model.marker)


def bpe_train(corpus_text, num_merges, marker=MARKER):
    """Learn `num_merges` merges from whitespace-tokenized text.

    Ties on pair frequency go to the lexicographically smallest pair.
    If the corpus runs out of adjacent pairs first, the model is
    flagged `exhausted` and carries fewer merges.
    """
    if num_merges < 0:
        raise ValueError(f"bpe_train: num_merges must be >= 0, got {num_merges}")
    words = Counter(corpus_text.split())
    if not words:
        raise ValueError("bpe_train: empty corpus")
    if any(marker in w for w in words):
        raise ValueError(f"bpe_train: corpus contains the marker string {marker!r}")

    seqs = {w: list(w) + [marker] for w in words}
    alphabet = frozenset(c for w in words for c in w)
    merges = []
    exhausted = False
    for _ in range(num_merges):
        pairs = Counter()
        for w, cnt in words.items():
            syms = seqs[w]
            for i in range(len(syms) - 1):
                pairs[syms[i], syms[i + 1]] += cnt
        if not pairs:
            exhausted = True
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        for w in seqs:
            seqs[w] = _merge_pass(seqs[w], *best)

    pieces = sorted({p for syms in seqs.values() for p in _emit(list(syms), marker)})
    return BpeModel(
        merges=tuple(merges),
        alphabet=alphabet,
        subwords=tuple(pieces),
        marker=marker,
        exhausted=exhausted,
        requested_merges=num_merges,
    )


def validate_model(model):
    """Check every merge side is producible from the alphabet or earlier merges."""
    producible = {model.marker} | set(model.alphabet) | {UNK}
    for left, right in model.merges:
        if left not in producible or right not in producible:
            raise BpeModelError(f"unproducible merge ({left!r}, {right!r})")
        producible.add(left + right)


def bpe_apply(model, sentence):
    """Segment a sentence into subword tokens using the model's merges.

    Out-of-alphabet characters become the unknown piece; round-trip
    with bpe_decode is exact only for in-alphabet text.
    """
    validate_model(model)
    tokens = []
    cache = {}
    for word in sentence.split():
        got = cache.get(word)
        if got is None:
            got = cache[word] = _encode_word(word, model)
        tokens.extend(got)
    return tokens


def bpe_decode(model, subwords):
    """Join subword tokens back into a sentence; markers restore spaces."""
    words = []
    buf = []
    for tok in subwords:
        if tok.endswith(model.marker):
            buf.append(tok[: len(tok) - len(model.marker)])
            words.append("".join(buf))
            buf = []
        else:
            buf.append(tok)
    if buf:
        words.append("".join(buf))
    return " ".join(words)


def save_bpe(model, path, config_hash=None):
    payload = {
        "alphabet": sorted(model.alphabet),
        "config_hash": config_hash,
        "exhausted": model.exhausted,
        "marker": model.marker,
        "merges": [list(p) for p in model.merges],
        "requested_merges": model.requested_merges,
        "subwords": list(model.subwords),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bpe(path):
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    try:
        model = BpeModel(
            merges=tuple((a, b) for a, b in payload["merges"]),
            alphabet=frozenset(payload["alphabet"]),
            subwords=tuple(payload["subwords"]),
            marker=payload["marker"],
            exhausted=bool(payload["exhausted"]),
            requested_merges=int(payload["requested_merges"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BpeModelError(f"malformed model file {path}: {e}") from None
    validate_model(model)
    return model
