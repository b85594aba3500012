"""Vocabularies and pre-trained word embedding tables.

The on-disk format is the plain ``.vec`` text layout: a ``<count> <dim>``
header followed by one ``<token> v1 ... v_dim`` line per word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class VecParseError(ValueError):
    """Malformed .vec file; message carries the 1-based line number."""


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token list with the four reserved entries at ids 0..3."""

    tokens: tuple

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise VocabError("vocab must start with the reserved tokens")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, real_tokens):
        for tok in real_tokens:
            if tok in RESERVED:
                raise VocabError(f"token {tok!r} collides with a reserved symbol")
        return cls(RESERVED + tuple(real_tokens))

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self._index.get(token, UNK_ID)

    def __contains__(self, token):
        return token in self._index

    def token(self, i):
        return self.tokens[i]

    @property
    def real_tokens(self):
        return self.tokens[4:]

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


class EmbeddingTable:
    """Vocabulary plus a |V| x D matrix of fixed word vectors.

    Row 0 (padding) is all zeros; the other reserved rows hold the mean
    of the real vectors so they sit inside the embedding cloud.  When
    ``unit_normalized`` every row except padding has unit norm.
    """

    def __init__(self, vocab, vectors, unit_normalized=False):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[0] != len(vocab):
            raise VocabError(f"{vectors.shape[0]} rows for {len(vocab)} tokens")
        if not np.isfinite(vectors).all():
            raise VocabError("embedding table contains non-finite values")
        self.vocab = vocab
        self.vectors = vectors
        self.unit_normalized = unit_normalized

    @classmethod
    def from_real_vectors(cls, real_tokens, real_vectors, unit_normalize=False):
        real_vectors = np.asarray(real_vectors, dtype=np.float64)
        if unit_normalize:
            real_vectors = _unit_rows(real_vectors)
        mean = real_vectors.mean(axis=0)
        if unit_normalize:
            mean = _unit_rows(mean[None])[0]
        dim = real_vectors.shape[1]
        reserved = np.stack([np.zeros(dim), mean, mean, mean])
        vocab = Vocab.build(tuple(real_tokens))
        return cls(vocab, np.concatenate([reserved, real_vectors]), unit_normalize)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def row(self, token):
        return self.vectors[self.vocab.id(token)]

    def normalized(self):
        """Copy with every nonzero row scaled to unit norm (padding stays zero)."""
        return EmbeddingTable(self.vocab, _unit_rows(self.vectors), unit_normalized=True)


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.where(norms > 0, m / np.where(norms > 0, norms, 1.0), m)


def load_vec(path, limit=None, unit_normalize=False):
    """Parse a .vec file into an EmbeddingTable.

    Loads the first ``min(count, limit)`` entries in file order.  Raises
    VecParseError (with the offending line number) on a malformed
    header, a row of the wrong width, or a duplicate token.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
        parts = header.split()
        if len(parts) != 2:
            raise VecParseError(f"line 1: expected '<count> <dim>' header, got {header!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise VecParseError(f"line 1: non-integer header fields in {header!r}") from None
        if count < 0 or dim <= 0:
            raise VecParseError(f"line 1: invalid header values {count} {dim}")
        n = count if limit is None else min(count, limit)
        tokens, rows = [], []
        seen = set()
        for lineno in range(2, n + 2):
            line = fh.readline()
            if not line:
                raise VecParseError(f"line {lineno}: file ends before {n} entries")
            fields = line.rstrip("\r\n").split(" ")
            token, values = fields[0], fields[1:]
            if len(values) != dim:
                raise VecParseError(f"line {lineno}: expected {dim} values, got {len(values)}")
            if token in seen:
                raise VecParseError(f"line {lineno}: duplicate token {token!r}")
            try:
                row = np.array([float(v) for v in values])
            except ValueError:
                raise VecParseError(f"line {lineno}: non-numeric value") from None
            seen.add(token)
            tokens.append(token)
            rows.append(row)
    if not tokens:
        raise VecParseError("line 1: file holds no entries")
    return EmbeddingTable.from_real_vectors(tokens, np.stack(rows), unit_normalize)


def save_vec(table, path):
    """Write the real-token rows with 17 significant digits (round-trip exact)."""
    real = table.vocab.real_tokens
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(real)} {table.dim}\n")
        for tok in real:
            row = table.row(tok)
            fh.write(tok + " " + " ".join(f"{v:.17g}" for v in row) + "\n")


def nearest_neighbors(table, query, k):
    """Exact top-k real tokens by cosine, ties broken by ascending token id.

    Reserved rows (padding and the mean-vector markers) are not
    retrieval candidates.
    """
    query = np.asarray(query, dtype=np.float64)
    if not np.any(query):
        raise ValueError("nearest_neighbors: zero query vector")
    n_real = len(table.vocab.real_tokens)
    if k > n_real:
        raise ValueError(f"k={k} exceeds vocabulary size {n_real}")
    m = table.vectors[UNK_ID + 1:]
    dots = m @ query
    norms = np.sqrt((m * m).sum(axis=1) + 1e-12)
    qnorm = np.sqrt(query @ query + 1e-12)
    cos = dots / (norms * qnorm)
    order = np.lexsort((np.arange(len(cos)), -cos))[:k]
    return [(table.vocab.token(i + UNK_ID + 1), float(cos[i])) for i in order]
