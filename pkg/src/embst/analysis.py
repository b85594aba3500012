"""Embedding-space diagnostics for trained models.

Extracts per-word averaged recognition-decoder states ("predicted
embeddings"), compares that space against the pre-trained table via
Laplacian eigenvalue similarity, aligns the two spaces with orthogonal
Procrustes fitted on a small frequent-word dictionary, retrieves with
CSLS, and measures hubness of the neighborhood graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import NORM_EPS
from .embeddings import EOS_ID

log = logging.getLogger("embst.analysis")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class PredictedEmbeddingSet:
    words: tuple
    vectors: np.ndarray   # n x D' (decoder width for me, embed dim for cd/cs)
    counts: tuple         # occurrences averaged per word


@dataclass(frozen=True)
class AlignmentResult:
    w: np.ndarray         # D x D orthogonal; rows map as x @ w.T
    words: tuple          # row order of x and y
    train_words: tuple
    eval_words: tuple
    x: np.ndarray         # unit-row predicted vectors (reduced to D if needed)
    y: np.ndarray         # unit-row pre-trained vectors
    k_nn: int = 10


def _vectors_of(space):
    if isinstance(space, PredictedEmbeddingSet):
        return np.asarray(space.vectors, dtype=np.float64)
    return np.asarray(space, dtype=np.float64)


def _unit_rows(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    out = np.zeros_like(x)
    nz = norms[:, 0] > 0
    out[nz] = x[nz] / norms[nz]
    return out


def _cosine_matrix(a, b):
    return _unit_rows(a) @ _unit_rows(b).T


# ---------------------------------------------------------------------------
# Spectral similarity


def _adjacency(vectors):
    c = _cosine_matrix(vectors, vectors)
    s = (c + c.T) / 2.0
    np.fill_diagonal(s, 0.0)
    s = np.maximum(s, 0.0)
    assert np.array_equal(s, s.T), "similarity adjacency must be symmetric"
    return s


def laplacian_eigenvalues(vectors):
    """Ascending eigenvalues of L = D - S with S_ij = max(0, cos), S_ii = 0."""
    s = _adjacency(_vectors_of(vectors))
    lap = np.diag(s.sum(axis=1)) - s
    return np.linalg.eigvalsh(lap)


def _k_at_energy(eigenvalues, fraction=0.9):
    total = eigenvalues.sum()
    if total <= 0:
        return len(eigenvalues)
    cum = np.cumsum(eigenvalues) / total
    return int(np.argmax(cum > fraction)) + 1


def eigenvector_similarity(a, b):
    """Squared distance between leading Laplacian spectra of two spaces.

    0 means (approximately) isospectral similarity graphs; grows with
    structural difference.  Uses the smaller of the two 90%-energy
    eigenvalue counts so the measure is symmetric.
    """
    va, vb = _vectors_of(a), _vectors_of(b)
    if isinstance(a, PredictedEmbeddingSet) and isinstance(b, PredictedEmbeddingSet):
        if a.words != b.words:
            raise AnalysisError("eigenvector_similarity: word lists differ")
    if va.shape[0] != vb.shape[0]:
        raise AnalysisError(f"eigenvector_similarity: {va.shape[0]} vs {vb.shape[0]} rows")
    if va.shape[0] < 3:
        raise AnalysisError("eigenvector_similarity: need at least 3 words")
    la = laplacian_eigenvalues(va)
    lb = laplacian_eigenvalues(vb)
    k = min(_k_at_energy(la), _k_at_energy(lb))
    d = la[:k] - lb[:k]
    return float((d * d).sum())


# ---------------------------------------------------------------------------
# Alignment


def procrustes_fit(x, y):
    """Best orthogonal map W (column convention y ~ W x) from paired rows.

    W = U V^T with U S V^T the SVD of Y^T X; apply to row vectors as
    x @ W.T.  A rank-deficient cross-covariance still yields a valid
    orthogonal W; it is only logged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise AnalysisError(f"procrustes_fit: shapes {x.shape} vs {y.shape}")
    u, s, vt = np.linalg.svd(y.T @ x)
    if s.size and s[-1] <= 1e-12 * max(s[0], 1.0):
        log.warning("procrustes_fit: rank-deficient cross-covariance (smallest sv %.3g)", s[-1])
    return u @ vt


def csls_scores(query, candidates, mapped_queries=None, k_nn=10):
    """CSLS(x, y) = 2 cos(x,y) - r(y) - r(x) for one mapped query against all
    candidates.  r(y) is the mean cosine of candidate y to its nearest mapped
    queries, r(x) the mean cosine of the query to its nearest candidates;
    neighborhood sizes are capped by the available points."""
    if k_nn < 1:
        raise AnalysisError("csls: k_nn must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    c = _vectors_of(candidates)
    mq = q[None, :] if mapped_queries is None else np.asarray(mapped_queries, dtype=np.float64)
    cos_qc = _cosine_matrix(q[None, :], c)[0]          # (n,)
    cos_mc = _cosine_matrix(mq, c)                     # (m, n)
    kq = min(k_nn, cos_mc.shape[0])
    kc = min(k_nn, c.shape[0])
    r_y = np.sort(cos_mc, axis=0)[-kq:, :].mean(axis=0)
    r_x = np.sort(cos_qc)[-kc:].mean()
    return 2.0 * cos_qc - r_y - r_x


def csls_rank(query, candidates, mapped_queries=None, k_nn=10):
    """Candidate indices by descending CSLS score, ties to the lower index."""
    scores = csls_scores(query, candidates, mapped_queries, k_nn)
    return np.lexsort((np.arange(scores.size), -scores))


def reduce_to_dim(x_all, x_train, y_train):
    """Least-squares map from a wide predicted space onto the reference width."""
    a, *_ = np.linalg.lstsq(x_train, y_train, rcond=None)
    return x_all @ a


def build_alignment(pred, table, train_words, eval_words, k_nn=10):
    """Fit Procrustes on the train dictionary; keep everything needed for
    retrieval.  Words missing from the predicted set are dropped."""
    have = set(pred.words)
    train_words = tuple(w for w in train_words if w in have)
    eval_words = tuple(w for w in eval_words if w in have)
    if set(train_words) & set(eval_words):
        raise AnalysisError("alignment: train and eval dictionaries overlap")
    if not train_words:
        raise AnalysisError("alignment: empty train dictionary")
    if not eval_words:
        raise AnalysisError("alignment: empty eval dictionary")
    words = train_words + eval_words
    index = {w: i for i, w in enumerate(pred.words)}
    x = np.stack([pred.vectors[index[w]] for w in words])
    y = np.stack([table.vectors[table.vocab.id(w)] for w in words])
    d = y.shape[1]
    if x.shape[1] != d:
        n_train = len(train_words)
        x = reduce_to_dim(x, x[:n_train], y[:n_train])
    x = _unit_rows(x)
    y = _unit_rows(y)
    w = procrustes_fit(x[: len(train_words)], y[: len(train_words)])
    if np.abs(w.T @ w - np.eye(d)).max() >= 1e-8:
        raise AnalysisError("alignment: mapping failed orthogonality check")
    return AlignmentResult(w=w, words=words, train_words=train_words,
                           eval_words=eval_words, x=x, y=y, k_nn=k_nn)


def precision_at_k(alignment, k):
    """Fraction of eval words whose own reference vector is in the CSLS top-k.

    Candidates are all aligned words; the query population for the local
    scaling terms is every mapped word vector.
    """
    if k < 1:
        raise AnalysisError("precision_at_k: k must be >= 1")
    if not alignment.eval_words:
        raise AnalysisError("precision_at_k: empty eval dictionary")
    mapped = alignment.x @ alignment.w.T
    n_train = len(alignment.train_words)
    hits = 0
    for j, word in enumerate(alignment.eval_words):
        gold = n_train + j
        order = csls_rank(mapped[gold], alignment.y, mapped, alignment.k_nn)
        if gold in order[:k]:
            hits += 1
    return hits / len(alignment.eval_words)


# ---------------------------------------------------------------------------
# Hubness


def hubness_skewness(space, k=10):
    """Sample skewness of N_k, the count of points having each point in
    their cosine k-nearest neighborhood.  Constant N_k gives 0."""
    v = _vectors_of(space)
    n = v.shape[0]
    if n <= k:
        raise AnalysisError(f"hubness_skewness: need more than k={k} points, got {n}")
    cos = _cosine_matrix(v, v)
    np.fill_diagonal(cos, -np.inf)
    counts = np.zeros(n)
    for i in range(n):
        top = np.lexsort((np.arange(n), -cos[i]))[:k]
        counts[top] += 1
    centered = counts - counts.mean()
    m2 = (centered ** 2).mean()
    if m2 == 0:
        return 0.0
    m3 = (centered ** 3).mean()
    return float(m3 / m2 ** 1.5)


# ---------------------------------------------------------------------------
# Model-facing orchestration


def extract_predicted(params, config, table, corpus, word_set):
    """Teacher-forced recognition states averaged per word.

    Uses f(s) projections for cd/cs and raw states for me.  Sentences
    containing out-of-set words are skipped; words never seen yield no
    row.  Empty result is a warning, not an error.
    """
    if config.objective == "se":
        raise AnalysisError("extract_predicted: the se variant has no recognition decoder")
    wanted = set(word_set)
    sums = {}
    counts = {}
    with ad.no_grad():
        for u in corpus.utterances:
            if any(t not in wanted for t in u.source):
                continue
            teacher = list(table.vocab.encode(u.source)) + [EOS_ID]
            enc = M.encode(u.frames, params, config)
            src = M.decode_source(enc, teacher, params, config, table=table)
            vecs = (src.states if config.objective == "me" else src.projected).data
            for pos, tok in enumerate(u.source):
                if tok in sums:
                    sums[tok] = sums[tok] + vecs[pos]
                    counts[tok] += 1
                else:
                    sums[tok] = vecs[pos].copy()
                    counts[tok] = 1
    words = tuple(w for w in word_set if w in counts)
    if not words:
        log.warning("extract_predicted: no in-set sentences; empty embedding set")
        return PredictedEmbeddingSet(words=(), vectors=np.zeros((0, 0)), counts=())
    vectors = np.stack([sums[w] / counts[w] for w in words])
    return PredictedEmbeddingSet(words=words, vectors=vectors,
                                 counts=tuple(counts[w] for w in words))


def choose_analysis_words(corpus, limit=500, train_fraction=0.1):
    """Most frequent source words, split into train/eval dictionaries.

    Frequency ties break toward the lower token id.  The train slice is
    the top tenth (at least one word), mirroring a 500/50/450 split.
    """
    freq = {}
    for u in corpus.utterances:
        for t in u.source:
            freq[t] = freq.get(t, 0) + 1
    vocab = corpus.src_vocab
    ranked = sorted(freq, key=lambda w: (-freq[w], vocab.id(w)))
    word_set = tuple(ranked[: min(limit, len(ranked))])
    n_train = max(1, round(len(word_set) * train_fraction))
    return word_set, word_set[:n_train], word_set[n_train:]


def analyze_model(params, config, table, freq_corpus, eval_corpus=None,
                  config_hash=None, k_nn=10, word_limit=500, hubness_k=10):
    """Full diagnostic report for one trained model against its table.

    Word frequencies come from freq_corpus (normally the training split);
    predicted embeddings are extracted from eval_corpus (normally the test
    split), restricted to sentences made only of the frequent words.
    """
    if eval_corpus is None:
        eval_corpus = freq_corpus
    word_set, train_words, eval_words = choose_analysis_words(freq_corpus, limit=word_limit)
    pred = extract_predicted(params, config, table, eval_corpus, word_set)
    if len(pred.words) < 3:
        raise AnalysisError(f"analysis needs >= 3 predicted words, got {len(pred.words)}")
    ref = np.stack([table.vectors[table.vocab.id(w)] for w in pred.words])
    eig = eigenvector_similarity(pred, ref)
    alignment = build_alignment(pred, table,
                                [w for w in train_words if w in pred.words],
                                [w for w in eval_words if w in pred.words], k_nn=k_nn)
    hub_k = min(hubness_k, len(pred.words) - 1)
    return {
        "config_hash": config_hash,
        "eigenvector_similarity": eig,
        "hubness_skewness": hubness_skewness(alignment.x, k=hub_k),
        "p_at_1": precision_at_k(alignment, 1),
        "p_at_5": precision_at_k(alignment, 5),
        "word_count": len(pred.words),
    }
