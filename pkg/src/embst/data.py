"""Synthetic speech-translation corpora: generation, disk format, batching.

Utterances are built from a fabricated unit-norm embedding table: every
source token emits a few frames of its embedding vector plus gaussian
noise, bracketed by a shared begin/end frame signature, so the mapping
from audio to semantics is exactly recoverable at zero noise.  Target
sentences come from a generated bilingual lexicon with 1-4 synonyms per
word and an identity or reverse word-order rule; dev and test carry 4
references that enumerate the synonym choices.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .bpe import validate_model, _encode_word
from .embeddings import (BOS_ID, EOS_ID, PAD_ID, RESERVED, UNK_ID, EmbeddingTable, Vocab,
                         load_vec, save_vec)

REORDER_MODES = ("identity", "reverse")
DEV_REFS = 4

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class SynthSpecError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for corpus generation; seed fixes everything downstream."""

    vocab_size: int
    embed_dim: int = 16
    frames_min: int = 1
    frames_max: int = 3
    noise_std: float = 0.0
    len_min: int = 1
    len_max: int = 8
    n_train: int = 100
    n_dev: int = 20
    n_test: int = 20
    zipf_exponent: float = 1.0
    seed: int = 0
    reorder: str = "identity"

    def validate(self):
        if self.vocab_size < 10:
            raise SynthSpecError("vocab_size must be >= 10 (analysis splits need headroom)")
        if self.embed_dim < 2:
            raise SynthSpecError("embed_dim must be >= 2")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise SynthSpecError("need 1 <= frames_min <= frames_max")
        if self.noise_std < 0:
            raise SynthSpecError("noise_std must be >= 0")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise SynthSpecError("need 1 <= len_min <= len_max")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise SynthSpecError("split sizes must be >= 0")
        if self.zipf_exponent < 0:
            raise SynthSpecError("zipf_exponent must be >= 0")
        if self.reorder not in REORDER_MODES:
            raise SynthSpecError(f"reorder must be one of {REORDER_MODES}, got {self.reorder!r}")
        return self


@dataclass(frozen=True)
class Utterance:
    frames: np.ndarray   # T x F float64
    source: tuple        # source tokens
    targets: tuple       # 1..4 reference token tuples


class ParallelCorpus:
    """Aligned (frames, source tokens, target references) with vocab handles."""

    def __init__(self, utterances, src_vocab, tgt_vocab):
        utterances = tuple(utterances)
        for i, u in enumerate(utterances):
            if not np.all(np.isfinite(u.frames)):
                raise CorpusFormatError(f"utterance {i}: non-finite frames")
            if len(u.targets) < 1:
                raise CorpusFormatError(f"utterance {i}: no target reference")
        self.utterances = utterances
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    def __len__(self):
        return len(self.utterances)


@dataclass(frozen=True)
class SynthResult:
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus
    table: EmbeddingTable
    lexicon: dict         # source word -> tuple of target synonyms
    source_words: tuple   # frequency-rank order
    target_words: tuple


def _gen_words(rng, count, taken):
    words = []
    tries = 0
    while len(words) < count:
        tries += 1
        if tries > 1000 * (count + 1):
            raise SynthSpecError("word generator exhausted; vocab too large for syllable space")
        n = int(rng.integers(1, 4))
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n)
        )
        if w in taken:
            continue
        taken.add(w)
        words.append(w)
    return words


def _map_reference(source, lexicon, ref_index, reorder):
    mapped = [lexicon[w][ref_index % len(lexicon[w])] for w in source]
    if reorder == "reverse":
        mapped = mapped[::-1]
    return tuple(mapped)


def _make_split(rng, spec, probs, source_words, table, lexicon, count, n_refs):
    utts = []
    word_rows = {w: table.vectors[table.vocab.id(w)] for w in source_words}
    bos_row = table.vectors[BOS_ID]
    eos_row = table.vectors[EOS_ID]
    for _ in range(count):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        ids = rng.choice(len(source_words), size=length, p=probs)
        source = tuple(source_words[i] for i in ids)
        chunks = [bos_row[None, :]]
        for w in source:
            f = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            chunks.append(np.tile(word_rows[w], (f, 1)))
        chunks.append(eos_row[None, :])
        frames = np.concatenate(chunks, axis=0)
        if spec.noise_std > 0:
            frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
        refs = tuple(_map_reference(source, lexicon, j, spec.reorder) for j in range(n_refs))
        utts.append(Utterance(frames=frames, source=source, targets=refs))
    return utts


def synth_corpus(spec):
    """Generate train/dev/test corpora plus the ground-truth embedding table."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(6)
    rng_words, rng_embed, rng_lex, rng_train, rng_dev, rng_test = map(np.random.default_rng, streams)

    taken = set()
    source_words = _gen_words(rng_words, spec.vocab_size, taken)

    lexicon = {}
    target_words = []
    for w in source_words:
        k = int(rng_lex.integers(1, 5))
        syns = _gen_words(rng_lex, k, taken)
        lexicon[w] = tuple(syns)
        target_words.extend(syns)

    vecs = rng_embed.normal(size=(spec.vocab_size, spec.embed_dim))
    table = EmbeddingTable.from_real_vectors(source_words, vecs, unit_normalize=True)
    # Real pre-trained tables carry a trained sentence-boundary vector that is
    # distinct from every word row.  The mean-vector fallback used when such
    # rows are absent collapses BOS/EOS/UNK onto one point, which makes EOS
    # unreachable for cosine readouts (the tie always resolves to the lower
    # id), so the fabricated table samples distinct unit rows for them here.
    marker = rng_embed.normal(size=(3, spec.embed_dim))
    table.vectors[BOS_ID:UNK_ID + 1] = marker / np.linalg.norm(marker, axis=1, keepdims=True)

    ranks = np.arange(1, spec.vocab_size + 1, dtype=np.float64)
    weights = ranks ** (-spec.zipf_exponent)
    probs = weights / weights.sum()

    src_vocab = table.vocab
    tgt_vocab = Vocab.build(tuple(target_words))
    splits = []
    for rng, count, n_refs in (
        (rng_train, spec.n_train, 1),
        (rng_dev, spec.n_dev, DEV_REFS),
        (rng_test, spec.n_test, DEV_REFS),
    ):
        utts = _make_split(rng, spec, probs, source_words, table, lexicon, count, n_refs)
        splits.append(ParallelCorpus(utts, src_vocab, tgt_vocab))

    return SynthResult(
        train=splits[0],
        dev=splits[1],
        test=splits[2],
        table=table,
        lexicon=lexicon,
        source_words=tuple(source_words),
        target_words=tuple(target_words),
    )


# ---------------------------------------------------------------------------
# Disk format


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_frames(path, utterances):
    with open(path, "wb") as f:
        f.write(np.asarray([len(utterances)], dtype="<u8").tobytes())
        for u in utterances:
            t, w = u.frames.shape
            f.write(np.asarray([t, w], dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())


def _read_frames(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise CorpusFormatError(f"{path}: truncated header")
    (count,) = np.frombuffer(buf, dtype="<u8", count=1, offset=0)
    off = 8
    frames = []
    for i in range(int(count)):
        if off + 16 > len(buf):
            raise CorpusFormatError(f"{path}: truncated at utterance {i}")
        t, w = (int(x) for x in np.frombuffer(buf, dtype="<u8", count=2, offset=off))
        off += 16
        nbytes = 8 * t * w
        if off + nbytes > len(buf):
            raise CorpusFormatError(f"{path}: truncated data at utterance {i}")
        arr = np.frombuffer(buf, dtype="<f8", count=t * w, offset=off).reshape(t, w).copy()
        off += nbytes
        frames.append(arr)
    if off != len(buf):
        raise CorpusFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return frames


def _write_lines(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(" ".join(row) + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [tuple(line.split()) for line in f.read().splitlines()]


def save_dataset(out_dir, result, spec, config_hash):
    """Write the three splits, the embedding table, and a checksum manifest."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}

    save_vec(result.table, os.path.join(out_dir, "embeddings.vec"))
    files["embeddings.vec"] = None

    split_meta = {}
    for name in ("train", "dev", "test"):
        corpus = getattr(result, name)
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        _write_frames(os.path.join(d, "frames.bin"), corpus.utterances)
        files[f"{name}/frames.bin"] = None
        _write_lines(os.path.join(d, "src.txt"), [u.source for u in corpus.utterances])
        files[f"{name}/src.txt"] = None
        n_refs = len(corpus.utterances[0].targets) if len(corpus) else 1
        for j in range(n_refs):
            _write_lines(
                os.path.join(d, f"tgt.{j}.txt"),
                [u.targets[j] for u in corpus.utterances],
            )
            files[f"{name}/tgt.{j}.txt"] = None
        split_meta[name] = {"utterances": len(corpus), "references": n_refs}

    checksums = {rel: sha256_file(os.path.join(out_dir, rel)) for rel in files}
    manifest = {
        "checksums": checksums,
        "config_hash": config_hash,
        "embeddings": "embeddings.vec",
        "lexicon": {k: list(v) for k, v in result.lexicon.items()},
        "reserved_vectors": [[float(x) for x in row] for row in result.table.vectors[: len(RESERVED)]],
        "source_words": list(result.source_words),
        "spec": asdict(spec),
        "splits": split_meta,
        "target_words": list(result.target_words),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CorpusFormatError(f"{data_dir}: missing manifest.json") from None
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: invalid JSON ({e})") from None


def load_dataset(data_dir, verify=True):
    """Read a saved dataset back; checksum mismatches are format errors."""
    manifest = load_manifest(data_dir)
    if verify:
        for rel, want in manifest["checksums"].items():
            got = sha256_file(os.path.join(data_dir, rel))
            if got != want:
                raise CorpusFormatError(f"{rel}: checksum mismatch (manifest {want[:12]}.., file {got[:12]}..)")

    table = load_vec(os.path.join(data_dir, manifest["embeddings"]))
    # The .vec file only stores real-token rows; the synthetic rows for the
    # reserved ids are rebuilt as a mean, which need not match how the table
    # was first constructed.  Restore the exact rows recorded at save time.
    reserved = manifest.get("reserved_vectors")
    if reserved is not None:
        rows = np.asarray(reserved, dtype=np.float64)
        if rows.shape != (len(RESERVED), table.dim):
            raise CorpusFormatError("manifest reserved_vectors shape mismatch")
        table.vectors[: len(RESERVED)] = rows
    src_vocab = table.vocab
    tgt_vocab = Vocab.build(tuple(manifest["target_words"]))
    lexicon = {k: tuple(v) for k, v in manifest["lexicon"].items()}

    splits = {}
    for name, meta in manifest["splits"].items():
        d = os.path.join(data_dir, name)
        frames = _read_frames(os.path.join(d, "frames.bin"))
        sources = _read_lines(os.path.join(d, "src.txt"))
        refs = [_read_lines(os.path.join(d, f"tgt.{j}.txt")) for j in range(meta["references"])]
        if not (len(frames) == len(sources) == meta["utterances"]):
            raise CorpusFormatError(f"{name}: utterance count mismatch")
        utts = [
            Utterance(frames=frames[i], source=sources[i], targets=tuple(r[i] for r in refs))
            for i in range(len(frames))
        ]
        splits[name] = ParallelCorpus(utts, src_vocab, tgt_vocab)

    spec = SynthSpec(**manifest["spec"])
    return SynthResult(
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        table=table,
        lexicon=lexicon,
        source_words=tuple(manifest["source_words"]),
        target_words=tuple(manifest["target_words"]),
    ), spec, manifest


# ---------------------------------------------------------------------------
# Subwords and batching


def apply_bpe_to_corpus(corpus, model):
    """Re-tokenize target references into subwords; source side unchanged."""
    validate_model(model)
    cache = {}
    new_utts = []
    for u in corpus.utterances:
        refs = []
        for ref in u.targets:
            pieces = []
            for word in ref:
                got = cache.get(word)
                if got is None:
                    got = cache[word] = tuple(_encode_word(word, model))
                pieces.extend(got)
            refs.append(tuple(pieces))
        new_utts.append(Utterance(frames=u.frames, source=u.source, targets=tuple(refs)))
    tgt_vocab = Vocab.build(model.subwords)
    return ParallelCorpus(new_utts, corpus.src_vocab, tgt_vocab)


@dataclass(frozen=True)
class Batch:
    frames: np.ndarray      # B x T x F
    frame_mask: np.ndarray  # B x T, 1.0 on real frames
    src_ids: np.ndarray     # B x M, PAD-padded
    src_mask: np.ndarray    # B x M
    tgt_ids: np.ndarray     # B x Q, PAD-padded
    tgt_mask: np.ndarray    # B x Q


def make_batch(utterances, src_vocab, tgt_vocab, ref_index=0):
    b = len(utterances)
    t_max = max(u.frames.shape[0] for u in utterances)
    width = utterances[0].frames.shape[1]
    m_max = max(len(u.source) for u in utterances)
    q_max = max(len(u.targets[ref_index]) for u in utterances)

    frames = np.zeros((b, t_max, width))
    frame_mask = np.zeros((b, t_max))
    src_ids = np.full((b, m_max), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, m_max))
    tgt_ids = np.full((b, q_max), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((b, q_max))
    for i, u in enumerate(utterances):
        t = u.frames.shape[0]
        frames[i, :t] = u.frames
        frame_mask[i, :t] = 1.0
        s = src_vocab.encode(u.source)
        src_ids[i, : len(s)] = s
        src_mask[i, : len(s)] = 1.0
        y = tgt_vocab.encode(u.targets[ref_index])
        tgt_ids[i, : len(y)] = y
        tgt_mask[i, : len(y)] = 1.0
    return Batch(frames, frame_mask, src_ids, src_mask, tgt_ids, tgt_mask)


def batch_stream(corpus, batch_size, seed):
    """Endless stream of length-bucketed batches, group order reshuffled per epoch."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    utts = corpus.utterances
    if not utts:
        raise ValueError("cannot batch an empty corpus")
    lengths = np.asarray([u.frames.shape[0] for u in utts])
    order = np.argsort(lengths, kind="stable")
    groups = [order[i : i + batch_size] for i in range(0, len(utts), batch_size)]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    while True:
        for gi in rng.permutation(len(groups)):
            members = [utts[j] for j in groups[gi]]
            yield make_batch(members, corpus.src_vocab, corpus.tgt_vocab)
