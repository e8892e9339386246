"""Byte-level BPE vocabulary with reserved special tokens.

A vocabulary is the 256 byte tokens, an ordered list of merge rules (rule
k creates token id ``256 + k``), and six named special tokens appended at
the very top of the id range. Encoding works on raw UTF-8 bytes and
applies merges in learned order, so every string is encodable and decoding
is exact. Plain text can never produce a special id, which keeps the
specials safe to use as structural markers during fine-tuning.

Learning counts adjacent pairs inside whitespace-delimited chunks (a word
plus its trailing whitespace). Identical chunks are counted once with a
multiplicity, which makes learning fast on natural text; the learned rules
still apply to arbitrary byte sequences at encode time.
"""

from __future__ import annotations

import hashlib
import logging
import re
import warnings
from collections import Counter
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SPECIAL_NAMES = ("<sos>", "<eos>", "<unk>", "<special1>", "<special2>", "<special3>")

_VOCAB_HEADER = "headliner-bpe-vocab"
_VOCAB_VERSION = 1

_CHUNK_RE = re.compile(r"\s+|\S+\s*")

TokenSeq = list[int]


class Vocab:
    """Immutable byte-level BPE vocabulary.

    ``merges[k]`` is the (left_id, right_id) pair merged into id
    ``256 + k``. Specials occupy the last six ids in a fixed name order.
    """

    def __init__(self, merges: Sequence[tuple[int, int]]):
        self.merges: tuple[tuple[int, int], ...] = tuple(
            (int(a), int(b)) for a, b in merges
        )
        expansions: list[bytes] = [bytes([i]) for i in range(256)]
        for k, (left, right) in enumerate(self.merges):
            if not (0 <= left < 256 + k and 0 <= right < 256 + k):
                raise ValueError(f"merge {k} references id not yet defined")
            expansions.append(expansions[left] + expansions[right])
        self._expansions = tuple(expansions)
        base = 256 + len(self.merges)
        self.specials: dict[str, int] = {
            name: base + i for i, name in enumerate(SPECIAL_NAMES)
        }
        self.size: int = base + len(SPECIAL_NAMES)
        self._rank: dict[tuple[int, int], int] = {
            pair: 256 + k for k, pair in enumerate(self.merges)
        }
        self._special_by_id = {i: name for name, i in self.specials.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.merges == other.merges

    def __repr__(self) -> str:
        return f"Vocab(size={self.size}, merges={len(self.merges)})"

    def token_bytes(self, token_id: int) -> bytes:
        """Byte expansion of a non-special token id."""
        return self._expansions[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id >= 256 + len(self.merges)


def _chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


def _merge_ids(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    """Replace left-to-right non-overlapping occurrences of ``pair``."""
    out: list[int] = []
    i = 0
    n = len(ids)
    left, right = pair
    while i < n:
        if i + 1 < n and ids[i] == left and ids[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def learn(corpus: Iterable[str], target_size: int) -> Vocab:
    """Learn a BPE vocabulary of ``target_size`` tokens from text.

    Greedy: repeatedly merge the currently most frequent adjacent token
    pair until the vocabulary (bytes + merges + specials) reaches
    ``target_size`` or no pair occurs twice. Frequency ties break on the
    lexicographically smallest byte expansion of the pair, so learning is
    deterministic for a given corpus.
    """
    min_size = 256 + len(SPECIAL_NAMES)
    if target_size < min_size:
        raise ValueError(f"target_size must be at least {min_size}")

    if isinstance(corpus, str):
        corpus = [corpus]  # one document, not an iterable of characters
    chunk_weights: Counter[str] = Counter()
    for doc in corpus:
        chunk_weights.update(_chunks(doc))
    if not chunk_weights:
        raise ValueError("corpus is empty")

    chunks: list[list[int]] = []
    weights: list[int] = []
    for chunk, weight in chunk_weights.items():
        chunks.append(list(chunk.encode("utf-8")))
        weights.append(weight)

    pair_counts: Counter[tuple[int, int]] = Counter()
    pair_chunks: dict[tuple[int, int], set[int]] = {}
    for ci, ids in enumerate(chunks):
        w = weights[ci]
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] += w
            pair_chunks.setdefault(pair, set()).add(ci)

    expansions: list[bytes] = [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    n_merges = target_size - min_size

    while len(merges) < n_merges:
        best: tuple[int, int] | None = None
        best_count = 0
        best_key: tuple[bytes, bytes, int, int] | None = None
        for pair, count in pair_counts.items():
            if count < 2 or count < best_count:
                continue  # a pair must repeat to be worth a token
            key = (expansions[pair[0]], expansions[pair[1]], pair[0], pair[1])
            if count > best_count or key < best_key:  # type: ignore[operator]
                best, best_count, best_key = pair, count, key
        if best is None:
            break

        new_id = 256 + len(merges)
        merges.append(best)
        expansions.append(expansions[best[0]] + expansions[best[1]])

        for ci in sorted(pair_chunks.get(best, ())):
            old = chunks[ci]
            w = weights[ci]
            new = _merge_ids(old, best, new_id)
            if len(new) == len(old):
                continue  # stale membership, pair no longer present
            old_pairs = list(zip(old, old[1:]))
            new_pairs = list(zip(new, new[1:]))
            for pair in old_pairs:
                pair_counts[pair] -= w
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            for pair in new_pairs:
                pair_counts[pair] += w
            for pair in set(old_pairs) - set(new_pairs):
                members = pair_chunks.get(pair)
                if members is not None:
                    members.discard(ci)
            for pair in set(new_pairs):
                pair_chunks.setdefault(pair, set()).add(ci)
            chunks[ci] = new
        pair_chunks.pop(best, None)

    if len(merges) < n_merges:
        logger.info(
            "learning stopped at %d merges (no pair occurs twice); vocab size %d",
            len(merges),
            256 + len(merges) + len(SPECIAL_NAMES),
        )
    return Vocab(merges)


def encode(text: str, vocab: Vocab) -> TokenSeq:
    """Encode any string to token ids by replaying merges in learned order.

    Total on all inputs: unknown bytes cannot occur (the byte alphabet is
    the fallback) and special ids are never produced from plain text.
    """
    ids = list(text.encode("utf-8"))
    rank = vocab._rank
    while len(ids) >= 2:
        best_pair: tuple[int, int] | None = None
        best_rank = -1
        for pair in zip(ids, ids[1:]):
            r = rank.get(pair)
            if r is not None and (best_pair is None or r < best_rank):
                best_pair, best_rank = pair, r
        if best_pair is None:
            break
        ids = _merge_ids(ids, best_pair, best_rank)
    return ids


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Decode token ids to text. Specials render as their bracketed names.

    Byte runs that do not form valid UTF-8 (for example a multi-byte
    character split by a dropped token) decode lossily with the
    replacement character and a warning.
    """
    parts: list[str] = []
    buffer = bytearray()

    def flush() -> None:
        if not buffer:
            return
        try:
            parts.append(buffer.decode("utf-8"))
        except UnicodeDecodeError:
            warnings.warn(
                "decoded byte run is not valid UTF-8, replacing",
                UserWarning,
                stacklevel=3,
            )
            parts.append(buffer.decode("utf-8", errors="replace"))
        buffer.clear()

    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range [0, {vocab.size})")
        if vocab.is_special(i):
            flush()
            parts.append(vocab._special_by_id[i])
        else:
            buffer.extend(vocab.token_bytes(i))
    flush()
    return "".join(parts)


def special_id(name: str, vocab: Vocab) -> int:
    try:
        return vocab.specials[name]
    except KeyError:
        raise ValueError(f"unknown special token {name!r}") from None


def vocab_to_text(vocab: Vocab) -> str:
    """Serialize to the versioned text format (bit-exact reload)."""
    lines = [f"{_VOCAB_HEADER} {_VOCAB_VERSION} {vocab.size}"]
    for left, right in vocab.merges:
        lines.append(f"{left} {right}")
    for name in SPECIAL_NAMES:
        lines.append(f"special {name} {vocab.specials[name]}")
    return "\n".join(lines) + "\n"


def vocab_from_text(text: str) -> Vocab:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty vocab file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != _VOCAB_HEADER:
        raise ValueError("not a vocab file")
    if int(header[1]) != _VOCAB_VERSION:
        raise ValueError(f"unsupported vocab version {header[1]}")
    size = int(header[2])

    merges: list[tuple[int, int]] = []
    specials: list[tuple[str, int]] = []
    for line in lines[1:]:
        fields = line.split()
        if not fields:
            continue
        if fields[0] == "special":
            specials.append((fields[1], int(fields[2])))
        else:
            merges.append((int(fields[0]), int(fields[1])))

    vocab = Vocab(merges)
    if vocab.size != size:
        raise ValueError(f"vocab size mismatch: header {size}, actual {vocab.size}")
    if specials != [(name, vocab.specials[name]) for name in SPECIAL_NAMES]:
        raise ValueError("special token table does not match expected layout")
    return vocab


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(vocab_to_text(vocab))


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        return vocab_from_text(fh.read())


def vocab_sha256(vocab: Vocab) -> str:
    """Hex digest of the serialized vocabulary, used to pin checkpoints."""
    return hashlib.sha256(vocab_to_text(vocab).encode("utf-8")).hexdigest()
