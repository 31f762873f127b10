"""Character-level byte-pair encoding over a shared NL/code vocabulary.

Text is first split into pre-tokens (runs of word characters, runs of
whitespace, single punctuation characters); merges never cross a pre-token
boundary. AST node kinds are reserved atomic tokens spelled ``<kind>`` in the
vocabulary, so no merge can ever produce one.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .syntax import INTERNAL_KINDS

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
FILE_MAGIC = "#synmodal-bpe v1"

_PRETOKEN_RE = re.compile(r"\s+|\w+|[^\w\s]")


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN_RE.findall(text)


def kind_token(kind: str) -> str:
    return f"<{kind}>"


@dataclass(frozen=True, eq=False)
class Vocab:
    tokens: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    kinds: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        for i, kind in enumerate(self.kinds):
            if self.tokens[len(SPECIAL_TOKENS) + i] != kind_token(kind):
                raise ValueError(f"kind token for {kind!r} is not at its reserved id")
        object.__setattr__(self, "token_to_id", mapping)
        object.__setattr__(self, "_ranks", {pair: i for i, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and (self.tokens, self.merges, self.kinds) == (
            other.tokens,
            other.merges,
            other.kinds,
        )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id = PAD_ID
    unk_id = UNK_ID
    cls_id = CLS_ID
    sep_id = SEP_ID
    mask_id = MASK_ID

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    @property
    def reserved_count(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.kinds)

    @property
    def reserved_ids(self) -> frozenset[int]:
        return frozenset(range(self.reserved_count))

    def kind_id(self, kind: str) -> int:
        return self.token_to_id.get(kind_token(kind), self.unk_id)

    def encode(self, text: str, kinds: bool = True) -> list[int]:
        return encode(text, self, kinds=kinds)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(ids, self)

    # -- file format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"{FILE_MAGIC} tokens={len(self.tokens)} merges={len(self.merges)} "
            f"specials={len(SPECIAL_TOKENS)} kinds={len(self.kinds)}"
        ]
        lines += [json.dumps(tok, ensure_ascii=False) for tok in self.tokens]
        lines.append("#merges")
        lines += [json.dumps(list(pair), ensure_ascii=False) for pair in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Vocab:
        lines = text.splitlines()
        if not lines or not lines[0].startswith(FILE_MAGIC):
            raise ValueError("not a vocab file (bad header)")
        header = dict(part.split("=", 1) for part in lines[0][len(FILE_MAGIC):].split())
        n_tokens, n_merges, n_kinds = int(header["tokens"]), int(header["merges"]), int(header["kinds"])
        tokens = tuple(json.loads(line) for line in lines[1 : 1 + n_tokens])
        if lines[1 + n_tokens] != "#merges":
            raise ValueError("vocab file: merge section marker missing")
        merges = tuple(tuple(json.loads(line)) for line in lines[2 + n_tokens : 2 + n_tokens + n_merges])
        if len(merges) != n_merges:
            raise ValueError("vocab file: truncated merge section")
        start = len(SPECIAL_TOKENS)
        kinds = tuple(tok[1:-1] for tok in tokens[start : start + n_kinds])
        return cls(tokens, merges, kinds)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _merge_word(word: tuple[str, ...], pair: tuple[str, str], joined: str) -> tuple[str, ...]:
    out = []
    i = 0
    n = len(word)
    while i < n:
        if i + 1 < n and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[str], target_size: int, kinds: Sequence[str] = INTERNAL_KINDS) -> Vocab:
    """Learn merges until the vocabulary holds ``target_size`` tokens.

    Each round merges the most frequent adjacent pair; ties go to the
    lexicographically smallest pair. Training stops early (with a warning) if
    the corpus runs out of pairs.
    """
    kinds = tuple(dict.fromkeys(kinds))
    reserved = SPECIAL_TOKENS + tuple(kind_token(k) for k in kinds)
    if target_size < len(reserved):
        raise ValueError(f"target_size {target_size} is below the {len(reserved)} reserved tokens")
    words: Counter[str] = Counter()
    for text in corpus:
        words.update(pretokenize(text))
    if not words:
        raise ValueError("cannot train BPE on an empty corpus")
    alphabet = sorted({ch for w in words for ch in w})
    if target_size <= len(reserved) + len(alphabet):
        raise ValueError(
            f"target_size {target_size} leaves no room for merges "
            f"({len(reserved)} reserved + {len(alphabet)} base symbols)"
        )
    tokens = list(reserved) + alphabet
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    split = {tuple(w): c for w, c in sorted(words.items())}
    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for word, count in split.items():
            for a, b in zip(word, word[1:]):
                pairs[(a, b)] += count
        if not pairs:
            log.warning("BPE stopped at %d tokens: no pairs left to merge", len(tokens))
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        joined = best[0] + best[1]
        merges.append(best)
        if joined not in known:
            known.add(joined)
            tokens.append(joined)
        split = {_merge_word(w, best, joined) if len(w) > 1 else w: c for w, c in split.items()}
    return Vocab(tuple(tokens), tuple(merges), kinds)


def _bpe_word(word: str, vocab: Vocab) -> tuple[int, ...]:
    cached = vocab._cache.get(word)
    if cached is not None:
        return cached
    symbols = list(word)
    ranks = vocab._ranks
    while len(symbols) > 1:
        best_rank, best = None, None
        for pair in zip(symbols, symbols[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best = r, pair
        if best is None:
            break
        symbols = list(_merge_word(tuple(symbols), best, best[0] + best[1]))
    ids = tuple(vocab.token_to_id.get(s, vocab.unk_id) for s in symbols)
    vocab._cache[word] = ids
    return ids


def encode(text: str, vocab: Vocab, kinds: bool = True) -> list[int]:
    """Token ids for ``text``.

    With ``kinds=True`` a whole pre-token equal to a reserved AST kind name
    maps to that kind's atomic id. Characters outside the training alphabet
    become ``[UNK]``. Special tokens are never produced.
    """
    ids: list[int] = []
    for piece in pretokenize(text):
        if kinds:
            kid = vocab.token_to_id.get(kind_token(piece))
            if kid is not None:
                ids.append(kid)
                continue
        ids.extend(_bpe_word(piece, vocab))
    return ids


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    out = []
    n_special = len(SPECIAL_TOKENS)
    n_reserved = vocab.reserved_count
    for i in ids:
        tok = vocab.tokens[i]
        out.append(tok[1:-1] if n_special <= i < n_reserved else tok)
    return "".join(out)
