"""Word-level vocabulary and tokenization.

Captions are normalized (lowercased, punctuation stripped) and split on
whitespace.  Six special tokens frame every sequence; the retrieval token
always takes the largest id so that extending a base vocabulary with it is
an append.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
IMG = "<img>"  # placeholder for a visual-prefix position
RET = "<ret>"  # retrieval token, appended after captions

_LEADING_SPECIALS = (PAD, BOS, EOS, UNK, IMG)

_PUNCT_RE = re.compile(r"[^\w\s]|_")
_WS_RE = re.compile(r"\s+")


def normalize_caption(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    text = _PUNCT_RE.sub(" ", text.lower())
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def img_id(self) -> int:
        return self.token_to_id[IMG]

    @property
    def ret_id(self) -> int:
        return self.token_to_id[RET]

    def __post_init__(self):
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("token_to_id is not bijective")
        for tok, i in self.token_to_id.items():
            if self.id_to_token[i] != tok:
                raise ValueError(f"token map mismatch at id {i}")
        if self.ret_id != self.size - 1:
            raise ValueError("retrieval token must hold the largest id")


def build_vocabulary(captions, min_count: int = 1) -> Vocabulary:
    """Build a word vocabulary from an iterable of captions (or a manifest).

    Tokens with corpus count >= min_count are kept.  Ids are assigned
    deterministically: the five leading specials, then words by
    (count descending, token ascending), then the retrieval token last.
    """
    if hasattr(captions, "all_captions"):
        captions = captions.all_captions()
    captions = list(captions)
    counts = Counter()
    for c in captions:
        counts.update(normalize_caption(c).split())
    if not counts:
        raise ValueError("empty caption corpus")

    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    tokens = list(_LEADING_SPECIALS) + kept + [RET]
    return Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(tokens)},
        id_to_token=tuple(tokens),
    )


def tokenize(text: str, vocab: Vocabulary, append_ret: bool = False) -> list[int]:
    """BOS + word ids (UNK for out-of-vocabulary) + EOS (+ RET)."""
    ids = [vocab.bos_id]
    for word in normalize_caption(text).split():
        ids.append(vocab.token_to_id.get(word, vocab.unk_id))
    ids.append(vocab.eos_id)
    if append_ret:
        ids.append(vocab.ret_id)
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize up to normalization; special tokens are dropped."""
    specials = {vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.img_id, vocab.ret_id}
    return " ".join(vocab.id_to_token[i] for i in ids if i not in specials)
