"""
Tokenization, vocabulary and fixed-length encoding of tweets
"""

from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple
import hashlib

import numpy as np
from loguru import logger

from .data_models import EncodedTweet
from .exceptions import ConfigError, DataError

PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace runs"""
    return text.lower().split()


@dataclass(frozen=True)
class Vocab:
    """Token to index map with PAD=0 and UNK=1 reserved"""
    tokens: Tuple[str, ...]
    min_count: int = 1
    max_length: int = 0  # L used for encoding; 0 until chosen
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD, UNK):
            raise DataError("vocabulary must start with the PAD and UNK entries")
        object.__setattr__(self, 'index', {tok: i for i, tok in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        """Index of a text token; literal reserved names in text count as unknown"""
        if token in (PAD, UNK):
            return UNK_INDEX
        return self.index.get(token, UNK_INDEX)

    def with_length(self, max_length: int) -> "Vocab":
        return replace(self, max_length=int(max_length))

    def to_text(self) -> str:
        """File form: header line, then one ``token<TAB>index`` per line"""
        lines = [f"#L={self.max_length}\tmin_count={self.min_count}"]
        lines.extend(f"{tok}\t{i}" for i, tok in enumerate(self.tokens))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()[:16]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    """Index tokens seen at least ``min_count`` times by descending frequency, ties lexicographic"""
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    counts = Counter(tok for tokens in corpus for tok in tokens)
    for reserved in (PAD, UNK):
        counts.pop(reserved, None)
    kept = sorted((tok for tok, n in counts.items() if n >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    logger.debug(f"Vocabulary built: {len(kept)} of {len(counts)} tokens kept (min_count={min_count})")
    return Vocab((PAD, UNK, *kept), min_count=min_count)


def encode(tokens: Sequence[str], vocab: Vocab, max_length: int) -> EncodedTweet:
    """Map tokens to indices, truncating the tail beyond L and padding with PAD"""
    if max_length < 1:
        raise ConfigError(f"sequence length must be positive, got {max_length}")
    ids = [vocab.lookup(tok) for tok in tokens[:max_length]]
    true_length = len(ids)
    ids.extend([PAD_INDEX] * (max_length - true_length))
    return EncodedTweet(tuple(ids), true_length)


def encode_texts(texts: Iterable[str], vocab: Vocab, max_length: int) -> Tuple[np.ndarray, np.ndarray]:
    """Encode a batch of raw texts into (ids [N, L], true lengths [N])"""
    encoded = [encode(tokenize(t), vocab, max_length) for t in texts]
    ids = np.array([e.ids for e in encoded], dtype=np.int64).reshape(len(encoded), max_length)
    lengths = np.array([e.true_length for e in encoded], dtype=np.int64)
    return ids, lengths


def percentile_length(corpus: Iterable[Sequence[str]], percentile: float = 95.0,
                      minimum: int = 1) -> int:
    """Default L: the given percentile of token counts, never below ``minimum``"""
    lengths = [len(tokens) for tokens in corpus]
    if not lengths:
        return minimum
    return max(minimum, int(np.ceil(np.percentile(lengths, percentile))))


def save_vocab(vocab: Vocab, path: Path) -> Path:
    path = Path(path)
    path.write_text(vocab.to_text(), encoding='utf-8')
    logger.info(f"Vocabulary of {len(vocab)} entries saved to {path}")
    return path


def load_vocab(path: Path) -> Vocab:
    path = Path(path)
    if not path.exists():
        raise DataError(f"vocabulary file not found: {path}")
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines or not lines[0].startswith('#'):
        raise DataError(f"{path}: missing vocabulary header line")
    header = dict(part.split('=', 1) for part in lines[0][1:].split('\t'))
    tokens = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            token, index = line.rsplit('\t', 1)
            index = int(index)
        except ValueError:
            raise DataError(f"{path}:{number}: expected 'token<TAB>index'") from None
        if index != len(tokens):
            raise DataError(f"{path}:{number}: index {index} out of order")
        tokens.append(token)
    return Vocab(tuple(tokens), min_count=int(header['min_count']), max_length=int(header['L']))
