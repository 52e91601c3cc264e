"""
Character-level corpus handling: tokenizer, train/test split and calibration sampling.
"""
from pathlib import Path
import dataclasses as dc
import typing as t

import numpy as np

import slider_quant.core.logging as logging
from slider_quant.core.errors import ConfigError, ContractError

logger = logging.get_logger(__name__)

DEFAULT_CORPUS = Path(__file__).resolve().parents[2] / "data" / "corpus.txt"


@dc.dataclass(frozen=True)
class CharTokenizer:
    """Maps each distinct character of the corpus to an id (sorted by code point)."""
    alphabet: str

    @classmethod
    def from_text(cls, text: str) -> "CharTokenizer":
        return cls("".join(sorted(set(text))))

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    def encode(self, text: str) -> np.ndarray:
        index = {ch: i for i, ch in enumerate(self.alphabet)}
        unknown = sorted(set(text) - set(index))
        if unknown:
            raise ContractError(f"Characters outside the tokenizer alphabet: {unknown[:10]}")
        return np.array([index[ch] for ch in text], dtype=np.int32)

    def decode(self, ids: t.Iterable[int]) -> str:
        return "".join(self.alphabet[int(i)] for i in ids)


@dc.dataclass(frozen=True)
class TokenStream:
    """Token ids with named [start, end) splits."""
    ids: np.ndarray
    splits: t.Dict[str, t.Tuple[int, int]]
    vocab_size: int

    def __post_init__(self):
        if self.ids.size and int(self.ids.max()) >= self.vocab_size:
            raise ContractError(f"Token id {int(self.ids.max())} >= vocab size {self.vocab_size}")

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ContractError(f"Unknown split {name!r}; have {sorted(self.splits)}")
        start, end = self.splits[name]
        return self.ids[start:end]


@dc.dataclass(frozen=True)
class CalibSet:
    """c calibration sequences of k tokens, with the offsets they were cut from."""
    tokens: np.ndarray
    offsets: np.ndarray
    seed: int

    @property
    def num_samples(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])


def load_text(corpus_path: t.Union[str, Path] = DEFAULT_CORPUS) -> str:
    corpus_path = Path(corpus_path)
    if not corpus_path.exists():
        raise FileNotFoundError(f"Corpus file not found: {corpus_path}")
    return corpus_path.read_text(encoding="utf-8")


def build_stream(text: str, tokenizer: t.Optional[CharTokenizer] = None,
                 train_fraction: float = 0.9) -> t.Tuple[TokenStream, CharTokenizer]:
    """
    Tokenize ``text`` and split it into a leading ``train`` part and a trailing ``test`` part.
    Calibration samples are drawn from ``train``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"0 < train_fraction < 1 violated: {train_fraction}")
    tokenizer = tokenizer or CharTokenizer.from_text(text)
    ids = tokenizer.encode(text)
    cut = int(len(ids) * train_fraction)
    stream = TokenStream(ids=ids, splits={"train": (0, cut), "test": (cut, len(ids))},
                         vocab_size=tokenizer.vocab_size)
    logger.debug(f"Token stream: {len(ids)} tokens, vocab {tokenizer.vocab_size}, train/test cut at {cut}")
    return stream, tokenizer


def make_calibset(corpus: np.ndarray, c: int, k: int, seed: int) -> CalibSet:
    """
    Sample ``c`` sequences of ``k`` tokens at distinct uniformly random offsets.

    :param corpus: Token ids to sample from
    :raises ContractError: If fewer than ``c`` offsets are available
    """
    if c < 1 or k < 1:
        raise ContractError(f"make_calibset needs c >= 1 and k >= 1, got c={c}, k={k}")
    available = len(corpus) - k + 1
    if c > available:
        raise ContractError(f"Calibration needs {c} offsets but the corpus only has {max(available, 0)} "
                            f"for sequences of {k} tokens")
    rng = np.random.default_rng(seed)
    offsets = rng.choice(available, size=c, replace=False)
    tokens = np.stack([corpus[o:o + k] for o in offsets]).astype(np.int32)
    return CalibSet(tokens=tokens, offsets=offsets.astype(np.int64), seed=seed)


def unigram_perplexity(train: np.ndarray, test: np.ndarray, vocab_size: int) -> float:
    """Perplexity of ``test`` under add-one smoothed unigram frequencies of ``train``."""
    counts = np.bincount(train, minlength=vocab_size).astype(np.float64) + 1.0
    log_probs = np.log(counts / counts.sum())
    return float(np.exp(-log_probs[test].mean()))
