import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tempsweep.base.exceptions import ConfigError, CorpusError, SentenceTooLong
from tempsweep.base.utils import STREAM_SPLIT, stream

logger = logging.getLogger(__name__)

PAD = 0
BOS = 1
EOS = 2
UNK = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUM_RESERVED = len(RESERVED_TOKENS)

DEFAULT_MAX_LEN = 52
SPLITS = ("train", "valid", "test", "generated")


def escape_token(token):
    """
    Raw tokens that look like reserved names get one extra backslash

    >>> escape_token('<unk>')
    '\\\\<unk>'

    >>> escape_token('cat')
    'cat'
    """
    if token.lstrip("\\") in RESERVED_TOKENS:
        return "\\" + token
    return token


def unescape_token(token):
    """
    >>> unescape_token(escape_token('\\\\<pad>'))
    '\\\\<pad>'
    """
    if token.startswith("\\") and token.lstrip("\\") in RESERVED_TOKENS:
        return token[1:]
    return token


class Vocab:
    """
    Token id space. Ids 0-3 are reserved (PAD, BOS, EOS, UNK),
    content tokens start at 4.
    """

    def __init__(self, content_tokens):
        tokens = list(RESERVED_TOKENS) + list(content_tokens)
        if len(tokens) <= NUM_RESERVED:
            raise CorpusError("vocab needs at least one content token")
        id_of = {token: index for index, token in enumerate(tokens)}
        if len(id_of) != len(tokens):
            raise CorpusError("vocab tokens must be unique")
        self.tokens = tuple(tokens)
        self.id_of = id_of

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    @property
    def content_tokens(self):
        return self.tokens[NUM_RESERVED:]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __str__(self):  # pragma: no cover
        return f"<{self.__class__.__name__} size={self.size}>"

    def __repr__(self):  # pragma: no cover
        return self.__str__()

    def token_id(self, raw_token):
        return self.id_of.get(escape_token(raw_token), UNK)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{token}\n" for token in self.content_tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CorpusError(f"can not read vocab file {path}: {exc}") from exc
        for index, token in enumerate(lines):
            if not token or " " in token:
                raise CorpusError("vocab entries must be single non-empty tokens", line_number=index + 1)
        return cls(lines)


def synthetic_vocab(vocab_size):
    """
    Vocab with `vocab_size` ids in total whose content tokens are t0, t1, ...

    >>> synthetic_vocab(6).tokens[4:]
    ('t0', 't1')
    """
    if vocab_size < NUM_RESERVED + 1:
        raise ConfigError(f"vocab_size must be at least {NUM_RESERVED + 1}")
    return Vocab(f"t{index}" for index in range(vocab_size - NUM_RESERVED))


@dataclass(frozen=True)
class Sentence:
    """Content token ids followed by exactly one EOS"""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 2:
            raise CorpusError("sentence needs at least one content token and EOS")
        if ids[-1] != EOS:
            raise CorpusError("sentence must end with EOS")
        for token in ids[:-1]:
            if token in (PAD, BOS, EOS) or token < 0:
                raise CorpusError(f"invalid token id {token} inside sentence")

    @property
    def content(self):
        return self.ids[:-1]

    def __len__(self):
        return len(self.ids) - 1


@dataclass(frozen=True)
class Corpus:
    sentences: tuple
    vocab: Vocab
    split: str = "train"
    max_len: int = DEFAULT_MAX_LEN
    _lengths: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        sentences = tuple(self.sentences)
        object.__setattr__(self, "sentences", sentences)
        if not sentences:
            raise CorpusError("empty corpus")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        for index, sentence in enumerate(sentences):
            if len(sentence) > self.max_len:
                raise SentenceTooLong(index + 1, len(sentence), self.max_len)
            if max(sentence.ids) >= self.vocab.size:
                raise CorpusError("token id out of vocab range", line_number=index + 1)
        object.__setattr__(self, "_lengths", tuple(len(s) for s in sentences))

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, index):
        return self.sentences[index]

    @property
    def is_fixed_length(self):
        return len(set(self._lengths)) == 1

    @property
    def longest(self):
        return max(self._lengths)

    def with_sentences(self, sentences, split=None):
        return Corpus(sentences, self.vocab, split or self.split, self.max_len)

    def token_lists(self):
        return [list(sentence.content) for sentence in self.sentences]


def build_vocab(raw_lines, max_size):
    """
    Keeps the `max_size` most frequent whitespace tokens,
    ties broken by first occurrence.

    >>> build_vocab(['a b a'], 10).tokens[4:]
    ('a', 'b')

    >>> build_vocab(['a b', 'c d'], 2).tokens[4:]
    ('a', 'b')
    """
    if max_size < 1:
        raise ConfigError("max_size must be at least 1")
    counts = Counter()
    for line in raw_lines:
        counts.update(escape_token(token) for token in line.split())
    if not counts:
        raise CorpusError("empty corpus")
    # Counter preserves first-insertion order and most_common sorts stably
    kept = [token for token, _ in counts.most_common(max_size)]
    return Vocab(kept)


def encode(vocab, line):
    tokens = line.split()
    if not tokens:
        raise CorpusError("can not encode an empty line")
    return Sentence(tuple(vocab.token_id(token) for token in tokens) + (EOS,))


def decode(vocab, sentence):
    if not isinstance(sentence, Sentence):
        sentence = Sentence(tuple(sentence))
    if max(sentence.ids) >= vocab.size:
        raise CorpusError("token id out of vocab range")
    return " ".join(unescape_token(vocab.tokens[token]) for token in sentence.content)


def load_corpus(path, vocab, split="train", max_len=DEFAULT_MAX_LEN):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"can not read corpus file {path}: {exc}") from exc

    sentences = []
    for index, line in enumerate(text.splitlines()):
        tokens = line.split()
        if not tokens:
            raise CorpusError("empty line", line_number=index + 1)
        if len(tokens) > max_len:
            raise SentenceTooLong(index + 1, len(tokens), max_len)
        sentences.append(encode(vocab, line))
    logger.debug("Loaded %d sentences from %s", len(sentences), path)
    return Corpus(sentences, vocab, split, max_len)


def save_corpus(corpus, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [decode(corpus.vocab, sentence) for sentence in corpus]
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


def split_corpus(corpus, fractions=(0.8, 0.1, 0.1), seed=0):
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must sum to 1")

    n = len(corpus)
    n_valid = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise CorpusError(f"fractions {tuple(fractions)} produce an empty split of {n} sentences")

    order = stream(seed, STREAM_SPLIT).permutation(n)
    pick = lambda indices: [corpus[int(i)] for i in indices]
    return (
        corpus.with_sentences(pick(order[:n_train]), "train"),
        corpus.with_sentences(pick(order[n_train : n_train + n_valid]), "valid"),
        corpus.with_sentences(pick(order[n_train + n_valid :]), "test"),
    )


def pad_batch(sentences):
    """
    Teacher-forcing arrays for a list of Sentence or id sequences:
    inputs start with BOS, targets end with EOS, mask marks real targets.
    """
    rows = [s.ids if isinstance(s, Sentence) else tuple(s) for s in sentences]
    width = max(len(row) for row in rows)
    inputs = np.full((len(rows), width), PAD, dtype=np.int64)
    targets = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float64)
    for index, row in enumerate(rows):
        inputs[index, 0] = BOS
        inputs[index, 1 : len(row)] = row[:-1]
        targets[index, : len(row)] = row
        mask[index, : len(row)] = 1.0
    return inputs, targets, mask
