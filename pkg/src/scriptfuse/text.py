"""Datasets, vocabularies, padding, transliteration and the synthetic corpus."""

from __future__ import annotations

import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyCorpusError, LabelError, ParseError

LABELS = ("negative", "neutral", "positive")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
SPLITS = ("train", "validation", "test")
SCRIPTS = ("roman", "deva")

CLS, PAD, UNK = 0, 1, 2
SPECIALS = ("[CLS]", "[PAD]", "[UNK]")

MIN_SPLIT_SIZE = 30


@dataclass(frozen=True)
class ScriptPairExample:
    roman_text: tuple[str, ...]
    deva_text: tuple[str, ...]
    label: str

    def __post_init__(self):
        if self.label not in LABEL_INDEX:
            raise LabelError(f"unknown label {self.label!r}")
        if len(self.roman_text) != len(self.deva_text):
            raise ValueError(
                f"word counts differ: {len(self.roman_text)} roman vs {len(self.deva_text)} deva"
            )

    @property
    def label_id(self) -> int:
        return LABEL_INDEX[self.label]

    def words(self, script: str) -> tuple[str, ...]:
        return self.roman_text if script == "roman" else self.deva_text

    def to_line(self) -> str:
        return f"{' '.join(self.roman_text)}\t{' '.join(self.deva_text)}\t{self.label}"


def parse_line(line: str, lineno: int | None = None) -> ScriptPairExample:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 3:
        raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
    roman, deva, label = fields
    label = label.strip()
    if label not in LABEL_INDEX:
        raise LabelError(f"line {lineno}: unknown label {label!r}" if lineno else f"unknown label {label!r}")
    try:
        return ScriptPairExample(tuple(roman.split()), tuple(deva.split()), label)
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None


def load_dataset(path: str | Path, split: str | None = None) -> list[ScriptPairExample]:
    """Read a ``roman<TAB>deva<TAB>label`` file.

    ``path`` may be the TSV itself or a directory holding ``<split>.tsv``.
    """
    path = Path(path)
    if path.is_dir():
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        path = path / f"{split}.tsv"
    out = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(parse_line(line, lineno))
    return out


def save_dataset(path: str | Path, examples: Iterable[ScriptPairExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_line() + "\n")


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_frequency: int = 1):
        self.tokens = list(tokens)
        self.min_frequency = min_frequency
        self.token_to_id = {t: i + len(SPECIALS) for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + len(SPECIALS)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        if idx < len(SPECIALS):
            return SPECIALS[idx]
        return self.tokens[idx - len(SPECIALS)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token(int(i)) for i in ids if int(i) not in (CLS, PAD)]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([t for t in text.split("\n") if t])


def build_vocab(examples: Sequence[ScriptPairExample], min_frequency: int = 1) -> tuple[Vocabulary, Vocabulary]:
    """One vocabulary per script; ids ordered by (count desc, token)."""
    if min_frequency < 1:
        raise ConfigError("min_frequency must be >= 1")
    if not examples:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    vocabs = []
    for script in SCRIPTS:
        counts = Counter(w for ex in examples for w in ex.words(script))
        kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
        vocabs.append(Vocabulary(kept, min_frequency))
    return vocabs[0], vocabs[1]


@dataclass
class Batch:
    roman_ids: np.ndarray
    roman_mask: np.ndarray
    deva_ids: np.ndarray
    deva_mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def ids(self, script: str) -> np.ndarray:
        return self.roman_ids if script == "roman" else self.deva_ids

    def mask(self, script: str) -> np.ndarray:
        return self.roman_mask if script == "roman" else self.deva_mask


def encode_words(words: Sequence[str], vocab: Vocabulary, max_len: int = 100) -> tuple[np.ndarray, np.ndarray]:
    ids = [CLS] + [vocab.id(w) for w in words]
    ids = ids[:max_len]
    n = len(ids)
    ids = ids + [PAD] * (max_len - n)
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return np.array(ids, dtype=np.int64), mask


def encode(example: ScriptPairExample, vocabs: tuple[Vocabulary, Vocabulary], max_len: int = 100):
    """``((roman_ids, roman_mask), (deva_ids, deva_mask))`` with CLS first, head kept on truncation."""
    return (encode_words(example.roman_text, vocabs[0], max_len),
            encode_words(example.deva_text, vocabs[1], max_len))


def make_batch(examples: Sequence[ScriptPairExample], vocabs, max_len: int = 100) -> Batch:
    enc = [encode(ex, vocabs, max_len) for ex in examples]
    return Batch(
        roman_ids=np.stack([e[0][0] for e in enc]),
        roman_mask=np.stack([e[0][1] for e in enc]),
        deva_ids=np.stack([e[1][0] for e in enc]),
        deva_mask=np.stack([e[1][1] for e in enc]),
        labels=np.array([ex.label_id for ex in examples], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# transliteration

_CONSONANTS = range(0x0915, 0x093A)
_HALANT = "्"
_MATRA = {
    "आ": "ा", "इ": "ि", "ई": "ी", "उ": "ु", "ऊ": "ू",
    "ए": "े", "ऐ": "ै", "ओ": "ो", "औ": "ौ",
}


class Transliterator:
    """Greedy longest-match Latin to Devanagari mapping driven by a two-column table.

    Consonants take a vowel sign from the following vowel, drop the
    inherent ``a``, and get a virama before another consonant or at the end
    of the word. Characters not in the table pass through unchanged.
    """

    def __init__(self, table: dict[str, str]):
        self.table = dict(table)
        self.max_key = max(len(k) for k in self.table)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "Transliterator":
        table = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip() and not line.startswith("#"):
                latin, deva = line.split("\t")
                table[latin] = deva
        return cls(table)

    def _segment(self, word: str):
        i = 0
        while i < len(word):
            for n in range(min(self.max_key, len(word) - i), 0, -1):
                chunk = word[i:i + n]
                if chunk in self.table:
                    yield chunk, self.table[chunk]
                    i += n
                    break
            else:
                yield word[i], None
                i += 1

    @staticmethod
    def _is_consonant(deva):
        return deva is not None and len(deva) == 1 and ord(deva) in _CONSONANTS

    def __call__(self, word: str) -> str:
        segs = list(self._segment(word))
        out = []
        k = 0
        while k < len(segs):
            latin, deva = segs[k]
            if deva is None:
                out.append(latin)
            elif self._is_consonant(deva):
                out.append(deva)
                nxt = segs[k + 1] if k + 1 < len(segs) else None
                if nxt is not None and nxt[1] is not None and not self._is_consonant(nxt[1]):
                    if nxt[0] != "a":
                        out.append(_MATRA.get(nxt[1], nxt[1]))
                    k += 1
                elif nxt is None or self._is_consonant(nxt[1]):
                    out.append(_HALANT)
            else:
                out.append(deva)
            k += 1
        return "".join(out)


@lru_cache(maxsize=1)
def default_transliterator() -> Transliterator:
    return Transliterator.from_tsv(resources.files("scriptfuse") / "data" / "translit.tsv")


def toy_transliterate(roman_word: str) -> str:
    return default_transliterator()(roman_word)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class LexiconEntry:
    roman: str
    phonemic: str
    role: str
    kind: str

    @property
    def deva(self) -> str:
        return toy_transliterate(self.phonemic)


def load_lexicon(path: str | Path | None = None) -> list[LexiconEntry]:
    if path is None:
        path = resources.files("scriptfuse") / "data" / "lexicon.tsv"
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            entries.append(LexiconEntry(*line.split("\t")))
    return entries


# share of sentences whose cue slot is drawn from each kind
CUE_MIX = {
    "roman_only": {"plain": 0.6, "roman_collision": 0.0, "deva_collision": 0.4},
    "deva_advantaged": {"plain": 0.35, "roman_collision": 0.45, "deva_collision": 0.2},
    "mixed": {"plain": 0.4, "roman_collision": 0.3, "deva_collision": 0.3},
}


def cue_tokens(lexicon: Sequence[LexiconEntry] | None = None) -> tuple[set[str], set[str]]:
    """Roman and Devanagari forms of every sentiment-slot word."""
    lexicon = lexicon or load_lexicon()
    cues = [e for e in lexicon if e.kind != "filler"]
    return {e.roman for e in cues}, {e.deva for e in cues}


def _sentence(rng: random.Random, label: str, kind: str, fillers, by_kind_role) -> ScriptPairExample:
    n_fill = rng.randint(3, 8)
    words = [rng.choice(fillers) for _ in range(n_fill)]
    cue = rng.choice(by_kind_role[kind, label])
    words.insert(rng.randint(0, n_fill), cue)
    return ScriptPairExample(tuple(e.roman for e in words), tuple(e.deva for e in words), label)


def gen_synthetic(size: int, seed: int, cue_placement: str = "deva_advantaged",
                  lexicon: Sequence[LexiconEntry] | None = None) -> dict[str, list[ScriptPairExample]]:
    """Generate disjoint train/validation/test splits of code-mixed sentences.

    ``size`` is the training split size; validation and test get ``size // 2``
    each. Every sentence has filler words plus one sentiment-slot word whose
    role is the label.
    """
    if cue_placement not in CUE_MIX:
        raise ConfigError(f"cue_placement must be one of {sorted(CUE_MIX)}")
    sizes = {"train": size, "validation": size // 2, "test": size // 2}
    if min(sizes.values()) < MIN_SPLIT_SIZE:
        raise ConfigError(f"size {size} gives splits below {MIN_SPLIT_SIZE} examples")
    lexicon = list(lexicon or load_lexicon())
    fillers = [e for e in lexicon if e.kind == "filler"]
    by_kind_role = defaultdict(list)
    for e in lexicon:
        if e.kind != "filler":
            by_kind_role[e.kind, e.role].append(e)
    mix = CUE_MIX[cue_placement]
    kinds = [k for k, w in mix.items() if w > 0]
    weights = [mix[k] for k in kinds]
    for k in kinds:
        for label in LABELS:
            if not by_kind_role[k, label]:
                raise ConfigError(f"lexicon has no {label} word of kind {k}")

    rng = random.Random(seed)
    seen: set[str] = set()
    splits = {}
    for split in SPLITS:
        rows = []
        attempts = 0
        while len(rows) < sizes[split]:
            attempts += 1
            if attempts > 100 * sizes[split] + 1000:
                raise ConfigError("lexicon too small to produce enough distinct sentences")
            label = LABELS[rng.randrange(3)]
            kind = rng.choices(kinds, weights)[0]
            ex = _sentence(rng, label, kind, fillers, by_kind_role)
            key = " ".join(ex.roman_text) + "\t" + " ".join(ex.deva_text)
            if key in seen:
                continue
            seen.add(key)
            rows.append(ex)
        splits[split] = rows
    return splits


def bow_oracle_accuracy(examples: Sequence[ScriptPairExample], script: str,
                        features: set[str] | None = None) -> float:
    """Accuracy of the best classifier that sees only the bag of ``script`` tokens.

    Examples are grouped by their token multiset (restricted to ``features``
    when given) and each group predicts its majority label, which is the
    ceiling any bag-of-words model can reach on this data.
    """
    if not examples:
        raise EmptyCorpusError("no examples")
    groups: dict[tuple, Counter] = defaultdict(Counter)
    for ex in examples:
        words = ex.words(script)
        if features is not None:
            words = [w for w in words if w in features]
        groups[tuple(sorted(words))][ex.label] += 1
    correct = sum(c.most_common(1)[0][1] for c in groups.values())
    return correct / len(examples)


def oracle_report(splits: dict[str, list[ScriptPairExample]]) -> dict[str, float]:
    roman_cues, deva_cues = cue_tokens()
    pooled = [ex for rows in splits.values() for ex in rows]
    return {
        "roman_ceiling": bow_oracle_accuracy(pooled, "roman", roman_cues),
        "deva_ceiling": bow_oracle_accuracy(pooled, "deva", deva_cues),
    }
