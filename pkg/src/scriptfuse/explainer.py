"""Word-level Shapley attributions with paired-script masking, plus text plots.

A word is hidden by replacing its token with [UNK] in the roman and the
Devanagari stream at the same word index, so the hidden word cannot leak
through the other script. The value of a coalition is the model's
probability of the explained class.
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .text import UNK, Batch, ScriptPairExample, encode

MAX_EXACT_WORDS = 12
MIN_PERMUTATIONS = 50
EVAL_CHUNK = 512

# coalitions [K, n] bool -> class probabilities [K, C]
ValueFunction = Callable[[np.ndarray], np.ndarray]


@dataclass
class Attribution:
    words: list[str]
    values: list[float]
    base_value: float
    explained_class: int
    full_value: float
    mode: str = "exact"
    stderr: list[float] | None = None
    deva_words: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        out = {"words": self.words, "deva_words": self.deva_words, "values": self.values,
               "base_value": self.base_value, "full_value": self.full_value,
               "class": self.explained_class, "mode": self.mode}
        if self.stderr is not None:
            out["stderr"] = self.stderr
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Attribution":
        return cls(d["words"], d["values"], d["base_value"], d["class"], d["full_value"], d["mode"],
                   d.get("stderr"), d.get("deva_words", []))


def model_value_function(model, example: ScriptPairExample, vocabs, max_len: int = 100) -> ValueFunction:
    """Wrap a trained model as a coalition -> probabilities function for one sentence.

    Word ``k`` sits at position ``k + 1`` (after CLS); words cut off by
    truncation have no position and are therefore dummies.
    """
    (r_ids, r_mask), (d_ids, d_mask) = encode(example, vocabs, max_len)
    n = len(example.roman_text)

    def value(coalitions: np.ndarray) -> np.ndarray:
        coalitions = np.asarray(coalitions, dtype=bool).reshape(-1, n)
        out = []
        with T.no_grad():
            for start in range(0, len(coalitions), EVAL_CHUNK):
                chunk = coalitions[start:start + EVAL_CHUNK]
                k = len(chunk)
                ids = [np.tile(r_ids, (k, 1)), np.tile(d_ids, (k, 1))]
                for w in range(min(n, max_len - 1)):
                    hidden = ~chunk[:, w]
                    for arr in ids:
                        arr[hidden, w + 1] = UNK
                batch = Batch(ids[0], np.tile(r_mask, (k, 1)), ids[1], np.tile(d_mask, (k, 1)),
                              np.zeros(k, dtype=np.int64))
                out.append(model(batch).probs.data)
        return np.concatenate(out)

    return value


def _resolve(example, model, vocabs, max_len) -> ValueFunction:
    if not hasattr(model, "named_parameters"):
        return model
    if vocabs is None:
        raise ConfigError("vocabularies are required to explain a trained model")
    return model_value_function(model, example, vocabs, max_len)


def _popcount(x: np.ndarray) -> np.ndarray:
    c = np.zeros_like(x)
    while x.any():
        c += x & 1
        x = x >> 1
    return c


def _bits(masks: np.ndarray, n: int) -> np.ndarray:
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_exact(example: ScriptPairExample, model, class_index: int | None = None, vocabs=None,
                  max_len: int = 100) -> Attribution:
    """Exact Shapley values by enumerating all ``2^n`` coalitions (``n <= 12``).

    ``model`` is a trained model (pass ``vocabs``) or a value function taking
    a boolean coalition matrix and returning class probabilities.
    """
    n = len(example.roman_text)
    if n > MAX_EXACT_WORDS:
        raise ConfigError(f"{n} words exceed the exact limit of {MAX_EXACT_WORDS}; use sampled mode")
    if n == 0:
        raise ConfigError("cannot explain an empty sentence")
    f = _resolve(example, model, vocabs, max_len)
    masks = np.arange(2 ** n)
    probs = f(_bits(masks, n))
    if class_index is None:
        class_index = int(np.argmax(probs[-1]))
    v = probs[:, class_index]
    sizes = _popcount(masks)
    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    values = []
    for k in range(n):
        without = masks[(masks >> k) & 1 == 0]
        # fsum makes the result independent of term order, so words that are
        # interchangeable under v get bit-identical values
        values.append(math.fsum(weight[s] * (v[S | (1 << k)] - v[S]) for S, s in zip(without, sizes[without])))
    return Attribution(list(example.roman_text), values, float(v[0]), class_index, float(v[-1]), "exact",
                       deva_words=list(example.deva_text))


def shapley_sampled(example: ScriptPairExample, model, class_index: int | None = None,
                    num_permutations: int = 1000, seed: int = 0, vocabs=None, max_len: int = 100,
                    chunk: int = 256) -> Attribution:
    """Permutation-sampling estimate with per-word standard errors; ``v(S)`` is cached."""
    if num_permutations < MIN_PERMUTATIONS:
        raise ConfigError(f"num_permutations must be >= {MIN_PERMUTATIONS}")
    n = len(example.roman_text)
    if n == 0:
        raise ConfigError("cannot explain an empty sentence")
    f = _resolve(example, model, vocabs, max_len)
    rng = np.random.default_rng(seed)
    cache: dict[int, np.ndarray] = {}

    def lookup(keys):
        missing = sorted({k for k in keys if k not in cache})
        if missing:
            bits = np.array([[(m >> i) & 1 for i in range(n)] for m in missing], dtype=bool)
            for m, p in zip(missing, f(bits)):
                cache[m] = p
        return np.array([cache[k] for k in keys])

    full, empty = lookup([(1 << n) - 1, 0])
    if class_index is None:
        class_index = int(np.argmax(full))
    contrib = np.zeros((num_permutations, n))
    for start in range(0, num_permutations, chunk):
        perms = [rng.permutation(n) for _ in range(min(chunk, num_permutations - start))]
        prefixes = []
        for perm in perms:
            m = 0
            prefixes.append(0)
            for w in perm:
                m |= 1 << int(w)
                prefixes.append(m)
        v = lookup(prefixes)[:, class_index].reshape(len(perms), n + 1)
        for r, perm in enumerate(perms):
            contrib[start + r, perm] = np.diff(v[r])
    values = contrib.mean(axis=0)
    stderr = contrib.std(axis=0, ddof=1) / math.sqrt(num_permutations)
    return Attribution(list(example.roman_text), values.tolist(), float(empty[class_index]), class_index,
                       float(full[class_index]), "sampled", stderr.tolist(), list(example.deva_text))


def explain(example, model, class_index=None, vocabs=None, max_len=100, sampled=False,
            num_permutations=1000, seed=0) -> Attribution:
    if sampled:
        return shapley_sampled(example, model, class_index, num_permutations, seed, vocabs, max_len)
    return shapley_exact(example, model, class_index, vocabs, max_len)


# ---------------------------------------------------------------------------
# text plots


def _intensities(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    top = np.abs(v).max() if len(v) else 0.0
    return np.zeros_like(v) if top == 0 else np.abs(v) / top


def _rgb(value: float, t: float) -> tuple[int, int, int]:
    fade = round(255 * (1.0 - t))
    return (255, fade, fade) if value > 0 else (fade, fade, 255)


def render_text_plot(attr: Attribution, fmt: str = "ansi", words: list[str] | None = None) -> str:
    """Words shaded red (positive) or blue (negative), intensity ``|v| / max|v|``."""
    words = attr.words if words is None else words
    inten = _intensities(attr.values)
    if fmt == "ansi":
        parts = []
        for w, v, t in zip(words, attr.values, inten):
            if t == 0:
                parts.append(w)
            else:
                r, g, b = _rgb(v, t)
                parts.append(f"\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m{w}\x1b[0m")
        return " ".join(parts)
    if fmt == "html":
        spans = []
        for w, v, t in zip(words, attr.values, inten):
            label = html.escape(w)
            if t == 0:
                spans.append(f'<span title="{v:.6g}">{label}</span>')
            else:
                r, g, b = _rgb(v, t)
                spans.append(f'<span style="background-color: rgb({r}, {g}, {b})" title="{v:.6g}">{label}</span>')
        return f'<div class="shap-text" data-class="{attr.explained_class}">' + " ".join(spans) + "</div>"
    raise ConfigError(f"format must be 'ansi' or 'html', got {fmt!r}")


def html_document(blocks: list[tuple[str, str]]) -> str:
    """Standalone page with one titled plot per ``(title, fragment)`` pair."""
    body = "\n".join(f"<section><h2>{html.escape(title)}</h2>\n{frag}\n</section>" for title, frag in blocks)
    return ("<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"/><title>attributions</title>\n"
            "<style>span { padding: 1px 3px; font-family: monospace; }</style></head>\n"
            f"<body>\n{body}\n</body>\n</html>\n")
