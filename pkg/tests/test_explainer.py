import itertools
import math
import xml.etree.ElementTree as ET
from html.parser import HTMLParser

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptfuse.errors import ConfigError
from scriptfuse.explainer import (
    Attribution, html_document, model_value_function, render_text_plot, shapley_exact, shapley_sampled,
)
from scriptfuse.model import build_model
from scriptfuse.text import ScriptPairExample, build_vocab, gen_synthetic
from scriptfuse.trainer import TrainConfig


def sentence(n):
    return ScriptPairExample(tuple(f"w{i}" for i in range(n)), tuple(f"d{i}" for i in range(n)), "neutral")


def brute_shapley(v, n):
    """Definition-level oracle: average marginal contribution over all orderings."""
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        S = 0
        for w in perm:
            phi[w] += v(S | (1 << w)) - v(S)
            S |= 1 << w
    return phi / len(perms)


def as_value_fn(v_of_mask, n):
    def f(coal):
        masks = (np.asarray(coal, dtype=np.int64) << np.arange(n)).sum(axis=1)
        p = np.array([v_of_mask(int(m)) for m in masks])
        return np.stack([p, 1 - p, np.zeros_like(p)], axis=1)
    return f


def random_game(rng, n):
    table = rng.uniform(0, 1, size=2 ** n)
    return lambda m: table[m]


def test_matches_permutation_definition(rng):
    for n in (1, 2, 3, 5):
        v = random_game(rng, n)
        attr = shapley_exact(sentence(n), as_value_fn(v, n), class_index=0)
        np.testing.assert_allclose(attr.values, brute_shapley(v, n), atol=1e-12)


def test_efficiency_dummy_symmetry(rng):
    n = 8
    table = rng.uniform(0, 1, size=2 ** n)

    def v(m):
        # words 2 and 5 interchangeable, word 7 a dummy
        b = [(m >> i) & 1 for i in range(n)]
        b[2], b[5] = sorted((b[2], b[5]))
        b[7] = 0
        return table[sum(x << i for i, x in enumerate(b))]

    attr = shapley_exact(sentence(n), as_value_fn(v, n), class_index=0)
    assert abs(sum(attr.values) - (attr.full_value - attr.base_value)) <= 1e-9
    assert attr.values[7] == 0.0
    assert attr.values[2] == attr.values[5]


def test_one_word_and_constant_model():
    f = as_value_fn(lambda m: 0.25 + 0.5 * m, 1)
    attr = shapley_exact(sentence(1), f, class_index=0)
    assert attr.values == [0.5] and attr.base_value == 0.25
    const = lambda coal: np.full((len(coal), 3), 1 / 3)
    attr = shapley_exact(sentence(4), const)
    assert attr.values == [0.0] * 4 and attr.base_value == pytest.approx(1 / 3)
    samp = shapley_sampled(sentence(4), const, num_permutations=50)
    assert samp.values == [0.0] * 4 and samp.stderr == [0.0] * 4


def test_exact_refuses_long_sentences():
    with pytest.raises(ConfigError, match="sampled"):
        shapley_exact(sentence(13), lambda c: np.full((len(c), 3), 1 / 3))


def test_sampled_needs_enough_permutations():
    with pytest.raises(ConfigError):
        shapley_sampled(sentence(3), lambda c: np.full((len(c), 3), 1 / 3), num_permutations=49)


def test_sampled_agrees_with_exact_and_is_seeded(rng):
    n = 6
    f = as_value_fn(random_game(rng, n), n)
    exact = shapley_exact(sentence(n), f, class_index=0)
    a = shapley_sampled(sentence(n), f, class_index=0, num_permutations=4000, seed=3)
    b = shapley_sampled(sentence(n), f, class_index=0, num_permutations=4000, seed=3)
    assert a.to_json() == b.to_json()
    for e, s, se in zip(exact.values, a.values, a.stderr):
        assert abs(e - s) <= 3 * se + 1e-12


@pytest.fixture(scope="module")
def real_model():
    splits = gen_synthetic(60, 2)
    vocabs = build_vocab(splits["train"])
    cfg = TrainConfig(d_model=8, d_ff=16, num_heads=2, fusion_heads=2, max_len=12, seed=1)
    return build_model(cfg, vocabs), vocabs, splits


def test_real_model_masks_both_scripts(real_model):
    model, vocabs, splits = real_model
    ex = splits["test"][0]
    n = len(ex.roman_text)
    f = model_value_function(model, ex, vocabs, max_len=12)
    probs = f(np.ones((1, n), bool))
    assert probs.shape == (1, 3)
    attr = shapley_exact(ex, model, vocabs=vocabs, max_len=12)
    assert attr.full_value == pytest.approx(probs[0, attr.explained_class], abs=1e-15)
    assert abs(sum(attr.values) - (attr.full_value - attr.base_value)) <= 1e-9


def test_truncated_words_are_dummies(real_model):
    model, vocabs, splits = real_model
    ex = next(e for e in splits["test"] if len(e.roman_text) >= 6)
    attr = shapley_exact(ex, model, vocabs=vocabs, max_len=4)
    assert all(v == 0.0 for v in attr.values[3:])
    assert any(v != 0.0 for v in attr.values[:3])


def test_attribution_json_round_trip():
    attr = Attribution(["a", "b"], [0.1, -0.2], 0.3, 2, 0.2, "sampled", [0.01, 0.02], ["क", "ख"])
    back = Attribution.from_dict(__import__("json").loads(attr.to_json()))
    assert back == attr
    assert set(attr.to_dict()) >= {"words", "values", "base_value", "class", "mode", "stderr"}


def test_render_zero_values_plain():
    attr = Attribution(["a", "b"], [0.0, 0.0], 0.3, 0, 0.3)
    assert render_text_plot(attr, "ansi") == "a b"
    assert "background" not in render_text_plot(attr, "html")


def test_render_full_intensity_and_colours():
    attr = Attribution(["up", "down", "meh"], [0.4, -0.2, 0.0], 0.1, 2, 0.3)
    out = render_text_plot(attr, "html")
    assert "rgb(255, 0, 0)" in out
    assert "rgb(128, 128, 255)" in out
    ansi = render_text_plot(attr, "ansi")
    assert "\x1b[48;2;255;0;0m" in ansi and "\x1b[48;2;128;128;255m" in ansi
    with pytest.raises(ConfigError):
        render_text_plot(attr, "svg")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.text(st.characters(whitelist_categories=("L", "M", "N", "P", "S")), min_size=1, max_size=6), st.floats(-5, 5)), min_size=1, max_size=10))
def test_html_well_formed(items):
    words, values = map(list, zip(*items))
    frag = render_text_plot(Attribution(words, values, 0.0, 1, sum(values)), "html")
    root = ET.fromstring(frag)
    assert [s.text or "" for s in root.iter("span")] == words


def test_html_document_balanced():
    doc = html_document([("proposed", "<div><span>a</span></div>"), ("<b>", "<div></div>")])

    class Checker(HTMLParser):
        def __init__(self):
            super().__init__()
            self.stack = []

        def handle_starttag(self, tag, attrs):
            if tag != "meta":
                self.stack.append(tag)

        def handle_endtag(self, tag):
            if tag != "meta":
                assert self.stack.pop() == tag

    c = Checker()
    c.feed(doc)
    assert c.stack == []
    assert "&lt;b&gt;" in doc
