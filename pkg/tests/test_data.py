"""Synthetic task contracts. The answer oracle below re-derives every answer
from the parsed prompt plus the regenerated scene, independently of the
generator's construction path."""

import io
import json

import numpy as np
import pytest
from scipy import stats

from specdec import data as D
from specdec.data import COLOR_WORDS, SHAPE_WORDS, VOCAB
from specdec.rng import Rng, derive_seed

# ------------------------------------------------------------ answer oracle


def _spell(n: int) -> list[str]:
    return list(str(n))


def oracle_answer(sample: D.Sample) -> list[str]:
    words = VOCAB.decode(sample.prompt_ids)
    scene = D.gen_scene(sample.scene_seed, sample.grid)
    assert words[0] == "<bos>" and words[-1] == "?"
    if words[1] == "what" and words[2] in ("color", "shape"):
        r, c = int(words[5][1:]), int(words[6][1:])
        if words[2] == "color":
            val = COLOR_WORDS[scene.colors[r, c]]
        else:
            val = SHAPE_WORDS[scene.shapes[r, c]]
        return ["the", words[2], "at", f"r{r}", f"c{c}", val, "."]
    if words[1] == "how":
        token = words[3]
        if token in COLOR_WORDS:
            count = int((scene.colors == COLOR_WORDS.index(token)).sum())
        else:
            count = int((scene.shapes == SHAPE_WORDS.index(token)).sum())
        return ["there", "are"] + _spell(count) + [token, "cells", "."]
    if words[1] == "what" and words[2] == "is":
        a, op, b = int(words[3]), words[4], int(words[5])
        val = {"plus": a + b, "minus": a - b, "times": a * b}[op]
        return [str(a), op, str(b), "equals"] + _spell(val) + ["."]
    raise AssertionError(f"unparseable prompt: {words}")


def test_oracle_equivalence():
    for s in D.gen_dataset(500, seed=3):
        assert VOCAB.decode(s.answer_ids) == oracle_answer(s)


# ------------------------------------------------------------- scene basics


def test_scene_determinism():
    a = D.gen_scene(7, 8)
    b = D.gen_scene(7, 8)
    assert np.array_equal(a.shapes, b.shapes) and np.array_equal(a.colors, b.colors)


def test_scene_grid_sizes():
    s = D.gen_scene(1, 2)
    assert s.shapes.shape == (2, 2) and s.colors.shape == (2, 2)
    with pytest.raises(ValueError):
        D.gen_scene(1, 1)


def test_scene_cell_uniformity():
    counts = np.zeros(16, dtype=np.int64)
    for seed in range(10_000):
        s = D.gen_scene(derive_seed(1234, seed), 2)  # 4 cells per scene
        combo = s.shapes.astype(int) * 4 + s.colors.astype(int)
        for v in combo.ravel():
            counts[v] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_embed_scene_properties():
    proj = D.make_projection(8, 64, seed=5)
    a = D.gen_scene(100, 8)
    b = D.gen_scene(101, 8)
    b.shapes[0, 0] = a.shapes[0, 0]
    b.colors[0, 0] = a.colors[0, 0]
    ea, eb = D.embed_scene(a, proj), D.embed_scene(b, proj)
    assert ea.shape == (64, 64)
    assert np.array_equal(ea[0], eb[0])  # same content, same position
    zero = D.embed_scene(a, np.zeros_like(proj))
    assert not zero.any()


# ------------------------------------------------------------- dataset level


def test_dataset_deterministic():
    a = D.gen_dataset(50, seed=9, mix=0.3)
    b = D.gen_dataset(50, seed=9, mix=0.3)
    for x, y in zip(a, b):
        assert (x.scene_seed, x.prompt_ids, x.answer_ids, x.needs_vision) == (
            y.scene_seed, y.prompt_ids, y.answer_ids, y.needs_vision)


def test_text_only_count_matches_independent_replay():
    n, seed, mix = 100, 17, 0.2
    ds = D.gen_dataset(n, seed=seed, mix=mix)
    got = sum(not s.needs_vision for s in ds)
    # replay the per-sample coin: first uniform of the sample substream
    expected = sum(
        Rng(derive_seed(seed, "sample", i)).uniform() < mix for i in range(n)
    )
    assert got == expected
    assert 5 <= got <= 40  # binomial(100, .2) sanity band


def test_mix_zero_means_all_visual():
    assert all(s.needs_vision for s in D.gen_dataset(60, seed=2, mix=0.0))


def test_answer_lengths_in_range():
    for s in D.gen_dataset(400, seed=21):
        assert 3 <= len(s.answer_ids) <= 10


def test_counting_answer_spread():
    counts = set()
    for s in D.gen_dataset(600, seed=5):
        words = VOCAB.decode(s.prompt_ids)
        if words[1] == "how":
            digits = [w for w in VOCAB.decode(s.answer_ids) if w.isdigit()]
            counts.add(int("".join(digits)))
    assert len(counts) >= 4


def test_needs_vision_iff_visual_template():
    for s in D.gen_dataset(300, seed=13):
        words = VOCAB.decode(s.prompt_ids)
        assert s.needs_vision == (words[2] != "is")


# ---------------------------------------------------------------- file I/O


def test_roundtrip_and_byte_identity(tmp_path):
    ds = D.gen_dataset(40, seed=4)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    D.save_dataset(p1, ds)
    D.save_dataset(p2, ds)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = D.load_dataset(p1)
    for x, y in zip(ds, loaded):
        assert (x.scene_seed, x.grid, x.prompt_ids, x.answer_ids, x.needs_vision) == (
            y.scene_seed, y.grid, y.prompt_ids, y.answer_ids, y.needs_vision)


def test_file_schema_fields(tmp_path):
    p = tmp_path / "d.jsonl"
    D.save_dataset(p, D.gen_dataset(3, seed=1))
    rec = json.loads(p.read_text().splitlines()[0])
    assert set(rec) == {"scene_seed", "grid", "prompt_ids", "answer_ids", "needs_vision"}


def test_visuals_regenerated_not_stored(tmp_path):
    p = tmp_path / "d.jsonl"
    ds = D.gen_dataset(5, seed=1)
    D.save_dataset(p, ds)
    loaded = D.load_dataset(p)
    assert all(s.visual is None for s in loaded)
    proj = D.make_projection(8, 64, seed=0)
    D.attach_visuals(loaded, proj)
    assert all(s.visual.shape == (64, 64) for s in loaded)


def test_vocab_bijective_and_reserved():
    assert VOCAB.size == 64
    assert (VOCAB.BOS, VOCAB.EOS, VOCAB.PAD) == (0, 1, 2)
    assert len({VOCAB.index[w] for w in VOCAB.words}) == 64
    assert VOCAB.decode(VOCAB.encode(["red", "7", "?"])) == ["red", "7", "?"]
