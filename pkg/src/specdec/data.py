"""Deterministic toy multimodal task: symbolic grid scenes plus templated
question/answer token sequences.

A scene is a G x G grid of (shape, color) cells. Visual tokens come from a
frozen seeded random projection of per-cell one-hot features, standing in
for a frozen vision encoder + projector. Questions cover cell lookup,
counting, and text-only arithmetic; answers are verbalized as 3-10 token
sequences so multi-token acceptance dynamics are visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from .rng import Rng, derive_seed

N_SHAPES = 4
N_COLORS = 4

COLOR_WORDS = ["red", "green", "blue", "yellow"]
SHAPE_WORDS = ["circle", "square", "triangle", "star"]

MAX_GRID = 8  # coordinate tokens r0..r7 / c0..c7 cover grids up to 8x8

_BASE_WORDS = (
    ["<bos>", "<eos>", "<pad>"]
    + [str(i) for i in range(10)]
    + COLOR_WORDS
    + SHAPE_WORDS
    + [f"r{i}" for i in range(MAX_GRID)]
    + [f"c{i}" for i in range(MAX_GRID)]
    + [
        "what", "color", "shape", "is", "at", "how", "many",
        "there", "are", "cells", "the", "plus", "minus", "times", "equals",
        "?", ".",
    ]
)


class Vocab:
    """Bijective token/string mapping. Reserved ids: BOS=0, EOS=1, PAD=2."""

    BOS = 0
    EOS = 1
    PAD = 2

    def __init__(self, size: int = 64):
        if size < len(_BASE_WORDS):
            raise ValueError(f"vocab size must be >= {len(_BASE_WORDS)}")
        words = list(_BASE_WORDS)
        words += [f"<unused{i}>" for i in range(size - len(words))]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        assert len(self.index) == size

    @property
    def size(self) -> int:
        return len(self.words)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]


VOCAB = Vocab()


@dataclass
class SceneSpec:
    grid: int
    shapes: np.ndarray  # (G, G) int8
    colors: np.ndarray  # (G, G) int8
    seed: int


@dataclass
class Sample:
    scene_seed: int
    grid: int
    prompt_ids: list[int]
    answer_ids: list[int]
    needs_vision: bool
    visual: np.ndarray | None = field(default=None, repr=False)


def gen_scene(seed: int, grid: int) -> SceneSpec:
    """Uniform iid cells; row-major order, shape then color per cell."""
    if grid < 2:
        raise ValueError("grid must be >= 2")
    rng = Rng(seed)
    shapes = np.empty((grid, grid), dtype=np.int8)
    colors = np.empty((grid, grid), dtype=np.int8)
    for r in range(grid):
        for c in range(grid):
            shapes[r, c] = rng.randint(N_SHAPES)
            colors[r, c] = rng.randint(N_COLORS)
    return SceneSpec(grid, shapes, colors, seed)


def make_projection(grid: int, d_model: int, seed: int) -> np.ndarray:
    """Frozen projector from per-cell one-hot features to model space.
    Scaled so projected rows land near token-embedding magnitude."""
    d_in = N_SHAPES + N_COLORS + 2 * grid
    rng = Rng(derive_seed(seed, "visual-projection"))
    return rng.normal_array((d_in, d_model), scale=0.5 / np.sqrt(d_in))


def scene_features(scene: SceneSpec) -> np.ndarray:
    """One-hot (shape, color, row, col) features per cell, row-major."""
    g = scene.grid
    d_in = N_SHAPES + N_COLORS + 2 * g
    feats = np.zeros((g * g, d_in), dtype=np.float32)
    for r in range(g):
        for c in range(g):
            i = r * g + c
            feats[i, scene.shapes[r, c]] = 1.0
            feats[i, N_SHAPES + scene.colors[r, c]] = 1.0
            feats[i, N_SHAPES + N_COLORS + r] = 1.0
            feats[i, N_SHAPES + N_COLORS + g + c] = 1.0
    return feats


def embed_scene(scene: SceneSpec, projection: np.ndarray) -> np.ndarray:
    """(G^2, d_model) visual tokens. Same cell content at the same position
    always maps to the same vector."""
    return K.matmul(scene_features(scene), projection)


def _digits(n: int) -> list[str]:
    return list(str(n))


def _build_sample(dataset_seed: int, i: int, mix: float, grid: int) -> Sample:
    srng = Rng(derive_seed(dataset_seed, "sample", i))
    scene_seed = derive_seed(dataset_seed, "scene", i)
    scene = gen_scene(scene_seed, grid)
    text_only = srng.uniform() < mix

    if text_only:
        op = srng.randint(3)
        a = srng.randint(10)
        b = srng.randint(10)
        if op == 0:
            word, val = "plus", a + b
        elif op == 1:
            if b > a:
                a, b = b, a
            word, val = "minus", a - b
        else:
            word, val = "times", a * b
        prompt = ["<bos>", "what", "is", str(a), word, str(b), "?"]
        answer = [str(a), word, str(b), "equals"] + _digits(val) + ["."]
    else:
        kind = srng.randint(3)
        if kind == 0:  # cell lookup: color
            r = srng.randint(grid)
            c = srng.randint(grid)
            color = COLOR_WORDS[scene.colors[r, c]]
            prompt = ["<bos>", "what", "color", "is", "at", f"r{r}", f"c{c}", "?"]
            answer = ["the", "color", "at", f"r{r}", f"c{c}", color, "."]
        elif kind == 1:  # cell lookup: shape
            r = srng.randint(grid)
            c = srng.randint(grid)
            shape = SHAPE_WORDS[scene.shapes[r, c]]
            prompt = ["<bos>", "what", "shape", "is", "at", f"r{r}", f"c{c}", "?"]
            answer = ["the", "shape", "at", f"r{r}", f"c{c}", shape, "."]
        else:  # counting
            if srng.randint(2) == 0:
                color_id = srng.randint(N_COLORS)
                word = COLOR_WORDS[color_id]
                count = int((scene.colors == color_id).sum())
            else:
                shape_id = srng.randint(N_SHAPES)
                word = SHAPE_WORDS[shape_id]
                count = int((scene.shapes == shape_id).sum())
            prompt = ["<bos>", "how", "many", word, "cells", "?"]
            answer = ["there", "are"] + _digits(count) + [word, "cells", "."]

    return Sample(
        scene_seed=scene_seed,
        grid=grid,
        prompt_ids=VOCAB.encode(prompt),
        answer_ids=VOCAB.encode(answer),
        needs_vision=not text_only,
    )


def gen_dataset(n: int, seed: int, mix: float = 0.2, grid: int = 8) -> list[Sample]:
    """n deterministic samples; ``mix`` is the text-only fraction."""
    if grid > MAX_GRID:
        raise ValueError(f"coordinate tokens cover grids up to {MAX_GRID}")
    return [_build_sample(seed, i, mix, grid) for i in range(n)]


def attach_visuals(samples: list[Sample], projection: np.ndarray) -> list[Sample]:
    """Regenerate visual tokens from scene seeds (they are never stored)."""
    for s in samples:
        s.visual = embed_scene(gen_scene(s.scene_seed, s.grid), projection)
    return samples


def save_dataset(path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "scene_seed": s.scene_seed,
                "grid": s.grid,
                "prompt_ids": s.prompt_ids,
                "answer_ids": s.answer_ids,
                "needs_vision": s.needs_vision,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> list[Sample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Sample(
                    scene_seed=int(rec["scene_seed"]),
                    grid=int(rec["grid"]),
                    prompt_ids=[int(t) for t in rec["prompt_ids"]],
                    answer_ids=[int(t) for t in rec["answer_ids"]],
                    needs_vision=bool(rec["needs_vision"]),
                )
            )
    return out
