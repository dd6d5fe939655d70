"""Shared fixtures. Heavy artifacts (pretrained target, distilled drafts)
are built once and cached under tests/_cache keyed by config version; delete
the directory to force a rebuild."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from specdec import data as D
from specdec import train as TR
from specdec.compressor import Compressor, CompressorSpec
from specdec.decode import DecodeConfig
from specdec.model import (DraftModel, ModelDims, load_checkpoint, load_target,
                           save_checkpoint)
from specdec.rng import derive_seed

CACHE = Path(__file__).parent / "_cache"
CACHE.mkdir(exist_ok=True)

DATA_SEED = 11
EVAL_SEED = 999
TARGET_SEED = 42
PRETRAIN_STEPS = 2000
PRETRAIN_LR = 1e-3
TRAIN_N = 2560
EVAL_N = 220

EVAL_CFG = DecodeConfig(mode="chain", gamma=5, temperature=0.0, max_new_tokens=12)


@pytest.fixture(scope="session")
def train_set():
    return D.gen_dataset(TRAIN_N, seed=DATA_SEED)


@pytest.fixture(scope="session")
def eval_set():
    return D.gen_dataset(EVAL_N, seed=EVAL_SEED)


@pytest.fixture(scope="session")
def target(train_set):
    path = CACHE / f"target-s{PRETRAIN_STEPS}"
    if (path / "manifest.json").exists():
        model = load_target(str(path))
    else:
        model, _losses = TR.pretrain_target(
            train_set, steps=PRETRAIN_STEPS, lr=PRETRAIN_LR, seed=TARGET_SEED,
            dims=ModelDims(), grid=8,
        )
        save_checkpoint(str(path), model.state_arrays(), model.meta())
        np.save(path / "losses.npy", np.asarray(_losses))
    D.attach_visuals(train_set, model.projection)
    model.set_frozen(True)
    return model


@pytest.fixture(scope="session")
def pretrain_losses(target):
    path = CACHE / f"target-s{PRETRAIN_STEPS}" / "losses.npy"
    if not path.exists():
        pytest.skip("loss history only recorded on a fresh pretrain run")
    return np.load(path)


@pytest.fixture(scope="session")
def eval_visuals(target, eval_set):
    D.attach_visuals(eval_set, target.projection)
    return eval_set


def _train_draft_cached(target, train_set, eval_set, mode: str, seed: int,
                        epochs: int = 5):
    tag = f"draft-{mode}-seed{seed}-e{epochs}-s{PRETRAIN_STEPS}"
    path = CACHE / tag
    spec = (CompressorSpec(mode="select") if mode == "select"
            else CompressorSpec(mode="fixed", fixed_branch="none"))
    if (path / "manifest.json").exists():
        arrays, meta = load_checkpoint(str(path))
        draft = DraftModel(target, seed=meta["seed"])
        comp = Compressor(spec, target.dims.d_model)
        for name, arr in arrays.items():
            if name.startswith("compressor."):
                comp.params[name.removeprefix("compressor.")].data[...] = arr
            else:
                draft.params[name].data[...] = arr
        records = [TR.EpochRecord(**r) for r in meta["records"]]
        return draft, comp, records
    cfg = TR.DistillConfig(epochs=epochs, seed=derive_seed(seed, "distill"))
    records, draft, comp = TR.scaling_experiment(
        target, train_set, eval_set[:60], cfg, spec=spec, dcfg=EVAL_CFG,
        allow_small_eval=False,
    )
    arrays = draft.state_arrays() | comp.state_arrays()
    meta = draft.meta() | {"records": [vars(r) for r in records]}
    save_checkpoint(str(path), arrays, meta)
    return draft, comp, records


@pytest.fixture(scope="session")
def trained_engine(target, train_set, eval_visuals):
    """(draft, compressor) distilled with the select-mode compressor."""
    draft, comp, _ = _train_draft_cached(target, train_set, eval_visuals, "select", 0)
    return draft, comp


@pytest.fixture(scope="session")
def scaling_runs(target, train_set, eval_visuals):
    """Epoch records for select and no-compressor lineages over 3 seeds."""
    out = {}
    for mode in ("select", "baseline"):
        for seed in (0, 1, 2):
            _, _, records = _train_draft_cached(target, train_set, eval_visuals,
                                                mode, seed)
            out[(mode, seed)] = records
    return out


@pytest.fixture(scope="session")
def fresh_draft(target):
    return DraftModel(target, seed=7)


@pytest.fixture(scope="session")
def identity_compressor(target):
    return Compressor(CompressorSpec(mode="fixed", fixed_branch="none"),
                      target.dims.d_model)
