import copy
import warnings

import pytest
import torch

from dgkd_lab.lowlight import DarkenConfig, darken
from dgkd_lab.toyscene import SceneSpec, generate_corpus

warnings.filterwarnings("ignore", message="Converting a tensor with requires_grad")

TOY_SPEC = SceneSpec(image_size=64, num_classes=3, seed=7)


def dark_twins(samples, dcfg=None):
    dcfg = dcfg or DarkenConfig()
    out = []
    for s in samples:
        d = copy.copy(s)
        d.image = darken(s.image, dcfg, s.sample_id)
        out.append(d)
    return out


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small paired corpus shared by unit tests (not the acceptance ladder)."""
    train = generate_corpus(TOY_SPEC, 32, "train")
    val = generate_corpus(TOY_SPEC, 16, "val")
    return {
        "spec": TOY_SPEC,
        "train": train,
        "val": val,
        "train_dark": dark_twins(train),
        "val_dark": dark_twins(val),
    }


@pytest.fixture(autouse=True)
def deterministic_torch():
    torch.manual_seed(0)
    yield
