"""Shared fixtures: synthetic corpus, trained tokenizer, pretrained prior.

All are session-scoped; training the tokenizer once (~15 s) and the prior
once (~2.5 min) is amortized across every test module that needs real
features, real token streams, or a conditioned generator.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nextscale.model import (
    PretrainConfig,
    PromptVocab,
    VarConfig,
    VarModel,
    pretrain,
)
from nextscale.synthetic import (
    BACKGROUNDS,
    CLASSES,
    SyntheticSpec,
    generate_synthetic_dataset,
)
from nextscale.tokenizer import (
    AutoencoderConfig,
    TokenizerTrainConfig,
    train_autoencoder,
)

CORPUS_SEED = 7
TOKENIZER_SEED = 0
MODEL_SEED = 1
PRETRAIN_SEED = 2


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic_dataset(SyntheticSpec(), seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def corpus_images(corpus) -> np.ndarray:
    return corpus.images()


@pytest.fixture(scope="session")
def trained_tokenizer(corpus_images):
    weights, rows = train_autoencoder(
        corpus_images, AutoencoderConfig(), TokenizerTrainConfig(), seed=TOKENIZER_SEED
    )
    return weights, rows


def default_prompt_vocab() -> PromptVocab:
    return PromptVocab.build(CLASSES, BACKGROUNDS.keys())


@pytest.fixture(scope="session")
def prompt_vocab() -> PromptVocab:
    return default_prompt_vocab()


@pytest.fixture(scope="session")
def pretrained_prior(corpus, trained_tokenizer, prompt_vocab):
    """Prior trained at the default recipe; returns (model, loss rows)."""
    weights, _ = trained_tokenizer
    model = VarModel.initialize(
        VarConfig(prompt_vocab=prompt_vocab.size), prompt_vocab, seed=MODEL_SEED
    )
    rows = pretrain(model, corpus.examples, weights, PretrainConfig(), seed=PRETRAIN_SEED)
    return model, rows
