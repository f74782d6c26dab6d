import numpy as np
import pytest

from ltt.encoder import ClipModel, TextConfig, VitConfig, Vocab

TOY_WORDS = ["a", "photo", "of", "the", "sketch", "red", "blue", "green",
             "circle", "square", "triangle"]


def build_tiny_model(seed=5, dtype=np.float32, embed_dim=32, num_layers=2,
                     out_dim=32, image_size=32, patch_size=8):
    vocab = Vocab(TOY_WORDS)
    vit = VitConfig(image_size=image_size, patch_size=patch_size, embed_dim=embed_dim,
                    num_layers=num_layers, num_heads=4, mlp_ratio=2.0, out_dim=out_dim)
    txt = TextConfig(vocab_size=len(vocab), context=16, width=embed_dim,
                     num_layers=2, num_heads=4, out_dim=out_dim)
    return ClipModel.create(vit, txt, vocab, seed=seed, dtype=dtype)


@pytest.fixture
def tiny_model():
    return build_tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(123)
