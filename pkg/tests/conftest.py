import numpy as np
import pytest

from neuralvar import datagen
from neuralvar.data import Dataset, load_idx, normalize


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small synthetic digit corpus written as IDX files."""
    d = tmp_path_factory.mktemp("corpus")
    datagen.write_corpus(d, n_train=6000, n_test=1500, seed=99)
    return d


@pytest.fixture(scope="session")
def small_data(corpus_dir):
    train = load_idx(corpus_dir / "train-images-idx3-ubyte",
                     corpus_dir / "train-labels-idx1-ubyte")
    test = load_idx(corpus_dir / "t10k-images-idx3-ubyte",
                    corpus_dir / "t10k-labels-idx1-ubyte")
    return normalize(train, test)


def make_blob_dataset(n, d, num_classes, rng, spread=1.0):
    """Linearly separable-ish gaussian blobs, for fast optimizer tests."""
    centers = rng.normal(size=(num_classes, d)) * 3.0
    labels = rng.integers(0, num_classes, size=n)
    images = centers[labels] + rng.normal(scale=spread, size=(n, d))
    return Dataset(images, labels.astype(np.int64), num_classes)
