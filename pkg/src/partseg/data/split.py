"""Seeded train / validation / test splits for the 1- and 10-sample settings."""
import numpy as np

from ..errors import SplitError


def split_sizes(n):
    """(train, validation) counts: validation is used only when training on more than one sample."""
    if n < 1:
        raise SplitError(f"need at least one training sample, got n={n}")
    return n, (1 if n > 1 else 0)


def sample_split(samples, n, seed=0):
    """Draw n train (+1 validation when n > 1) samples; the rest, in original order, is the test set."""
    n_train, n_val = split_sizes(n)
    if len(samples) < n_train + n_val + 1:
        raise SplitError(f"{len(samples)} samples cannot give {n_train} train, {n_val} validation and a test set")
    order = np.random.default_rng(seed).permutation(len(samples))
    train_idx = order[:n_train]
    val_idx = order[n_train:n_train + n_val]
    test_idx = np.sort(order[n_train + n_val:])
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(train_idx), pick(val_idx), pick(test_idx)
