"""Word-drop and bounded word-shuffle corruption for denoising training."""
from __future__ import annotations

import numpy as np

from .config import NoiseConfig
from .vocab import TokenSequence


def _bounded_permutation(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """A random permutation of range(n) moving no element more than k slots.

    Sorting position indices perturbed by uniform noise in [0, k+1) can
    never swap elements whose indices differ by more than k, which gives
    the displacement bound; k=0 reduces to the identity.
    """
    if n <= 1 or k <= 0:
        return np.arange(n)
    keys = np.arange(n, dtype=np.float64) + rng.uniform(0.0, k + 1, size=n)
    return np.argsort(keys, kind="stable")


def add_noise(x: TokenSequence, cfg: NoiseConfig, rng: np.random.Generator) -> TokenSequence:
    """Drop interior tokens with probability word_drop, then shuffle the
    survivors within a window of shuffle_window slots. bos/eos are fixed,
    and no token is ever introduced that was not in the input."""
    interior = list(x.interior())
    if interior and cfg.word_drop > 0.0:
        keep = rng.random(len(interior)) >= cfg.word_drop
        interior = [t for t, k in zip(interior, keep) if k]
    if len(interior) > 1:
        order = _bounded_permutation(len(interior), cfg.shuffle_window, rng)
        interior = [interior[i] for i in order]
    return TokenSequence((x.ids[0], *interior, x.ids[-1]), x.lang)
