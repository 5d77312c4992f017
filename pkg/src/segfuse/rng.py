"""Deterministic seeding utilities.

Every random draw in the package flows from one root seed through
``derive_seed``, so adding a new consumer never perturbs existing streams.
The synthetic benchmark additionally draws from the raw counter-based
stream (``uniform_block`` / ``normal_block``) so generated datasets are
bit-identical across platforms: the stream is fixed-point 64-bit mixing,
no platform libm involved until the final quantization step.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """Finalizing 64-bit mixer (splitmix64 output function)."""
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX2) & _MASK64
    z ^= z >> 31
    return z


def derive_seed(root_seed: int, label: str) -> int:
    """Derive an independent 64-bit seed from a root seed and a purpose label.

    The label is folded with FNV-1a, then mixed with the root so that
    distinct labels give unrelated streams even for adjacent roots.
    """
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return mix64(mix64(root_seed & _MASK64) ^ h)


def generator(seed: int) -> np.random.Generator:
    """A numpy Generator for the given 64-bit seed (PCG64, platform-stable)."""
    return np.random.Generator(np.random.PCG64(seed & _MASK64))


def _stream_u64(seed: int, start: int, count: int) -> np.ndarray:
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + idx * np.uint64(_GOLDEN)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def uniform_block(seed: int, start: int, count: int) -> np.ndarray:
    """``count`` uniforms in [0, 1) at counter positions start..start+count-1."""
    return (_stream_u64(seed, start, count) >> np.uint64(11)).astype(
        np.float64
    ) * 2.0**-53


def normal_block(seed: int, start: int, count: int) -> np.ndarray:
    """``count`` standard normals via Box-Muller over the counter stream.

    Consumes 2*ceil(count/2) counter positions starting at ``start``.
    """
    pairs = (count + 1) // 2
    u1 = np.maximum(uniform_block(seed, start, pairs), 2.0**-53)
    u2 = uniform_block(seed, start + pairs, pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return out[:count]
