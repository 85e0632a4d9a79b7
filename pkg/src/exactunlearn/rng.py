"""Counter-based random numbers.

Every draw is a pure function of an RngKey, so removing a neighbour from a
microbatch never changes the draws seen by a retained example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

# op ids used across the package; new ops must take a fresh id
OP_INIT = 1
OP_DROPOUT = 2
OP_SAMPLER = 3
OP_MB_SEED = 4
OP_ADAPTER_INIT = 5
OP_CORPUS = 6
OP_RETAIN_TUNE = 7


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _splitmix64_np(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RngKey:
    seed64: int
    example_id: int
    token_idx: int = 0
    op_id: int = 0
    offset: int = 0

    def hash(self) -> int:
        return key_hash(self.seed64, self.example_id, self.token_idx, self.op_id, self.offset)

    def uniform(self) -> float:
        return (self.hash() >> 40) / float(1 << 24)


def key_hash(seed64: int, example_id: int, token_idx: int = 0, op_id: int = 0, offset: int = 0) -> int:
    h = splitmix64(seed64 & MASK64)
    h = splitmix64(h ^ (example_id & MASK64))
    h = splitmix64(h ^ (((token_idx & 0xFFFFFFFF) << 32) | (op_id & 0xFFFFFFFF)))
    return splitmix64(h ^ (offset & 0xFFFFFFFF))


def key_hash_array(seed64: int, example_id: int, token_idx, op_id: int, offset) -> np.ndarray:
    """Vectorised key_hash over broadcast token_idx / offset arrays."""
    with np.errstate(over="ignore"):
        base = splitmix64(splitmix64(seed64 & MASK64) ^ (example_id & MASK64))
        tok = np.asarray(token_idx, dtype=np.uint64)
        off = np.asarray(offset, dtype=np.uint64)
        mid = (tok << np.uint64(32)) | np.uint64(op_id & 0xFFFFFFFF)
        h = _splitmix64_np(np.uint64(base) ^ mid)
        return _splitmix64_np(h ^ off)


def uniform_array(seed64: int, example_id: int, token_idx, op_id: int, offset) -> np.ndarray:
    """f32 uniforms in [0, 1) with 24 bits of resolution."""
    h = key_hash_array(seed64, example_id, token_idx, op_id, offset)
    return ((h >> np.uint64(40)).astype(np.float64) / float(1 << 24)).astype(np.float32)


def normal_array(seed64: int, example_id: int, shape: tuple[int, ...], op_id: int) -> np.ndarray:
    """Standard normals (Box-Muller), one per flat index, float32."""
    n = int(np.prod(shape)) if shape else 1
    idx = np.arange(n, dtype=np.uint64)
    u1 = key_hash_array(seed64, example_id, 0, op_id, idx)
    u2 = key_hash_array(seed64, example_id, 1, op_id, idx)
    a = ((u1 >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
    b = (u2 >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    z = np.sqrt(-2.0 * np.log(a)) * np.cos(2.0 * np.pi * b)
    return z.astype(np.float32).reshape(shape)
