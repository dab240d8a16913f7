"""Deterministic sub-seed derivation.

All randomness in a run flows from one master seed. Sub-streams (dataset
sampling, network init, per-candidate episodes, ...) get their own seeds
derived with a splitmix64 chain over the master seed and a sequence of
string/int labels. The scheme uses only fixed 64-bit arithmetic, so derived
seeds are identical across machines and Python builds (no reliance on
``hash()``).
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(master: int, *labels: int | str) -> int:
    """Derive a 63-bit sub-seed from ``master`` and a label path.

    Labels are folded into the splitmix64 state one 8-byte chunk at a time
    (strings as UTF-8, ints as their 64-bit value), so distinct paths give
    independent streams.
    """
    state = master & _MASK
    state, _ = _splitmix64(state)
    for label in labels:
        if isinstance(label, str):
            chunks = label.encode("utf-8")
            for i in range(0, len(chunks), 8):
                word = int.from_bytes(chunks[i : i + 8], "little")
                state, out = _splitmix64(state ^ word)
                state ^= out
        else:
            state, out = _splitmix64(state ^ (int(label) & _MASK))
            state ^= out
    _, final = _splitmix64(state)
    return final >> 1  # keep it non-negative for np.random seeding


def rng_for(master: int, *labels: int | str) -> np.random.Generator:
    """A PCG64 generator seeded from the derived sub-seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
