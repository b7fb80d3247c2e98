"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np


def _code(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *names: str) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and a path of stream names.

    Streams with different name paths are statistically independent, so e.g.
    changing the dropout stream never perturbs the sampler or the init.
    """
    key = [int(seed)] + [_code(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def rng_state_words(rng: np.random.Generator) -> np.ndarray:
    """Pack a PCG64 state into ten little-endian u32 words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {st['bit_generator']}")
    words = []
    for value in (st["state"]["state"], st["state"]["inc"]):
        for i in range(4):
            words.append((value >> (32 * i)) & 0xFFFFFFFF)
    words.append(st["has_uint32"])
    words.append(st["uinteger"])
    return np.asarray(words, dtype=np.uint32)


def rng_from_words(words: np.ndarray) -> np.random.Generator:
    words = [int(w) for w in np.asarray(words, dtype=np.uint32)]
    if len(words) != 10:
        raise ValueError(f"expected 10 state words, got {len(words)}")
    state = sum(w << (32 * i) for i, w in enumerate(words[0:4]))
    inc = sum(w << (32 * i) for i, w in enumerate(words[4:8]))
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": words[8],
        "uinteger": words[9],
    }
    return np.random.Generator(bg)
