"""Stateless 64-bit seed derivation (splitmix64 finalizer chained over keys)."""

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """Mix ``base`` with each key in turn; result fits in an unsigned 63-bit int."""
    h = splitmix64(int(base) & MASK64)
    for k in keys:
        h = splitmix64(h ^ (int(k) & MASK64))
    return h >> 1
