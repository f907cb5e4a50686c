"""
Auxiliary functions to be used internally by the pyLoRAOver package
"""
import hashlib

import numpy as np


def getattr_nest(__o, name_list):
    """Call the getattr function recursively on a list"""
    if len(name_list) == 1:
        return getattr(__o, name_list[0])
    return getattr_nest(getattr(__o, name_list[0]), name_list[1:])


def ceil_div(a: int, b: int) -> int:
    """Integer ceiling of a/b for non-negative a and positive b"""
    return -(-int(a) // int(b))


def prod(values) -> int:
    """Product of a sequence of integers, 1 for an empty sequence"""
    result = 1
    for v in values:
        result *= int(v)
    return result


def prime_factors(n: int) -> list:
    """Prime factors of n in non-increasing order, with multiplicity"""
    n = int(n)
    factors = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


def split_factors(n: int, m: int, spread: int = 2) -> list:
    """
    Split the integer n into m factors whose product is n.

    n : int
        Number to be factorized.

    m : int
        Number of factors to return.

    spread : int
        Number of non-trivial factors. The prime factors of n are distributed
        greedily, largest prime first, into the currently smallest of 'spread'
        bins. The bins are sorted ascending, the first half placed at the
        beginning and the rest at the end, with 1s padding the middle.

    returns:
        List of m integers.
        OBS: split_factors(768, 2) -> [24, 32], split_factors(8, 9) ->
             [2, 1, 1, 1, 1, 1, 1, 1, 4]
    """
    k = max(1, min(int(spread), int(m)))
    bins = [1] * k
    for p in prime_factors(n):
        idx = int(np.argmin(bins))
        bins[idx] *= p
    bins.sort()
    head = (k + 1) // 2
    return bins[:head] + [1] * (m - k) + bins[head:]


def rel_error(a, b) -> float:
    """Relative Frobenius distance ||a-b|| / ||b||, absolute if b is zero"""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.linalg.norm(b)
    num = np.linalg.norm(a - b)
    return float(num / den) if den > 0 else float(num)


def stream_key(seed: int, purpose: str, name: str = '') -> list:
    """Entropy words identifying the random stream (seed, purpose, name)"""
    digest = hashlib.sha256(f'{purpose}/{name}'.encode('utf-8')).digest()
    words = [int.from_bytes(digest[i:i + 4], 'little') for i in range(0, 16, 4)]
    return [int(seed) & 0xFFFFFFFF] + words


def named_stream(seed: int, purpose: str, name: str = '') -> np.random.Generator:
    """
    Counter-based random generator for one (purpose, name) stream.

    Every stream is derived only from the run seed and its own label, so
    creating a stream for a new slot never shifts the draws of the others.
    """
    seq = np.random.SeedSequence(stream_key(seed, purpose, name))
    return np.random.Generator(np.random.Philox(seq))
