"""Counter-addressed random streams.

Every Gaussian used by the simulator is a pure function of a 128-bit stream
key and a position within the stream.  Nothing is consumed statefully, so the
value behind a given (key, position) pair does not depend on the order in
which other values are drawn.  That property is what makes adaptive bisection
of the driving noise reproducible: refining a step re-reads old draws and
adds new ones at fresh positions, it never shifts anything.

Streams are backed by numpy's Philox4x32 generator, whose counter moves in
blocks of four 64-bit words.  Stream positions are therefore laid out on
block boundaries.  Two node formats are used:

* word nodes: ceil(n/4) blocks per node, one uniform double per word, mapped
  through the exact inverse normal CDF.  Consumption is exactly n words, so
  word w of a node is addressable individually (the scalar path view needs
  that).
* ziggurat nodes: numpy's standard_normal, which consumes a slightly
  variable number of words (about 1.2% rejections).  Nodes are padded to
  ceil(n/4) + ceil(n/16) + 4 blocks, far beyond any realizable consumption,
  so nodes never overlap.  Used for midpoint draws on the hot path; roughly
  twice as fast as the ndtri route at n ~ 1000.

Both formats give exact standard normals; they are separate stream families
(never mixed within one), so the difference in mechanism is invisible
statistically.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Domain separators for independent stream families.
DOMAIN_NOISE = 1
DOMAIN_INIT = 2


def _splitmix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(*words: int) -> tuple[int, int]:
    """Mix a tuple of integers into a 128-bit Philox key.

    Distinct tuples give statistically independent streams.  The mix is a
    splitmix64 chain; not cryptographic, but it has no known weak lanes and
    separates adjacent inputs well.
    """
    h = 0
    for w in words:
        h = _splitmix64((h + _GOLDEN + (int(w) & _MASK64)) & _MASK64)
    return (_splitmix64(h ^ 0x243F6A8885A308D3),
            _splitmix64(h ^ 0x13198A2E03707344))


def word_blocks_per_node(n: int) -> int:
    return (n + 3) // 4


def zig_blocks_per_node(n: int) -> int:
    # ziggurat rejections add ~1.2% extra consumption on average; pad by
    # ~6% plus a constant so node spans can never collide
    return (n + 3) // 4 + (n + 15) // 16 + 4


class StreamDrawer:
    """Repositionable reader of one keyed stream.

    Reuses a single Philox/Generator pair and teleports its counter before
    each read, which is about twice as fast as constructing a fresh
    Generator and produces bit-identical output (verified against fresh
    construction in the test suite).  Stateful between calls, so an instance
    must be owned by a single consumer; create one per stream per engine.
    """

    __slots__ = ("_bg", "_gen")

    def __init__(self, key: tuple[int, int]):
        self._bg = Philox(key=key, counter=[0, 0, 0, 0])
        self._gen = Generator(self._bg)

    def _seek(self, block: int) -> None:
        st = self._bg.state
        ctr = st["state"]["counter"]
        ctr[0] = block & _MASK64
        ctr[1] = 0
        ctr[2] = 0
        ctr[3] = 0
        st["buffer_pos"] = 4  # discard any buffered words
        self._bg.state = st

    def uniforms(self, block: int, shape) -> np.ndarray:
        """Uniform [0,1) doubles starting at the given block (1 word each)."""
        self._seek(block)
        return self._gen.random(shape)

    def normals_zig(self, node: int, n: int) -> np.ndarray:
        """n standard normals at a ziggurat node (padded layout, see module)."""
        self._seek(node * zig_blocks_per_node(n))
        return self._gen.standard_normal(n)


def _to_normal(u: np.ndarray) -> np.ndarray:
    # u == 0.0 has probability 2^-53 per draw; clamp so ndtri stays finite
    return ndtri(np.fmax(u, 1e-300))


def uniforms_at(key: tuple[int, int], block: int, shape) -> np.ndarray:
    """Pure-function form of StreamDrawer.uniforms."""
    return Generator(Philox(key=key, counter=[block, 0, 0, 0])).random(shape)


def normals_at(key: tuple[int, int], node: int, n: int) -> np.ndarray:
    """n standard normals at word node ``node`` (ndtri of exact words).

    Node j owns blocks [j*ceil(n/4), (j+1)*ceil(n/4)); entry i is word i of
    that span, so single entries are individually addressable.
    """
    u = uniforms_at(key, node * word_blocks_per_node(n), n)
    return _to_normal(u)


def normals_block(key: tuple[int, int], node0: int, count: int, n: int) -> np.ndarray:
    """(count, n) normals for consecutive word nodes node0..node0+count-1.

    Row r is bit-identical to normals_at(key, node0 + r, n); the bulk read
    is just cheaper.
    """
    bpn = word_blocks_per_node(n)
    u = uniforms_at(key, node0 * bpn, (count, 4 * bpn))[:, :n]
    return _to_normal(u)


def normals_zig_at(key: tuple[int, int], node: int, n: int) -> np.ndarray:
    """Pure-function form of StreamDrawer.normals_zig."""
    g = Generator(Philox(key=key, counter=[node * zig_blocks_per_node(n), 0, 0, 0]))
    return g.standard_normal(n)


def word_normal_at(key: tuple[int, int], word: int) -> float:
    """The single standard normal behind one word of a word-node stream."""
    u = uniforms_at(key, word >> 2, 4)[word & 3]
    return float(ndtri(max(u, 1e-300)))
