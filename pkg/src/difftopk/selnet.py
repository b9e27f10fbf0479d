"""Comparator networks: full sorters, classic top-k selection and splitter
selection networks (SSN).

Convention: a comparator ``(lo, hi)`` leaves the larger value on ``lo``.
Every constructor returns a network whose outputs are ordered on wires
``0, 1, ...`` (rank 0 = largest); networks built on padded or arbitrary
wire subsets are relabelled so that this holds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

Comparator = tuple[int, int]
Layer = list[Comparator]

KINDS = ("odd-even-sort", "bitonic-sort", "classic-selection", "splitter-selection")
SORT_KINDS = ("odd-even-sort", "bitonic-sort")


def ceil_log2(m: int) -> int:
    return (m - 1).bit_length() if m > 1 else 0


def popcount(i: int) -> int:
    return bin(i).count("1")


@dataclass(frozen=True)
class ComparatorNetwork:
    width: int
    layers: tuple[tuple[Comparator, ...], ...]
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        for d, layer in enumerate(self.layers):
            seen = set()
            for lo, hi in layer:
                if lo == hi or not (0 <= lo < self.width and 0 <= hi < self.width):
                    raise ValueError(f"bad comparator ({lo}, {hi}) in layer {d}")
                if lo in seen or hi in seen:
                    raise ValueError(f"wire used twice in layer {d}")
                seen.update((lo, hi))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def size(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def selects(self) -> int:
        """Number of ordered outputs the network guarantees."""
        return self.width if self.k is None else self.k

    def comparators(self) -> list[Comparator]:
        return [c for layer in self.layers for c in layer]

    def without(self, layer: int, index: int) -> "ComparatorNetwork":
        """Copy with a single comparator removed (mutation testing)."""
        layers = [list(l) for l in self.layers]
        del layers[layer][index]
        return ComparatorNetwork(self.width, tuple(tuple(l) for l in layers), self.kind, self.k)

    def to_json(self) -> str:
        doc = {
            "width": self.width,
            "k": self.k,
            "kind": self.kind,
            "layers": [[[lo, hi] for lo, hi in layer] for layer in self.layers],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ComparatorNetwork":
        doc = json.loads(text)
        layers = tuple(tuple((int(lo), int(hi)) for lo, hi in layer) for layer in doc["layers"])
        return cls(int(doc["width"]), layers, doc["kind"], doc.get("k"))

    def layer_arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _layer_arrays(self)


@lru_cache(maxsize=64)
def _layer_arrays(net: ComparatorNetwork):
    out = []
    for layer in net.layers:
        lo = np.array([c[0] for c in layer], dtype=np.intp)
        hi = np.array([c[1] for c in layer], dtype=np.intp)
        out.append((lo, hi))
    return out


# -- splitters -----------------------------------------------------------------

def build_splitter(wires: Sequence[int]) -> Layer:
    """One splitter layer: ``wires[i]`` vs ``wires[i + s]`` with the
    power-of-two stride ``s = 2**(ceil(log2 m) - 1)``."""
    m = len(wires)
    if m < 2:
        return []
    s = 1 << (ceil_log2(m) - 1)
    return [(wires[i], wires[i + s]) for i in range(m - s)]


def _zip_layers(a: list[Layer], b: list[Layer]) -> list[Layer]:
    out = []
    for d in range(max(len(a), len(b))):
        out.append((a[d] if d < len(a) else []) + (b[d] if d < len(b) else []))
    return out


def build_splitter_cascade(wires: Sequence[int]) -> list[Layer]:
    """Recursive splitters down to singletons; depth ``ceil(log2 m)``."""
    wires = list(wires)
    m = len(wires)
    if m < 2:
        return []
    s = 1 << (ceil_log2(m) - 1)
    return [build_splitter(wires)] + _zip_layers(
        build_splitter_cascade(wires[:s]), build_splitter_cascade(wires[s:]))


def cascade_min_ranks(m: int) -> list[int]:
    return [(1 << popcount(i)) - 1 for i in range(m)]


# -- splitter selection ------------------------------------------------------------

@dataclass
class MinRankState:
    rank: list[int]
    active: list[bool]
    ready: list[int] = field(default_factory=list)  # first free layer per wire

    @classmethod
    def fresh(cls, n: int) -> "MinRankState":
        return cls([0] * n, [True] * n, [0] * n)

    def count(self, r: int) -> int:
        return sum(1 for w, a in enumerate(self.active) if a and self.rank[w] == r)

    def resolved(self, k: int) -> bool:
        return all(self.count(r) == 1 for r in range(k))


def _relabel(n: int, layers: list[Layer], outputs: Sequence[int]) -> list[Layer]:
    """Rename wires so that ``outputs[r]`` becomes wire ``r``."""
    rest = sorted(set(range(n)) - set(outputs))
    perm = {old: new for new, old in enumerate(list(outputs) + rest)}
    return [[(perm[lo], perm[hi]) for lo, hi in layer] for layer in layers]


def ssn_schedule(n: int, k: int) -> tuple[list[Layer], MinRankState]:
    """Splitter selection construction on the original wire labels.

    Each splitter cascade is placed as a block that starts once all of its
    wires are free; blocks over disjoint wires overlap in time.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    st = MinRankState.fresh(n)
    slots: dict[int, Layer] = {}
    while True:
        if st.resolved(k):
            break
        for r in range(k - 1, -1, -1):
            wires = sorted(w for w in range(n) if st.active[w] and st.rank[w] == r)
            if len(wires) < 2:
                continue
            cascade = build_splitter_cascade(wires)
            start = max(st.ready[w] for w in wires)
            for d, layer in enumerate(cascade):
                slots.setdefault(start + d, []).extend(layer)
            for i, w in enumerate(wires):
                st.ready[w] = start + len(cascade)
                st.rank[w] = r + (1 << popcount(i)) - 1
                if st.rank[w] >= k:
                    st.active[w] = False
    layers = [sorted(slots[d]) for d in sorted(slots)]
    return layers, st


def build_ssn(n: int, k: int) -> ComparatorNetwork:
    layers, st = ssn_schedule(n, k)
    outputs = [next(w for w in range(n) if st.active[w] and st.rank[w] == r) for r in range(k)]
    layers = _relabel(n, layers, outputs)
    return ComparatorNetwork(n, tuple(tuple(sorted(l)) for l in layers), "splitter-selection", k)


# -- Batcher networks on power-of-two widths -------------------------------------------

def _bitonic_layers(N: int) -> list[Layer]:
    layers: list[Layer] = []
    size = 2
    while size <= N:
        # first layer of each merge flips the second half, the rest are half-cleaners
        layer = []
        for base in range(0, N, size):
            for i in range(size // 2):
                layer.append((base + i, base + size - 1 - i))
        layers.append(layer)
        stride = size // 4
        while stride >= 1:
            layer = []
            for base in range(0, N, 2 * stride):
                for i in range(stride):
                    layer.append((base + i, base + i + stride))
            layers.append(layer)
            stride //= 2
        size *= 2
    return layers


def _odd_even_layers(N: int) -> list[Layer]:
    layers: list[Layer] = []
    p = 1
    while p < N:
        k = p
        while k >= 1:
            layer = []
            for j in range(k % p, N - k, 2 * k):
                for i in range(min(k, N - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        layer.append((i + j, i + j + k))
            layers.append(layer)
            k //= 2
        p *= 2
    return layers


def _classic_layers(N: int, K: int) -> list[Layer]:
    """Sort groups of K wires by odd-even mergesort, then repeatedly merge
    the top-K of neighbouring groups with one flip layer plus a bitonic
    merge of the K surviving wires."""
    if K >= N:
        return _odd_even_layers(N)
    sub = _odd_even_layers(K)
    layers = [[(g + lo, g + hi) for g in range(0, N, K) for lo, hi in layer] for layer in sub]
    span = K
    while span < N:
        flip = []
        for base in range(0, N, 2 * span):
            other = base + span
            flip += [(base + i, other + K - 1 - i) for i in range(K)]
        layers.append(flip)
        stride = K // 2
        while stride >= 1:
            layer = []
            for base in range(0, N, 2 * span):
                for blk in range(base, base + K, 2 * stride):
                    layer += [(blk + i, blk + i + stride) for i in range(stride)]
            layers.append(layer)
            stride //= 2
        span *= 2
    return layers


def _strip_padding(n: int, N: int, layers: list[Layer], keep: int) -> tuple[list[Layer], list[int]]:
    """Drop wires ``n..N-1`` carrying -inf sentinels.

    A comparator with a sentinel on ``hi`` is a no-op; with the sentinel on
    ``lo`` it always swaps, which is tracked as a relabelling instead.
    Returns the real layers and the real wire ending at each of the first
    ``keep`` virtual positions.
    """
    holder = list(range(N))  # virtual position -> real wire or -1
    for v in range(n, N):
        holder[v] = -1
    out = []
    for layer in layers:
        real = []
        for lo, hi in layer:
            a, b = holder[lo], holder[hi]
            if a >= 0 and b >= 0:
                real.append((a, b))
            elif a < 0 and b >= 0:
                holder[lo], holder[hi] = b, a
        if real:
            out.append(real)
    outputs = holder[:keep]
    assert all(w >= 0 for w in outputs)
    return out, outputs


def _finish(n: int, N: int, layers: list[Layer], keep: int, kind: str, k) -> ComparatorNetwork:
    if N != n:
        layers, outputs = _strip_padding(n, N, layers, keep)
        layers = _relabel(n, layers, outputs)
    return ComparatorNetwork(n, tuple(tuple(sorted(l)) for l in layers), kind, k)


def build_full_sorter(n: int, flavor: str = "bitonic") -> ComparatorNetwork:
    if n < 1:
        raise ValueError("n must be positive")
    N = 1 << ceil_log2(n)
    if flavor in ("bitonic", "bitonic-sort"):
        return _finish(n, N, _bitonic_layers(N), n, "bitonic-sort", None)
    if flavor in ("odd-even", "odd-even-sort"):
        return _finish(n, N, _odd_even_layers(N), n, "odd-even-sort", None)
    raise ValueError(f"unknown sorter flavor {flavor!r}")


def build_classic_selection(n: int, k: int) -> ComparatorNetwork:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    N = 1 << ceil_log2(n)
    K = 1 << ceil_log2(k)
    return _finish(n, N, _classic_layers(N, K), k, "classic-selection", k)


def classic_selection_depth(n: int, k: int) -> int:
    L, p = ceil_log2(k), ceil_log2(n)
    return L * (L + 1) // 2 + (p - L) * (L + 1)


def build_network(n: int, k: int | None, kind: str) -> ComparatorNetwork:
    """Dispatch on a kind name; accepts the short CLI aliases too."""
    kind = {"splitter": "splitter-selection", "classic": "classic-selection",
            "bitonic": "bitonic-sort", "odd-even": "odd-even-sort"}.get(kind, kind)
    if kind == "splitter-selection":
        return build_ssn(n, n if k is None else k)
    if kind == "classic-selection":
        return build_classic_selection(n, n if k is None else k)
    if kind in SORT_KINDS:
        return build_full_sorter(n, kind)
    raise ValueError(f"unknown network kind {kind!r}")


cached_network = lru_cache(maxsize=256)(build_network)


# -- evaluation ------------------------------------------------------------------

def evaluate_hard(net: ComparatorNetwork, values) -> np.ndarray:
    """Run the network on a vector, or on each row of a 2-D array."""
    x = np.array(values, copy=True)
    if x.shape[-1] != net.width:
        raise ValueError(f"expected {net.width} values, got {x.shape[-1]}")
    for lo, hi in net.layer_arrays():
        a, b = x[..., lo], x[..., hi]
        x[..., lo], x[..., hi] = np.maximum(a, b), np.minimum(a, b)
    return x


def verify_selection(net: ComparatorNetwork, n: int, k: int) -> bool:
    """Exhaustive 0-1 principle check of the first ``k`` outputs."""
    if n > 20:
        raise ValueError("exhaustive verification is limited to n <= 20")
    if net.width != n or k > n:
        return False
    codes = np.arange(1 << n, dtype=np.uint32)
    bits = ((codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(np.int8)
    ones = bits.sum(axis=1)
    out = evaluate_hard(net, bits)[:, :k]
    want = (np.arange(k)[None, :] < np.minimum(ones, k)[:, None]).astype(np.int8)
    return bool(np.array_equal(out, want))


def spot_check_selection(net: ComparatorNetwork, k: int, trials: int, seed: int = 0) -> bool:
    """Randomised check against sort-then-take on distinct reals."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((trials, net.width))
    out = evaluate_hard(net, x)[:, :k]
    want = -np.sort(-x, axis=1)[:, :k]
    return bool(np.array_equal(out, want))


# -- depth table ------------------------------------------------------------------------

# Depths of the appendix table of the source work: n -> (full sort, classic k=1..8, splitter k=1..8)
REFERENCE_DEPTHS = {
    16: (10, (4, 7, 9, 9, 10, 10, 10, 10), (4, 6, 7, 8, 10, 11, 12, 13)),
    1024: (55, (10, 19, 27, 27, 34, 34, 34, 34), (10, 14, 16, 18, 22, 25, 27, 29)),
    10450: (105, (14, 27, 39, 39, 50, 50, 50, 50), (14, 18, 20, 23, 27, 30, 32, 34)),
    65536: (136, (16, 31, 45, 45, 58, 58, 58, 58), (16, 20, 22, 25, 29, 32, 34, 36)),
}


def depth_table(n_list=(16, 1024, 10450, 65536), k_list=range(1, 9)) -> list[dict]:
    rows = []
    for n in n_list:
        rows.append({"n": n, "k": None, "construction": "full-sort",
                     "depth": build_full_sorter(n, "bitonic").depth})
        for k in k_list:
            rows.append({"n": n, "k": k, "construction": "classic-selection",
                         "depth": build_classic_selection(n, k).depth})
        for k in k_list:
            rows.append({"n": n, "k": k, "construction": "splitter-selection",
                         "depth": len(ssn_schedule(n, k)[0])})
    return rows


def reference_depth(n: int, k: int | None, construction: str) -> int | None:
    ref = REFERENCE_DEPTHS.get(n)
    if ref is None:
        return None
    if construction == "full-sort":
        return ref[0]
    if k is None or not 1 <= k <= 8:
        return None
    return ref[1 if construction == "classic-selection" else 2][k - 1]
