"""Engineered Ising landscapes: problems, enumeration, the 16-qubit gadget, tiling.

The centerpiece is a 16-qubit gadget built from an 8-spin inner ring, one
pendant outer spin per ring site, and a single tunable coupler of strength
-J_t between two adjacent pendants.  Field roles on the ring are placed by a
deterministic search so that the realized landscape has

* a unique global minimum (``true_min``, all spins down),
* a broad degenerate manifold exactly 0.2 above it (inner ring up, several
  pendants unconstrained) far from the start state (``false_set``),
* a strict local minimum 4 above the global one (``start_state``), four spin
  flips away from it,
* an escape barrier of height 2*J_t controlled entirely by the tunable edge:
  with J_t = 0 the start state can reach the global minimum through
  single-spin flips without ever going uphill.

Spin convention: +1 encodes bit '0' (up), -1 encodes bit '1' (down).
Qubit 0 is the leftmost character of a bitstring.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Spins = "tuple[int, ...]"

_MAX_ENUM_QUBITS = 24
_LEVEL_TOL = 1e-9           # membership window for degenerate levels
_EXACT_TOL = 1e-12          # tolerance for "exact" energy identities


class GadgetError(ValueError):
    """A gadget constraint failed (bad argument or violated invariant)."""


class Role(Enum):
    """Field role of a gadget qubit."""

    OUTER_RING = "outer_ring"    # h = +1, one per ring site
    INNER_PLAIN = "inner_plain"  # h = -1
    INNER_DEEP = "inner_deep"    # h = -1.95
    INNER_FREE = "inner_free"    # h = 0


ROLE_FIELD = {
    Role.OUTER_RING: 1.0,
    Role.INNER_PLAIN: -1.0,
    Role.INNER_DEEP: -1.95,
    Role.INNER_FREE: 0.0,
}

# Alphabet for the deterministic lexicographic placement search.
_LETTER_ROLE = {"D": Role.INNER_DEEP, "F": Role.INNER_FREE, "P": Role.INNER_PLAIN}


# ---------------------------------------------------------------------------
# spin configurations


def _check_spins(config: Sequence[int]) -> None:
    for s in config:
        if s != 1 and s != -1:
            raise ValueError(f"spin values must be +1 or -1, got {s!r}")


def config_from_bits(bits: str) -> tuple[int, ...]:
    """Bitstring to spins: '0' -> +1, '1' -> -1, qubit 0 leftmost."""
    if set(bits) - {"0", "1"}:
        raise ValueError(f"not a bitstring: {bits!r}")
    return tuple(1 if b == "0" else -1 for b in bits)


def config_to_bits(config: Sequence[int]) -> str:
    _check_spins(config)
    return "".join("0" if s == 1 else "1" for s in config)


def state_code(config: Sequence[int]) -> int:
    """Integer code of a configuration; equals int(bitstring, 2)."""
    code = 0
    for s in config:
        code = (code << 1) | (0 if s == 1 else 1)
    return code


def code_to_config(code: int, n_qubits: int) -> tuple[int, ...]:
    return tuple(1 - 2 * ((code >> (n_qubits - 1 - i)) & 1) for i in range(n_qubits))


def hamming(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of positions at which two equal-length configurations differ."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(1 for x, y in zip(a, b) if x != y)


def _flipped(config: Sequence[int], qubits: Iterable[int]) -> tuple[int, ...]:
    out = list(config)
    for q in qubits:
        out[q] = -out[q]
    return tuple(out)


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class IsingProblem:
    """Classical Ising cost  sum_{i<j} J_ij s_i s_j + sum_i h_i s_i."""

    n_qubits: int
    couplings: tuple   # of (i, j, J) with i < j
    fields: tuple      # of h_i

    def __post_init__(self):
        if self.n_qubits <= 0:
            raise ValueError("n_qubits must be positive")
        object.__setattr__(self, "couplings", tuple((int(i), int(j), float(J)) for i, j, J in self.couplings))
        object.__setattr__(self, "fields", tuple(float(h) for h in self.fields))
        if len(self.fields) != self.n_qubits:
            raise ValueError("fields length must equal n_qubits")
        seen = set()
        for i, j, J in self.couplings:
            if not (0 <= i < j < self.n_qubits):
                raise ValueError(f"coupling indices ({i}, {j}) invalid for n={self.n_qubits}")
            if (i, j) in seen:
                raise ValueError(f"duplicate coupling ({i}, {j})")
            seen.add((i, j))
            if abs(J) > 2.0:
                raise ValueError(f"|J[{i},{j}]| = {abs(J)} outside representable range [-2, 2]")
        for i, h in enumerate(self.fields):
            if abs(h) > 2.0:
                raise ValueError(f"|h[{i}]| = {abs(h)} outside representable range [-2, 2]")

    def energy(self, config: Sequence[int]) -> float:
        if len(config) != self.n_qubits:
            raise ValueError(f"config length {len(config)} != n_qubits {self.n_qubits}")
        _check_spins(config)
        e = 0.0
        for i, j, J in self.couplings:
            e += J * config[i] * config[j]
        for h, s in zip(self.fields, config):
            e += h * s
        return e

    def to_json_dict(self) -> dict:
        return {
            "n_qubits": self.n_qubits,
            "couplings": [[i, j, J] for i, j, J in self.couplings],
            "fields": list(self.fields),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IsingProblem":
        return cls(
            n_qubits=int(d["n_qubits"]),
            couplings=tuple((int(i), int(j), float(J)) for i, j, J in d["couplings"]),
            fields=tuple(float(h) for h in d["fields"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "IsingProblem":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def diagonal_energies(problem: IsingProblem, chunk: int = 1 << 20) -> np.ndarray:
    """Energies of all 2**n configurations in basis (bitstring) order.

    Basis order means the integer code of the bitstring, qubit 0 the most
    significant bit; this is also the diagonal of the transverse-field
    Hamiltonian in the computational basis.
    """
    n = problem.n_qubits
    if n > _MAX_ENUM_QUBITS:
        raise ValueError(f"enumeration supports at most {_MAX_ENUM_QUBITS} qubits, got {n}")
    dim = 1 << n
    energies = np.empty(dim, dtype=np.float64)
    for lo in range(0, dim, chunk):
        z = np.arange(lo, min(lo + chunk, dim), dtype=np.int64)
        acc = np.zeros(z.size, dtype=np.float64)
        for i, j, J in problem.couplings:
            if J == 0.0:
                continue
            # s_i s_j = 1 - 2 (b_i xor b_j)
            x = ((z >> (n - 1 - i)) ^ (z >> (n - 1 - j))) & 1
            acc += J * (1.0 - 2.0 * x)
        for i, h in enumerate(problem.fields):
            if h == 0.0:
                continue
            acc += h * (1.0 - 2.0 * ((z >> (n - 1 - i)) & 1).astype(np.float64))
        energies[lo:lo + z.size] = acc
    return energies


@dataclass(frozen=True)
class Enumeration:
    """All 2**n configurations of a problem, sorted by (energy, bitstring)."""

    n_qubits: int
    energies: np.ndarray   # ascending; ties in bitstring (code) order
    codes: np.ndarray      # state codes aligned with energies

    def __len__(self) -> int:
        return self.energies.size

    def config(self, k: int) -> tuple[int, ...]:
        return code_to_config(int(self.codes[k]), self.n_qubits)

    def __getitem__(self, k: int):
        return float(self.energies[k]), self.config(k)

    def level_codes(self, energy: float, tol: float = _LEVEL_TOL) -> np.ndarray:
        """State codes of every configuration within ``tol`` of ``energy``."""
        lo = np.searchsorted(self.energies, energy - tol, side="left")
        hi = np.searchsorted(self.energies, energy + tol, side="right")
        return np.sort(self.codes[lo:hi])

    def level_sizes(self) -> "list[tuple[float, int]]":
        """Distinct energy levels (at the level tolerance) with degeneracies."""
        out = []
        k = 0
        while k < len(self):
            e = float(self.energies[k])
            j = int(np.searchsorted(self.energies, e + _LEVEL_TOL, side="right"))
            out.append((e, j - k))
            k = j
        return out


def enumerate_states(problem: IsingProblem) -> Enumeration:
    """Brute-force scan of all configurations; the ground-truth oracle.

    Deterministic: ties at equal energy are ordered by bitstring.
    """
    energies = diagonal_energies(problem)
    order = np.argsort(energies, kind="stable")   # stable keeps code order within ties
    return Enumeration(problem.n_qubits, energies[order], order.astype(np.int64))


# ---------------------------------------------------------------------------
# the gadget


class OutcomeClass(Enum):
    START = "Start"
    TRUE_MIN = "TrueMin"
    FALSE_MIN = "FalseMin"
    OTHER = "Other"


@dataclass(frozen=True)
class GadgetSpec:
    """A validated gadget instance at one barrier strength J_t."""

    j_t: float
    role_map: tuple          # of Role, length 16
    barrier_pair: tuple      # the two outer qubits joined by the tunable edge
    start_state: tuple
    true_min: tuple
    false_set: tuple         # of configs, bitstring order
    problem: IsingProblem

    def __post_init__(self):
        object.__setattr__(self, "_false_lookup", frozenset(self.false_set))

    @property
    def inner_qubits(self) -> range:
        return range(8)

    @property
    def outer_qubits(self) -> range:
        return range(8, 16)

    def to_json_dict(self) -> dict:
        return {
            "j_t": self.j_t,
            "role_map": [r.value for r in self.role_map],
            "barrier_pair": list(self.barrier_pair),
            "start_state": config_to_bits(self.start_state),
            "true_min": config_to_bits(self.true_min),
            "false_set": [config_to_bits(c) for c in self.false_set],
            "problem": self.problem.to_json_dict(),
        }


def classify(config: Sequence[int], gadget: GadgetSpec) -> OutcomeClass:
    """Mutually exclusive, exhaustive outcome class of a configuration."""
    t = tuple(config)
    if t == gadget.start_state:
        return OutcomeClass.START
    if t == gadget.true_min:
        return OutcomeClass.TRUE_MIN
    if t in gadget._false_lookup:
        return OutcomeClass.FALSE_MIN
    return OutcomeClass.OTHER


def gauge_transform(problem: IsingProblem, mask: Sequence[int]) -> IsingProblem:
    """Spin-reversal transform: h_i -> m_i h_i, J_ij -> m_i m_j J_ij.

    Energies satisfy energy(problem, s) == energy(gauged, gauge_config(s, mask)).
    """
    if len(mask) != problem.n_qubits:
        raise ValueError("mask length must equal n_qubits")
    _check_spins(mask)
    return IsingProblem(
        n_qubits=problem.n_qubits,
        couplings=tuple((i, j, mask[i] * mask[j] * J) for i, j, J in problem.couplings),
        fields=tuple(m * h for m, h in zip(mask, problem.fields)),
    )


def gauge_config(config: Sequence[int], mask: Sequence[int]) -> tuple[int, ...]:
    """Apply a gauge mask to a sample (involution: applying twice undoes it)."""
    if len(mask) != len(config):
        raise ValueError("mask length must equal config length")
    return tuple(m * s for m, s in zip(mask, config))


# -- constructive role-placement search -------------------------------------

_RING_EDGES = tuple(tuple(sorted(((i, (i + 1) % 8)))) for i in range(8))


def _assemble_problem(letters: Sequence[str], partner: int, j_t: float) -> tuple[IsingProblem, tuple]:
    """Problem for a ring role string and a barrier placement.

    ``partner`` is the ring position p such that the raised inner pair of the
    start state is (p, p+1) and the tunable edge joins their pendants.
    """
    fields = [ROLE_FIELD[_LETTER_ROLE[c]] for c in letters] + [ROLE_FIELD[Role.OUTER_RING]] * 8
    couplings = [(i, j, -1.0) for i, j in _RING_EDGES]
    couplings += [(i, 8 + i, -1.0) for i in range(8)]
    barrier = tuple(sorted((8 + partner, 8 + (partner + 1) % 8)))
    couplings.append((barrier[0], barrier[1], -j_t))
    couplings.sort()
    return IsingProblem(16, tuple(couplings), tuple(fields)), barrier


def _start_from(true_min: Sequence[int], partner: int) -> tuple[int, ...]:
    flips = (partner, (partner + 1) % 8, 8 + partner, 8 + (partner + 1) % 8)
    return _flipped(true_min, flips)


def _strict_local_min(problem: IsingProblem, config: Sequence[int]) -> bool:
    e0 = problem.energy(config)
    return all(problem.energy(_flipped(config, (q,))) > e0 + _EXACT_TOL
               for q in range(problem.n_qubits))


def _monotone_path_exists(problem: IsingProblem, start, target, cap: int = 50_000) -> bool:
    """Single-flip path start -> target with never-increasing energy (BFS)."""
    e = problem.energy(start)
    seen = {tuple(start): e}
    queue = deque([(tuple(start), e)])
    target = tuple(target)
    while queue and len(seen) < cap:
        config, e = queue.popleft()
        if config == target:
            return True
        for q in range(problem.n_qubits):
            nxt = _flipped(config, (q,))
            en = problem.energy(nxt)
            if en <= e + _EXACT_TOL and nxt not in seen:
                seen[nxt] = en
                queue.append((nxt, en))
    return target in seen


def _cheap_reject(letters: Sequence[str], partner: int) -> bool:
    """Fast necessary conditions, no enumeration.  True means reject."""
    all_down = tuple([-1] * 16)
    start = _start_from(all_down, partner)
    for j_t in (0.0, 0.5, 1.0):
        problem, barrier = _assemble_problem(letters, partner, j_t)
        e_start = problem.energy(start)
        for b in barrier:
            de = problem.energy(_flipped(start, (b,))) - e_start
            if abs(de - 2.0 * j_t) > _EXACT_TOL:
                return True
        if j_t > 0 and not _strict_local_min(problem, start):
            return True
        if j_t == 0.0 and not _monotone_path_exists(problem, start, all_down):
            return True
    return False


def _invariant_battery(problem: IsingProblem, barrier: tuple, partner: int, j_t: float):
    """Full enumeration-backed validation.  Returns the gadget pieces.

    Raises GadgetError naming the violated constraint.
    """
    enum = enumerate_states(problem)
    e_true = float(enum.energies[0])
    if enum.energies[1] - e_true <= _LEVEL_TOL:
        raise GadgetError("global minimum is not unique")
    true_min = enum.config(0)
    start = _start_from(true_min, partner)
    e_start = problem.energy(start)

    if hamming(start, true_min) != 4:
        raise GadgetError("Hamming(start, true) != 4")
    inner_flips = sum(1 for q in range(8) if start[q] != true_min[q])
    outer_flips = sum(1 for q in range(8, 16) if start[q] != true_min[q])
    if (inner_flips, outer_flips) != (2, 2):
        raise GadgetError("start/true flips are not 2 inner + 2 outer")

    level = enum.level_codes(e_true + 0.2)
    if level.size == 0:
        raise GadgetError("no degenerate level at E_true + 0.2")
    false_set = []
    for code in level:
        member = code_to_config(int(code), 16)
        if hamming(member, true_min) >= 6:
            false_set.append(member)
    if not false_set:
        raise GadgetError("degenerate level at E_true + 0.2 is all near the true minimum")
    for member in false_set:
        de = problem.energy(member) - e_true
        if abs(de - 0.2) > _EXACT_TOL:
            raise GadgetError(f"false-set member off level: dE = {de!r}")
        inner_diff = sum(1 for q in range(8) if member[q] != start[q])
        if inner_diff != 6:
            raise GadgetError("false-set member does not differ from start on exactly 6 inner spins")

    for b in barrier:
        de = problem.energy(_flipped(start, (b,))) - e_start
        if abs(de - 2.0 * j_t) > _EXACT_TOL:
            raise GadgetError(f"barrier state energy is start + {de!r}, expected + {2 * j_t}")

    if j_t > 0 and not _strict_local_min(problem, start):
        raise GadgetError("start state is not a strict local minimum")
    if j_t == 0.0 and not _monotone_path_exists(problem, start, true_min):
        raise GadgetError("no monotone non-increasing path start -> true at J_t = 0")

    return true_min, start, tuple(false_set)


_placement: "tuple | None" = None
_gadget_cache: dict = {}


def _find_placement() -> tuple:
    """Lexicographically first (ring roles, barrier position) passing validation."""
    global _placement
    if _placement is not None:
        return _placement
    for letters in sorted(set(itertools.permutations("DDFFPPPP"))):
        for partner in range(8):
            if _cheap_reject(letters, partner):
                continue
            try:
                for j_t in (0.0, 0.5, 1.0):
                    problem, barrier = _assemble_problem(letters, partner, j_t)
                    _invariant_battery(problem, barrier, partner, j_t)
            except GadgetError:
                continue
            _placement = ("".join(letters), partner)
            return _placement
    raise GadgetError("role-placement search failed: no assignment satisfies all constraints")


def build_gadget(j_t: float) -> GadgetSpec:
    """Construct and validate the 16-qubit gadget at barrier strength ``j_t``.

    The inner-ring role placement is found once by a deterministic search and
    reused; the degenerate false manifold is recomputed per ``j_t`` by
    enumeration (its degeneracy depends on whether the tunable edge is on).
    """
    j_t = float(j_t)
    if not 0.0 <= j_t <= 1.0:
        raise GadgetError(f"J_t must lie in [0, 1], got {j_t}")
    key = round(j_t, 12)
    if key in _gadget_cache:
        return _gadget_cache[key]
    letters, partner = _find_placement()
    problem, barrier = _assemble_problem(letters, partner, j_t)
    true_min, start, false_set = _invariant_battery(problem, barrier, partner, j_t)
    roles = tuple(_LETTER_ROLE[c] for c in letters) + (Role.OUTER_RING,) * 8
    spec = GadgetSpec(
        j_t=j_t,
        role_map=roles,
        barrier_pair=barrier,
        start_state=start,
        true_min=true_min,
        false_set=false_set,
        problem=problem,
    )
    _gadget_cache[key] = spec
    return spec


def validate_gadget(gadget: GadgetSpec) -> dict:
    """Re-run the full invariant battery on a gadget; return a report.

    Raises GadgetError if any constraint fails or stored sets disagree with a
    fresh enumeration.
    """
    partner = min(q for q in range(8) if gadget.start_state[q] != gadget.true_min[q])
    true_min, start, false_set = _invariant_battery(
        gadget.problem, gadget.barrier_pair, partner, gadget.j_t)
    if true_min != gadget.true_min or start != gadget.start_state:
        raise GadgetError("stored start/true states disagree with enumeration")
    if false_set != gadget.false_set:
        raise GadgetError("stored false_set disagrees with enumeration")
    e_true = gadget.problem.energy(true_min)
    e_start = gadget.problem.energy(start)
    barrier_state = _flipped(start, (gadget.barrier_pair[0],))
    return {
        "j_t": gadget.j_t,
        "e_true": e_true,
        "e_start_minus_true": e_start - e_true,
        "e_false_minus_true": gadget.problem.energy(false_set[0]) - e_true,
        "barrier_minus_start": gadget.problem.energy(barrier_state) - e_start,
        "n_false": len(false_set),
        "hamming_start_true": hamming(start, true_min),
    }


# ---------------------------------------------------------------------------
# Chimera tiling


@dataclass(frozen=True)
class ChimeraLayout:
    """Disjoint gadget copies embedded in an M x N Chimera graph."""

    m: int
    n: int
    dead_qubits: frozenset
    copy_maps: tuple   # each a 16-tuple, gadget qubit -> hardware qubit

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "dead_qubits": sorted(self.dead_qubits),
            "copies": [list(c) for c in self.copy_maps],
        }


def chimera_id(row: int, col: int, u: int, n_cols: int) -> int:
    """Linear qubit index: cells row-major, 8 qubits per cell (u<4 vertical)."""
    return 8 * (row * n_cols + col) + u


def chimera_adjacent(q1: int, q2: int, m: int, n: int) -> bool:
    """Whether two qubit ids share an edge in an M x N Chimera graph."""
    c1, u1 = divmod(q1, 8)
    c2, u2 = divmod(q2, 8)
    r1, col1 = divmod(c1, n)
    r2, col2 = divmod(c2, n)
    if not (0 <= r1 < m and 0 <= r2 < m):
        return False
    if c1 == c2:
        return (u1 < 4) != (u2 < 4)                      # intra-cell bipartite
    if u1 != u2:
        return False
    if u1 < 4:
        return col1 == col2 and abs(r1 - r2) == 1        # vertical chain
    return r1 == r2 and abs(col1 - col2) == 1            # horizontal chain


# Placement of one copy on a 2x2 block of cells, by ring slot: the ring walks
# the four cells alternating intra-cell and inter-cell hops, each slot's
# pendant is its cell partner, and slots 0,1 share the top-left cell so their
# pendants (the barrier pair) are coupled intra-cell.  The interlocked second
# copy shifts every u by +2, using the four qubits per cell the first copy
# leaves free.
_SLOT = ((0, 0, 4), (0, 0, 0), (1, 0, 0), (1, 0, 4),
         (1, 1, 4), (1, 1, 0), (0, 1, 0), (0, 1, 4))
_SLOT_PENDANT = ((0, 0, 1), (0, 0, 5), (1, 0, 5), (1, 0, 1),
                 (1, 1, 1), (1, 1, 5), (0, 1, 5), (0, 1, 1))


def _block_placement(gadget: GadgetSpec) -> tuple:
    """Rotate the slot tables so the gadget's barrier pendants share a cell."""
    partner = gadget.barrier_pair[0] - 8
    inner = [_SLOT[(i - partner) % 8] for i in range(8)]
    outer = [_SLOT_PENDANT[(i - partner) % 8] for i in range(8)]
    return tuple(inner + outer)


def tile(gadget: GadgetSpec, m: int, n: int, dead_qubits: Iterable[int] = ()) -> ChimeraLayout:
    """Maximal set of disjoint gadget copies on an M x N Chimera graph.

    Two interlocked copies per 2x2 cell block; any copy touching a dead qubit
    is dropped whole.  Every gadget edge is checked against the hardware
    adjacency.
    """
    dead = frozenset(int(q) for q in dead_qubits)
    edges = [(i, j) for i, j, _ in gadget.problem.couplings]
    placement = _block_placement(gadget)
    copies = []
    for br in range(m // 2):
        for bc in range(n // 2):
            for shift in (0, 2):
                qmap = tuple(
                    chimera_id(2 * br + dr, 2 * bc + dc, u + shift, n)
                    for dr, dc, u in placement
                )
                if any(q in dead for q in qmap):
                    continue
                for i, j in edges:
                    if not chimera_adjacent(qmap[i], qmap[j], m, n):
                        raise GadgetError(
                            f"gadget edge ({i},{j}) unmappable at block ({br},{bc})")
                copies.append(qmap)
    used = list(itertools.chain.from_iterable(copies))
    if len(used) != len(set(used)):
        raise GadgetError("internal error: copies overlap")
    return ChimeraLayout(m=m, n=n, dead_qubits=dead, copy_maps=tuple(copies))


def pick_dead_qubits(layout: ChimeraLayout, kill: int) -> frozenset:
    """A deterministic dead-qubit set killing exactly ``kill`` copies.

    One qubit per victim copy, copies spread evenly across the layout.
    Because copies are pairwise disjoint, each dead qubit removes exactly one.
    """
    if kill > len(layout.copy_maps):
        raise ValueError("cannot kill more copies than exist")
    if kill == 0:
        return frozenset()
    step = max(1, len(layout.copy_maps) // kill)
    victims = layout.copy_maps[::step][:kill]
    if len(victims) < kill:   # tail fallback for awkward ratios
        victims = layout.copy_maps[:kill]
    return frozenset(c[0] for c in victims)
