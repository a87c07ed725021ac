"""Molecular graphs, a SMILES subset parser/writer, validity checks, and fingerprints.

The graph model is deliberately small: atoms carry (element, formal charge,
aromatic flag, optional bracket hydrogen count) and bonds live in a symmetric
k x k state matrix over six states.  The MASK bond state exists only so that
diffusion states can share the enum; a finished molecule must not contain it.

Supported SMILES subset (see docs/smiles_grammar.ebnf): organic-subset atoms
for B C N O P S F Cl Br I, aromatic lowercase b c n o p s, bracket atoms with
charge and hydrogen count, bond symbols - = # :, branches, ring closures 1-9
and %nn.  Stereo markers (/ \\ @ @@) are stripped and flagged as a lossy
parse; isotopes, wildcards and other elements are rejected.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    Disconnected,
    InvalidGraph,
    LengthMismatch,
    SmilesSyntaxError,
    UnsupportedFeature,
)

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = frozenset({"B", "C", "N", "O", "P", "S"})

# Standard atomic masses (CIAAW 2021, rounded to 3 decimals).
ATOMIC_MASS = {
    "H": 1.008,
    "B": 10.811,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "F": 18.998,
    "P": 30.974,
    "S": 32.06,
    "Cl": 35.45,
    "Br": 79.904,
    "I": 126.904,
}

# Allowed total valences per neutral element; charged overrides below.
_BASE_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}
_CHARGED_VALENCES = {
    ("N", 1): (4,),
    ("N", -1): (2,),
    ("O", 1): (3,),
    ("O", -1): (1,),
    ("C", 1): (3,),
    ("C", -1): (3,),
    ("B", -1): (4,),
    ("P", 1): (4,),
    ("S", 1): (3, 5),
    ("S", -1): (1,),
}

MIN_CHARGE, MAX_CHARGE = -2, 2


class BondState(IntEnum):
    """Six bond states; MASK appears only inside diffusion states."""

    NONE = 0
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4
    MASK = 5


BOND_ORDER = {
    BondState.NONE: 0.0,
    BondState.SINGLE: 1.0,
    BondState.DOUBLE: 2.0,
    BondState.TRIPLE: 3.0,
    BondState.AROMATIC: 1.5,
}


def allowed_valences(element: str, charge: int = 0) -> tuple[int, ...]:
    """Allowed total valences for an element at a given formal charge."""
    return _CHARGED_VALENCES.get((element, charge), _BASE_VALENCES[element])


@dataclass(frozen=True)
class Atom:
    """One heavy atom: element symbol, formal charge, aromatic flag, bracket H count."""

    element: str
    formal_charge: int = 0
    aromatic: bool = False
    explicit_h: int | None = None

    def __post_init__(self) -> None:
        if self.element not in _BASE_VALENCES:
            raise ValueError(f"unsupported element {self.element!r}")
        if not MIN_CHARGE <= self.formal_charge <= MAX_CHARGE:
            raise ValueError(f"formal charge {self.formal_charge} outside [{MIN_CHARGE}, {MAX_CHARGE}]")
        if self.explicit_h is not None:
            if self.explicit_h < 0:
                raise ValueError("explicit hydrogen count must be non-negative")
            if self.explicit_h > max(allowed_valences(self.element, self.formal_charge)):
                raise ValueError(
                    f"explicit hydrogen count {self.explicit_h} exceeds max valence of {self.element}"
                )


@dataclass(frozen=True)
class MolecularGraph:
    """Attributed molecular graph: atoms plus a symmetric bond-state matrix.

    Immutable after construction.  ``lossy_source`` records that stereo
    markers were dropped while parsing; it does not participate in equality.
    """

    atoms: tuple[Atom, ...]
    bonds: np.ndarray
    lossy_source: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        atoms = tuple(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        k = len(atoms)
        if k < 1:
            raise ValueError("graph needs at least one atom")
        bonds = np.asarray(self.bonds, dtype=np.int8)
        if bonds.shape != (k, k):
            raise ValueError(f"bond matrix shape {bonds.shape} does not match {k} atoms")
        if not np.array_equal(bonds, bonds.T):
            raise ValueError("bond matrix must be symmetric")
        if np.any(np.diag(bonds) != BondState.NONE):
            raise ValueError("self-bonds are not allowed")
        if bonds.min() < 0 or bonds.max() > BondState.MASK:
            raise ValueError("bond matrix contains values outside the BondState enum")
        bonds = bonds.copy()
        bonds.flags.writeable = False
        object.__setattr__(self, "bonds", bonds)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MolecularGraph):
            return NotImplemented
        return self.atoms == other.atoms and np.array_equal(self.bonds, other.bonds)

    def __hash__(self) -> int:
        return hash((self.atoms, self.bonds.tobytes()))

    def __len__(self) -> int:
        return len(self.atoms)

    def bond(self, i: int, j: int) -> BondState:
        return BondState(int(self.bonds[i, j]))

    def _adjacency(self) -> list[list[int]]:
        # Immutable graph: build the adjacency list once, lazily.
        cached = self.__dict__.get("_adj")
        if cached is None:
            rows, cols = np.nonzero(self.bonds)
            cached = [[] for _ in range(len(self.atoms))]
            for i, j in zip(rows.tolist(), cols.tolist()):
                cached[i].append(j)
            object.__setattr__(self, "_adj", cached)
        return cached

    def neighbors(self, i: int) -> list[int]:
        return self._adjacency()[i]

    def heavy_degree(self, i: int) -> int:
        return len(self._adjacency()[i])

    def bond_order_sum(self, i: int) -> float:
        """Total bond order at atom i; AROMATIC counts as 1.5, MASK as 0."""
        cached = self.__dict__.get("_orders")
        if cached is None:
            order = np.array([0.0, 1.0, 2.0, 3.0, 1.5, 0.0])
            cached = order[np.asarray(self.bonds, dtype=np.int64)].sum(axis=1)
            object.__setattr__(self, "_orders", cached)
        return float(cached[i])

    def hydrogen_count(self, i: int) -> int:
        """Effective hydrogen count: the bracket count if given, else implicit filling.

        Non-aromatic atoms fill up to the smallest allowed valence that
        accommodates the current bond order.  Aromatic atoms fill only to
        their lowest valence (benzene carbons get one hydrogen; furan oxygen
        and thiophene sulfur get none).
        """
        cached = self.__dict__.get("_hcounts")
        if cached is None:
            cached = [self._hydrogen_count_uncached(j) for j in range(len(self.atoms))]
            object.__setattr__(self, "_hcounts", cached)
        return cached[i]

    def _hydrogen_count_uncached(self, i: int) -> int:
        atom = self.atoms[i]
        if atom.explicit_h is not None:
            return atom.explicit_h
        order = self.bond_order_sum(i)
        valences = allowed_valences(atom.element, atom.formal_charge)
        if atom.aromatic:
            return max(0, int(math.floor(min(valences) - order + 1e-9)))
        for valence in valences:
            if valence >= order - 1e-9:
                return int(math.floor(valence - order + 1e-9))
        return 0

    def edge_list(self) -> list[tuple[int, int, BondState]]:
        """Upper-triangle non-NONE entries as (i, j, state)."""
        out = []
        idx_i, idx_j = np.nonzero(np.triu(self.bonds, k=1))
        for i, j in zip(idx_i.tolist(), idx_j.tolist()):
            out.append((i, j, BondState(int(self.bonds[i, j]))))
        return out


def graph_from_edges(
    atoms: Sequence[Atom],
    edges: Iterable[tuple[int, int, BondState]],
    lossy_source: bool = False,
) -> MolecularGraph:
    """Build a graph from an atom list and (i, j, state) edges."""
    k = len(atoms)
    bonds = np.zeros((k, k), dtype=np.int8)
    for i, j, state in edges:
        bonds[i, j] = bonds[j, i] = int(state)
    return MolecularGraph(tuple(atoms), bonds, lossy_source=lossy_source)


# ---------------------------------------------------------------------------
# SMILES parsing
# ---------------------------------------------------------------------------

_ORGANIC_TOKENS = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
_AROMATIC_TOKENS = ("b", "c", "n", "o", "p", "s")
_BOND_TOKENS = {
    "-": BondState.SINGLE,
    "=": BondState.DOUBLE,
    "#": BondState.TRIPLE,
    ":": BondState.AROMATIC,
}

_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<element>[A-Z][a-z]?|[a-z])"
    r"(?P<chiral>@{1,2})?"
    r"(?P<hcount>H\d*)?"
    r"(?P<charge>\+{1,2}|-{1,2}|\+\d+|-\d+)?"
    r"(?P<map>:\d+)?$"
)


def _parse_bracket_atom(body: str, pos: int) -> tuple[Atom, bool]:
    """Parse the inside of a bracket atom; returns (atom, lossy)."""
    m = _BRACKET_RE.match(body)
    if m is None:
        raise SmilesSyntaxError(f"malformed bracket atom [{body}] at position {pos}")
    if m.group("isotope"):
        raise UnsupportedFeature(f"isotope specification in [{body}]")
    if m.group("map"):
        raise UnsupportedFeature(f"atom-map number in [{body}]")
    symbol = m.group("element")
    aromatic = symbol[0].islower()
    element = symbol.capitalize() if aromatic else symbol
    if element not in _BASE_VALENCES:
        raise UnsupportedFeature(f"element {symbol!r} outside the supported set")
    if aromatic and element not in AROMATIC_ELEMENTS:
        raise UnsupportedFeature(f"aromatic form of element {element!r} is not supported")
    lossy = m.group("chiral") is not None
    hcount = 0
    if m.group("hcount"):
        digits = m.group("hcount")[1:]
        hcount = int(digits) if digits else 1
    charge_text = m.group("charge")
    charge = 0
    if charge_text:
        if charge_text in ("+", "++", "-", "--"):
            charge = charge_text.count("+") - charge_text.count("-")
        else:
            charge = int(charge_text)
    if not MIN_CHARGE <= charge <= MAX_CHARGE:
        raise UnsupportedFeature(f"formal charge {charge} outside [{MIN_CHARGE}, {MAX_CHARGE}]")
    if hcount > max(allowed_valences(element, charge)):
        raise UnsupportedFeature(f"hydrogen count {hcount} exceeds max valence of {element}")
    return Atom(element, charge, aromatic, hcount), lossy


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string of the supported subset into a MolecularGraph.

    Stereo markers are stripped; the returned graph then carries
    ``lossy_source=True`` so validity reports can flag the lossy parse.
    """
    if not text or not text.strip():
        raise SmilesSyntaxError("empty SMILES string")
    text = text.strip()
    if not text.isascii():
        raise SmilesSyntaxError("SMILES must be ASCII")

    atoms: list[Atom] = []
    edges: list[tuple[int, int, BondState]] = []
    bonded: set[tuple[int, int]] = set()
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, BondState | None]] = {}
    prev: int | None = None
    pending: BondState | None = None
    lossy = False

    def add_edge(i: int, j: int, state: BondState, pos: int) -> None:
        if i == j:
            raise SmilesSyntaxError(f"self-bond at position {pos}")
        key = (min(i, j), max(i, j))
        if key in bonded:
            raise SmilesSyntaxError(f"duplicate bond between atoms {i} and {j} at position {pos}")
        bonded.add(key)
        edges.append((i, j, state))

    def attach(atom: Atom, pos: int) -> None:
        nonlocal prev, pending
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            state = pending
            if state is None:
                both_aromatic = atoms[prev].aromatic and atom.aromatic
                state = BondState.AROMATIC if both_aromatic else BondState.SINGLE
            add_edge(prev, idx, state, pos)
        pending = None
        prev = idx

    def close_ring(number: int, pos: int) -> None:
        nonlocal pending
        if prev is None:
            raise SmilesSyntaxError(f"ring closure {number} before any atom at position {pos}")
        if number in open_rings:
            other, opened_bond = open_rings.pop(number)
            state = pending
            if opened_bond is not None and state is not None and opened_bond != state:
                raise SmilesSyntaxError(
                    f"conflicting bond symbols for ring closure {number} at position {pos}"
                )
            if state is None:
                state = opened_bond
            if state is None:
                both_aromatic = atoms[other].aromatic and atoms[prev].aromatic
                state = BondState.AROMATIC if both_aromatic else BondState.SINGLE
            add_edge(other, prev, state, pos)
        else:
            open_rings[number] = (prev, pending)
        pending = None

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            end = text.find("]", i + 1)
            if end < 0:
                raise SmilesSyntaxError(f"unterminated bracket atom at position {i}")
            atom, atom_lossy = _parse_bracket_atom(text[i + 1 : end], i)
            lossy = lossy or atom_lossy
            attach(atom, i)
            i = end + 1
            continue
        if ch == "(":
            if prev is None:
                raise SmilesSyntaxError(f"branch before any atom at position {i}")
            branch_stack.append(prev)
            i += 1
            continue
        if ch == ")":
            if not branch_stack:
                raise SmilesSyntaxError(f"unbalanced ')' at position {i}")
            if pending is not None:
                raise SmilesSyntaxError(f"dangling bond symbol before ')' at position {i}")
            prev = branch_stack.pop()
            i += 1
            continue
        if ch in _BOND_TOKENS:
            if pending is not None:
                raise SmilesSyntaxError(f"two bond symbols in a row at position {i}")
            pending = _BOND_TOKENS[ch]
            i += 1
            continue
        if ch in "/\\":
            # Cis/trans markers behave like single bonds once stereo is dropped.
            if pending is not None:
                raise SmilesSyntaxError(f"two bond symbols in a row at position {i}")
            pending = BondState.SINGLE
            lossy = True
            i += 1
            continue
        if ch.isdigit():
            close_ring(int(ch), i)
            i += 1
            continue
        if ch == "%":
            if i + 2 >= n or not text[i + 1 : i + 3].isdigit():
                raise SmilesSyntaxError(f"malformed %nn ring closure at position {i}")
            close_ring(int(text[i + 1 : i + 3]), i)
            i += 3
            continue
        if ch == "*":
            raise UnsupportedFeature("wildcard atom '*' is not supported")
        if ch == ".":
            raise SmilesSyntaxError("dot-disconnected SMILES are not supported")
        matched = None
        for token in _ORGANIC_TOKENS:
            if text.startswith(token, i):
                matched = token
                break
        if matched is not None:
            attach(Atom(matched), i)
            i += len(matched)
            continue
        if ch in _AROMATIC_TOKENS:
            attach(Atom(ch.upper(), aromatic=True), i)
            i += 1
            continue
        raise SmilesSyntaxError(f"unknown token {ch!r} at position {i}")

    if branch_stack:
        raise SmilesSyntaxError("unbalanced '(' in SMILES")
    if open_rings:
        numbers = ", ".join(str(k) for k in sorted(open_rings))
        raise SmilesSyntaxError(f"ring closure(s) never closed: {numbers}")
    if pending is not None:
        raise SmilesSyntaxError("trailing bond symbol")
    if not atoms:
        raise SmilesSyntaxError("SMILES contains no atoms")
    return graph_from_edges(atoms, edges, lossy_source=lossy)


# ---------------------------------------------------------------------------
# Validity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    where: int | tuple[int, int] | None
    message: str


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    violations: tuple[Violation, ...]
    lossy_parse: bool


def _components(graph: MolecularGraph) -> list[set[int]]:
    seen: set[int] = set()
    comps = []
    for start in range(len(graph)):
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in graph.neighbors(u):
                if v not in comp:
                    comp.add(v)
                    stack.append(v)
        seen |= comp
        comps.append(comp)
    return comps


def _bridges(graph: MolecularGraph) -> set[tuple[int, int]]:
    """Edges not on any cycle, via iterative DFS low-link."""
    n = len(graph)
    disc = [-1] * n
    low = [0] * n
    bridges: set[tuple[int, int]] = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack: list[tuple[int, int, Iterable[int]]] = [(root, -1, iter(graph.neighbors(root)))]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            u, parent, it = stack[-1]
            advanced = False
            for v in it:
                if v == parent:
                    # Skip one edge back to the parent (no multi-edges here).
                    parent = -2
                    continue
                if disc[v] == -1:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack[-1] = (u, parent, it)
                    stack.append((v, u, iter(graph.neighbors(v))))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if advanced:
                continue
            stack.pop()
            if stack:
                p = stack[-1][0]
                low[p] = min(low[p], low[u])
                if low[u] > disc[p]:
                    bridges.add((min(p, u), max(p, u)))
    return bridges


def check_validity(graph: MolecularGraph) -> ValidityReport:
    """Report valence, connectivity, aromaticity, and MASK violations."""
    violations: list[Violation] = []

    mask_pairs = np.argwhere(np.triu(np.asarray(graph.bonds) == BondState.MASK, k=1))
    for i, j in mask_pairs.tolist():
        violations.append(Violation("mask", (int(i), int(j)), "MASK bond state in finished molecule"))

    for i, atom in enumerate(graph.atoms):
        total = graph.bond_order_sum(i)
        if atom.explicit_h is not None:
            total += atom.explicit_h
        # Lone-pair donors in aromatic rings (pyrrole NH, furan O) carry
        # aromatic bonds at order 1; grant aromatic atoms that slack.
        n_aromatic = sum(
            1 for j in graph.neighbors(i) if graph.bond(i, j) == BondState.AROMATIC
        )
        low_total = total - 0.5 * n_aromatic
        cap = max(allowed_valences(atom.element, atom.formal_charge))
        if low_total > cap + 1e-9:
            violations.append(
                Violation(
                    "valence",
                    i,
                    f"total bond order {low_total:g} exceeds valence cap {cap} "
                    f"for {atom.element} (charge {atom.formal_charge:+d})",
                )
            )

    comps = _components(graph)
    if len(comps) > 1:
        violations.append(Violation("disconnected", None, f"{len(comps)} connected components"))

    bridges = _bridges(graph)
    aromatic_degree = [0] * len(graph)
    for i, j, state in graph.edge_list():
        if state == BondState.AROMATIC:
            aromatic_degree[i] += 1
            aromatic_degree[j] += 1
            if (i, j) in bridges:
                violations.append(
                    Violation("aromatic_acyclic", (i, j), "aromatic bond not on any cycle")
                )
    for i, atom in enumerate(graph.atoms):
        if atom.aromatic and aromatic_degree[i] == 0:
            violations.append(
                Violation("aromatic_atom", i, "aromatic atom has no aromatic bond")
            )

    return ValidityReport(
        valid=not violations,
        violations=tuple(violations),
        lossy_parse=graph.lossy_source,
    )


# ---------------------------------------------------------------------------
# Canonical ordering and isomorphism
# ---------------------------------------------------------------------------

def _atom_key(graph: MolecularGraph, i: int) -> tuple:
    atom = graph.atoms[i]
    incident = sorted(int(graph.bonds[i, j]) for j in graph.neighbors(i))
    # Degree first so chain ends take rank 0 and written SMILES stay linear.
    return (
        graph.heavy_degree(i),
        atom.element,
        atom.formal_charge,
        atom.aromatic,
        graph.hydrogen_count(i),
        tuple(incident),
    )


def _refine(graph: MolecularGraph, ranks: list[int]) -> list[int]:
    """Iteratively split rank classes by neighborhood structure until stable."""
    n = len(graph)
    while True:
        keys = []
        for i in range(n):
            nbr = sorted((int(graph.bonds[i, j]), ranks[j]) for j in graph.neighbors(i))
            keys.append((ranks[i], tuple(nbr)))
        order = sorted(range(n), key=lambda i: keys[i])
        new_ranks = [0] * n
        rank = 0
        for pos, i in enumerate(order):
            if pos > 0 and keys[i] != keys[order[pos - 1]]:
                rank = pos
            new_ranks[i] = rank
        if new_ranks == ranks:
            return ranks
        ranks = new_ranks


def _initial_ranks(graph: MolecularGraph) -> list[int]:
    n = len(graph)
    keys = [_atom_key(graph, i) for i in range(n)]
    order = sorted(range(n), key=lambda i: keys[i])
    ranks = [0] * n
    rank = 0
    for pos, i in enumerate(order):
        if pos > 0 and keys[i] != keys[order[pos - 1]]:
            rank = pos
        ranks[i] = rank
    return _refine(graph, ranks)


def _signature_for_order(graph: MolecularGraph, order: list[int]) -> tuple:
    pos = {atom: p for p, atom in enumerate(order)}
    atoms = tuple(
        (
            graph.atoms[i].element,
            graph.atoms[i].formal_charge,
            graph.atoms[i].aromatic,
            graph.hydrogen_count(i),
        )
        for i in order
    )
    bonds = []
    for a in range(len(order)):
        for b in range(a + 1, len(order)):
            state = int(graph.bonds[order[a], order[b]])
            if state:
                bonds.append((a, b, state))
    return (atoms, tuple(bonds))


def _canonical_search(graph: MolecularGraph, ranks: list[int]) -> tuple[tuple, list[int]]:
    """Exhaustive individualization over tied cells; returns the minimal signature."""
    n = len(graph)
    by_rank: dict[int, list[int]] = {}
    for i, r in enumerate(ranks):
        by_rank.setdefault(r, []).append(i)
    tied = [cell for cell in by_rank.values() if len(cell) > 1]
    if not tied:
        order = sorted(range(n), key=lambda i: ranks[i])
        return _signature_for_order(graph, order), order
    cell = min(tied, key=lambda c: ranks[c[0]])
    best: tuple[tuple, list[int]] | None = None
    for pick in cell:
        # Individualize: give `pick` its old rank alone, shift the rest of the cell up.
        new_ranks = list(ranks)
        for i in cell:
            if i != pick:
                new_ranks[i] = ranks[i] + 1
        refined = _refine(graph, new_ranks)
        candidate = _canonical_search(graph, refined)
        if best is None or candidate[0] < best[0]:
            best = candidate
    assert best is not None
    return best


def canonical_order(graph: MolecularGraph) -> list[int]:
    """Atom indices in canonical order; invariant under input permutation."""
    _, order = _canonical_search(graph, _initial_ranks(graph))
    return order


def canonical_signature(graph: MolecularGraph) -> tuple:
    """Permutation-invariant signature of the attributed graph."""
    sig, _ = _canonical_search(graph, _initial_ranks(graph))
    return sig


def is_isomorphic(a: MolecularGraph, b: MolecularGraph) -> bool:
    """Exact attributed-graph isomorphism (element, charge, aromaticity, H count, bonds)."""
    if len(a) != len(b):
        return False
    keys_a = sorted(_atom_key(a, i) for i in range(len(a)))
    keys_b = sorted(_atom_key(b, i) for i in range(len(b)))
    if keys_a != keys_b:
        return False
    return canonical_signature(a) == canonical_signature(b)


# ---------------------------------------------------------------------------
# SMILES writing
# ---------------------------------------------------------------------------

def _atom_token(graph: MolecularGraph, i: int) -> str:
    atom = graph.atoms[i]
    if atom.aromatic and atom.element not in AROMATIC_ELEMENTS:
        raise InvalidGraph(f"aromatic {atom.element} cannot be written in the SMILES subset")
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if atom.formal_charge == 0 and atom.explicit_h is None:
        return symbol
    # Bracket atoms carry no implicit hydrogens, so materialize the count.
    hcount = atom.explicit_h if atom.explicit_h is not None else graph.hydrogen_count(i)
    h_text = "" if hcount == 0 else ("H" if hcount == 1 else f"H{hcount}")
    charge = atom.formal_charge
    if charge == 0:
        charge_text = ""
    elif charge in (1, -1):
        charge_text = "+" if charge == 1 else "-"
    else:
        charge_text = f"{charge:+d}"
    return f"[{symbol}{h_text}{charge_text}]"


def _bond_token(graph: MolecularGraph, i: int, j: int) -> str:
    state = graph.bond(i, j)
    both_aromatic = graph.atoms[i].aromatic and graph.atoms[j].aromatic
    if state == BondState.SINGLE:
        return "-" if both_aromatic else ""
    if state == BondState.AROMATIC:
        return "" if both_aromatic else ":"
    if state == BondState.DOUBLE:
        return "="
    if state == BondState.TRIPLE:
        return "#"
    raise InvalidGraph(f"bond state {state.name} cannot be written")


def write_smiles(graph: MolecularGraph) -> str:
    """Deterministic SMILES for a valid connected graph.

    Rooted at the canonical-rank-0 atom; depth-first with neighbors visited
    in canonical order; ring-closure digits allocated in encounter order.
    Guarantees parse_smiles(write_smiles(g)) is isomorphic to g.
    """
    if len(_components(graph)) > 1:
        raise Disconnected("graph has more than one connected component")
    report = check_validity(graph)
    if not report.valid:
        first = report.violations[0]
        raise InvalidGraph(f"{len(report.violations)} violation(s); first: {first.message}")

    order = canonical_order(graph)
    rank = {atom: r for r, atom in enumerate(order)}
    root = order[0]

    # DFS spanning tree in emit order; non-tree edges become ring closures.
    visited: set[int] = set()
    tree_children: dict[int, list[int]] = {i: [] for i in range(len(graph))}
    ring_bonds: list[tuple[int, int]] = []
    seen_edges: set[tuple[int, int]] = set()

    def build(u: int) -> None:
        visited.add(u)
        for v in sorted(graph.neighbors(u), key=lambda x: rank[x]):
            key = (min(u, v), max(u, v))
            if key in seen_edges:
                continue
            if v in visited:
                seen_edges.add(key)
                ring_bonds.append((u, v))
            else:
                seen_edges.add(key)
                tree_children[u].append(v)
                build(v)

    build(root)

    # Ring-closure digit assignment: digits are reused once closed.
    ring_by_atom: dict[int, list[tuple[int, int]]] = {}
    for u, v in ring_bonds:
        ring_by_atom.setdefault(u, []).append((v, 0))
        ring_by_atom.setdefault(v, []).append((u, 0))
    digit_of: dict[tuple[int, int], int] = {}
    free_digits = list(range(1, 100))
    open_digits: dict[tuple[int, int], int] = {}

    def ring_text(u: int) -> str:
        parts = []
        for v, _ in sorted(ring_by_atom.get(u, []), key=lambda t: rank[t[0]]):
            key = (min(u, v), max(u, v))
            if key in open_digits:
                digit = open_digits.pop(key)
                free_digits.append(digit)
                free_digits.sort()
                parts.append(_digit_text(digit))
            else:
                digit = free_digits.pop(0)
                open_digits[key] = digit
                # The bond symbol is written at the opening occurrence.
                parts.append(_bond_token(graph, u, v) + _digit_text(digit))
        return "".join(parts)

    def _digit_text(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    out: list[str] = []

    def emit(u: int) -> None:
        out.append(_atom_token(graph, u))
        out.append(ring_text(u))
        children = sorted(tree_children[u], key=lambda x: rank[x])
        for idx, v in enumerate(children):
            last = idx == len(children) - 1
            bond = _bond_token(graph, u, v)
            if last:
                out.append(bond)
                emit(v)
            else:
                out.append("(" + bond)
                emit(v)
                out.append(")")

    emit(root)
    return "".join(out)


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the fixed hash behind fingerprint bits."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-length bit vector stored as an arbitrary-precision integer."""

    bits: int
    nbits: int

    def popcount(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        return [i for i in range(self.nbits) if (self.bits >> i) & 1]


def _environment_encodings(graph: MolecularGraph, radius: int) -> list[bytes]:
    """Canonical byte encodings of every atom's 0..radius neighborhoods."""
    base = [
        f"A|{a.element}|{a.formal_charge}|{int(a.aromatic)}".encode()
        for a in graph.atoms
    ]
    encodings = list(base)
    prev = base
    for r in range(1, radius + 1):
        level = []
        for i in range(len(graph)):
            nbrs = sorted(
                b"%d:" % int(graph.bonds[i, j]) + prev[j] for j in graph.neighbors(i)
            )
            level.append(b"E%d(" % r + base[i] + b"|" + b",".join(nbrs) + b")")
        encodings.extend(level)
        prev = level
    return encodings


def morgan_fingerprint(
    graph: MolecularGraph,
    radius: int = 2,
    nbits: int = 2048,
    checked: bool = True,
) -> Fingerprint:
    """Circular-neighborhood fingerprint hashed with FNV-1a 64 into nbits positions.

    ``checked=False`` skips the validity gate for callers that already
    validated the graph (hot mining loops).
    """
    if checked:
        report = check_validity(graph)
        if not report.valid:
            raise InvalidGraph("cannot fingerprint an invalid graph")
    bits = 0
    for enc in _environment_encodings(graph, radius):
        bits |= 1 << (fnv1a64(enc) % nbits)
    return Fingerprint(bits, nbits)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a AND b| / |a OR b|; defined as 1.0 when both fingerprints are empty."""
    if a.nbits != b.nbits:
        raise LengthMismatch(f"fingerprint lengths differ: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union
