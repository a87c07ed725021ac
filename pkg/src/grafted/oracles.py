"""Chemical property calculators, change predicates, and the terminal reward.

Everything here is a deliberate in-repo proxy: LOGP is an atom-contribution
table, QED/SA are documented desirability/complexity surrogates.  They are
deterministic and monotone-sane but make no claim of numerical agreement
with external toolkits.  Learned bioactivity predictors plug in through the
external-oracle line protocol (docs/oracle_protocol.md).
"""

from __future__ import annotations

import math
import shutil
import subprocess
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .errors import (
    InvalidGraph,
    OracleTimeout,
    OracleUnavailable,
    ProtocolError,
    SpawnFailure,
)
from .molgraph import (
    ATOMIC_MASS,
    BondState,
    MolecularGraph,
    check_validity,
    morgan_fingerprint,
    tanimoto,
)


@dataclass(frozen=True)
class PropertyKind:
    """A computable property; ``external=True`` routes through a registered oracle."""

    name: str
    external: bool = False

    def __str__(self) -> str:
        return f"ext:{self.name}" if self.external else self.name


MW = PropertyKind("mw")
LOGP = PropertyKind("logp")
HBD = PropertyKind("hbd")
HBA = PropertyKind("hba")
ROTBONDS = PropertyKind("rotbonds")
RINGS = PropertyKind("rings")
QED_PROXY = PropertyKind("qed_proxy")
SA_PROXY = PropertyKind("sa_proxy")

_BUILTIN_KINDS = {k.name: k for k in (MW, LOGP, HBD, HBA, ROTBONDS, RINGS, QED_PROXY, SA_PROXY)}


def external(name: str) -> PropertyKind:
    return PropertyKind(name, external=True)


def property_kind(text: str) -> PropertyKind:
    """Parse a property name; ``ext:<name>`` selects an external oracle."""
    text = text.strip().lower()
    if text.startswith("ext:"):
        name = text[4:]
        if not name:
            raise ValueError("external property needs a name, e.g. ext:drd2")
        return external(name)
    if text not in _BUILTIN_KINDS:
        known = ", ".join(sorted(_BUILTIN_KINDS))
        raise ValueError(f"unknown property {text!r}; known: {known}, ext:<name>")
    return _BUILTIN_KINDS[text]


class Direction(Enum):
    INCREASE = "increase"
    DECREASE = "decrease"


def direction(text: str) -> Direction:
    text = text.strip().lower()
    if text in ("increase", "inc", "up", "+"):
        return Direction.INCREASE
    if text in ("decrease", "dec", "down", "-"):
        return Direction.DECREASE
    raise ValueError(f"unknown direction {text!r}")


# Default minimum property shifts for pair mining and success predicates.
# Values are the lower bounds of the observed per-task shift ranges; desk
# tasks usually override the large ones explicitly.
DEFAULT_MIN_DELTA = {
    "mw": 99.031,
    "logp": 2.625,
    "hbd": 2.0,
    "hba": 2.0,
    "rotbonds": 3.0,
    "rings": 1.0,
    "qed_proxy": 0.380,
    "sa_proxy": 0.700,
}
_EXTERNAL_DEFAULT_MIN_DELTA = 0.05


@dataclass(frozen=True)
class PropertySpec:
    """One required property change: kind, direction, and minimum magnitude."""

    kind: PropertyKind
    direction: Direction
    min_delta: float | None = None

    def __post_init__(self) -> None:
        if self.min_delta is not None and self.min_delta < 0:
            raise ValueError("min_delta must be non-negative")

    def resolved_min_delta(self) -> float:
        if self.min_delta is not None:
            return self.min_delta
        if self.kind.external:
            return _EXTERNAL_DEFAULT_MIN_DELTA
        return DEFAULT_MIN_DELTA[self.kind.name]


@dataclass(frozen=True)
class RewardSpec:
    """Success criterion: all property specs plus a similarity floor tau."""

    specs: tuple[PropertySpec, ...]
    tau: float = 0.15
    levels: tuple[float, float, float] = (0.0, 0.2, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "specs", tuple(self.specs))
        if not self.specs:
            raise ValueError("RewardSpec needs at least one PropertySpec")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        fail, partial, full = self.levels
        if not fail < partial < full:
            raise ValueError("reward levels must be strictly increasing")


# ---------------------------------------------------------------------------
# Built-in calculators
# ---------------------------------------------------------------------------

def _require_valid(graph: MolecularGraph) -> None:
    report = check_validity(graph)
    if not report.valid:
        raise InvalidGraph(f"property oracle needs a valid graph: {report.violations[0].message}")


def molecular_weight(graph: MolecularGraph) -> float:
    total = 0.0
    for i, atom in enumerate(graph.atoms):
        total += ATOMIC_MASS[atom.element]
        total += ATOMIC_MASS["H"] * graph.hydrogen_count(i)
    return total


def hydrogen_bond_donors(graph: MolecularGraph) -> float:
    """Number of O-H and N-H bonds, implicit hydrogens included."""
    return float(
        sum(
            graph.hydrogen_count(i)
            for i, atom in enumerate(graph.atoms)
            if atom.element in ("N", "O")
        )
    )


def hydrogen_bond_acceptors(graph: MolecularGraph) -> float:
    return float(sum(1 for atom in graph.atoms if atom.element in ("N", "O")))


def _ring_edges(graph: MolecularGraph) -> set[tuple[int, int]]:
    from .molgraph import _bridges  # non-bridge edges lie on cycles

    bridges = _bridges(graph)
    return {
        (i, j) for i, j, _ in graph.edge_list() if (i, j) not in bridges
    }


def rotatable_bonds(graph: MolecularGraph) -> float:
    """Non-ring SINGLE bonds whose endpoints both have heavy-atom degree >= 2."""
    ring = _ring_edges(graph)
    count = 0
    for i, j, state in graph.edge_list():
        if state != BondState.SINGLE or (i, j) in ring:
            continue
        if graph.heavy_degree(i) >= 2 and graph.heavy_degree(j) >= 2:
            count += 1
    return float(count)


def ring_count(graph: MolecularGraph) -> float:
    """Cycle-space dimension |E| - |V| + 1 (graphs here are connected)."""
    return float(len(graph.edge_list()) - len(graph) + 1)


# Atom contributions keyed by (element, aromatic); the column index is the
# atom's heteroatom-neighbor count capped at 3.  Signs follow the usual
# pattern: carbon and halogens lipophilic, N/O strongly hydrophilic, with
# polar context discounting carbon.
_LOGP_TABLE: dict[tuple[str, bool], tuple[float, float, float, float]] = {
    ("C", False): (0.36, 0.08, -0.12, -0.27),
    ("C", True): (0.30, 0.14, 0.02, -0.10),
    ("N", False): (-0.68, -0.60, -0.52, -0.45),
    ("N", True): (-0.45, -0.40, -0.36, -0.32),
    ("O", False): (-0.40, -0.32, -0.26, -0.22),
    ("O", True): (-0.04, -0.04, -0.04, -0.04),
    ("S", False): (0.25, 0.18, 0.12, 0.06),
    ("S", True): (0.40, 0.32, 0.26, 0.20),
    ("P", False): (-0.30, -0.30, -0.30, -0.30),
    ("P", True): (-0.20, -0.20, -0.20, -0.20),
    ("B", False): (0.10, 0.05, 0.00, -0.05),
    ("B", True): (0.10, 0.05, 0.00, -0.05),
    ("F", False): (0.22, 0.18, 0.15, 0.12),
    ("Cl", False): (0.65, 0.55, 0.48, 0.42),
    ("Br", False): (0.86, 0.75, 0.66, 0.58),
    ("I", False): (1.20, 1.05, 0.92, 0.82),
}


def logp_proxy(graph: MolecularGraph) -> float:
    total = 0.0
    for i, atom in enumerate(graph.atoms):
        het = sum(1 for j in graph.neighbors(i) if graph.atoms[j].element != "C")
        row = _LOGP_TABLE.get((atom.element, atom.aromatic))
        if row is None:
            row = _LOGP_TABLE[(atom.element, False)]
        total += row[min(het, 3)]
    return total


def _piecewise(x: float, knots: Sequence[tuple[float, float]]) -> float:
    if x <= knots[0][0]:
        return knots[0][1]
    for (x0, y0), (x1, y1) in zip(knots, knots[1:]):
        if x <= x1:
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    return knots[-1][1]


# Desirability knots for the drug-likeness proxy; every plateau bottoms out
# above zero so the geometric mean stays in (0, 1].
_QED_KNOTS: dict[str, tuple[tuple[float, float], ...]] = {
    "mw": ((0.0, 0.30), (100.0, 0.80), (200.0, 1.0), (400.0, 1.0), (500.0, 0.40), (700.0, 0.05)),
    "logp": ((-4.0, 0.05), (-1.0, 0.70), (0.5, 1.0), (3.0, 1.0), (5.0, 0.30), (7.0, 0.05)),
    "hba": ((0.0, 0.70), (1.0, 1.0), (5.0, 1.0), (8.0, 0.30), (12.0, 0.05)),
    "hbd": ((0.0, 1.0), (3.0, 1.0), (5.0, 0.30), (8.0, 0.05)),
    "rotbonds": ((0.0, 1.0), (5.0, 1.0), (8.0, 0.40), (12.0, 0.05)),
    "rings": ((0.0, 0.50), (1.0, 1.0), (4.0, 1.0), (7.0, 0.10)),
}


def qed_proxy(graph: MolecularGraph) -> float:
    """Geometric mean of six piecewise-linear desirabilities; range (0, 1]."""
    values = {
        "mw": molecular_weight(graph),
        "logp": logp_proxy(graph),
        "hba": hydrogen_bond_acceptors(graph),
        "hbd": hydrogen_bond_donors(graph),
        "rotbonds": rotatable_bonds(graph),
        "rings": ring_count(graph),
    }
    log_sum = sum(math.log(_piecewise(values[k], _QED_KNOTS[k])) for k in _QED_KNOTS)
    return math.exp(log_sum / len(_QED_KNOTS))


def sa_proxy(graph: MolecularGraph) -> float:
    """Synthetic-accessibility surrogate in [1, 10]; bigger means harder."""
    heavy = len(graph)
    rings = ring_count(graph)
    het_fraction = sum(1 for a in graph.atoms if a.element != "C") / heavy
    max_degree = max(graph.heavy_degree(i) for i in range(heavy))
    z = 0.09 * (heavy - 10.0) + 0.35 * rings + 1.6 * het_fraction + 0.45 * (max_degree - 2.0)
    return 1.0 + 9.0 / (1.0 + math.exp(-z))


_CALCULATORS = {
    "mw": molecular_weight,
    "logp": logp_proxy,
    "hbd": hydrogen_bond_donors,
    "hba": hydrogen_bond_acceptors,
    "rotbonds": rotatable_bonds,
    "rings": ring_count,
    "qed_proxy": qed_proxy,
    "sa_proxy": sa_proxy,
}


# ---------------------------------------------------------------------------
# External oracles: one subprocess call per batch, line-oriented protocol
# ---------------------------------------------------------------------------

@dataclass
class ExternalOracle:
    """Handle for a registered external property oracle.

    Protocol: one SMILES per line on stdin, one decimal per line on stdout,
    same order, UTF-8, LF-terminated.  Single-writer: parallel callers must
    register separate handles.
    """

    name: str
    command: tuple[str, ...]
    timeout: float = 30.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def evaluate_batch(self, smiles: Sequence[str]) -> list[float]:
        if not smiles:
            return []
        payload = "\n".join(smiles) + "\n"
        with self._lock:
            try:
                proc = subprocess.run(
                    list(self.command),
                    input=payload.encode("utf-8"),
                    capture_output=True,
                    timeout=self.timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise OracleTimeout(
                    f"oracle {self.name!r} exceeded {self.timeout:.1f}s for a batch of {len(smiles)}"
                ) from exc
            except OSError as exc:
                raise SpawnFailure(f"oracle {self.name!r}: cannot spawn {self.command}: {exc}") from exc
        if proc.returncode != 0:
            raise ProtocolError(
                f"oracle {self.name!r} exited with status {proc.returncode}: "
                f"{proc.stderr.decode('utf-8', 'replace').strip()[:200]}"
            )
        lines = proc.stdout.decode("utf-8", "replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        if len(lines) != len(smiles):
            raise ProtocolError(
                f"oracle {self.name!r} returned {len(lines)} values for {len(smiles)} inputs"
            )
        values = []
        for ln in lines:
            try:
                values.append(float(ln.strip()))
            except ValueError as exc:
                raise ProtocolError(f"oracle {self.name!r} emitted non-numeric line {ln!r}") from exc
        return values


_ORACLE_REGISTRY: dict[str, ExternalOracle] = {}


def register_external_oracle(
    name: str,
    command: str | Sequence[str],
    timeout: float = 30.0,
) -> ExternalOracle:
    """Register an executable as the oracle behind ``ext:<name>`` properties."""
    argv = (command,) if isinstance(command, str) else tuple(command)
    if not argv:
        raise SpawnFailure("empty oracle command")
    resolved = shutil.which(argv[0])
    if resolved is None:
        raise SpawnFailure(f"oracle command {argv[0]!r} not found or not executable")
    handle = ExternalOracle(name=name, command=(resolved,) + argv[1:], timeout=timeout)
    _ORACLE_REGISTRY[name] = handle
    return handle


def unregister_external_oracle(name: str) -> None:
    _ORACLE_REGISTRY.pop(name, None)


def get_external_oracle(name: str) -> ExternalOracle:
    handle = _ORACLE_REGISTRY.get(name)
    if handle is None:
        raise OracleUnavailable(f"no oracle registered under {name!r}")
    return handle


# ---------------------------------------------------------------------------
# Evaluation, predicates, reward
# ---------------------------------------------------------------------------

def compute_property(kind: PropertyKind, graph: MolecularGraph, checked: bool = True) -> float:
    """Evaluate one property on a valid molecular graph.

    ``checked=False`` skips the validity gate when the caller has already
    validated the graph.
    """
    if checked:
        _require_valid(graph)
    if kind.external:
        from .molgraph import write_smiles

        handle = get_external_oracle(kind.name)
        return handle.evaluate_batch([write_smiles(graph)])[0]
    return _CALCULATORS[kind.name](graph)


def satisfies(spec: PropertySpec, source: MolecularGraph, candidate: MolecularGraph) -> bool:
    """True iff the candidate moves the property by at least min_delta in the wanted direction."""
    delta = compute_property(spec.kind, candidate) - compute_property(spec.kind, source)
    threshold = spec.resolved_min_delta()
    if spec.direction == Direction.INCREASE:
        return delta >= threshold
    return delta <= -threshold


def similarity(source: MolecularGraph, candidate: MolecularGraph) -> float:
    return tanimoto(morgan_fingerprint(source), morgan_fingerprint(candidate))


def reward(
    spec: RewardSpec,
    source: MolecularGraph,
    candidate: MolecularGraph | None,
) -> float:
    """Terminal reward ladder.

    fail (0.0): invalid candidate, or neither criterion met;
    partial (0.2): valid and exactly one of {all property specs, similarity >= tau};
    full (1.0): valid, all property specs met, and similarity >= tau.
    """
    fail, partial, full = spec.levels
    if candidate is None:
        return fail
    if not check_validity(candidate).valid:
        return fail
    properties_ok = all(satisfies(s, source, candidate) for s in spec.specs)
    similar_ok = similarity(source, candidate) >= spec.tau
    if properties_ok and similar_ok:
        return full
    if properties_ok or similar_ok:
        return partial
    return fail
