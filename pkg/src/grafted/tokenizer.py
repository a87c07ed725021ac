"""Vocabularies and the unified instruction / source / target sequence.

A sample is laid out as ``[instruction tokens][source atoms][target atoms]``
with lengths n, k, m; bond matrices ride alongside as k x k and m x m edge-id
grids.  Text uses word-level tokens with [UNK]/[PAD]/[MOL] specials; atoms are
(element, formal charge) pairs with [PAD_ATOM]/[MASK_ATOM]; the six edge
states are fixed and shared with the diffusion process.

The instruction's literal "[SMILE]" placeholder becomes the single [MOL]
marker token: the source molecule is already present as graph tokens, so
inlining its SMILES text would only duplicate structure.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .errors import AsymmetricEdges, EmptyCorpus, ResidualMask, UnknownAtomToken
from .molgraph import Atom, BondState, MolecularGraph, parse_smiles

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import EditSample
    from .diffusion import NoisyTargetState

PAD, UNK, MOL = "[PAD]", "[UNK]", "[MOL]"
PAD_ATOM, MASK_ATOM = "[PAD_ATOM]", "[MASK_ATOM]"
SMILES_PLACEHOLDER = "[SMILE]"

_WORD_RE = re.compile(r"\[MOL\]|\w+|[^\w\s]")


def tokenize_text(instruction: str) -> list[str]:
    """Word/punctuation tokens; the [SMILE] placeholder collapses to [MOL]."""
    return _WORD_RE.findall(instruction.replace(SMILES_PLACEHOLDER, MOL))


AtomToken = tuple[str, int]


@dataclass(frozen=True)
class Vocab:
    """Dense, stable token maps; serialized with every checkpoint."""

    text_tokens: dict[str, int]
    atom_tokens: dict[AtomToken, int]

    # Special ids are fixed by construction.
    @property
    def pad_id(self) -> int:
        return self.text_tokens[PAD]

    @property
    def unk_id(self) -> int:
        return self.text_tokens[UNK]

    @property
    def mol_id(self) -> int:
        return self.text_tokens[MOL]

    @property
    def pad_atom_id(self) -> int:
        return self.atom_tokens_by_special[PAD_ATOM]

    @property
    def mask_atom_id(self) -> int:
        return self.atom_tokens_by_special[MASK_ATOM]

    @property
    def atom_tokens_by_special(self) -> dict[str, int]:
        return {PAD_ATOM: 0, MASK_ATOM: 1}

    @property
    def text_size(self) -> int:
        return len(self.text_tokens)

    @property
    def atom_size(self) -> int:
        return len(self.atom_tokens) + 2  # plus the two specials

    @property
    def edge_size(self) -> int:
        return len(BondState)

    @property
    def mask_edge_id(self) -> int:
        return int(BondState.MASK)

    def text_id(self, token: str) -> int:
        return self.text_tokens.get(token, self.unk_id)

    def atom_id(self, token: AtomToken) -> int:
        idx = self.atom_tokens.get(token)
        if idx is None:
            raise UnknownAtomToken(f"atom token {token!r} not in vocabulary")
        return idx

    def atom_token_of(self, idx: int) -> AtomToken:
        table = self.atom_ids_reversed()
        token = table.get(idx)
        if token is None:
            raise KeyError(f"id {idx} is not a real atom token")
        return token

    def atom_ids_reversed(self) -> dict[int, AtomToken]:
        return {i: t for t, i in self.atom_tokens.items()}

    def real_atom_ids(self) -> list[int]:
        """Ids of concrete (element, charge) classes, excluding specials."""
        return sorted(self.atom_tokens.values())


def build_vocab(corpus: Iterable["EditSample"]) -> Vocab:
    """Collect text and atom tokens from a corpus of edit samples.

    Deterministic regardless of corpus order: tokens are sorted before ids
    are assigned.  Specials occupy the low ids.
    """
    words: set[str] = set()
    atoms: set[AtomToken] = set()
    empty = True
    for sample in corpus:
        empty = False
        for token in tokenize_text(sample.instruction):
            if token != MOL:
                words.add(token)
        for smiles in (sample.source_smiles, sample.target_smiles):
            graph = parse_smiles(smiles)
            for atom in graph.atoms:
                atoms.add((atom.element, atom.formal_charge))
    if empty:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")

    text_tokens = {PAD: 0, UNK: 1, MOL: 2}
    for token in sorted(words):
        if token not in text_tokens:
            text_tokens[token] = len(text_tokens)
    # Ids 0/1 belong to [PAD_ATOM]/[MASK_ATOM]; real atoms start at 2.
    atom_tokens = {token: i + 2 for i, token in enumerate(sorted(atoms))}
    return Vocab(text_tokens=text_tokens, atom_tokens=atom_tokens)


# --- serialization: versioned UTF-8 table, "token TAB id" -------------------

_VOCAB_HEADER = "grafted-vocab v1"


def vocab_to_text(vocab: Vocab) -> str:
    lines = [_VOCAB_HEADER, "[text]"]
    for token, idx in sorted(vocab.text_tokens.items(), key=lambda kv: kv[1]):
        lines.append(f"{token}\t{idx}")
    lines.append("[atoms]")
    for (element, charge), idx in sorted(vocab.atom_tokens.items(), key=lambda kv: kv[1]):
        lines.append(f"{element},{charge}\t{idx}")
    return "\n".join(lines) + "\n"


def vocab_from_text(text: str) -> Vocab:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _VOCAB_HEADER:
        raise ValueError("unrecognized vocabulary header")
    section = None
    text_tokens: dict[str, int] = {}
    atom_tokens: dict[AtomToken, int] = {}
    for line in lines[1:]:
        if line == "[text]":
            section = "text"
            continue
        if line == "[atoms]":
            section = "atoms"
            continue
        token, _, idx = line.rpartition("\t")
        if section == "text":
            text_tokens[token] = int(idx)
        elif section == "atoms":
            element, _, charge = token.partition(",")
            atom_tokens[(element, int(charge))] = int(idx)
        else:
            raise ValueError(f"vocabulary line outside a section: {line!r}")
    return Vocab(text_tokens=text_tokens, atom_tokens=atom_tokens)


# ---------------------------------------------------------------------------
# Encoding / decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenSequence:
    """One encoded sample: flat ids plus the two edge-id grids."""

    ids: np.ndarray  # int64, length n + k + m
    n: int
    k: int
    m: int
    src_edges: np.ndarray  # int8, k x k
    tgt_edges: np.ndarray  # int8, m x m

    def __post_init__(self) -> None:
        if len(self.ids) != self.n + self.k + self.m:
            raise ValueError("sequence length must equal n + k + m")
        if self.src_edges.shape != (self.k, self.k):
            raise ValueError("source edge grid must be k x k")
        if self.tgt_edges.shape != (self.m, self.m):
            raise ValueError("target edge grid must be m x m")

    @property
    def text_ids(self) -> np.ndarray:
        return self.ids[: self.n]

    @property
    def src_ids(self) -> np.ndarray:
        return self.ids[self.n : self.n + self.k]

    @property
    def tgt_ids(self) -> np.ndarray:
        return self.ids[self.n + self.k :]


def _atom_ids_of_graph(graph: MolecularGraph, vocab: Vocab) -> list[int]:
    return [vocab.atom_id((a.element, a.formal_charge)) for a in graph.atoms]


def encode_sample(
    instruction: str,
    src: MolecularGraph,
    tgt: "MolecularGraph | NoisyTargetState",
    vocab: Vocab,
) -> TokenSequence:
    """Assemble the unified sequence for one (instruction, source, target) triple.

    The target may be a clean graph or a partially masked diffusion state;
    MASK entries pass through as [MASK_ATOM] / MASK edge ids.
    """
    text_ids = [vocab.text_id(t) for t in tokenize_text(instruction)]
    src_ids = _atom_ids_of_graph(src, vocab)
    src_edges = np.asarray(src.bonds, dtype=np.int8).copy()

    if isinstance(tgt, MolecularGraph):
        tgt_ids = _atom_ids_of_graph(tgt, vocab)
        tgt_edges = np.asarray(tgt.bonds, dtype=np.int8).copy()
    else:
        tgt_ids = [
            vocab.mask_atom_id if token is None else vocab.atom_id(token)
            for token in tgt.node_states
        ]
        tgt_edges = np.asarray(tgt.edge_states, dtype=np.int8).copy()

    ids = np.asarray(text_ids + src_ids + tgt_ids, dtype=np.int64)
    return TokenSequence(
        ids=ids,
        n=len(text_ids),
        k=len(src_ids),
        m=len(tgt_ids),
        src_edges=src_edges,
        tgt_edges=tgt_edges,
    )


def decode_target(node_ids, edge_ids, vocab: Vocab) -> MolecularGraph:
    """Rebuild a molecular graph from target-segment ids.

    Atom aromaticity is derived from incident AROMATIC bonds; validity is not
    enforced here (the evaluation layer decides what to do with bad graphs).
    """
    node_ids = np.asarray(node_ids, dtype=np.int64)
    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    specials = {vocab.pad_atom_id, vocab.mask_atom_id}
    for idx in node_ids.tolist():
        if idx in specials:
            raise ResidualMask(f"special atom id {idx} in decoded target")
    if edge_ids.shape != (len(node_ids), len(node_ids)):
        raise AsymmetricEdges("edge grid shape does not match the atom count")
    if not np.array_equal(edge_ids, edge_ids.T):
        raise AsymmetricEdges("edge grid is not symmetric")
    if np.any(np.diag(edge_ids) != int(BondState.NONE)):
        raise AsymmetricEdges("edge grid has a non-empty diagonal")
    if np.any(edge_ids == int(BondState.MASK)):
        raise ResidualMask("MASK edge id in decoded target")

    table = vocab.atom_ids_reversed()
    aromatic = (edge_ids == int(BondState.AROMATIC)).any(axis=1)
    atoms = []
    for i, idx in enumerate(node_ids.tolist()):
        token = table.get(int(idx))
        if token is None:
            raise ResidualMask(f"atom id {idx} is not a concrete atom token")
        element, charge = token
        atoms.append(Atom(element, charge, aromatic=bool(aromatic[i])))
    return MolecularGraph(tuple(atoms), edge_ids.astype(np.int8))
