"""Exception hierarchy shared across the package."""


class GraftedError(Exception):
    """Base class for all package errors."""


# --- molecular graphs / SMILES ---------------------------------------------

class SmilesSyntaxError(GraftedError):
    """Malformed SMILES: unbalanced parentheses, dangling ring closure, unknown token."""


class UnsupportedFeature(GraftedError):
    """SMILES feature outside the supported subset (isotopes, wildcards, foreign elements)."""


class InvalidGraph(GraftedError):
    """Operation requires a chemically valid graph and got one that is not."""


class Disconnected(GraftedError):
    """Operation requires a single connected component."""


class LengthMismatch(GraftedError):
    """Fingerprints of different lengths cannot be compared."""


# --- oracles ----------------------------------------------------------------

class OracleUnavailable(GraftedError):
    """EXTERNAL property kind evaluated without a registered oracle."""


class SpawnFailure(OracleUnavailable):
    """External oracle process could not be started."""


class ProtocolError(OracleUnavailable):
    """External oracle violated the line protocol (count mismatch, non-numeric output)."""


class OracleTimeout(OracleUnavailable):
    """External oracle did not answer within the configured timeout."""


# --- tokenizer ---------------------------------------------------------------

class EmptyCorpus(GraftedError):
    """Vocabulary or pair mining asked to run over an empty corpus."""


class UnknownAtomToken(GraftedError):
    """Atom (element, charge) pair absent from the vocabulary."""


class ResidualMask(GraftedError):
    """Decoding a target that still contains MASK or PAD entries."""


class AsymmetricEdges(GraftedError):
    """Edge-state matrix is not symmetric (or has a non-empty diagonal)."""


# --- model / diffusion / training --------------------------------------------

class ShapeMismatch(GraftedError):
    """Tensor shapes inconsistent with the model configuration."""


class DomainError(GraftedError):
    """Argument outside the mathematical domain of the operation."""


class KeyMismatch(GraftedError):
    """Parameter and gradient maps disagree on their key sets."""


class NonFiniteGradient(GraftedError):
    """A gradient tensor contains NaN or infinity."""


class VersionMismatch(GraftedError):
    """Checkpoint written by an incompatible format version."""


class CorruptFile(GraftedError):
    """Checkpoint failed structural or checksum validation."""


# --- evaluation ---------------------------------------------------------------

class EmptyInput(GraftedError):
    """Evaluation requires at least one output."""


class DegenerateSet(GraftedError):
    """Too few molecules for a non-degenerate descriptor covariance."""


class NoTemplate(GraftedError):
    """No instruction template registered for a (property, direction) pair."""
