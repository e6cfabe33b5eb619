"""Exception types shared across the package."""


class BagelError(Exception):
    """Base class for all package errors."""


# --- configuration / usage ---------------------------------------------------

class InvalidConfig(BagelError):
    """A config object or file violates its invariants."""


class DimensionMismatch(BagelError):
    """Array shapes inconsistent with the declared D, Q, S or basis size."""


class LengthMismatch(BagelError):
    """Two paired vectors have different lengths."""


# --- data ingestion ----------------------------------------------------------

class MissingColumn(BagelError):
    """Required CSV column absent."""


class NonBinaryDrugValue(BagelError):
    """Drug indicator cell is not 0 or 1."""


class ScoreOutOfRange(BagelError):
    """Ordinal score outside {0, 1, 2, 3} and not the missing sentinel."""


class DuplicateVisitTime(BagelError):
    """Two visits of one participant share the same time."""


class ValidationFailed(BagelError):
    """Dataset failed validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = violations
        super().__init__(
            "dataset validation failed: "
            + "; ".join(str(v) for v in violations[:5])
            + (" ..." if len(violations) > 5 else "")
        )


# --- splines -----------------------------------------------------------------

class TimeOutOfDomain(BagelError):
    """Evaluation time outside the basis domain."""


class TooFewBases(BagelError):
    """Cubic B-spline basis needs at least 4 basis functions."""


# --- model / sampler ---------------------------------------------------------

class NumericalUnderflow(BagelError):
    """Ordinal interval probability underflowed to an exact zero."""


class SingularCorrelation(BagelError):
    """Item correlation matrix is not positive definite."""


class DivergentState(BagelError):
    """Non-finite value detected in the chain state."""


class CheckpointIOError(BagelError):
    """Checkpoint file unreadable, unwritable, or inconsistent with the run."""


class TooFewDraws(BagelError):
    """Not enough retained draws for the requested summary."""


# --- summaries / predict -----------------------------------------------------

class TruthDimensionMismatch(BagelError):
    """Ground truth dimensions do not match the fitted model."""


class IncompleteStore(BagelError):
    """Sample store has no completion footer."""


class DatasetMismatch(BagelError):
    """Sample stores were fit on different datasets."""


class UnknownParticipant(BagelError):
    """Queried participant id absent from the fitted dataset."""


class EmptyRegimenList(BagelError):
    """Prediction query contains no candidate regimens."""
