"""Exception taxonomy.

Three broad families, used by the CLI to pick exit codes: ConfigError
(bad settings, exit 2), DataError (a file violates its documented format,
exit 3), DomainError (an in-memory value violates an operation's
precondition, also exit 3). Anything else escaping a command is an
internal invariant violation (exit 4).
"""


class PatchbankError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PatchbankError):
    """Bad configuration: unknown key, wrong type, or out-of-range value."""


class DataError(PatchbankError):
    """An on-disk artifact violates its documented format."""


class DomainError(PatchbankError, ValueError):
    """An in-memory value violates an operation's precondition."""


# --- tensor and manifest files ---

class IoFailure(DataError):
    """Underlying OS read/write failed."""


class MalformedHeader(DataError):
    """Tensor file header is not a valid NPY v1.0 header."""


class DTypeMismatch(DataError):
    """Tensor payload is not little-endian float32."""


class TruncatedPayload(DataError):
    """Tensor payload length disagrees with the header shape."""


class NonFiniteValue(DataError):
    """NaN or Inf encountered where finite values are required."""


class ParseError(DataError):
    """Manifest document is not valid or violates its schema."""


class MissingLevelPath(DataError):
    """A sample lacks a feature path for a declared hierarchy level."""


class DuplicateSampleId(DataError):
    """Two manifest samples share an id."""


# --- binary model / bank containers ---

class VersionMismatch(DataError):
    """Container magic or version is not the one this code writes."""


class CorruptPayload(DataError):
    """Container is truncated or internally inconsistent."""


class VersionMismatchWarning(UserWarning):
    """Bank fingerprint does not match the expected one (non-fatal)."""


# --- patch feature assembly ---

class InvalidShape(DomainError):
    """Array has the wrong rank or a non-positive dimension."""


class EvenPatchSize(DomainError):
    """Neighborhood size must be a positive odd integer."""


class PatchTooLarge(DomainError):
    """Neighborhood size exceeds what the feature map supports."""


class EmptyList(DomainError):
    """An operation requiring at least one element got none."""


class NonDecreasingResolution(DomainError):
    """A later hierarchy map is larger than the first (must be coarser)."""


# --- similarity ---

class NonPositiveSigma(DomainError):
    """Gaussian bandwidth must be positive."""


class KOutOfRange(DomainError):
    """Neighborhood size is outside the valid range for this batch."""


class ShapeMismatch(DomainError):
    """Two arrays that must agree in shape do not."""


class AlphaOutOfRange(DomainError):
    """Mixing weight must lie in [0, 1]."""


# --- representation learning ---

class DimMismatch(DomainError):
    """Input feature dimension disagrees with the model."""


class GammaOutOfRange(DomainError):
    """Momentum rate must lie in [0, 1]."""


class EmptyDataset(DomainError):
    """Training requires at least one patch feature set."""


# --- memory bank ---

class EmptyInput(DomainError):
    """Operation requires a nonempty collection."""


class FractionOutOfRange(DomainError):
    """Coreset fraction must lie in (0, 1]."""


class BankTooSmall(DomainError):
    """Requested neighborhood exceeds the number of bank rows."""


# --- scoring and evaluation ---

class EmptyMap(DomainError):
    """Score map has no entries."""


class InvalidTarget(DomainError):
    """Upsampling target is smaller than the grid or sigma is negative."""


class LengthMismatch(DomainError):
    """Score lists that must align do not."""


class DegenerateVariance(DomainError):
    """Pooled variance is zero; discriminability is undefined."""


class SingleClass(DomainError):
    """Metric requires both normal and abnormal examples."""
