"""Exception types raised across the package.

Every error below derives from LongregError so callers can catch the
package's failures with a single except clause. The CLI maps validation
problems to exit code 2 and solver failures to exit code 3.
"""


class LongregError(Exception):
    """Base class for all errors raised by this package."""


class ValidationFailure(LongregError):
    """Input data or configuration violates a documented precondition."""


class RotationNearPi(ValidationFailure):
    """Rotation angle within 1e-6 of pi, where the matrix log is ill posed."""


class NotARigidTransform(ValidationFailure):
    """Matrix is not a proper rigid transform (orthonormality or det +1 fails)."""


class NonFiniteField(ValidationFailure):
    """A vector field contains NaN or infinite components."""


class NonFiniteIntensities(ValidationFailure):
    """An image contains NaN or infinite intensities."""


class GridMismatch(ValidationFailure):
    """Two objects that must share a sampling grid do not."""


class UnsupportedDimensionality(ValidationFailure):
    """Volume file is neither 3D nor 4D with a length-3 vector axis."""


class ParseError(ValidationFailure):
    """File contents could not be decoded; message names the byte offset."""


class IoError(LongregError):
    """Read or write failed at the filesystem level."""


class UnknownLabel(ValidationFailure):
    """A requested label id is absent from the label table."""


class EmptyLabel(ValidationFailure):
    """A label selected for centroid computation has no voxels."""


class LabelMismatch(ValidationFailure):
    """Two label maps do not share the label set an operation requires."""


class DegenerateConfiguration(ValidationFailure):
    """Centroid set is too small or collinear for a rigid fit."""


class DisconnectedGraph(ValidationFailure):
    """Observation graph does not connect all timepoints."""


class DuplicateEdge(ValidationFailure):
    """The same (ref, target, kind) edge appears more than once."""


class UnknownNode(ValidationFailure):
    """An edge references a timepoint id missing from the node list."""


class Unbounded(LongregError):
    """Linear program is unbounded below (should not occur for valid input)."""


class Infeasible(LongregError):
    """Linear program has no feasible point (should not occur for valid input)."""


class NumericalFailure(LongregError):
    """Solver exceeded its pivot budget or lost feasibility."""


class MissingLatentTransform(ValidationFailure):
    """A pipeline stage needs a latent transform that was never solved."""


class DegenerateTimes(ValidationFailure):
    """All acquisition times coincide, so no trajectory slope exists."""


class InsufficientTimepoints(ValidationFailure):
    """Fewer timepoints than the operation requires."""


class MissingLabels(ValidationFailure):
    """A timepoint lacks the label map an operation requires."""


class ZeroDenominator(ValidationFailure):
    """Denominator of a ratio statistic is zero."""


class InvalidDesign(ValidationFailure):
    """Study design parameters are out of range."""


class InsufficientSamples(ValidationFailure):
    """Too few subjects per group for the requested test."""


class SingularCovariance(LongregError):
    """Pooled covariance is singular at some voxel."""


class NamingConvention(ValidationFailure):
    """External registration file name does not encode ref and target ids."""
