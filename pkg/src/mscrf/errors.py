"""Exception hierarchy shared across the pipeline.

Two broad families matter to callers: configuration problems (bad experiment
files, unknown descriptor names) and data problems (unreadable images,
mismatched shapes, degenerate training sets).  The CLI maps the former to
exit code 2 and the latter to exit code 3.
"""


class MscrfError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MscrfError):
    """An experiment configuration is malformed or internally inconsistent."""


class DataError(MscrfError):
    """Input data is missing, unreadable, or violates a pipeline contract."""


# --- image / manifest loading -------------------------------------------------

class DecodeError(DataError):
    """A file on disk could not be decoded into the expected layout."""


class DimensionMismatch(DataError):
    """Planes or fields that must share dimensions do not."""


class UnknownLabel(DataError):
    """A mask contains a label id outside the declared label set."""


class ManifestError(DataError):
    """A dataset manifest is missing fields or references bad values."""


# --- channels -----------------------------------------------------------------

class MissingChannel(DataError):
    """A required channel plane is not present on the image."""


class MissingNIR(MissingChannel):
    """An operation that needs the near-infrared plane got a visible-only image."""


# --- patches / descriptors ----------------------------------------------------

class ImageTooSmall(DataError):
    """The image cannot host even one base-size patch."""


# --- encoding / training ------------------------------------------------------

class InsufficientSamples(DataError):
    """Fewer samples than the estimator has parameters to fit."""


class SingleClassData(DataError):
    """Supervised training received fewer than two distinct classes."""


# --- fields / fusion ----------------------------------------------------------

class ShapeMismatch(DataError):
    """Arrays that must agree in shape or class layout do not."""


class UncoveredPixel(DataError):
    """A pixel is covered by no patch window, so it has no posterior."""


class WrongMode(DataError):
    """An operation valid in one dataset mode was applied in the other."""


# --- CRF ----------------------------------------------------------------------

class NonMetricPairwise(DataError):
    """The pairwise term is not a metric, so expansion moves are unsound."""


# --- evaluation ---------------------------------------------------------------

class EmptyMatrix(DataError):
    """A confusion matrix with zero total count cannot be summarised."""


class EmptyBand(DataError):
    """No boundary pixels exist, so trimap bands are empty everywhere."""


class LengthMismatch(DataError):
    """Paired score vectors differ in length."""


class FoldMismatch(DataError):
    """Two reports being compared were produced on different splits."""
