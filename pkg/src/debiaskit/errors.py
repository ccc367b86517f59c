"""Exception types shared across the toolkit.

Grouped by the surface that raises them; the CLI maps groups to exit codes.
"""


class DebiasKitError(Exception):
    """Base class for all toolkit errors."""


# --- tensor / graph layer ---

class ShapeMismatch(DebiasKitError):
    pass


class NonFinite(DebiasKitError):
    pass


class NotScalar(DebiasKitError):
    pass


class ZeroNorm(DebiasKitError):
    pass


# --- tokenizer / encoder ---

class EmptyText(DebiasKitError):
    pass


class IdOutOfRange(DebiasKitError):
    pass


# --- lexicon / corpus ingestion ---

class MalformedLexicon(DebiasKitError):
    pass


class MalformedLine(DebiasKitError):
    pass


class EmptyCorpus(DebiasKitError):
    pass


class BatchTooSmall(DebiasKitError):
    pass


# --- objective ---

class NonPositiveTau(DebiasKitError):
    pass


class NoMaskedPositions(DebiasKitError):
    pass


# --- trainer ---

class DivergedLoss(DebiasKitError):
    pass


class DegenerateLabels(DebiasKitError):
    pass


class LabelOutOfRange(DebiasKitError):
    pass


# --- checkpoint file ---

class BadMagic(DebiasKitError):
    pass


class VersionMismatch(DebiasKitError):
    pass


class TruncatedFile(DebiasKitError):
    pass


class ManifestMismatch(DebiasKitError):
    pass


# --- metrics ---

class EmptyInput(DebiasKitError):
    pass


class MissingGender(DebiasKitError):
    pass


class BadTau(DebiasKitError):
    pass


class OutOfRange(DebiasKitError):
    pass


class MalformedItemFile(DebiasKitError):
    pass


class DimMismatch(DebiasKitError):
    pass


class EmptySet(DebiasKitError):
    pass


# --- config ---

class ConfigError(DebiasKitError):
    pass
