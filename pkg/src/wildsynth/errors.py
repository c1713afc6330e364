"""Exception types used across the pipeline."""


class WildsynthError(Exception):
    """Base class for all pipeline errors."""


class IngestError(WildsynthError):
    pass


class MalformedFileError(IngestError):
    """Detector output document could not be parsed."""


class EmptyFileError(IngestError):
    """Detector output document contains zero images."""


class CurationError(WildsynthError):
    pass


class InsufficientPoolError(CurationError):
    """Requested sample size exceeds the candidate pool."""


class EditorError(WildsynthError):
    pass


class UnknownSpeciesError(EditorError):
    """Species is not in the taxonomy table."""


class BackendError(EditorError):
    """Backend failed permanently (after retries, if retryable)."""


class TransientBackendError(BackendError):
    """Backend failure worth retrying (transport error, 5xx)."""


class GeometryError(EditorError):
    """Image geometry is incompatible (mismatched size, rect out of bounds)."""


class QcError(WildsynthError):
    pass


class QcGeometryError(QcError):
    """Image pair dimensions do not match."""


class NoScenePixelsError(QcError):
    """The change mask plus edge margins left nothing to score."""


class ManifestCorruptError(WildsynthError):
    """Manifest file could not be parsed; includes recovery instructions."""


class EvalError(WildsynthError):
    pass


class SchemaError(EvalError):
    """Feature file violates the declared schema."""


class DegenerateInputError(EvalError):
    """Input lacks the class structure the operation requires."""
