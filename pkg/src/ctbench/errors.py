"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``category`` so the CLI can
emit category-coded messages and a stable exit status.
"""


class CTBenchError(Exception):
    category = "error"


class ParameterError(CTBenchError, ValueError):
    """Invalid argument value or out-of-bounds parameter."""

    category = "parameter"


class FormatError(CTBenchError):
    """Missing or malformed on-disk sidecar/metadata."""

    category = "format"


class IntegrityError(CTBenchError):
    """Raw payload inconsistent with its sidecar (e.g. length mismatch)."""

    category = "integrity"


class UnknownLabelError(CTBenchError, KeyError):
    """Label id not present in a LabelVolume table."""

    category = "label"


class PhantomSpecError(CTBenchError):
    """Invalid phantom specification (e.g. overlapping structures)."""

    category = "phantom-spec"


class PipelineError(CTBenchError):
    """A staged CLI run is missing an upstream artifact."""

    category = "pipeline"


class EvaluationError(CTBenchError):
    """Evaluation inputs are inconsistent (e.g. grid mismatch)."""

    category = "evaluation"
