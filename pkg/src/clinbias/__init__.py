"""Measure intrinsic and extrinsic clinical bias of language models.

Intrinsic: association-test probing of next-token probabilities between
diagnosis descriptions and demographic name stimuli, scored with the
normalized mean absolute deviation (AssocMAD) at each level of the
ICD-10-CM hierarchy.

Extrinsic: counterfactual demographic interventions on admission notes,
scored as the change in hierarchical recall of predicted diagnoses.
"""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ClinbiasError,
    CodeLookupError,
    IncompleteRunError,
    IngestError,
    ParseError,
    StructuralError,
    TemplateError,
    TransportError,
    ValidationError,
)

__all__ = [
    "CapabilityError",
    "ClinbiasError",
    "CodeLookupError",
    "IncompleteRunError",
    "IngestError",
    "ParseError",
    "StructuralError",
    "TemplateError",
    "TransportError",
    "ValidationError",
    "__version__",
]
