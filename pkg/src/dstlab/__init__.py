"""Desk-scale dialogue state tracking laboratory.

Pipeline pieces: task schema (`schema`), dialogue corpora and a synthetic
generator (`corpus`), utterance-insertion perturbation (`perturbation`),
a toy transformer encoder with MLM machinery (`encoder`), the hierarchical
slot-status prediction stack (`dst_model`), the joint training loop
(`training`), bucketed JGA evaluation (`evaluation`), and the `dstlab`
command line (`cli`).
"""

__version__ = "0.1.0"


class DstLabError(Exception):
    """Base class for errors raised by dstlab contracts."""


class SchemaError(DstLabError):
    pass


class CorpusError(DstLabError):
    pass


class PerturbationError(DstLabError):
    pass


class EncodingError(DstLabError):
    pass


class TrainingDiverged(DstLabError):
    pass


class EvaluationError(DstLabError):
    pass
