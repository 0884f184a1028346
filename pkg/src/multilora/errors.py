"""Error types shared across the package.

Every error carries a ``kind`` string. The HTTP layer maps kinds to status
codes, so a kind is part of the public contract.
"""

from __future__ import annotations


class LoraError(Exception):
    kind = "error"


class ShapeError(LoraError, ValueError):
    kind = "shape"


class DomainError(LoraError, ValueError):
    kind = "domain"


class ValidationError(LoraError, ValueError):
    kind = "validation"


# -- adapter file format --------------------------------------------------


class RegistryError(LoraError):
    kind = "registry"


class FormatError(RegistryError):
    kind = "format"


class UnsupportedVersionError(RegistryError):
    kind = "unsupported-version"


class TruncationError(RegistryError):
    kind = "truncation"

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class CorruptionError(RegistryError):
    kind = "corruption"


# -- bank / engine ----------------------------------------------------------


class UnknownAdapterError(LoraError, KeyError):
    kind = "unknown-id"

    def __init__(self, adapter_id: str, index: int | None = None):
        self.adapter_id = adapter_id
        self.index = index
        if index is None:
            msg = f"unknown adapter {adapter_id!r}"
        else:
            msg = f"unknown adapter {adapter_id!r} at request index {index}"
        super().__init__(msg)

    def __str__(self) -> str:
        # KeyError would otherwise repr() the message
        return str(self.args[0])


class DuplicateIdError(LoraError):
    kind = "duplicate-id"


class CapacityExhaustedError(LoraError):
    kind = "capacity-exhausted"


class RankOverflowError(LoraError, ValueError):
    kind = "rank-overflow"


class LayerMismatchError(LoraError, ValueError):
    kind = "layer-mismatch"


class InvalidMaskError(LoraError, ValueError):
    kind = "invalid-mask"


class MixedBatchError(LoraError, ValueError):
    kind = "mixed-batch"


class TokenOutOfVocabError(LoraError, ValueError):
    kind = "out-of-vocab"


class UnsortedTraceError(LoraError, ValueError):
    kind = "unsorted-trace"
