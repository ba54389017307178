import os
from contextlib import contextmanager
from typing     import Iterator, Union

import numpy as np


class CSUNetError(Exception):
    pass

class ShapeError(CSUNetError):
    pass

class NonFiniteError(CSUNetError):
    pass

class TapeError(CSUNetError):
    pass

class TapeConsumedError(TapeError):
    pass

class DuplicateParameter(CSUNetError):
    pass

class UnknownBlock(CSUNetError):
    pass

class InvalidTarget(CSUNetError):
    pass

class TrainingDiverged(CSUNetError):
    pass

class GradCheckError(CSUNetError):
    pass

class PhantomOutOfBounds(CSUNetError):
    pass

class FormatError(CSUNetError):
    pass

class BadMagic(FormatError):
    pass

class UnsupportedVersion(FormatError):
    pass

class UnknownDtype(FormatError):
    pass

class TruncatedPayload(FormatError):
    pass

class ConfigMismatch(FormatError):
    pass

class ManifestError(CSUNetError):
    pass

class MissingVolume(ManifestError):
    pass

class DuplicateSample(ManifestError):
    pass


PRECISIONS = {
    "float32": np.float32,
    "float64": np.float64,
}

_precision = {"dtype": np.float32}


def get_precision() -> type:
    """ dtype every new Tensor is created with """
    return _precision["dtype"]

def set_precision(name: Union[str, type]):
    if isinstance(name, str):
        if name not in PRECISIONS:
            raise ValueError(f"Unknown precision '{name}', expected one of {list(PRECISIONS)}")
        name = PRECISIONS[name]
    _precision["dtype"] = name

@contextmanager
def precision(name: Union[str, type]) -> Iterator[None]:
    """precision

    Temporarily switch the tensor precision, e.g. `with precision("float64"):` for
    gradient checks.
    """
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def thread_count() -> int:
    """ worker threads allowed by CSUNET_THREADS (0 means single-thread deterministic mode) """
    value = os.environ.get("CSUNET_THREADS", "0")
    try:
        return max(0, int(value))
    except ValueError:
        raise ValueError(f"CSUNET_THREADS must be an integer, got '{value}'")


def triple(value: Union[int, tuple, list], name: str = "value") -> tuple:
    """ normalise an int or a 3-sequence to a 3-tuple of ints """
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"{name} must have 3 entries, got {value}")
    return value


AXIS_NAMES = ("depth", "height", "width")
