"""Exception types raised by this package."""


class SpikeplastError(Exception):
    """Base class for every fault raised by this package."""


class ConfigError(SpikeplastError, ValueError):
    """Invalid configuration value or mismatched shape."""


class NumericalDivergence(SpikeplastError, FloatingPointError):
    """A membrane potential or input current stopped being finite."""

    def __init__(self, layer, index, what="membrane potential"):
        self.layer = layer
        self.index = index
        super().__init__(f"non-finite {what} in layer {layer!r} at index {index}")


class DegenerateWeights(SpikeplastError, ValueError):
    """Weight normalization hit a zero mean or zero spread."""

    def __init__(self, kind, index):
        self.kind = kind
        self.index = index
        super().__init__(f"cannot normalize {kind} {index}: degenerate weights")


class DataFormatError(SpikeplastError, ValueError):
    """Base class for dataset file faults."""


class BadMagic(DataFormatError):
    pass


class TruncatedFile(DataFormatError):
    pass


class CountMismatch(DataFormatError):
    pass


class InsufficientSamples(DataFormatError):
    pass


class BadLabel(DataFormatError):
    def __init__(self, value):
        super().__init__(f"label {value} outside [0, 9]")


class CheckpointError(SpikeplastError):
    """Unreadable or corrupted checkpoint container."""


class SpecMismatch(SpikeplastError, ValueError):
    """A checkpoint does not fit the data or configuration it is used with."""
