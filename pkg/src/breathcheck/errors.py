"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`BreathcheckError` so the
CLI can map it to an exit code without catching unrelated failures.
"""

from __future__ import annotations


class BreathcheckError(Exception):
    """Base class for all domain errors."""


# ---------------------------------------------------------------- config


class ConfigError(BreathcheckError):
    """Problem with a Darknet network configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownSection(ConfigError):
    def __init__(self, name: str, line: int):
        self.name = name
        super().__init__(f"unknown section [{name}]", line)


class DuplicateNetSection(ConfigError):
    def __init__(self, line: int):
        super().__init__("duplicate [net] section", line)


class MissingNetSection(ConfigError):
    def __init__(self, line: int | None = None):
        super().__init__("[net] must be the first section", line)


class MalformedLine(ConfigError):
    def __init__(self, line: int, text: str = ""):
        self.text = text
        super().__init__(f"malformed line {text!r}", line)


class InvalidParameter(ConfigError):
    def __init__(self, layer: int, key: str, value: str, line: int | None = None):
        self.layer = layer
        self.key = key
        super().__init__(f"layer {layer}: invalid {key}={value!r}", line)


class DanglingReference(ConfigError):
    def __init__(self, layer: int, ref: int, line: int | None = None):
        self.layer = layer
        self.ref = ref
        super().__init__(f"layer {layer} references layer {ref}, which is not an earlier layer", line)


class UnsupportedFeature(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    def __init__(self, layer: int, expected, got, line: int | None = None):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer}: shape mismatch, expected {expected}, got {got}", line)


class NonPositiveShape(ConfigError):
    def __init__(self, layer: int, shape, line: int | None = None):
        self.layer = layer
        self.shape = shape
        super().__init__(f"layer {layer}: non-positive output shape {shape}", line)


class YoloWithoutHeadConv(ConfigError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"yolo layer {layer} is not preceded by a convolutional layer")


class IndexOutOfRange(ConfigError):
    def __init__(self, index: int, count: int):
        self.index = index
        super().__init__(f"index {index} outside [0, {count}]")


# --------------------------------------------------------------- weights


class WeightsError(BreathcheckError):
    pass


class TruncatedFile(WeightsError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"weights file truncated: expected {expected} bytes, got {got}")


class TrailingBytes(WeightsError):
    def __init__(self, count: int):
        self.count = count
        super().__init__(f"{count} trailing bytes after last layer (config/weights mismatch?)")


class NonFiniteValue(WeightsError):
    def __init__(self, layer: int, offset: int):
        self.layer = layer
        self.offset = offset
        super().__init__(f"non-finite value in layer {layer} at float offset {offset}")


class NegativeVariance(WeightsError):
    def __init__(self, layer: int, channel: int):
        self.layer = layer
        self.channel = channel
        super().__init__(f"negative rolling variance in layer {layer}, channel {channel}")


# ---------------------------------------------------------------- kernels


class KernelError(BreathcheckError):
    pass


class ChannelMismatch(KernelError):
    pass


class SpatialMismatch(KernelError):
    pass


class TensorShapeMismatch(KernelError):
    pass


class InputShapeMismatch(KernelError):
    pass


class ChannelCountMismatch(KernelError):
    pass


# ---------------------------------------------------------------- dataset


class DatasetError(BreathcheckError):
    pass


class MalformedXml(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingSize(DatasetError):
    pass


class EmptyObjectName(DatasetError):
    pass


class InvalidBox(DatasetError):
    pass


class UnknownClass(DatasetError):
    def __init__(self, name: str, names_path: str | None = None):
        self.name = name
        self.names_path = names_path
        where = f" (names file: {names_path})" if names_path else ""
        super().__init__(f"class {name!r} not in names list{where}")


class EmptyDataset(DatasetError):
    pass


class IoFailure(DatasetError):
    def __init__(self, path, reason: str = ""):
        self.path = path
        super().__init__(f"cannot write {path}: {reason}")


# ----------------------------------------------------------- verification


class VerificationError(BreathcheckError):
    pass


class PolicyInvalid(VerificationError):
    pass


class InvalidState(VerificationError):
    pass


class NoEvidence(VerificationError):
    pass


class OracleUnavailable(VerificationError):
    pass


class RetryableError(VerificationError):
    """Transport failure that may succeed on another attempt."""


class ProtocolError(VerificationError):
    pass


class BindFailure(VerificationError):
    pass
