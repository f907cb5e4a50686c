"""
Definitions of pyLoRAOver exceptions
"""
import logging


class LoRAOverException(Exception):
    """Basic Exception class for pyLoRAOver"""
    def __init__(self, *args):
        if len(args) > 0:
            logger = logging.getLogger('LoRAOver')
            logger.error(args[0])
        super().__init__(*args)


class InvalidInput(LoRAOverException):
    """Errors caused by the caller's input. The CLI maps them to exit code 2."""
    pass


class SizeMismatch(InvalidInput):
    pass


class BadWildcard(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class FactorProductMismatch(InvalidInput):
    pass


class BadBondCap(InvalidInput):
    pass


class PlanMismatch(InvalidInput):
    pass


class AlreadyFactored(InvalidInput):
    pass


class ParameterInvalid(InvalidInput):
    pass


class ConfigError(InvalidInput):
    pass


class TensorFileError(InvalidInput):
    pass


class NonFinite(LoRAOverException):
    pass


class DidNotConverge(LoRAOverException):
    pass


class MissingAccumulator(LoRAOverException):
    pass


class VerificationFailed(LoRAOverException):
    pass
