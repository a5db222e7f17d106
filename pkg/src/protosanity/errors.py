"""Exception hierarchy shared by every module of the package."""


class ProtoSanityError(Exception):
    """Base class for all errors raised by protosanity."""


class InvalidArgumentError(ProtoSanityError, ValueError):
    pass


class EmptySelectionError(ProtoSanityError, ValueError):
    pass


class InvalidStateError(ProtoSanityError, RuntimeError):
    pass


class UnsupportedOperationError(ProtoSanityError, NotImplementedError):
    pass


class TrainingDivergedError(ProtoSanityError, ArithmeticError):
    pass


class UndefinedRatioError(ProtoSanityError, ArithmeticError):
    """The reference similarity is not strictly positive, so tau(a) is undefined."""


class ConservationError(ProtoSanityError, RuntimeError):
    """Relevance propagation lost or created more relevance than allowed."""


class BundleError(ProtoSanityError, IOError):
    """Base class for model bundle load failures."""


class BundleFormatError(BundleError):
    pass


class BundleVersionError(BundleError):
    pass


class BundleTruncatedError(BundleError):
    pass


class BundleChecksumError(BundleError):
    pass
