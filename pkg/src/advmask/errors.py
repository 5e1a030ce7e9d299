"""Exception hierarchy shared by every advmask module."""


class AdvMaskError(Exception):
    """Base class. ``exit_code`` is what the command line front end returns."""

    exit_code = 1

    def __init__(self, message="", **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self)}
        out.update({k: str(v) for k, v in self.context.items()})
        return out


class InputError(AdvMaskError):
    """Bad user input or missing asset; maps to exit code 2."""

    exit_code = 2


# renderer
class NoFaceFound(InputError):
    pass


class BackendUnavailable(InputError):
    pass


class ReconstructionFailed(AdvMaskError):
    pass


class InvalidConfig(InputError):
    pass


class OutOfFrame(AdvMaskError):
    pass


class RenderFailure(AdvMaskError):
    pass


# embeddings
class ShapeMismatch(InputError):
    pass


class AssetMissing(InputError):
    pass


class ZeroVector(AdvMaskError):
    pass


class EmptyIdentity(InputError):
    pass


class UnknownModel(InputError):
    pass


class ChecksumMismatch(InputError):
    pass


class GalleryFormatError(InputError):
    pass


# optimization
class MissingIdentity(InputError):
    pass


class MixedIdentities(InputError):
    pass


class NonFiniteLoss(AdvMaskError):
    pass


# evaluation
class EmptyProbeSet(InputError):
    pass


class NoDetections(AdvMaskError):
    pass
