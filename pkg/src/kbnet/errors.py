class KBNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(KBNetError, ValueError):
    pass


class BehindCameraError(KBNetError, ValueError):
    pass


class DegenerateWarpError(KBNetError, RuntimeError):
    """No pixel of a reconstruction survived the validity mask."""


class NoValidPixelsError(KBNetError, ValueError):
    pass


class TrainingFault(KBNetError, RuntimeError):
    """A loss term, gradient or update became non-finite."""


class ConfigError(KBNetError, ValueError):
    """Invalid run configuration; the message names the offending key."""


class CheckpointError(KBNetError, ValueError):
    pass
