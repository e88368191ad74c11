"""Exception hierarchy shared by all shockfusion modules."""


class ShockFusionError(Exception):
    """Base class for every error raised by this package."""


# field I/O
class MalformedHeader(ShockFusionError, ValueError):
    pass


class CountMismatch(ShockFusionError, ValueError):
    pass


class NonNumericToken(ShockFusionError, ValueError):
    def __init__(self, token, line_no):
        super().__init__(f"non-numeric token {token!r} on line {line_no}")
        self.token = token
        self.line_no = line_no


class LengthMismatch(ShockFusionError, ValueError):
    pass


class DegenerateGrid(ShockFusionError, ValueError):
    pass


# reference solver
class UnstableStep(ShockFusionError, FloatingPointError):
    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite solution at step {step}")
        self.step = step


# calibration
class RankDeficient(ShockFusionError, ValueError):
    pass


class NoGradientSignal(ShockFusionError, ValueError):
    pass


# neural core
class ShapeMismatch(ShockFusionError, ValueError):
    pass


class StaleCache(ShockFusionError, RuntimeError):
    pass


class NoStochasticLayers(ShockFusionError, ValueError):
    pass


# training
class TooFewGroups(ShockFusionError, ValueError):
    pass


class DivergedTraining(ShockFusionError, RuntimeError):
    pass


# evaluation
class ZeroReference(ShockFusionError, ValueError):
    pass


class ZeroRange(ShockFusionError, ValueError):
    pass


class EmptySelection(ShockFusionError, ValueError):
    pass
