class HarmonyError(Exception):
    pass


class InvalidShape(HarmonyError):
    pass


class ShapeError(HarmonyError):
    pass


class InvalidHeadDim(HarmonyError):
    pass


class UnsupportedOp(HarmonyError):
    pass


class NumericalError(HarmonyError):
    def __init__(self, msg: str, *, layer: int | None = None, step: int | None = None):
        super().__init__(msg)
        self.layer = layer
        self.step = step


class TooManyEvents(HarmonyError):
    pass


class MissingReference(HarmonyError):
    pass


class CorruptCheckpoint(HarmonyError):
    pass


class IncompatibleCheckpoint(HarmonyError):
    pass


class ConfigError(HarmonyError):
    pass
