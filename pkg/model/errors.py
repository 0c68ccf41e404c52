class AP2Error(Exception):
    pass



class ShapeError(AP2Error, ValueError):
    pass


class MomentError(AP2Error, ValueError):
    pass


class UnsupportedLayerError(AP2Error):
    pass


class NumericalError(AP2Error, ArithmeticError):
    pass


class DataError(AP2Error):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super(DataError, self).__init__(message)
        self.offset = offset


class ConfigError(AP2Error):
    pass


class AutodiffError(AP2Error):
    pass


class OracleError(AP2Error):
    pass


class VerificationError(AP2Error):
    pass


class StateError(AP2Error):
    pass
