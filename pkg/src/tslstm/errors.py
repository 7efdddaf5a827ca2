"""Exception hierarchy shared by every module."""


class TsLstmError(Exception):
    pass


class ShapeError(TsLstmError, ValueError):
    pass


class EmptyInputError(TsLstmError, ValueError):
    pass


class ConfigError(TsLstmError, ValueError):
    pass


class VocabularyError(TsLstmError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class LoadError(TsLstmError, OSError):
    pass


class MetricError(TsLstmError, ValueError):
    pass


class TrainingError(TsLstmError, RuntimeError):
    pass
