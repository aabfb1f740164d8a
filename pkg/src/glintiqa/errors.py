"""Exception hierarchy. Every error carries a module-qualified code such as
``fusion_core.alignment`` so the CLI can report where a failure came from."""


class GlintError(Exception):
    module = "glintiqa"
    kind = "error"

    def __init__(self, message, *, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    @property
    def code(self):
        return f"{self.module}.{self.kind}"


class DimensionError(GlintError, ValueError):
    kind = "dimension"


class ConfigError(GlintError, ValueError):
    kind = "config"


class InitializationError(GlintError, RuntimeError):
    kind = "initialization"


class NumericError(GlintError, ArithmeticError):
    kind = "numeric"


class AlignmentError(GlintError, ValueError):
    kind = "alignment"


class CapabilityError(GlintError, NotImplementedError):
    kind = "capability"


class DataError(GlintError, KeyError):
    kind = "data"

    def __str__(self):
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class InputError(GlintError, ValueError):
    kind = "input"


class ProtocolError(GlintError, ValueError):
    kind = "protocol"


class UndefinedCorrelationError(NumericError):
    kind = "undefined_correlation"


class TrainingError(GlintError, RuntimeError):
    kind = "training"
