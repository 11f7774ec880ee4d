"""Exception hierarchy. Every error carries a module-qualified code."""


class IsqError(Exception):
    module = "isquant"

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message

    @property
    def qualified_code(self):
        return f"{self.module}.{self.code}"

    def __str__(self):
        return f"[{self.qualified_code}] {self.message}"


class TensorError(IsqError):
    module = "tensor"


class OverflowError32(TensorError):
    """Integer accumulation left the int32 range."""

    def __init__(self, message):
        super().__init__("int32_overflow", message)


class GraphError(IsqError):
    module = "model_graph"


class FoldError(IsqError):
    module = "bnfold"


class QuantError(IsqError):
    module = "quantizer"


class CalibError(IsqError):
    module = "squant_calib"


class EngineError(IsqError):
    module = "engine"


class EvalError(IsqError):
    module = "metrics_eval"
