class QuantkitError(Exception):
    pass


class DimensionError(QuantkitError):
    """ Operand shapes do not agree """
    pass


class ContractError(QuantkitError):
    """ A documented precondition of an operation was violated """
    pass


class NumericalError(QuantkitError):
    """ NaN/Inf values, divergence or arithmetic overflow """

    def __init__(self, message, trace=None):
        super(NumericalError, self).__init__(message)
        self.trace = trace or []


class UnsupportedPatternError(QuantkitError):
    """ A graph transform met a node pattern it cannot handle """

    def __init__(self, message, nodes=None):
        super(UnsupportedPatternError, self).__init__(message)
        self.nodes = list(nodes or [])
