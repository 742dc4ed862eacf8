"""Exception hierarchy shared by every module.

Each class carries a stable ``code`` that the command-line front end uses as
its process exit status.
"""


class PosiError(Exception):
    code = 1


class ConfigError(PosiError, ValueError):
    code = 2


class DesignError(PosiError, ValueError):
    code = 3


class RankError(DesignError):
    code = 4


class SelectorError(PosiError, ValueError):
    code = 5


class BudgetError(PosiError, ValueError):
    code = 6


class ConvergenceError(PosiError, RuntimeError):
    code = 7

    def __init__(self, message, lambda_index=None):
        super().__init__(message)
        self.lambda_index = lambda_index


class QuadratureError(PosiError, RuntimeError):
    code = 8

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class OutputError(PosiError, OSError):
    code = 9
