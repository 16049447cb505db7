"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front-end can map
failures to distinct process exit statuses.
"""


class MKVError(Exception):
    exit_code = 10


# configuration ---------------------------------------------------------------

class ParseError(MKVError):
    exit_code = 2


class SchemaError(MKVError):
    exit_code = 3


class ValidationError(MKVError):
    exit_code = 4


# chain -----------------------------------------------------------------------

class QMatrixError(MKVError):
    exit_code = 11


class NonConservative(QMatrixError):
    pass


class NegativeRate(QMatrixError):
    pass


class Reducible(QMatrixError):
    pass


class SolveFailed(QMatrixError):
    pass


# generic shape problems ------------------------------------------------------

class LengthMismatch(MKVError, ValueError):
    exit_code = 12


class DimensionMismatch(LengthMismatch):
    pass


class SizeMismatch(LengthMismatch):
    pass


class TooLarge(MKVError, ValueError):
    exit_code = 13


class NonPositiveData(MKVError, ValueError):
    exit_code = 14


# model -----------------------------------------------------------------------

class ModelError(MKVError):
    exit_code = 15


class UnknownModel(ModelError):
    pass


class StateMismatch(ModelError):
    pass


class GNotStateFree(ModelError):
    pass


class EnvelopeViolated(ModelError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


# simulation ------------------------------------------------------------------

class SimulationError(MKVError):
    exit_code = 16


class NonFiniteState(SimulationError):
    def __init__(self, message, particle=None, time=None, index=None):
        super().__init__(message)
        self.particle = particle
        self.time = time
        self.index = index


class GridMismatch(SimulationError):
    pass


class NoConvergence(SimulationError):
    exit_code = 17

    def __init__(self, message, distances=()):
        super().__init__(message)
        self.distances = list(distances)


# experiments -----------------------------------------------------------------

class ExperimentError(MKVError):
    exit_code = 18


class InsufficientReplicates(ExperimentError):
    pass


class InequalityViolated(ExperimentError):
    exit_code = 19

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
