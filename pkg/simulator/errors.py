class SimulationError(Exception):
    """Base class for every fault raised by the simulator."""


class ConfigError(SimulationError, ValueError):
    """Invalid experiment, graph or parameter configuration."""


class ModelFault(SimulationError):
    """The simulated system reached a state the model forbids."""


class UnknownCircuitError(SimulationError, KeyError):
    pass


class ConnectionClosedError(SimulationError):
    pass


class EmptySeriesError(SimulationError, ValueError):
    pass


class SpecMismatchError(SimulationError, ValueError):
    """Two runs differ in more than their scheduling policy."""


class EventFault(SimulationError):
    """An event handler raised; carries the offending event."""

    def __init__(self, event, cause: BaseException):
        self.event = event
        self.cause = cause
        super().__init__(f"handler for {event} failed: {cause!r}")
