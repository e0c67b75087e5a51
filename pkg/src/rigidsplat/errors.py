"""Exception hierarchy shared by every stage of the pipeline."""


class RigidSplatError(Exception):
    """Base class. ``stage`` is filled in by the CLI when an error escapes."""

    stage: str | None = None

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "stage": self.stage, "message": str(self)}


# geometry
class DegenerateRotation(RigidSplatError):
    pass


class NearPiRotation(RigidSplatError):
    pass


class BehindCamera(RigidSplatError):
    pass


# tensorio
class MissingFile(RigidSplatError):
    pass


class DimensionMismatch(RigidSplatError):
    pass


class MalformedManifest(RigidSplatError):
    pass


class UnsupportedFormat(RigidSplatError):
    pass


class CorruptHeader(RigidSplatError):
    pass


# correspondence / pnp / ba
class OutOfBounds(RigidSplatError):
    pass


class EmptyRegion(RigidSplatError):
    pass


class DegenerateConfiguration(RigidSplatError):
    pass


class InsufficientInliers(RigidSplatError):
    pass


class NonFiniteLoss(RigidSplatError):
    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite loss at iteration {iteration} in term '{term}'")
        self.iteration = iteration
        self.term = term


# splat / field
class NoValidPixels(RigidSplatError):
    pass


class Clipped(RigidSplatError):
    pass


class StaleIntermediates(RigidSplatError):
    pass


class UnknownRegion(RigidSplatError):
    pass


# synthgen
class ConfigInfeasible(RigidSplatError):
    pass


class CheckpointError(RigidSplatError):
    pass
