"""Exception hierarchy shared across the toolkit."""


class SculptorError(Exception):
    """Base class for all toolkit errors."""


# --- geometry / alignment ---

class FewerThanThreeCorrespondences(SculptorError):
    pass


class CollinearLandmarks(SculptorError):
    pass


class EmptyMesh(SculptorError):
    pass


class MissingNormals(SculptorError):
    pass


class NoMatchedNames(SculptorError):
    pass


class TopologyMismatch(SculptorError):
    pass


# --- mesh I/O ---

class ParseError(SculptorError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class UnsupportedFormat(SculptorError):
    pass


# --- deformation / registration ---

class SigmaTooLargeForMesh(SculptorError):
    pass


class DimensionMismatch(SculptorError):
    pass


class NonFiniteEnergy(SculptorError):
    pass


class DivergedOptimization(SculptorError):
    pass


# --- model ---

class RankMismatch(SculptorError):
    pass


class NonFiniteParams(SculptorError):
    pass


class NoTarget(SculptorError):
    pass


class VersionMismatch(SculptorError):
    pass


class ChecksumFailure(SculptorError):
    pass


# --- learning ---

class RankExceedsData(SculptorError):
    pass


class NoPairs(SculptorError):
    pass


# --- applications ---

class EmptyMask(SculptorError):
    pass


class SameDonor(SculptorError):
    pass


class FewerThanTwoFits(SculptorError):
    pass
