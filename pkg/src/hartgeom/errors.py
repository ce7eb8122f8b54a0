"""Exception hierarchy.

Every error raised by the library derives from :class:`HartGeomError`, so
callers (the CLI in particular) can separate domain failures from bugs.
"""


class HartGeomError(Exception):
    """Base class for all library errors."""


# -- I/O ---------------------------------------------------------------------

class FormatError(HartGeomError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnsupportedElement(FormatError):
    pass


class NonTriangleFace(FormatError):
    pass


class MissingField(FormatError):
    pass


class NotARotation(HartGeomError, ValueError):
    pass


# -- geometry ----------------------------------------------------------------

class ZeroSumVector(HartGeomError, ValueError):
    pass


class EmptyCloud(HartGeomError, ValueError):
    pass


class DegenerateBounds(HartGeomError, ValueError):
    pass


class EmptyMesh(HartGeomError, ValueError):
    pass


class CountMismatch(HartGeomError, ValueError):
    pass


# -- cameras -----------------------------------------------------------------

class DegenerateConfiguration(HartGeomError, ValueError):
    pass


class RankDeficient(HartGeomError, ValueError):
    pass


class NoConsensus(HartGeomError, RuntimeError):
    pass


class DegenerateSource(HartGeomError, ValueError):
    pass


# -- poisson -----------------------------------------------------------------

class OutOfDomain(HartGeomError, ValueError):
    pass


class ResolutionNotSupported(HartGeomError, ValueError):
    pass


class ResolutionMismatch(HartGeomError, ValueError):
    pass


class NotWatertight(HartGeomError, ValueError):
    pass


class EmptyLevelSet(HartGeomError, ValueError):
    pass


# -- body fitting ------------------------------------------------------------

class AllMarkersEmpty(HartGeomError, ValueError):
    pass


class TooFewMarkers(HartGeomError, ValueError):
    pass


class DivergedSolve(HartGeomError, RuntimeError):
    pass


# -- losses ------------------------------------------------------------------

class NonPositiveConfidence(HartGeomError, ValueError):
    pass


class NonUnitNormal(HartGeomError, ValueError):
    pass


class NonFiniteComponent(HartGeomError, ValueError):
    pass
