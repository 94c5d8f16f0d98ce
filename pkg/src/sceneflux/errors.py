"""Exception types shared across the package."""


class SceneFluxError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(SceneFluxError):
    """Inputs that must share a grid shape do not."""


class DegenerateFlow(SceneFluxError):
    """Flow statistics too small to classify."""


class NonPositiveDepth(SceneFluxError):
    """Depth values must be strictly positive."""


class TooFewCameras(SceneFluxError):
    """Rig operations need at least two cameras."""


class SolverDiverged(SceneFluxError):
    """Least-squares refinement failed to make progress."""


class InsufficientFrames(SceneFluxError):
    """Not enough flow fields to cover the requested window."""


class DegenerateGrid(SceneFluxError):
    """Grid too small for finite differences."""


class TooFewParticles(SceneFluxError):
    """Linking needs at least two alive particles."""


class UnlinkedParticle(SceneFluxError):
    """Operation requires the particle to have neighbors."""


class EmptyImage(SceneFluxError):
    """Image has no pixels to seed from."""


class EmptyMask(SceneFluxError):
    """Mask contains no foreground."""


class TooSmallComponent(SceneFluxError):
    """Largest foreground component is below the traceable area."""


class FrameTooSmall(SceneFluxError):
    """Frame below the minimum size for coarse features."""


class ParseError(SceneFluxError):
    """File could not be parsed."""


class EmptyStack(SceneFluxError):
    """Particle stack has no alive particles."""


class DuplicateScene(SceneFluxError):
    """Scene for this frame is already registered."""


class NumericalBlowup(SceneFluxError):
    """Simulation produced a non-finite quantity."""
