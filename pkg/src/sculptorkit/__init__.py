"""sculptorkit: a skeleton-consistent parametric head model toolkit.

Registers skull/face templates to scans, learns shape/trait/pose/expression/
appearance spaces, generates heads by linear blend skinning over a jaw joint,
and runs the downstream editing applications (skull completion, character
fusion, lipo-level change).
"""

__version__ = "0.1.0"

from .mesh import LandmarkSet, RigidTransform, TriMesh  # noqa: F401
