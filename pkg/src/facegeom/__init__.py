"""Template registration and mesoscopic detail refinement from per-pixel
depth, xyz and correspondence maps."""

__version__ = "0.1.0"

from facegeom.errors import FaceGeomError, InputError, SolverError
from facegeom.evaluation import DepthEvalReport, EvalConfig, error_statistics, \
    normal_discrepancy, normalize_depth_ransac
from facegeom.fixtures import FixtureSpec, generate_fixture
from facegeom.lifting import TargetMesh, lift_maps_to_mesh
from facegeom.maps import MapStack, depth_to_normals, load_map_stack, save_map_stack
from facegeom.mesh import SparseOperator, TemplateMesh, TriangleMesh, cotangent_laplacian, \
    membrane_weights, vertex_normals
from facegeom.nonrigid import RegistrationConfig, RegistrationTrace, register
from facegeom.refine import RefineConfig, refine_mesh
from facegeom.rigid import AffineTransform, RansacConfig, estimate_affine_ransac

__all__ = [
    "AffineTransform", "DepthEvalReport", "EvalConfig", "FaceGeomError", "FixtureSpec",
    "InputError", "MapStack", "RansacConfig", "RefineConfig", "RegistrationConfig",
    "RegistrationTrace", "SolverError", "SparseOperator", "TargetMesh", "TemplateMesh",
    "TriangleMesh", "cotangent_laplacian", "depth_to_normals", "error_statistics",
    "estimate_affine_ransac", "generate_fixture", "lift_maps_to_mesh", "load_map_stack",
    "membrane_weights", "normal_discrepancy", "normalize_depth_ransac", "refine_mesh",
    "register", "save_map_stack", "vertex_normals",
]
