"""Deformable registration and atlas-based organ segmentation."""

__version__ = "0.1.0"

from .grid import (  # noqa: F401
    DisplacementField,
    PointSet,
    ScalarVolume,
    SurfaceMesh,
)
from .intensity import FluidElasticConfig, register_fluid_elastic  # noqa: F401
from .bspline import E2Config, SplineTransform, minimize_e2  # noqa: F401
from .correspondence import (  # noqa: F401
    RegionPriors,
    SigmaSchedule,
    icp_weights,
    posterior_weights,
    region_priors,
)
from .hybrid import HybridConfig, register_hybrid  # noqa: F401
from .preprocess import RigidConfig, bias_correct, register_rigid  # noqa: F401
from .atlas import (  # noqa: F401
    Atlas,
    AtlasConfig,
    attach_region_priors,
    build_atlas,
    load_atlas,
    save_atlas,
    select_reference,
)
from .shape import ShapeModel, build_shape_model, project_shape  # noqa: F401
from .segment import (  # noqa: F401
    SegmentConfig,
    segment,
    volume_metrics,
    voxelize_mesh,
    zone_distance_metrics,
)
from .synth import (  # noqa: F401
    PhantomSpec,
    VariationConfig,
    generate_phantom,
    generate_population,
)
