"""View-based semantic segmentation of triangle meshes.

The pipeline decomposes a mesh into grid-structured 3D views rendered from a
camera ring, classifies view vertices with a compact shared-weight network,
averages the predictions back onto the source mesh, and refines them with a
dense CRF solved by unrolled mean-field iterations.
"""

__version__ = "0.1.0"

from .aggregate import AggregateResult, project_predictions
from .classifier import (
    ClassifierParams,
    PseudoCoords,
    adam_step,
    backward,
    build_pseudo_coords,
    conv_forward,
    cross_entropy_loss,
    forward,
    init_params,
    parameter_count,
)
from .crf import (
    CrfParams,
    KernelMatrices,
    build_kernels,
    crf_energy,
    default_crf_params,
    map_labeling,
    mean_field_infer,
    pairwise_potential,
    train_crf,
    unary_from_aggregate,
)
from .decompose import (
    RangeScan,
    View,
    Viewpoint,
    build_view,
    decompose_shape,
    generate_viewpoints,
    render_range_scan,
)
from .errors import (
    ConfigError,
    MeshFormatError,
    NumericsError,
    ValidationError,
    ViewsegError,
)
from .fields import ProbabilityField, softmax
from .mesh import (
    GeodesicField,
    Mesh,
    geodesic_distances,
    geodesic_matrix,
    load_mesh,
    save_mesh,
    vertex_normals,
)
from .metrics import EvalReport, accuracy, entropy_map, evaluate, mean_iou
from .pipeline import RunConfig, infer_pipeline, train_pipeline
from .synth import Part, ShapeSpec, generate_shape, humanoid_spec, perturb
