"""Geodesic fiber tracking on diffusion tensor fields.

The package follows one pipeline: synthesize or load a tensor field, convert
diffusion tensors to a Riemannian metric (inverse, adjugate, or
anisotropy-activated beta scaling), integrate the geodesic ODE with RK4 from
cone-seeded start points, and score the tracks against a target region.
4th-order tensor fields handle crossing regions via their diagonal blocks.
"""

from geotract.fields import (
    OutOfBoundsError,
    TensorField,
    interpolate,
    load_field,
    loge_geodesic,
    metric_at,
    save_field,
    sq_geodesic,
)
from geotract.phantoms import (
    AcquisitionScheme,
    FiberSpec,
    Phantom,
    add_rician,
    fit_dti,
    fit_quartic,
    gradient_scheme,
    load_phantom,
    rasterize,
    sample_curve,
    save_phantom,
    simulate_signal,
)
from geotract.quartic import (
    FlattenedTensor4,
    Tensor4,
    Tensor4Field,
    diagonal_component_fields,
    diagonal_components,
    diagonal_sum,
    fit_tensor4,
    flatten,
    load_field4,
    odf_maxima,
    save_field4,
    sym_outer_square,
    track_crossing,
)
from geotract.spd import (
    EigenDecomposition,
    MetricScheme,
    SpdTensor,
    activation,
    adjugate,
    anisotropy_scalar,
    eig_sym,
    hilbert_anisotropy,
    metric_from_tensor,
)
from geotract.tracking import (
    ConeSeed,
    GeodesicTrack,
    TargetRegion,
    TrackingParams,
    TrackingResult,
    christoffel,
    load_tracks,
    point_to_region,
    save_tracks,
    save_tracks_csv,
    seed_cone,
    trace,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionScheme",
    "ConeSeed",
    "EigenDecomposition",
    "FiberSpec",
    "FlattenedTensor4",
    "GeodesicTrack",
    "MetricScheme",
    "OutOfBoundsError",
    "Phantom",
    "SpdTensor",
    "TargetRegion",
    "Tensor4",
    "Tensor4Field",
    "TensorField",
    "TrackingParams",
    "TrackingResult",
    "activation",
    "add_rician",
    "adjugate",
    "anisotropy_scalar",
    "christoffel",
    "diagonal_component_fields",
    "diagonal_components",
    "diagonal_sum",
    "eig_sym",
    "fit_dti",
    "fit_quartic",
    "fit_tensor4",
    "flatten",
    "gradient_scheme",
    "hilbert_anisotropy",
    "interpolate",
    "load_field",
    "load_field4",
    "load_phantom",
    "load_tracks",
    "loge_geodesic",
    "metric_at",
    "metric_from_tensor",
    "odf_maxima",
    "point_to_region",
    "rasterize",
    "sample_curve",
    "save_field",
    "save_field4",
    "save_phantom",
    "save_tracks",
    "save_tracks_csv",
    "seed_cone",
    "simulate_signal",
    "sq_geodesic",
    "sym_outer_square",
    "trace",
    "track_crossing",
    "__version__",
]
