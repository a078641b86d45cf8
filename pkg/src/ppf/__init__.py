"""Parallel particle filtering: SIR with distributed resampling (rna, arna,
rpa), dynamic load-balancing schedulers (gs, sgs, lgs), checkerboard thread
balancing, patch-based and piecewise-constant likelihood evaluation, and a
benchmark harness for synthetic single-object tracking."""

from .core import (
    PARTICLE_BYTES,
    Particle,
    ParticleStore,
    RngStream,
    StateVector,
    effective_sample_size,
    mmse_estimate,
    multinomial_resample,
    normalize_weights,
    systematic_resample,
)
from .dlb import (
    Classification,
    RouteSchedule,
    Transfer,
    classify,
    greedy_schedule,
    largest_gradient_schedule,
    sorted_greedy_schedule,
    target_loads,
)
from .dra import (
    FilterContext,
    RingTopology,
    TrackingStatus,
    arna_step,
    global_estimate,
    rna_step,
    rpa_allocate,
    rpa_step,
    run_filter,
    serial_step,
)
from .harness import (
    MetricsRow,
    RunConfig,
    compute_rmse,
    memory_footprint,
    run_experiment,
    scaling_sweep,
)
from .likelihood import (
    CheckerboardLayout,
    ImagePatch,
    PixelBinning,
    WeightEvaluator,
    bin_particles,
    build_layout,
    evaluate_weights_exact,
    evaluate_weights_pcsir,
    load_patch,
)
from .models import (
    DynamicsParams,
    Frame,
    GroundTruth,
    Movie,
    ObservationParams,
    generate_movie,
    log_likelihood,
    propagate,
    psf_intensity,
    render_frame,
)
from .transport import (
    ANY,
    Envelope,
    InProcessGroup,
    SendHandle,
    TcpGroup,
    make_group,
)

__version__ = "0.1.0"
