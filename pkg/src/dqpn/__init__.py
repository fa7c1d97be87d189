"""Impedance-based stability toolkit for grid-connected converters.

Builds, measures and compares coupled (2x2), semi-decoupled and decoupled
impedance models in the rotating (dq) and modified sequence (pn) domains,
and quantifies when single-channel stability analysis is trustworthy via
eigenvalue loci and a per-frequency decoupling residual.
"""

__version__ = "0.1.0"

from .freqresp import (
    FrequencyGrid,
    Tf1x1,
    Tf2x2,
    GridMismatchError,
    DomainMismatchError,
    SingularMatrixError,
    make_grid,
    explicit_grid,
    invert,
    matmul,
)
from .domains import (
    A_Z,
    SequenceFrequencyPair,
    MfdReport,
    dq_to_pn,
    pn_to_dq,
    map_frequencies,
    mfd_classify,
)
from .models_analytic import (
    SystemParams,
    OperatingPoint,
    OperatingPointError,
    default_params,
    grid_impedance_dq,
    solve_operating_point,
    vsc_impedance_dq,
)
from .stability import (
    MinorLoopSet,
    EigenLoci,
    EpsilonNorm,
    NyquistVerdict,
    minor_loop,
    minor_loop_decoupled,
    semidecouple,
    eig_loci_closed_form,
    eig_loci_numeric,
    epsilon_norm,
    diagonal_dominance,
    nyquist_verdict,
)
from .timesim import (
    InjectionSpec,
    SimConfig,
    SimTrace,
    injection_signal,
    simulate,
    run_to_steady_state,
)
from .extraction import (
    PhasorSet,
    ExtractionResult,
    PipelineResult,
    dft_bin,
    abc_to_pn_phasors,
    extract_decoupled,
    extract_matrix,
    pipeline,
)
