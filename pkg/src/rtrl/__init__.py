"""Real-time recurrent learning for small recurrent networks.

Exact forward propagation of first- and second-order parameter
sensitivities, online training on streaming data, unrolled and
finite-difference gradient oracles, and numerical diagnostics for the
stability constants of the bounded architecture.
"""

from .analysis import (
    AssumptionConstants,
    ContractionReport,
    ConvergenceDiagnostics,
    JointProcessConfig,
    JointState,
    assumption_constants,
    contraction_estimate,
    convergence_diagnostics,
    coupled_distance_trace,
    hyper_rectangle,
    joint_step,
    sample_joint_state,
)
from .architectures import (
    ElmanRnn,
    GenericRtrlState,
    Gru,
    LinearRnn,
    NeuralSde,
    RecurrentModel,
    TheoryRnn,
    elman_step,
    generic_rtrl_step,
    gru_step,
    linear_step,
    neural_sde_step,
    sde_decay_matrix,
    sde_decay_matrix_dw_apply,
    softmax_xent,
)
from .datagen import (
    ChainConfig,
    CharVocab,
    OutputMap,
    TeacherSpec,
    build_vocab,
    chain_step,
    char_stream,
    make_chain,
    sample_teacher,
    sample_wishart,
    teacher_step,
)
from .errors import (
    DegenerateFitError,
    DimensionMismatchError,
    InvalidConfigError,
    NonFiniteError,
)
from .model import (
    ModelDims,
    RnnParams,
    Squasher,
    SquasherSpec,
    flatten_index,
    flatten_params,
    identity_squasher,
    index_label,
    predict,
    random_params,
    rnn_step,
    scaled_tanh,
    sigmoid,
    sigmoid_d1,
    sigmoid_d2,
    sigmoid_d3,
    squared_loss,
    unflatten_params,
)
from .optim import RmspropState, Schedule, rmsprop_apply, schedule_rate, sgd_apply
from .oracles import (
    Trajectory,
    finite_difference_gradient,
    full_bptt_gradient,
    long_memory_fixture,
    resimulation_sensitivity,
    rtrl_average_gradient,
    simulate_states,
    tbptt_gradient,
    trajectory_loss,
)
from .second_order import (
    SecondOrderBounds,
    SecondOrderSensitivity,
    apriori_second_bounds,
    hessian_of_f,
    hessian_step,
)
from .sensitivity import (
    FirstOrderSensitivity,
    RtrlState,
    grad_f,
    gradient_estimate,
    rtrl_train_step,
    sensitivity_step,
)

__version__ = "0.1.0"
