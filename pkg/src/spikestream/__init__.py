"""Full-spike residual networks trained through a dual activation stream.

The spike stream keeps every inter-block signal binary so inference costs
accumulates instead of multiply-accumulates; the auxiliary accumulation
stream totals the spike maps layer by layer and gives the loss a
multiplication-free gradient path to arbitrary depth.  The accumulation
head can be dropped after training without changing the spike stream's
outputs.
"""

from .analysis import (
    ProbeResult,
    network_probe,
    probe_rows,
    silent_decay_factor,
    stack_probe,
    threshold_growth_factor,
    write_probe_csv,
)
from .blocks import (
    Block,
    ConvBnUnit,
    DualStreamState,
    ForwardContext,
    GFunction,
    ProbeLog,
    SpikePurityError,
    g_apply,
)
from .data import (
    Dataset,
    direct_encode,
    load_images,
    poisson_encode,
    save_images,
    synth_two_class,
)
from .network import (
    CheckpointError,
    DualLogits,
    Network,
    NetworkConfig,
    StageSpec,
    build,
    fuse_network,
    load_checkpoint,
    save_checkpoint,
)
from .neuron import NeuronConfig, NeuronState, SurrogateConfig, sn_seq, sn_step
from .numerics import (
    BnParams,
    ConvParams,
    GradTape,
    Gradients,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    fuse_conv_bn,
)
from .syops import (
    EnergyModel,
    OpCount,
    SyopsCounter,
    count_ops,
    dynamic_consumption_mj,
    energy_ratio,
    estimated_consumption_mj,
    verify_reference_budgets,
)
from .train import TrainConfig, dual_loss, evaluate, softmax_cross_entropy, train

__version__ = "0.1.0"
