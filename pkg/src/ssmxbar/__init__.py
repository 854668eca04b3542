"""Diagonal state-space sequence kernels with quantization-aware training and a
memristive crossbar simulator for deploying them."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapacityError,
    ConfigError,
    DataError,
    IngestError,
    LayoutError,
    NumericDomainError,
    RangeError,
    SsmXbarError,
    StageError,
    TrainingDivergence,
)
from .quant import OFF, QuantSpec, quantize, quantize_complex, quantize_tensor  # noqa: E402
from .ssm import (  # noqa: E402
    DiscreteKernel,
    KernelParams,
    ModelConfig,
    ModelParams,
    init_kernel,
    init_model,
    kernel_conv_unroll,
    kernel_run,
    kernel_step,
    load_checkpoint,
    model_forward,
    predict,
    save_checkpoint,
    zoh_discretize,
)
from .train import (  # noqa: E402
    TrainConfig,
    TrainReport,
    default_quant,
    forward_quantized,
    loss_and_grads,
    no_quant,
    sweep_quantization,
)
# the ``train`` function stays in ``ssmxbar.train`` so the submodule is not shadowed
from .audio import Dataset, DatasetManifest, Sequence, build_dataset, ingest_wav, synth_dataset  # noqa: E402
from .crossbar import (  # noqa: E402
    ConductanceProgram,
    CrossbarLayout,
    DeployedModel,
    DeviceModel,
    PeripheryModel,
    XbarState,
    deploy_model,
    map_kernel,
    map_model,
    program,
    xbar_kernel_step,
    xbar_run,
    xbar_vmm,
)
