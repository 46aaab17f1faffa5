"""unsparse: pruning, quantisation and direct sparse convolution toolkit."""

from .tensor import (
    BINARY16_MAX,
    ConvGeometry,
    DenseTensor4,
    PrecisionMode,
    dense_conv_reference,
    extract_interior,
    round_to_binary16,
    zero_pad,
)
from .csr import (
    CsrCorruptionError,
    CsrFilter,
    build_csr,
    csr_to_dense,
    effective_sparsity,
    load_csr,
    save_csr,
)
from .engine import (
    ExecConfig,
    VirtualBlock,
    autotune_sb,
    plan_blocks,
    sparse_conv_1d,
    sparse_conv_forward,
)
from .pruning import (
    PruneHyper,
    PrunedModel,
    RankedList,
    apply_mask,
    compute_sensitivity,
    crossover,
    importance,
    increment_mask,
    layer_sparsity,
    mutate,
    prune_loop,
    ranked_list_update,
    rewind,
    update_delta,
    update_gradient_stats,
    weighted_sparsity,
)
from .quantization import (
    Codebook,
    FixedPointParams,
    fit_fixed_point,
    kmeans_codebook,
    linear_quantize,
    quantize_model,
    saturate_activations,
)

__version__ = "0.1.0"
