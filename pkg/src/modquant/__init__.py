"""Modality-partitioned post-training weight quantization toolkit."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationSet,
    HessianAccumulator,
    accumulate_hessian,
    capture_calibration,
    finalize_hessian,
    hessian_from_samples,
    load_calibration,
    save_calibration,
    synthetic_activations,
)
from .errors import FormatError, InvariantError, ModquantError, NumericError
from .kernel import (
    TileConfig,
    TimingSpan,
    Tracer,
    autotune,
    quant_matmul,
    reference_matmul,
    with_span,
)
from .model import (
    GROUP_ORDER,
    ComponentGroup,
    CrossModalLayer,
    SyntheticModel,
    generate_model,
    load_model,
    save_model,
    vision_seq_len,
)
from .packfmt import (
    PackedLinear,
    dequantize_packed,
    estimate_packed_size,
    lanes_per_word,
    pack_linear,
    pack_weights,
    pack_zeros,
    unpack_value,
    unpack_weights,
    unpack_zeros,
)
from .pipeline import (
    QuantizedCheckpoint,
    circular_eval_accuracy,
    load_checkpoint,
    quantize_model,
    save_checkpoint,
    size_report,
    size_report_model,
)
from .quantcore import (
    GroupQuantParams,
    QuantConfig,
    QuantizedMatrix,
    compute_group_params,
    dequantize_matrix,
    gptq_quantize,
    group_index,
    proxy_loss,
    rtn_quantize,
)
from .tensorio import (
    dense_matrix,
    load_container,
    read_container,
    seeded_random_matrix,
    write_container,
)
