"""Joint low-rank compression of product-twin transformer weight pairs with
layer-wise fine-tuning and optional int8 quantization."""

from .assemble import (MixedModel, argmax_agreement, relative_logit_divergence,
                       set_active, swap, sweep)
from .compress import (CompressionPlan, RankPlan, accounting,
                       achieved_removed_fraction, compress_attention,
                       compress_ff, compress_layer, make_plan, twin_factor,
                       uniform_plan)
from .errors import (AssemblyError, ConfigError, FormatError, InputError,
                     NumericalError, PlanError, RankError, ShapeError,
                     TrainingError, TwinpressError)
from .finetune import (Adam, FinetuneResult, TrainConfig, finetune_all_layers,
                       finetune_layer, grad_check, layer_objective)
from .linalg import Matrix, SvdResult, fro_norm, matmul, svd, truncate
from .model import (AttentionTrace, CompressedLayerParams, HiddenStatePairSet,
                    LayerParams, Model, ModelDims, build_toy_model,
                    capture_all_hidden_states, capture_hidden_states,
                    layer_backward, layer_forward, model_forward)
from .quant import (QuantizedLayerParams, QuantizedTensor, dequantize,
                    fake_quantize, finetune_layer_quantized,
                    post_training_quantize, quantize)
from .store import (iter_pairs, load_checkpoint, load_pairs, load_report,
                    save_checkpoint, save_pairs, save_report)

__version__ = "0.1.0"
