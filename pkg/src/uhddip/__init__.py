"""Prior-guided restoration of ultra-high-definition images degraded by rain
or snow, with a small numpy autodiff engine, mask synthesis and metrics."""

from .errors import ConfigError, DimensionError, IngestError, NumericError, UhddipError, UsageError
from .metrics import MetricReport, psnr, ssim
from .model import REFERENCE_CONFIG, UHDDIP, BlockAllocation, NetConfig, count_flops, count_macs, count_params, describe
from .priors import canny, compute_priors
from .synth import DatasetManifest, SynthSpec, build_dataset, composite, gen_mask
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, lr_at, total_loss, train

__version__ = "0.1.0"
