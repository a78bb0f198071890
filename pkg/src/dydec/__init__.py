"""dydec: trainable dyadic-decomposition front-end for polyphonic sound counting."""

from .audio import AudioClip, read_wav, write_wav
from .counting import (
    DensityVector,
    EventLabel,
    count_from_density,
    make_density_target,
    mse_density_loss,
)
from .egnorm import EgNormParams, eg_normalize, gaussian_smooth
from .filterbank import (
    DyadicTree,
    SincBandPass,
    clamp_cutoffs,
    init_dyadic_tree,
    load_tree,
    materialize_kernel,
    save_tree,
)
from .frontend import TFMap, conv_same, decompose
from .backbone import BackboneParams, backbone_forward, init_backbone
from .metrics import (
    PolyphonyVector,
    accu_rate,
    mae,
    max_polyp,
    mean_polyp,
    mse,
    polyphony_vector,
    ratio_polyp,
    stratified_report,
)
from .model import DyDecModel, ModelConfig
from .synth import SceneSpec, SynthConfig, generate_dataset, render_scene
from .train import TrainConfig, adam_step, forward_backward, train_loop

__version__ = "0.1.0"
