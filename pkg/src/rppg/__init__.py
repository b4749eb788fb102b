"""Contactless heart-rate estimation from facial video.

A two-stage pipeline: contrastive self-supervised pre-training of a 3D
(or factorized 2D+1D) convolutional video encoder on unlabeled clips,
then supervised fine-tuning that regresses the reference pulse waveform
with a deep-supervision smooth-L1 objective. Heart rate is read from the
largest in-band peak of the Welch power spectrum of the estimated
waveform.
"""

from .augment import AugKind, augment, make_positive_pair, make_rng
from .data import (
    Dataset,
    LandmarkFile,
    PpgSegment,
    RoiClip,
    align_ppg,
    crop_roi,
    label_subset,
    read_clip,
    read_landmarks,
    read_manifest,
    read_ppg,
    window_clips,
    write_clip,
    write_manifest,
    write_ppg,
)
from .losses import (
    ContrastiveBatch,
    Stage2Config,
    cosine_similarity,
    ntxent_loss,
    simsiam_loss,
    smooth_l1,
    stage2_loss,
)
from .models import (
    EncoderOutputs,
    RppgOutputs,
    build_encoder,
    build_projection_head,
    build_tap_readouts,
    encode,
    encoder_forward,
    estimate_rppg,
    expected_layer_shapes,
    midplane_channels,
    predict,
    project,
)
from .params import AdamState, ParamSet, adam_step, load_checkpoint, save_checkpoint
from .pipeline import RunConfig, TrainLog, desk_preset, evaluate, finetune, paper_preset, pretrain
from .spectrum import (
    EvalReport,
    HrEstimate,
    RppgSignal,
    compute_metrics,
    estimate_hr,
    video_hr,
    welch_psd,
)
from .synth import SynthSpec, generate_raw_dataset, ingest_dataset, synth_video
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    avg_pool3d,
    batch_norm,
    conv3d,
    dense,
    finite_diff_check,
    global_spatial_avg,
    no_grad,
    relu,
)

__version__ = "0.1.0"
