"""3D residual and dense convolutional networks for video action recognition, in NumPy."""
from .arch import (ARCHITECTURES, BlockVariant, Network, NetworkSpec, ShapeReport, build_model,
                   count_params, freeze_stages, make_network, named_spec, replace_classifier,
                   stage_param_counts, summarize_shapes)
from .checkpoint import (Checkpoint, checkpoint_from_network, load_checkpoint, load_into_network,
                         network_from_checkpoint, save_checkpoint)
from .config import RunConfig, load_run_config
from .data import (ArrayVideo, AugmentConfig, Clip, Rng, VideoRecord, inference_clips,
                   load_manifest, sample_training_clip)
from .errors import (CheckpointError, ConfigError, DataError, DegenerateBatchError, ShapeError,
                     TrainingDiverged)
from .estimator import VideoClassifier
from .tensor import Tensor, backward, no_grad
from .train import (SGD, Metrics, PlateauSchedule, TrainConfig, Trainer, evaluate_clips,
                    evaluate_videos, recognize_video, train_epoch)

__version__ = "0.1.0"
