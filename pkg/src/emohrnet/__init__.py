"""HRNet speech-emotion recognition: log-mel frontend, SpecAugment, numpy autodiff."""

from .audio import DspConfig, MelSpectrogram, Waveform, load_wav, mel_spectrogram
from .augment import AugmentPolicy
from .autodiff import Graph, Tensor, backward, grad_check
from .model import HRNetConfig, HRNetModel, build, forward
from .training import Checkpoint, EvalReport, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
