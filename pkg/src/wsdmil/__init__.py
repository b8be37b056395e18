"""Window-scale-decay multiple instance learning for slide-level classification."""

from .bagio import Bag, DatasetManifest, read_bag, read_manifest, write_bag, write_manifest
from .estimator import WSDMILClassifier, abmil, max_pooling_mil, mean_pooling_mil
from .model import WsdConfig, WsdModel, load_checkpoint, save_checkpoint
from .sampler import ClusterSampler, SampledSequence, build_sequence, kmeans, stratified_sample
from .synth import SynthSpec, generate, write_dataset
from .trainer import FoldReport, TrainConfig, bench_memory, run_cv

__version__ = "0.1.0"
