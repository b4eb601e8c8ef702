"""Self-similarity blind-spot network for self-supervised denoising, in numpy."""
from .network import NetworkConfig, SSBSN, build_network, load_checkpoint, save_checkpoint
from .pd import PDConfig, denoise_asymmetric, pd_down, pd_up, self_ensemble
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig", "SSBSN", "build_network", "load_checkpoint", "save_checkpoint",
    "PDConfig", "denoise_asymmetric", "pd_down", "pd_up", "self_ensemble",
    "TrainConfig", "train_loop",
]
