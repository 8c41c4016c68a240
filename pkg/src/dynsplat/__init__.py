"""Dynamic Gaussian splatting in numpy: anti-aliased rendering, a HexPlane
deformation field with an attention decoder, and a tape autodiff to train it."""

from .antialias import ConfigError, FilterConfig
from .cloud import GaussianCloud
from .config import TrainConfig
from .datasets import SceneDataset, load_scene
from .geometry import CameraModel
from .pipeline import Model, render_model
from .raster import RasterConfig, rasterize, render_bruteforce
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .trainer import evaluate, train

__version__ = "0.1.0"
