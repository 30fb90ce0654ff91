from .decoding import Decoder, sample
from .sweep import SweepSpec, auc, run_sweep, run_synthetic_experiment

__title__ = "tempsweep"
__version__ = "0.1.0"
__author__ = "beda.software"
__license__ = "None"
__copyright__ = "Copyright 2023 beda.software"

# Version synonym
VERSION = __version__
