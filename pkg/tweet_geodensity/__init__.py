"""
Tweet Geolocation Density
Predicts a probability density over coordinates from the text of one tweet
"""

from .config import Config, RunConfig
from .corpus import GeneratorSpec, default_generator_spec, generate, read_corpus, write_corpus
from .data_models import CorpusRecord, GeoPoint, ModelKind, PredictionRecord
from .mixture import Gmm2D
from .models import NeuralGeoModel, load_checkpoint, save_checkpoint
from .pipeline import GeolocationPipeline

__version__ = "1.0.0"
__all__ = [
    'Config',
    'RunConfig',
    'GeneratorSpec',
    'default_generator_spec',
    'generate',
    'read_corpus',
    'write_corpus',
    'CorpusRecord',
    'GeoPoint',
    'ModelKind',
    'PredictionRecord',
    'Gmm2D',
    'NeuralGeoModel',
    'load_checkpoint',
    'save_checkpoint',
    'GeolocationPipeline',
]
