from .decoder import AbstractDecoder, DecoderConfig
from .exceptions import BaseSweepError, PointStatus
