import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from tempsweep.base.exceptions import ConfigError

STRATEGIES = ("ancestral", "greedy", "stochastic_beam", "beam", "gen_rejection", "disc_rejection")
REJECTION_STRATEGIES = ("gen_rejection", "disc_rejection")


@dataclass(frozen=True)
class DecoderConfig:
    """
    Decoding strategy and its control knob:
      ancestral        alpha (temperature)
      greedy           none (alpha = 0)
      stochastic_beam  beam_size k, alpha
      beam             beam_size k (local beam search, no sampling)
      gen_rejection    threshold in nats per token, alpha, max_attempts
      disc_rejection   threshold in (0, 1), discriminator, max_attempts
    """

    strategy: str = "ancestral"
    alpha: float = 1.0
    beam_size: int = 1
    threshold: float = 0.0
    max_attempts: int = 1000
    max_len: int = 52
    fixed_length: bool = False
    seed: int = 0
    discriminator: Optional[Any] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be at least 1")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not math.isfinite(self.threshold):
            raise ConfigError("threshold must be finite")
        if self.strategy == "disc_rejection":
            if not 0.0 < self.threshold < 1.0:
                raise ConfigError("disc_rejection threshold must lie in (0, 1)")
            if self.discriminator is None:
                raise ConfigError("disc_rejection needs a discriminator")

    @property
    def control_value(self):
        if self.strategy in ("stochastic_beam", "beam"):
            return self.beam_size
        if self.strategy in REJECTION_STRATEGIES:
            return self.threshold
        if self.strategy == "greedy":
            return 0.0
        return self.alpha

    @property
    def label(self):
        return f"{self.strategy}({self.control_value})"

    def as_metadata(self):
        return {
            "strategy": self.strategy,
            "alpha": self.alpha,
            "beam_size": self.beam_size,
            "threshold": self.threshold,
            "max_attempts": self.max_attempts,
            "max_len": self.max_len,
            "fixed_length": self.fixed_length,
            "seed": self.seed,
        }


class AbstractDecoder(ABC):
    """
    Immutable decoder builder; every refinement returns a clone:

        decoder.temperature(0.7).with_seed(3).sample(1000)
    """

    params = None
    config = None

    def __init__(self, params, config=None):
        self.params = params
        self.config = config or DecoderConfig()

    def clone(self, **overrides):
        return self.__class__(self.params, replace(self.config, **overrides))

    def temperature(self, alpha):
        return self.clone(strategy="ancestral", alpha=alpha)

    def greedy(self):
        return self.clone(strategy="greedy", alpha=0.0)

    def stochastic_beam(self, beam_size, alpha=1.0):
        return self.clone(strategy="stochastic_beam", beam_size=beam_size, alpha=alpha)

    def beam(self, beam_size):
        return self.clone(strategy="beam", beam_size=beam_size)

    def gen_rejection(self, threshold, alpha=1.0, max_attempts=None):
        return self.clone(
            strategy="gen_rejection",
            threshold=threshold,
            alpha=alpha,
            max_attempts=max_attempts or self.config.max_attempts,
        )

    def disc_rejection(self, discriminator, threshold, max_attempts=None):
        return self.clone(
            strategy="disc_rejection",
            discriminator=discriminator,
            threshold=threshold,
            alpha=1.0,
            max_attempts=max_attempts or self.config.max_attempts,
        )

    def with_seed(self, seed):
        return self.clone(seed=seed)

    def limit_length(self, max_len, fixed_length=None):
        if fixed_length is None:
            fixed_length = self.config.fixed_length
        return self.clone(max_len=max_len, fixed_length=fixed_length)

    @abstractmethod  # pragma: no cover
    def sample(self, n, workers=1):
        pass

    def first(self):
        return self.sample(1).sentences[0]

    def __str__(self):  # pragma: no cover
        return f"<{self.__class__.__name__} {self.config.label} seed={self.config.seed}>"

    def __repr__(self):  # pragma: no cover
        return self.__str__()
