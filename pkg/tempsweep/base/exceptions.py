from enum import Enum


class BaseSweepError(Exception):
    pass


class ConfigError(BaseSweepError):
    pass


class CorpusError(BaseSweepError):
    def __init__(self, reason, *, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            reason = f"line {line_number}: {reason}"
        super().__init__(reason)


class SentenceTooLong(CorpusError):
    def __init__(self, line_number, length, max_len):
        self.length = length
        self.max_len = max_len
        super().__init__(
            f"sentence has {length} tokens, max_len is {max_len}", line_number=line_number
        )


class ModelError(BaseSweepError):
    pass


class NumericalOverflow(ModelError):
    def __init__(self, step=None, where="forward"):
        self.step = step
        super().__init__(f"numerical overflow in {where} at step {step}")


class ParamsFormatError(ModelError):
    pass


class TrainingDivergence(BaseSweepError):
    def __init__(self, step, reason="loss is not finite"):
        self.step = step
        super().__init__(f"training diverged at step {step}: {reason}")


class DecodingError(BaseSweepError):
    pass


class MaxAttemptsExceeded(DecodingError):
    def __init__(self, attempts, accepted, max_attempts):
        self.attempts = attempts
        self.accepted = accepted
        self.acceptance_rate = accepted / attempts if attempts else 0.0
        super().__init__(
            f"no sample accepted within max_attempts={max_attempts} "
            f"(observed acceptance rate {self.acceptance_rate:.4g} "
            f"over {attempts} attempts)"
        )


class MetricError(BaseSweepError):
    pass


class NothingToCheck(BaseSweepError):
    def __init__(self, reason="nothing to check"):
        super().__init__(reason)


class PointStatus(Enum):
    """Outcome of one sweep point, written to the `flag` column"""

    ok = "ok"
    failed = "failed"  # The decoder or a metric raised; reason is kept with the point.
    below_quality_floor = "below-quality-floor"  # Diversity NLL reached the unigram bound.
    above_diversity_ceiling = "above-diversity-ceiling"  # More diverse than MLE at alpha=1.


class Phase(Enum):
    mle = "mle"
    switch = "switch"
    adversarial = "adversarial"
