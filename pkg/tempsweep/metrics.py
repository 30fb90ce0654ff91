"""
Quality and diversity metrics: corpus BLEU and Self-BLEU, NLL under a scoring
model, LM and reverse LM scores, the unigram bound and entropy estimates.

BLEU here is the mean of sentence-level scores. Each is the geometric mean of
modified m-gram precisions (m = 1..n) times the brevity penalty against the
closest reference length, ties going to the shorter one. A zero precision,
including an order longer than the hypothesis, is replaced by epsilon. Counts
are clipped by the largest count of that n-gram in any single reference.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from nltk.translate.bleu_score import brevity_penalty
from nltk.util import ngrams

from tempsweep.base.exceptions import MetricError
from tempsweep.base.utils import STREAM_SUBSAMPLE, chunks, mean_and_se, stream, write_csv
from tempsweep.corpus import NUM_RESERVED, UNK
from tempsweep.decoding import DecoderConfig, sample
from tempsweep.model import (
    NLL_CHUNK,
    ModelDims,
    batch_nll,
    conditional_dist,
    entropy,
    init_params,
    sequence_logits,
)
from tempsweep.training import TrainConfig, mle_train

logger = logging.getLogger(__name__)

BLEU_EPSILON = 1e-9
REFERENCE_CAP = 5000
SCORING_LM_DIM = 32
DEFAULT_LM_CONFIG = TrainConfig(max_epochs=10)
REPORT_HEADER = ("metric", "n", "value", "samples", "references", "epsilon", "seed")
BLEU_FAMILY = ("bleu", "self-bleu")


class NGramIndex:
    """
    Frozen n-gram statistics of a reference corpus for orders 1..n_max.

    `counts[m]` is the multiset union over references. The clip tables keep,
    per n-gram, the largest count in one reference, how many references hold
    it and the runner-up, so one reference can be left out without rebuilding.
    """

    def __init__(self, token_lists, n_max):
        if n_max < 1:
            raise MetricError("n must be at least 1")
        token_lists = [tuple(tokens) for tokens in token_lists]
        if not token_lists:
            raise MetricError("reference corpus is empty")
        self.n_max = n_max
        self.size = len(token_lists)
        self.lengths = Counter(len(tokens) for tokens in token_lists)
        self.counts = {m: Counter() for m in range(1, n_max + 1)}
        self._best = {m: {} for m in range(1, n_max + 1)}
        for tokens in token_lists:
            for m in range(1, n_max + 1):
                local = Counter(ngrams(tokens, m))
                self.counts[m].update(local)
                best = self._best[m]
                for gram, count in local.items():
                    top, holders, runner_up = best.get(gram, (0, 0, 0))
                    if count > top:
                        best[gram] = (count, 1, top)
                    elif count == top:
                        best[gram] = (top, holders + 1, runner_up)
                    else:
                        best[gram] = (top, holders, max(runner_up, count))

    def total(self, order):
        return sum(self.counts[order].values())

    def clip(self, order, gram, own_count=0):
        """
        Clip count for `gram`; with `own_count` > 0 the reference the
        hypothesis came from (holding own_count copies) is left out.
        """
        top, holders, runner_up = self._best[order].get(gram, (0, 0, 0))
        if own_count and own_count == top and holders == 1:
            return runner_up
        return top

    def closest_length(self, hyp_len, own_length=None):
        candidates = [
            length
            for length, count in self.lengths.items()
            if count - (length == own_length) > 0
        ]
        return min(candidates, key=lambda length: (abs(length - hyp_len), length))


def _sentence_bleu(tokens, index, n, epsilon, leave_out=False):
    log_sum = 0.0
    for m in range(1, n + 1):
        total = len(tokens) - m + 1
        precision = 0.0
        if total > 0:
            own = Counter(ngrams(tokens, m))
            matched = sum(
                min(count, index.clip(m, gram, count if leave_out else 0))
                for gram, count in own.items()
            )
            precision = matched / total
        log_sum += math.log(precision if precision > 0 else epsilon)
    closest = index.closest_length(len(tokens), len(tokens) if leave_out else None)
    return math.exp(log_sum / n) * brevity_penalty(closest, len(tokens))


def _check_same_vocab(*corpora):
    vocab = corpora[0].vocab
    if any(corpus.vocab != vocab for corpus in corpora[1:]):
        raise MetricError("corpora do not share one vocab")


def cap_references(corpus, cap=REFERENCE_CAP, seed=0):
    """Seeded subsample of at most `cap` sentences, kept in corpus order"""
    if cap is None or len(corpus) <= cap:
        return corpus
    picked = np.sort(stream(seed, STREAM_SUBSAMPLE).choice(len(corpus), size=cap, replace=False))
    logger.debug("Capped %d references to %d", len(corpus), cap)
    return corpus.with_sentences([corpus[int(i)] for i in picked])


def bleu_n(hypotheses, references, n, epsilon=BLEU_EPSILON, reference_cap=REFERENCE_CAP, seed=0):
    """Mean sentence BLEU-n of `hypotheses` against the whole reference corpus"""
    _check_same_vocab(hypotheses, references)
    references = cap_references(references, reference_cap, seed)
    index = NGramIndex(references.token_lists(), n)
    scores = [_sentence_bleu(tokens, index, n, epsilon) for tokens in hypotheses.token_lists()]
    return math.fsum(scores) / len(scores)


def self_bleu_n(corpus, n, epsilon=BLEU_EPSILON, reference_cap=REFERENCE_CAP, seed=0):
    """Mean leave-one-out BLEU-n of every sentence against the rest of the corpus"""
    if len(corpus) < 2:
        raise MetricError("self-BLEU needs at least 2 sentences")
    corpus = cap_references(corpus, reference_cap, seed)
    token_lists = corpus.token_lists()
    index = NGramIndex(token_lists, n)
    scores = [_sentence_bleu(tokens, index, n, epsilon, leave_out=True) for tokens in token_lists]
    return math.fsum(scores) / len(scores)


def nll_under_model(scoring, corpus, alpha=1.0):
    """
    Mean per-sentence NLL (nats per token) of `corpus` under `scoring`:
    NLL_oracle when the scorer is the oracle, NLL_test on held-out data.
    """
    if scoring.dims.vocab_size != corpus.vocab.size:
        raise MetricError(
            f"scoring model has {scoring.dims.vocab_size} ids, corpus vocab has {corpus.vocab.size}"
        )
    return float(np.mean(batch_nll(scoring, corpus.sentences, alpha)))


def nll_with_se(scoring, corpus, alpha=1.0):
    if scoring.dims.vocab_size != corpus.vocab.size:
        raise MetricError("scoring model and corpus vocab differ")
    return mean_and_se(batch_nll(scoring, corpus.sentences, alpha))


def train_scoring_lm(train, valid, lm_cfg=DEFAULT_LM_CONFIG):
    """Fresh standard LSTM LM (fixed size, seeded by lm_cfg.seed) fitted to `train`"""
    _check_same_vocab(train, valid)
    dims = ModelDims(train.vocab.size, SCORING_LM_DIM, SCORING_LM_DIM, 1)
    trained, _ = mle_train(init_params(dims, lm_cfg.seed), train, valid, lm_cfg)
    return trained


def lm_score(real_train, real_valid, generated, lm_cfg=DEFAULT_LM_CONFIG, scoring_model=None):
    """NLL of `generated` under an LM trained on real data; lower is higher quality"""
    _check_same_vocab(real_train, real_valid, generated)
    if scoring_model is None:
        scoring_model = train_scoring_lm(real_train, real_valid, lm_cfg)
    return nll_under_model(scoring_model, generated)


def reverse_lm_score(generated_train, generated_valid, real_test, lm_cfg=DEFAULT_LM_CONFIG):
    """NLL of real test data under an LM trained on generated text; lower is better coverage"""
    _check_same_vocab(generated_train, generated_valid, real_test)
    if len(generated_train) + len(generated_valid) < 2 * lm_cfg.batch_size:
        raise MetricError(
            f"reverse LM score needs at least {2 * lm_cfg.batch_size} generated sentences"
        )
    return nll_under_model(train_scoring_lm(generated_train, generated_valid, lm_cfg), real_test)


def unigram_nll(train, test, include_eos=False):
    """
    NLL per token of `test` under add-one smoothed unigram
    frequencies of `train`. The support is the vocab's content tokens,
    plus UNK when either corpus contains it.

    With `include_eos` every sentence also contributes its EOS, on both
    sides, which puts the bound on the per-token basis of `sequence_nll`.
    """
    _check_same_vocab(train, test)
    tokens = (lambda s: s.ids) if include_eos else (lambda s: s.content)
    counts = Counter(token for sentence in train for token in tokens(sentence))
    test_tokens = [token for sentence in test for token in tokens(sentence)]
    support = train.vocab.size - NUM_RESERVED + (1 if include_eos else 0)
    if UNK in counts or UNK in test_tokens:
        support += 1
    total = sum(counts.values()) + support
    log_probs = [math.log((counts[token] + 1) / total) for token in test_tokens]
    return -math.fsum(log_probs) / len(log_probs)


def mean_conditional_entropy(params, corpus, alpha=1.0):
    """Token-weighted mean entropy (nats) of the teacher-forced conditionals"""
    if params.dims.vocab_size != corpus.vocab.size:
        raise MetricError("model and corpus vocab differ")
    weighted, tokens = 0.0, 0.0
    for chunk in chunks(corpus.sentences, NLL_CHUNK):
        logits, _, mask = sequence_logits(params, chunk)
        weighted += float(np.sum(entropy(conditional_dist(logits, alpha)) * mask))
        tokens += float(mask.sum())
    return weighted / tokens


def entropy_rate(params, n, seed, max_len=20, fixed_length=True):
    """
    Monte-Carlo per-token entropy: mean and standard error of the per-token
    NLL of the model's own alpha=1 samples.
    """
    batch = sample(params, DecoderConfig(max_len=max_len, fixed_length=fixed_length, seed=seed), n)
    return mean_and_se(-batch.loglik)


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    samples: int
    references: int
    n: int = 0
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise MetricError(f"{self.metric} is not finite")
        if self.metric in BLEU_FAMILY and not 0.0 <= self.value <= 1.0:
            raise MetricError(f"{self.metric} must lie in [0, 1], got {self.value}")

    def row(self):
        return {
            "metric": self.metric,
            "n": self.n,
            "value": self.value,
            "samples": self.samples,
            "references": self.references,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }


def bleu_report(hypotheses, references, n, epsilon=BLEU_EPSILON, reference_cap=REFERENCE_CAP, seed=0):
    value = bleu_n(hypotheses, references, n, epsilon, reference_cap, seed)
    used = min(len(references), reference_cap or len(references))
    return MetricReport("bleu", value, len(hypotheses), used, n, epsilon, seed)


def self_bleu_report(corpus, n, epsilon=BLEU_EPSILON, reference_cap=REFERENCE_CAP, seed=0):
    value = self_bleu_n(corpus, n, epsilon, reference_cap, seed)
    used = min(len(corpus), reference_cap or len(corpus))
    return MetricReport("self-bleu", value, used, used - 1, n, epsilon, seed)


def write_reports(path, reports):
    return write_csv(path, REPORT_HEADER, (report.row() for report in reports))

