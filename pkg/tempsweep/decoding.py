"""
Sample generation under every entropy-control strategy.

Each sentence i draws from its own stream(seed, STREAM_SENTENCE, i), so a batch
is the same whatever the number of workers. Decoders never emit PAD, BOS or UNK,
never end a sentence before its first content token and stop at max_len. In
fixed-length mode EOS is withheld until max_len and then forced.
"""
import json
import logging
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from tempsweep.base.decoder import AbstractDecoder, DecoderConfig
from tempsweep.base.exceptions import ConfigError, MaxAttemptsExceeded
from tempsweep.base.utils import STREAM_SENTENCE, chunks, stream, utc_now
from tempsweep.corpus import BOS, DEFAULT_MAX_LEN, EOS, PAD, UNK, Corpus, Sentence, save_corpus
from tempsweep.model import (
    RnnState,
    batch_discriminate,
    batch_nll,
    conditional_dist,
    forward_step,
    log_conditional,
)

logger = logging.getLogger(__name__)

SAMPLE_CHUNK = 512
NEVER_SAMPLED = (PAD, BOS, UNK)


def banned_tokens(step, max_len, fixed_length=False):
    """
    Token ids withheld at content position `step` (0-based)

    >>> banned_tokens(0, 20)
    [0, 1, 3, 2]

    >>> banned_tokens(5, 20)
    [0, 1, 3]
    """
    banned = list(NEVER_SAMPLED)
    if step == 0 or (fixed_length and step < max_len):
        banned.append(EOS)
    return banned


def masked_logits(logits, step, max_len, fixed_length=False):
    logits = np.array(logits, dtype=np.float64)
    logits[..., banned_tokens(step, max_len, fixed_length)] = -np.inf
    return logits


def _inverse_cdf(probs, uniforms):
    cdf = np.cumsum(probs, axis=-1)
    targets = uniforms * cdf[:, -1]
    # zero-probability ids never hold the first cdf value above the target
    picked = (cdf <= targets[:, None]).sum(axis=1)
    return np.minimum(picked, probs.shape[-1] - 1)


def continue_sentences(
    params, state, logits, prefixes, uniforms, alpha=1.0, max_len=DEFAULT_MAX_LEN, fixed_length=False
):
    """
    Samples every prefix to completion. `state` and `logits` are the model
    outputs after consuming BOS and the prefix; all prefixes share one length.
    `uniforms` holds one row of max_len - len(prefix) draws per prefix.
    """
    start = len(prefixes[0])
    outputs = [list(prefix) for prefix in prefixes]
    active = np.arange(len(prefixes))
    for step in range(start, max_len):
        probs = conditional_dist(masked_logits(logits, step, max_len, fixed_length), alpha)
        tokens = _inverse_cdf(probs, uniforms[active, step - start])
        for row, token in zip(active, tokens):
            outputs[row].append(int(token))
        alive = tokens != EOS
        active, tokens = active[alive], tokens[alive]
        if not active.size:
            break
        state, logits = forward_step(params, state.select(alive), tokens, step=step + 1)
    for row in active:
        outputs[row].append(EOS)
    return [Sentence(tuple(ids)) for ids in outputs]


def _ancestral_batch(params, rngs, alpha, max_len, fixed_length):
    n = len(rngs)
    uniforms = np.stack([rng.random(max_len) for rng in rngs])
    bos = np.full(n, BOS, dtype=np.int64)
    state, logits = forward_step(params, RnnState.zeros(params.dims, n), bos, step=0)
    return continue_sentences(
        params, state, logits, [()] * n, uniforms, alpha, max_len, fixed_length
    )


@dataclass(frozen=True)
class _Hypothesis:
    ids: tuple
    score: float
    done: bool


def _expand(logits_row, beam_size, alpha, rng):
    if rng is None:
        support = np.flatnonzero(np.isfinite(logits_row))
        m = min(beam_size, support.size)
        order = support[np.argsort(-logits_row[support], kind="stable")]
        return [int(token) for token in order[:m]]
    probs = conditional_dist(logits_row, alpha)
    support = np.flatnonzero(probs > 0)
    m = min(beam_size, support.size)
    p = probs[support] / probs[support].sum()
    return [int(token) for token in rng.choice(support, size=m, replace=False, p=p)]


def _beam_search(params, beam_size, alpha, max_len, fixed_length, rng=None):
    """
    Keeps `beam_size` hypotheses ranked by cumulative alpha=1 log-likelihood,
    completed ones included. With an rng each live hypothesis samples its
    children without replacement from the tempered conditional and the result
    is a uniform draw among the survivors. Without one the children are the
    top tokens and the best survivor is returned.
    """
    beam = [_Hypothesis((), 0.0, False)]
    state = RnnState.zeros(params.dims, 1)
    for step in range(max_len):
        live = [j for j, hyp in enumerate(beam) if not hyp.done]
        if not live:
            break
        last = np.array([beam[j].ids[-1] if beam[j].ids else BOS for j in live], dtype=np.int64)
        live_state, logits = forward_step(params, state.select(live), last, step=step)
        scores = log_conditional(logits, 1.0)
        masked = masked_logits(logits, step, max_len, fixed_length)
        live_row = {j: row for row, j in enumerate(live)}

        candidates = []
        for j, hyp in enumerate(beam):
            if hyp.done:
                candidates.append((hyp, state, j))
                continue
            row = live_row[j]
            for token in _expand(masked[row], beam_size, alpha, rng):
                child = _Hypothesis(hyp.ids + (token,), hyp.score + scores[row, token], token == EOS)
                candidates.append((child, live_state, row))

        kept = sorted(candidates, key=lambda candidate: -candidate[0].score)[:beam_size]
        beam = [hyp for hyp, _, _ in kept]
        state = RnnState(
            np.stack([source.h[:, row] for _, source, row in kept], axis=1),
            np.stack([source.c[:, row] for _, source, row in kept], axis=1),
        )

    beam = [hyp if hyp.done else _Hypothesis(hyp.ids + (EOS,), hyp.score, True) for hyp in beam]
    if rng is None:
        return Sentence(beam[0].ids)
    return Sentence(beam[int(rng.integers(len(beam)))].ids)


def _rejection_scores(params, cfg, sentences):
    if cfg.strategy == "disc_rejection":
        return batch_discriminate(cfg.discriminator, sentences)
    return -batch_nll(params, sentences, 1.0)


def _rejection_chunk(params, cfg, indices):
    """
    Accepted sentences, total attempts and the accepted scores. For
    gen_rejection the scores are the alpha=1 per-token log-likelihoods.
    """
    rngs = {i: stream(cfg.seed, STREAM_SENTENCE, i) for i in indices}
    attempts = dict.fromkeys(indices, 0)
    accepted = {}
    pending = list(indices)
    while pending:
        drawn = _ancestral_batch(
            params, [rngs[i] for i in pending], cfg.alpha, cfg.max_len, cfg.fixed_length
        )
        scores = _rejection_scores(params, cfg, drawn)
        still_pending = []
        for i, sentence, score in zip(pending, drawn, scores):
            attempts[i] += 1
            if score >= cfg.threshold:
                accepted[i] = (sentence, float(score))
            elif attempts[i] >= cfg.max_attempts:
                raise MaxAttemptsExceeded(sum(attempts.values()), len(accepted), cfg.max_attempts)
            else:
                still_pending.append(i)
        pending = still_pending
    sentences = [accepted[i][0] for i in indices]
    scores = np.array([accepted[i][1] for i in indices])
    return sentences, sum(attempts.values()), scores


def _sample_chunk(params, cfg, indices):
    """Sentences and attempts of one chunk, plus their log-likelihoods when already known"""
    indices = list(indices)
    if cfg.strategy == "gen_rejection":
        return _rejection_chunk(params, cfg, indices)
    if cfg.strategy == "disc_rejection":
        sentences, attempts, _ = _rejection_chunk(params, cfg, indices)
        return sentences, attempts, None
    if cfg.strategy in ("ancestral", "greedy"):
        alpha = 0.0 if cfg.strategy == "greedy" else cfg.alpha
        rngs = [stream(cfg.seed, STREAM_SENTENCE, i) for i in indices]
        sentences = _ancestral_batch(params, rngs, alpha, cfg.max_len, cfg.fixed_length)
        return sentences, len(indices), None
    if cfg.strategy == "stochastic_beam":
        sentences = [
            _beam_search(
                params,
                cfg.beam_size,
                cfg.alpha,
                cfg.max_len,
                cfg.fixed_length,
                stream(cfg.seed, STREAM_SENTENCE, i),
            )
            for i in indices
        ]
        return sentences, len(indices), None
    best = _beam_search(params, cfg.beam_size, cfg.alpha, cfg.max_len, cfg.fixed_length)
    return [best] * len(indices), len(indices), None


@dataclass
class SampleBatch:
    sentences: list
    loglik: np.ndarray
    attempts: int
    elapsed_seconds: float
    config: DecoderConfig = None

    def __len__(self):
        return len(self.sentences)

    @property
    def acceptance_rate(self):
        return len(self.sentences) / self.attempts

    @property
    def mean_loglik(self):
        return float(np.mean(self.loglik))

    def to_corpus(self, vocab):
        max_len = self.config.max_len if self.config else DEFAULT_MAX_LEN
        return Corpus(self.sentences, vocab, "generated", max(max_len, DEFAULT_MAX_LEN))

    def metadata(self):
        data = self.config.as_metadata() if self.config else {}
        data.update(
            n=len(self.sentences),
            attempts=self.attempts,
            acceptance_rate=self.acceptance_rate,
            elapsed_seconds=self.elapsed_seconds,
            mean_loglik=self.mean_loglik,
            created=utc_now(),
        )
        return data


def sample(params, cfg, n, workers=1):
    """Draws n sentences according to `cfg`; results do not depend on `workers`"""
    if n < 1:
        raise ConfigError("n must be at least 1")
    if workers < 1:
        raise ConfigError("workers must be at least 1")

    started = time.perf_counter()
    jobs = list(chunks(range(n), SAMPLE_CHUNK))
    run = partial(_sample_chunk, params, cfg)
    if workers == 1 or len(jobs) == 1:
        results = [run(job) for job in jobs]
    else:
        results = Parallel(n_jobs=workers, prefer="threads")(delayed(run)(job) for job in jobs)
    sentences = [sentence for chunk_sentences, _, _ in results for sentence in chunk_sentences]
    attempts = sum(chunk_attempts for _, chunk_attempts, _ in results)
    if cfg.strategy == "gen_rejection":
        loglik = np.concatenate([chunk_loglik for _, _, chunk_loglik in results])
    else:
        loglik = -batch_nll(params, sentences, 1.0)
    elapsed = time.perf_counter() - started

    logger.debug(
        "Sampled %d sentences with %s in %.3fs (%d attempts)", n, cfg.label, elapsed, attempts
    )
    return SampleBatch(sentences, loglik, attempts, elapsed, cfg)


def stochastic_beam(params, k, alpha, max_len, seed, fixed_length=False):
    cfg = DecoderConfig(
        "stochastic_beam",
        alpha=alpha,
        beam_size=k,
        max_len=max_len,
        fixed_length=fixed_length,
        seed=seed,
    )
    sentences, _, _ = _sample_chunk(params, cfg, [0])
    return sentences[0]


def gen_rejection(
    params, threshold, alpha, max_attempts, seed, max_len=DEFAULT_MAX_LEN, fixed_length=False
):
    """Returns the first sentence whose per-token log-likelihood is >= threshold, plus attempts"""
    cfg = DecoderConfig(
        "gen_rejection",
        alpha=alpha,
        threshold=threshold,
        max_attempts=max_attempts,
        max_len=max_len,
        fixed_length=fixed_length,
        seed=seed,
    )
    sentences, attempts, _ = _rejection_chunk(params, cfg, [0])
    return sentences[0], attempts


def disc_rejection(
    params, disc, threshold, max_attempts, seed, max_len=DEFAULT_MAX_LEN, fixed_length=False
):
    cfg = DecoderConfig(
        "disc_rejection",
        threshold=threshold,
        max_attempts=max_attempts,
        max_len=max_len,
        fixed_length=fixed_length,
        seed=seed,
        discriminator=disc,
    )
    sentences, attempts, _ = _rejection_chunk(params, cfg, [0])
    return sentences[0], attempts


def write_samples(batch, vocab, path):
    """Writes the corpus file and a JSON sidecar `<path>.meta.json`"""
    path = save_corpus(batch.to_corpus(vocab), path)
    sidecar = Path(f"{path}.meta.json")
    sidecar.write_text(json.dumps(batch.metadata(), indent=2, sort_keys=True) + "\n")
    return path, sidecar


class Decoder(AbstractDecoder):
    def sample(self, n, workers=1):
        return sample(self.params, self.config, n, workers=workers)
