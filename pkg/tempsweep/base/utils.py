import csv
import datetime
import math
from pathlib import Path

import numpy as np
import pytz

from tempsweep.base.exceptions import ConfigError

DATE_TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

# Domain tags keep streams drawn for different purposes from colliding.
STREAM_SENTENCE = 1
STREAM_ROLLOUT = 2
STREAM_POINT = 3
STREAM_SHUFFLE = 4
STREAM_INIT = 5
STREAM_SPLIT = 6
STREAM_ADVERSARIAL = 7
STREAM_SUBSAMPLE = 8


def chunks(l, n):
    """
    Yield successive n-sized chunks from l

    >>> list(chunks([1, 2, 3, 4], 2))
    [[1, 2], [3, 4]]

    >>> list(chunks(range(5), 2))
    [range(0, 2), range(2, 4), range(4, 5)]
    """
    for i in range(0, len(l), n):
        yield l[i : i + n]


def unique_everseen(seq):
    """
    >>> unique_everseen(['bleu', 'self-bleu', 'bleu'])
    ['bleu', 'self-bleu']
    """
    seen = set()
    seen_add = seen.add
    return [x for x in seq if not (x in seen or seen_add(x))]


def stream(seed, *keys):
    """
    Returns an independent generator for (seed, *keys).
    The same arguments always give the same stream.

    >>> float(stream(7, 1, 0).random()) == float(stream(7, 1, 0).random())
    True

    >>> float(stream(7, 1, 0).random()) == float(stream(7, 1, 1).random())
    False
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ConfigError("seeds and stream keys must be non-negative")
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def derive_seed(seed, *keys):
    """
    Derives a plain integer seed, e.g. for a sub-component configured by seed

    >>> derive_seed(1, 2) == derive_seed(1, 2)
    True
    """
    return int(stream(seed, *keys).integers(0, 2**31 - 1))


def mean_and_se(values):
    """
    Returns mean and standard error of the mean (0.0 for a single value)

    >>> mean_and_se([1.0, 3.0])
    (2.0, 1.0)

    >>> mean_and_se([5.0])
    (5.0, 0.0)
    """
    values = [float(v) for v in values]
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def format_date_time(date: datetime.datetime):
    return pytz.utc.normalize(date).strftime(DATE_TIME_FORMAT)


def utc_now():
    return format_date_time(datetime.datetime.now(pytz.utc))


def format_value(value):
    """
    Formats a CSV cell so the same value always gives the same bytes

    >>> format_value(0.1)
    '0.1'

    >>> format_value(3)
    '3'

    >>> format_value(True)
    'true'

    >>> format_value(float('nan'))
    'nan'
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(row[key]) for key in header])
    return path


def read_csv(path):
    with Path(path).open(encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
