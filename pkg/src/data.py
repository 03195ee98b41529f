"""
Synthetic ranking corpus and the JSON-lines record format.

Content ids are split into A aspect blocks of tokens_per_aspect ids each;
the ids left over are noise. A query draws distinct tokens from every
aspect. A passage copies a random number of each aspect's query tokens
and fills the rest with tokens that are not in the query, so its overlap
with the query per aspect is known exactly. Relevance is the sum or the
minimum of those overlaps.
"""

import io
import json
import logging
import math

from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from .config import apply_entries, read_key_value_file
from .encoder import CONTENT_START
from .model import Candidate, RankingRecord, RecordError
from .utils import MvpError, map_ordered

logger = logging.getLogger(__name__)

RECORDS_HEADER = "#mvp-records v1"

RELEVANCE_RULES = ("sum", "min")

# Share of records whose sum-overlap ordering must differ from the true
# ordering under the min rule.
MIN_DIVERGENCE = 0.10

# Below this many records the divergence share is not checked.
DIVERGENCE_SAMPLE = 20

_MASK64 = (1 << 64) - 1


class SpecError(MvpError):
    """Exception raised for an invalid corpus specification or split."""


class RecordParseError(MvpError):
    """Exception raised for a malformed line of a records file."""

    def __init__(self, line, message):
        # type: (int, str) -> None
        self.line = line
        super(RecordParseError, self).__init__("line {}: {}".format(line, message))


class IntegrityError(MvpError):
    """Exception raised when a records file repeats a query id."""


class SplitMix64(object):
    """
    SplitMix64 counter generator.

    The algorithm is fixed so corpora are reproducible across
    implementations; nothing here depends on Python's own random module.
    """

    def __init__(self, seed):
        # type: (int) -> None
        self.state = int(seed) & _MASK64

    def next_u64(self):
        # type: () -> int
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n):
        # type: (int) -> int
        """Uniform integer in [0, n), by rejection."""
        if n < 1:
            raise SpecError("cannot draw below {}".format(n))
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            value = self.next_u64()
            if value < limit:
                return value % n

    def uniform(self):
        # type: () -> float
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items):
        # type: (List[Any]) -> None
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, population, k):
        # type: (Sequence[Any], int) -> List[Any]
        """k distinct elements, in draw order."""
        pool = list(population)
        if k > len(pool):
            raise SpecError("cannot sample {} of {} items".format(k, len(pool)))
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    @classmethod
    def for_index(cls, seed, index):
        # type: (int, int) -> SplitMix64
        """Independent stream for item index of a seeded collection."""
        mixer = cls((int(seed) + (index + 1) * 0xD1B54A32D192ED03) & _MASK64)
        return cls(mixer.next_u64())


_SPEC_DEFAULTS = {
    "vocab_size": 64,
    "aspects": 2,
    "tokens_per_aspect": 16,
    "query_length": 6,
    "passage_length": 12,
    "candidates_per_record": 8,
    "record_count": 1000,
    "relevance_rule": "min",
    "seed": 0,
}  # type: Dict[str, Any]

_SPEC_CONVERTERS = {
    "vocab_size": int,
    "aspects": int,
    "tokens_per_aspect": int,
    "query_length": int,
    "passage_length": int,
    "candidates_per_record": int,
    "record_count": int,
    "relevance_rule": str,
    "seed": int,
}


class CorpusSpec(object):
    """Parameters of a synthetic corpus; a pure function of these and the seed."""

    KEYS = tuple(sorted(_SPEC_DEFAULTS))

    def __init__(self, **overrides):
        # type: (**Any) -> None
        """
        Raises:
            SpecError: On unknown keys or if the vocabulary cannot hold the
                aspects, the query and the passage filler.
        """
        unknown = sorted(set(overrides) - set(_SPEC_DEFAULTS))
        if unknown:
            raise SpecError("unknown corpus keys: {}".format(", ".join(unknown)))
        values = dict(_SPEC_DEFAULTS)
        values.update(overrides)
        for key, value in values.items():
            setattr(self, key, value)
        self.validate()

    @classmethod
    def from_file(cls, path):
        # type: (str) -> CorpusSpec
        entries = read_key_value_file(path)
        return cls(**apply_entries({}, _SPEC_CONVERTERS, entries, path))

    def validate(self):
        # type: () -> None
        if self.aspects < 1 or self.tokens_per_aspect < 1:
            raise SpecError("aspects and tokens_per_aspect must be positive")
        if self.relevance_rule not in RELEVANCE_RULES:
            raise SpecError("relevance_rule must be 'sum' or 'min', got '{}'".format(self.relevance_rule))
        if self.query_length < self.aspects:
            raise SpecError("query_length {} cannot cover {} aspects".format(self.query_length, self.aspects))
        if max(self.query_tokens_per_aspect()) > self.tokens_per_aspect:
            raise SpecError("an aspect of {} tokens cannot supply {} distinct query tokens".format(
                self.tokens_per_aspect, max(self.query_tokens_per_aspect())
            ))
        if self.passage_length < self.query_length:
            raise SpecError("passage_length {} is shorter than query_length {}".format(
                self.passage_length, self.query_length
            ))
        if not 2 <= self.candidates_per_record <= 100:
            raise SpecError("candidates_per_record must lie in [2, 100], got {}".format(
                self.candidates_per_record
            ))
        if self.record_count < 0:
            raise SpecError("record_count must be non-negative")
        content = self.vocab_size - CONTENT_START
        needed = self.aspects * self.tokens_per_aspect
        if content < needed or content - self.query_length < 1:
            raise SpecError("vocabulary of {} leaves {} content ids, {} aspects of {} need {} plus filler".format(
                self.vocab_size, max(content, 0), self.aspects, self.tokens_per_aspect, needed
            ))

    def query_tokens_per_aspect(self):
        # type: () -> List[int]
        base, extra = divmod(self.query_length, self.aspects)
        return [base + (1 if a < extra else 0) for a in range(self.aspects)]

    def aspect_range(self, aspect):
        # type: (int) -> range
        start = CONTENT_START + aspect * self.tokens_per_aspect
        return range(start, start + self.tokens_per_aspect)

    def aspect_of(self, token):
        # type: (int) -> Optional[int]
        """Aspect a token belongs to, None for noise tokens."""
        offset = token - CONTENT_START
        if offset < 0 or offset >= self.aspects * self.tokens_per_aspect:
            return None
        return offset // self.tokens_per_aspect

    def to_dict(self):
        # type: () -> Dict[str, Any]
        return dict((key, getattr(self, key)) for key in self.KEYS)

    def replace(self, **changes):
        # type: (**Any) -> CorpusSpec
        values = self.to_dict()
        values.update(changes)
        return CorpusSpec(**values)

    def __repr__(self):
        # type: () -> str
        return "CorpusSpec(A={}, rule={}, n={}, records={}, seed={})".format(
            self.aspects, self.relevance_rule, self.candidates_per_record,
            self.record_count, self.seed
        )


def aspect_overlaps(query, passage, spec):
    # type: (Sequence[int], Sequence[int], CorpusSpec) -> List[int]
    """Per aspect, how many distinct query tokens the passage contains."""
    present = set(passage)
    overlaps = [0] * spec.aspects
    for token in set(query):
        aspect = spec.aspect_of(token)
        if aspect is not None and token in present:
            overlaps[aspect] += 1
    return overlaps


def relevance_of(overlaps, rule):
    # type: (Sequence[int], str) -> int
    if rule == "sum":
        return int(sum(overlaps))
    if rule == "min":
        return int(min(overlaps))
    raise SpecError("unknown relevance rule '{}'".format(rule))


def ranks_from_relevance(relevance):
    # type: (Sequence[float]) -> List[int]
    """Ranks by descending relevance, ties broken by ascending index."""
    order = sorted(range(len(relevance)), key=lambda i: (-relevance[i], i))
    ranks = [0] * len(relevance)
    for place, i in enumerate(order):
        ranks[i] = place + 1
    return ranks


def _generate_record(spec, index):
    # type: (CorpusSpec, int) -> RankingRecord
    rng = SplitMix64.for_index(spec.seed, index)
    per_aspect = []  # type: List[List[int]]
    for a, count in enumerate(spec.query_tokens_per_aspect()):
        per_aspect.append(rng.sample(spec.aspect_range(a), count))
    query = [t for tokens in per_aspect for t in tokens]
    rng.shuffle(query)
    query_set = set(query)
    filler = [t for t in range(CONTENT_START, spec.vocab_size) if t not in query_set]

    candidates = []
    relevance = []
    for i in range(spec.candidates_per_record):
        tokens = []  # type: List[int]
        overlaps = []
        for aspect_tokens in per_aspect:
            o = rng.below(len(aspect_tokens) + 1)
            tokens.extend(rng.sample(aspect_tokens, o))
            overlaps.append(o)
        while len(tokens) < spec.passage_length:
            tokens.append(filler[rng.below(len(filler))])
        rng.shuffle(tokens)
        candidates.append(Candidate("p{}".format(i), tokens))
        relevance.append(relevance_of(overlaps, spec.relevance_rule))
    return RankingRecord("q{:06d}".format(index), query, candidates,
                         ranks_from_relevance(relevance), relevance)


def sum_rule_divergence(records, spec):
    # type: (Sequence[RankingRecord], CorpusSpec) -> float
    """Share of records whose sum-overlap ranks differ from the stored ranks."""
    if not records:
        return 0.0
    differing = 0
    for record in records:
        sums = [relevance_of(aspect_overlaps(record.query, p, spec), "sum") for p in record.passages()]
        if ranks_from_relevance(sums) != record.ranks:
            differing += 1
    return differing / float(len(records))


def generate_corpus(spec, threads=None):
    # type: (CorpusSpec, Optional[int]) -> List[RankingRecord]
    """
    Generate spec.record_count records.

    Record i depends only on (spec, i), so generation can fan out to worker
    threads and still return records in index order.

    Raises:
        SpecError: If the spec is invalid, or under the min rule with several
            aspects fewer than 10% of records rank differently by summed
            overlap.
    """
    spec.validate()
    records = map_ordered(lambda i: _generate_record(spec, i), list(range(spec.record_count)),
                          threads=threads)
    if spec.relevance_rule == "min" and spec.aspects >= 2 and len(records) >= DIVERGENCE_SAMPLE:
        share = sum_rule_divergence(records, spec)
        logger.info("sum-overlap ordering differs on %.1f%% of records", 100.0 * share)
        if share < MIN_DIVERGENCE:
            raise SpecError("only {:.1%} of records separate the min rule from summed overlap "
                            "(need at least {:.0%})".format(share, MIN_DIVERGENCE))
    logger.info("generated %d records (%s)", len(records), spec)
    return records


def record_to_dict(record):
    # type: (RankingRecord) -> Dict[str, Any]
    data = {
        "query_id": record.query_id,
        "query": record.query,
        "candidates": [{"pid": c.pid, "tokens": c.tokens} for c in record.candidates],
        "ranks": record.ranks,
    }  # type: Dict[str, Any]
    if record.relevance is not None:
        data["relevance"] = [_plain_number(v) for v in record.relevance]
    return data


def _plain_number(value):
    # type: (float) -> Any
    return int(value) if float(value).is_integer() else value


def _int_list(value, field):
    # type: (Any, str) -> List[int]
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise ValueError("'{}' must be a list of integers".format(field))
    return value


def record_from_dict(data):
    # type: (Any) -> RankingRecord
    """
    Raises:
        ValueError: On a missing key or a value of the wrong type.
        RecordError: If the record violates its invariants.
    """
    if not isinstance(data, dict):
        raise ValueError("expected a JSON object")
    missing = [key for key in ("query_id", "query", "candidates", "ranks") if key not in data]
    if missing:
        raise ValueError("missing keys: {}".format(", ".join(missing)))
    if not isinstance(data["candidates"], list):
        raise ValueError("'candidates' must be a list")
    candidates = []
    for entry in data["candidates"]:
        if not isinstance(entry, dict) or "pid" not in entry or "tokens" not in entry:
            raise ValueError("each candidate needs 'pid' and 'tokens'")
        candidates.append(Candidate(entry["pid"], _int_list(entry["tokens"], "tokens")))
    relevance = data.get("relevance")
    if relevance is not None and (not isinstance(relevance, list) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in relevance)):
        raise ValueError("'relevance' must be a list of numbers")
    return RankingRecord(data["query_id"], _int_list(data["query"], "query"), candidates,
                         _int_list(data["ranks"], "ranks"), relevance)


def format_records(records):
    # type: (Sequence[RankingRecord]) -> str
    out = io.StringIO()
    out.write(RECORDS_HEADER + "\n")
    for record in records:
        out.write(json.dumps(record_to_dict(record), separators=(",", ":")))
        out.write("\n")
    return out.getvalue()


def write_records(path, records):
    # type: (str, Sequence[RankingRecord]) -> None
    """Write records as UTF-8 JSON lines after the version header."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_records(records))
    logger.info("wrote %d records to %s", len(records), path)


def iter_records(lines, vocab_size=None):
    # type: (Iterator[str], Optional[int]) -> Iterator[RankingRecord]
    """
    Parse records from text lines, checking the header and query-id uniqueness.

    Raises:
        RecordParseError: On a bad header, bad JSON or an invalid record,
            naming the 1-based line.
        IntegrityError: On a repeated query id.
    """
    seen = {}  # type: Dict[str, int]
    for number, line in enumerate(lines, start=1):
        text = line.rstrip("\r\n")
        if number == 1:
            if text.strip() != RECORDS_HEADER:
                raise RecordParseError(number, "expected header '{}'".format(RECORDS_HEADER))
            continue
        if not text.strip():
            continue
        try:
            record = record_from_dict(json.loads(text))
        except ValueError as e:
            raise RecordParseError(number, str(e))
        except RecordError as e:
            raise RecordParseError(number, e.message)
        if vocab_size is not None and record.max_token() >= vocab_size:
            raise RecordParseError(number, "token id {} outside vocabulary of size {}".format(
                record.max_token(), vocab_size
            ))
        if record.query_id in seen:
            raise IntegrityError("line {}: query_id '{}' already used on line {}".format(
                number, record.query_id, seen[record.query_id]
            ))
        seen[record.query_id] = number
        yield record


def read_records(path, vocab_size=None):
    # type: (str, Optional[int]) -> List[RankingRecord]
    """Read a records file; an empty file holds no records."""
    with open(path, "r", encoding="utf-8") as f:
        records = list(iter_records(f, vocab_size))
    logger.info("read %d records from %s", len(records), path)
    return records


def parse_records(text, vocab_size=None):
    # type: (str, Optional[int]) -> List[RankingRecord]
    return list(iter_records(io.StringIO(text), vocab_size))


def _round_half_up(x):
    # type: (float) -> int
    return int(math.floor(x + 0.5))


def split(records, fractions, seed=0):
    # type: (Sequence[RankingRecord], Sequence[float], int) -> Tuple[List[RankingRecord], List[RankingRecord], List[RankingRecord]]
    """
    Shuffle records with a seeded SplitMix64 and cut them into train,
    validation and test parts.

    Sizes are the rounded fractions of the total; test takes the remainder.
    Each part keeps the original record order.

    Raises:
        SpecError: If there are not three non-negative fractions summing to 1,
            or if query ids repeat.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError("split fractions must be three non-negative numbers summing to 1, got {}".format(
            list(fractions)
        ))
    if len(set(r.query_id for r in records)) != len(records):
        raise SpecError("cannot split records with repeated query ids")
    total = len(records)
    order = list(range(total))
    SplitMix64(seed).shuffle(order)
    n_train = min(_round_half_up(fractions[0] * total), total)
    n_validation = min(_round_half_up(fractions[1] * total), total - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_validation], order[n_train + n_validation:])
    train, validation, test = ([records[i] for i in sorted(part)] for part in parts)
    logger.info("split %d records into %d/%d/%d", total, len(train), len(validation), len(test))
    return train, validation, test
