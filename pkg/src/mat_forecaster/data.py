"""Data plumbing: CSV/JSONL ingestion, monthly downsampling, the lexicon-based
topic-sentiment featurizer, window alignment into multimodal samples,
chronological splitting, normalization, and a synthetic generator with known
channel couplings for oracle experiments.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np

from .errors import ConfigError, DataError

_FLOAT_FMT = "{:.10g}"


def month_index(d: date) -> int:
    return d.year * 12 + (d.month - 1)


def month_start(index: int) -> date:
    return date(index // 12, index % 12 + 1, 1)


# -- tables -------------------------------------------------------------------


@dataclass
class TimeSeriesTable:
    timestamps: list
    columns: dict  # name -> float64 array, insertion-ordered
    frequency: str = "unknown"
    fill_count: int = 0

    def __post_init__(self):
        n = len(self.timestamps)
        for name, col in self.columns.items():
            if len(col) != n:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {n}")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b <= a:
                raise DataError(f"timestamps not strictly increasing at {b}")

    @property
    def names(self):
        return list(self.columns)


def _infer_frequency(timestamps):
    if len(timestamps) < 2:
        return "unknown"
    gaps = [(b - a).days for a, b in zip(timestamps, timestamps[1:])]
    med = sorted(gaps)[len(gaps) // 2]
    if med <= 3:
        return "daily"
    if med <= 10:
        return "weekly"
    if med <= 45:
        return "monthly"
    return "irregular"


def load_timeseries_csv(path, schema=None) -> TimeSeriesTable:
    """Parse a `date,<name>...` CSV. Empty cells are forward-filled (leading
    gaps back-filled) and the total fill count is recorded on the table.

    `schema`, when given, lists column names that must be present.
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if "date" not in header:
        raise DataError(f"{path}: header has no 'date' column: {header}")
    date_pos = header.index("date")
    names = [h for i, h in enumerate(header) if i != date_pos]
    if schema:
        missing = [c for c in schema if c not in names]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
    timestamps = []
    raw = {name: [] for name in names}
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        try:
            ts = date.fromisoformat(row[date_pos].strip())
        except ValueError as e:
            raise DataError(f"{path}: row {r}: unparseable date {row[date_pos]!r}") from e
        if timestamps and ts <= timestamps[-1]:
            raise DataError(f"{path}: row {r}: date {ts} not after {timestamps[-1]}")
        timestamps.append(ts)
        ci = 0
        for i, cell in enumerate(row):
            if i == date_pos:
                continue
            cell = cell.strip()
            if cell == "":
                raw[names[ci]].append(None)
            else:
                try:
                    raw[names[ci]].append(float(cell))
                except ValueError as e:
                    raise DataError(
                        f"{path}: row {r}, column {names[ci]!r}: bad number {cell!r}"
                    ) from e
            ci += 1
    if not timestamps:
        raise DataError(f"{path}: no data rows")
    fill_count = 0
    columns = {}
    for name, vals in raw.items():
        present = [v for v in vals if v is not None]
        if not present:
            raise DataError(f"{path}: column {name!r} has no values")
        out = np.empty(len(vals), dtype=np.float64)
        last = None
        for i, v in enumerate(vals):
            if v is None:
                fill_count += 1
            else:
                last = v
            out[i] = np.nan if last is None else last
        # leading gap: backfill from the first observed value
        if np.isnan(out[0]):
            first = present[0]
            k = 0
            while k < len(out) and np.isnan(out[k]):
                out[k] = first
                k += 1
        columns[name] = out
    return TimeSeriesTable(timestamps=timestamps, columns=columns,
                           frequency=_infer_frequency(timestamps), fill_count=fill_count)


def write_timeseries_csv(table: TimeSeriesTable, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("date," + ",".join(table.names) + "\n")
        for i, ts in enumerate(table.timestamps):
            cells = [_FLOAT_FMT.format(table.columns[n][i]) for n in table.names]
            f.write(ts.isoformat() + "," + ",".join(cells) + "\n")


def downsample_monthly(table: TimeSeriesTable) -> TimeSeriesTable:
    """One row per calendar month, each column the mean of that month's rows."""
    if table.frequency == "monthly":
        raise DataError("table is already monthly")
    buckets = {}
    for i, ts in enumerate(table.timestamps):
        buckets.setdefault(month_index(ts), []).append(i)
    months = sorted(buckets)
    for a, b in zip(months, months[1:]):
        if b != a + 1:
            raise DataError(f"no observations for month {month_start(a + 1)}")
    timestamps = [month_start(m) for m in months]
    columns = {
        name: np.array([col[buckets[m]].mean() for m in months], dtype=np.float64)
        for name, col in table.columns.items()
    }
    return TimeSeriesTable(timestamps=timestamps, columns=columns, frequency="monthly",
                           fill_count=table.fill_count)


# -- text ---------------------------------------------------------------------


@dataclass
class Document:
    date: date
    source: str
    text: str


@dataclass
class TextCorpus:
    documents: list


def read_corpus_jsonl(path) -> TextCorpus:
    """One JSON object per line with fields date, source, text."""
    docs = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {ln}: bad JSON ({e})") from e
            try:
                d = date.fromisoformat(obj["date"])
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}: line {ln}: bad or missing date") from e
            text = obj.get("text", "")
            if not isinstance(text, str) or not text.strip():
                raise DataError(f"{path}: line {ln}: empty text")
            docs.append(Document(date=d, source=str(obj.get("source", "")), text=text))
    return TextCorpus(documents=docs)


@dataclass
class TopicLexicon:
    topics: list  # [(name, frozenset of keywords)]
    sentiment: dict  # word -> score in [-1, 1]

    def validate(self):
        seen = {}
        for name, kws in self.topics:
            for kw in kws:
                if kw in seen:
                    raise DataError(
                        f"keyword {kw!r} appears in topics {seen[kw]!r} and {name!r}"
                    )
                seen[kw] = name
        for word, score in self.sentiment.items():
            if not (-1.0 <= score <= 1.0):
                raise DataError(f"sentiment score for {word!r} out of [-1, 1]: {score}")
        return self

    @property
    def topic_names(self):
        return [name for name, _ in self.topics]


def read_lexicon_json(path) -> TopicLexicon:
    """{"topics": [{"name":..., "keywords":[...]}], "sentiment": {word: score}}"""
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: bad JSON ({e})") from e
    try:
        topics = [(t["name"], frozenset(w.lower() for w in t["keywords"]))
                  for t in obj["topics"]]
        sentiment = {w.lower(): float(s) for w, s in obj["sentiment"].items()}
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: lexicon structure invalid ({e})") from e
    if not topics:
        raise DataError(f"{path}: lexicon has no topics")
    return TopicLexicon(topics=topics, sentiment=sentiment).validate()


_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "no", "vs", "etc",
    "inc", "corp", "co", "dept", "est", "fig", "approx", "gov", "sec",
    "e.g", "i.e", "u.s", "u.k", "a.m", "p.m",
}

_WORD_RE = re.compile(r"[a-z0-9']+")


def split_sentences(text):
    """Terminator-based splitting on . ! ? with an abbreviation guard list."""
    sentences = []
    buf = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        buf.append(ch)
        if ch in ".!?":
            # swallow a run of terminators
            while i + 1 < n and text[i + 1] in ".!?":
                i += 1
                buf.append(text[i])
            if ch == ".":
                tail = "".join(buf[:-1])
                m = re.search(r"[A-Za-z][A-Za-z.]*$", tail)
                word = m.group(0).lower().rstrip(".") if m else ""
                # single letters before a period are initials / spelled
                # abbreviations ("p.m.", "u.s."), never sentence ends
                if word in _ABBREVIATIONS or (len(word) == 1 and word.isalpha()):
                    i += 1
                    continue
            sent = "".join(buf).strip()
            if sent.strip(".!?"):
                sentences.append(sent)
            buf = []
        i += 1
    last = "".join(buf).strip()
    if last.strip(".!?"):
        sentences.append(last)
    return sentences


def _tokens(sentence):
    return _WORD_RE.findall(sentence.lower())


def assign_topic(tokens, lexicon: TopicLexicon):
    """Index of the topic with the most keyword hits; None if no hits;
    ties go to the lowest topic index."""
    best, best_hits = None, 0
    for idx, (_, keywords) in enumerate(lexicon.topics):
        hits = sum(1 for t in tokens if t in keywords)
        if hits > best_hits:
            best, best_hits = idx, hits
    return best


def sentence_sentiment(tokens, lexicon: TopicLexicon):
    """Mean lexicon score over matched words; 0 when nothing matches."""
    scores = [lexicon.sentiment[t] for t in tokens if t in lexicon.sentiment]
    if not scores:
        return 0.0
    return float(np.mean(scores))


@dataclass
class TopicSentimentFrame:
    timestamps: list  # month-start dates
    scores: np.ndarray  # [T x k] in [-1, 1]
    coverage: np.ndarray  # [T x k] bool, False where no sentence matched
    topic_names: list
    sentence_counts: dict = field(default_factory=dict)  # topic name -> count


def featurize_text(corpus: TextCorpus, lexicon: TopicLexicon, calendar) -> TopicSentimentFrame:
    """Sentence split, topic assignment by keyword hits, lexicon sentiment,
    then per calendar month and topic the mean over all assigned sentences.

    Months/topics with no assigned sentence score 0 with coverage False.
    Documents are processed in (date, source, input order) so the result is
    invariant to the order documents arrive in.
    """
    if not corpus.documents:
        raise DataError("empty corpus")
    lexicon.validate()
    cal_index = {month_index(d): i for i, d in enumerate(calendar)}
    k = len(lexicon.topics)
    t = len(calendar)
    sums = np.zeros((t, k), dtype=np.float64)
    counts = np.zeros((t, k), dtype=np.int64)
    docs = sorted(enumerate(corpus.documents), key=lambda p: (p[1].date, p[1].source, p[0]))
    for _, doc in docs:
        mi = cal_index.get(month_index(doc.date))
        if mi is None:
            continue
        for sentence in split_sentences(doc.text):
            tokens = _tokens(sentence)
            topic = assign_topic(tokens, lexicon)
            if topic is None:
                continue
            sums[mi, topic] += sentence_sentiment(tokens, lexicon)
            counts[mi, topic] += 1
    coverage = counts > 0
    scores = np.where(coverage, sums / np.maximum(counts, 1), 0.0)
    per_topic = {name: int(counts[:, i].sum()) for i, (name, _) in enumerate(lexicon.topics)}
    return TopicSentimentFrame(timestamps=list(calendar), scores=scores, coverage=coverage,
                               topic_names=lexicon.topic_names, sentence_counts=per_topic)


def write_frame_csv(frame: TopicSentimentFrame, scores_path, coverage_path):
    header = "date," + ",".join(frame.topic_names) + "\n"
    with open(scores_path, "w", encoding="utf-8") as f:
        f.write(header)
        for i, ts in enumerate(frame.timestamps):
            cells = [_FLOAT_FMT.format(v) for v in frame.scores[i]]
            f.write(ts.isoformat() + "," + ",".join(cells) + "\n")
    with open(coverage_path, "w", encoding="utf-8") as f:
        f.write(header)
        for i, ts in enumerate(frame.timestamps):
            cells = ["1" if v else "0" for v in frame.coverage[i]]
            f.write(ts.isoformat() + "," + ",".join(cells) + "\n")


def read_frame_csv(scores_path, coverage_path=None) -> TopicSentimentFrame:
    table = load_timeseries_csv(scores_path)
    scores = np.stack([table.columns[n] for n in table.names], axis=1)
    if coverage_path is not None:
        cov_table = load_timeseries_csv(coverage_path)
        coverage = np.stack([cov_table.columns[n] for n in cov_table.names], axis=1) > 0.5
    else:
        coverage = np.ones_like(scores, dtype=bool)
    return TopicSentimentFrame(timestamps=list(table.timestamps), scores=scores,
                               coverage=coverage, topic_names=table.names)


# -- samples -------------------------------------------------------------------


@dataclass
class ModalitySequence:
    values: np.ndarray  # [T x d]
    timestamps: list
    feature_names: list


@dataclass
class MultimodalSample:
    x_txt: ModalitySequence
    x_ts: ModalitySequence
    y_hist: np.ndarray  # [T_ts]
    y_future: np.ndarray  # [T']
    anchor: date


def align_and_window(ts_table: TimeSeriesTable, txt_frame: TopicSentimentFrame,
                     target_col, lookback_ts, lookback_txt, horizon):
    """Slide an anchor over every month where both lookback windows and the
    full horizon exist. Windows may have different lengths but always end at
    the same anchor month; the target series rides along as the last series
    column. Returns [] when the overlap leaves no room (not an error)."""
    if lookback_ts < 1 or lookback_txt < 1 or horizon < 1:
        raise ConfigError("lookbacks and horizon must be >= 1")
    if target_col not in ts_table.columns:
        raise DataError(f"target column {target_col!r} not in table ({ts_table.names})")
    ts_months = {month_index(d): i for i, d in enumerate(ts_table.timestamps)}
    txt_months = {month_index(d): i for i, d in enumerate(txt_frame.timestamps)}
    common = sorted(set(ts_months) & set(txt_months))
    if not common:
        raise DataError(
            f"no overlapping months: series cover {ts_table.timestamps[0]}..."
            f"{ts_table.timestamps[-1]}, text covers {txt_frame.timestamps[0]}..."
            f"{txt_frame.timestamps[-1]}"
        )
    for a, b in zip(common, common[1:]):
        if b != a + 1:
            raise DataError(f"overlap has a gap after {month_start(a)}")
    feature_cols = [n for n in ts_table.names if n != target_col] + [target_col]
    ts_values = np.stack(
        [np.asarray(ts_table.columns[n], dtype=np.float64)[[ts_months[m] for m in common]]
         for n in feature_cols], axis=1)
    txt_values = txt_frame.scores[[txt_months[m] for m in common]]
    target = ts_values[:, -1]
    months = [month_start(m) for m in common]
    n = len(common)
    samples = []
    first_anchor = max(lookback_ts, lookback_txt) - 1
    for i in range(first_anchor, n - horizon):
        samples.append(MultimodalSample(
            x_txt=ModalitySequence(
                values=txt_values[i - lookback_txt + 1: i + 1].copy(),
                timestamps=months[i - lookback_txt + 1: i + 1],
                feature_names=list(txt_frame.topic_names)),
            x_ts=ModalitySequence(
                values=ts_values[i - lookback_ts + 1: i + 1].copy(),
                timestamps=months[i - lookback_ts + 1: i + 1],
                feature_names=feature_cols),
            y_hist=target[i - lookback_ts + 1: i + 1].copy(),
            y_future=target[i + 1: i + 1 + horizon].copy(),
            anchor=months[i],
        ))
    return samples


def split_dataset(samples):
    """Chronological 70/15/15 split on anchor order; sizes floor at each
    boundary with the remainder going to train, then each split is bumped to
    at least one sample."""
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    anchors = [s.anchor for s in samples]
    if anchors != sorted(anchors):
        samples = sorted(samples, key=lambda s: s.anchor)
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    n_test = n - n_train - n_val
    while n_val < 1:
        n_train -= 1
        n_val += 1
    while n_test < 1:
        n_train -= 1
        n_test += 1
    if n_train < 1:
        raise DataError(f"cannot split {n} samples into three non-empty parts")
    train = samples[:n_train]
    val = samples[n_train:n_train + n_val]
    test = samples[n_train + n_val:]
    return train, val, test


# -- normalization --------------------------------------------------------------


@dataclass
class Normalizer:
    ts_mean: np.ndarray
    ts_std: np.ndarray
    txt_mean: np.ndarray
    txt_std: np.ndarray

    VAR_FLOOR = 1e-8

    @property
    def target_mean(self):
        return float(self.ts_mean[-1])

    @property
    def target_std(self):
        return float(self.ts_std[-1])

    def denormalize_target(self, arr):
        return np.asarray(arr) * self.target_std + self.target_mean

    def normalize_target(self, arr):
        return (np.asarray(arr) - self.target_mean) / self.target_std


def fit_normalizer(train_samples) -> Normalizer:
    """Per-feature mean/std over every training window row (variance floored
    at 1e-8). The target channel is the last series column; its stats also
    normalize y_hist / y_future."""
    if not train_samples:
        raise DataError("cannot fit a normalizer on an empty split")
    ts_rows = np.concatenate([s.x_ts.values for s in train_samples], axis=0)
    txt_rows = np.concatenate([s.x_txt.values for s in train_samples], axis=0)

    def stats(rows):
        mean = rows.mean(axis=0)
        var = rows.var(axis=0)
        std = np.sqrt(np.maximum(var, Normalizer.VAR_FLOOR))
        return mean, std

    ts_mean, ts_std = stats(ts_rows)
    txt_mean, txt_std = stats(txt_rows)
    return Normalizer(ts_mean=ts_mean, ts_std=ts_std, txt_mean=txt_mean, txt_std=txt_std)


def apply_normalizer(samples, norm: Normalizer):
    """Returns normalized copies; the inputs are left untouched."""
    out = []
    for s in samples:
        out.append(MultimodalSample(
            x_txt=replace(s.x_txt, values=(s.x_txt.values - norm.txt_mean) / norm.txt_std),
            x_ts=replace(s.x_ts, values=(s.x_ts.values - norm.ts_mean) / norm.ts_std),
            y_hist=(s.y_hist - norm.target_mean) / norm.target_std,
            y_future=(s.y_future - norm.target_mean) / norm.target_std,
            anchor=s.anchor,
        ))
    return out


# -- synthetic -------------------------------------------------------------------


@dataclass
class Coupling:
    """One planted dependency: y_t += coeff * channel[t - lag]."""

    channel: int
    coeff: float
    lag: int


@dataclass
class SyntheticSpec:
    months: int = 400
    n_ts_features: int = 10
    n_topics: int = 8
    ts_couplings: list = field(default_factory=list)  # [Coupling]
    topic_couplings: list = field(default_factory=list)
    noise: float = 0.1
    start: date = date(1990, 1, 1)

    def validate(self):
        if self.months < 4:
            raise ConfigError("need at least 4 months of synthetic data")
        if self.n_ts_features < 1 or self.n_topics < 1:
            raise ConfigError("need at least one series feature and one topic")
        for c in self.ts_couplings:
            if not (0 <= c.channel < self.n_ts_features):
                raise ConfigError(f"series coupling channel {c.channel} out of range")
            if c.lag < 0:
                raise ConfigError("lags must be >= 0")
        for c in self.topic_couplings:
            if not (0 <= c.channel < self.n_topics):
                raise ConfigError(f"topic coupling channel {c.channel} out of range")
            if c.lag < 0:
                raise ConfigError("lags must be >= 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        return self


@dataclass
class SyntheticTruth:
    spec: SyntheticSpec
    informative_ts: list  # channel indices
    informative_topics: list


def generate_synthetic(spec: SyntheticSpec, seed):
    """Monthly table + topic frame where the target is a lagged linear mix of
    the informative channels plus Gaussian noise; everything else is
    independent noise. Lagged values before the series start count as zero.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    t, q, k = spec.months, spec.n_ts_features, spec.n_topics
    features = np.empty((t, q), dtype=np.float64)
    for j in range(q):
        eps = rng.normal(size=t)
        x = np.empty(t)
        x[0] = eps[0]
        for i in range(1, t):
            x[i] = 0.7 * x[i - 1] + eps[i]
        features[:, j] = x
    topics = np.empty((t, k), dtype=np.float64)
    for j in range(k):
        eps = rng.normal(scale=0.6, size=t)
        x = np.empty(t)
        x[0] = eps[0]
        for i in range(1, t):
            x[i] = 0.6 * x[i - 1] + eps[i]
        topics[:, j] = np.tanh(x)
    y = np.zeros(t, dtype=np.float64)
    for c in spec.ts_couplings:
        shifted = np.zeros(t)
        shifted[c.lag:] = features[: t - c.lag, c.channel]
        y += c.coeff * shifted
    for c in spec.topic_couplings:
        shifted = np.zeros(t)
        shifted[c.lag:] = topics[: t - c.lag, c.channel]
        y += c.coeff * shifted
    if spec.noise > 0:
        y = y + spec.noise * rng.normal(size=t)
    start = month_index(spec.start)
    timestamps = [month_start(start + i) for i in range(t)]
    columns = {f"f{j}": features[:, j].copy() for j in range(q)}
    columns["y"] = y
    table = TimeSeriesTable(timestamps=timestamps, columns=columns, frequency="monthly")
    frame = TopicSentimentFrame(
        timestamps=list(timestamps), scores=topics,
        coverage=np.ones((t, k), dtype=bool),
        topic_names=[f"t{j}" for j in range(k)])
    truth = SyntheticTruth(
        spec=spec,
        informative_ts=sorted({c.channel for c in spec.ts_couplings}),
        informative_topics=sorted({c.channel for c in spec.topic_couplings}),
    )
    return table, frame, truth
