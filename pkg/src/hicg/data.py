"""Clickstream ingestion: parsing, sessionization, filtering, splitting and
sample generation, plus the on-disk processed-dataset format."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Sequence

from . import ConfigError, DataError

log = logging.getLogger(__name__)

CANONICAL_HEADER = ("session_id", "timestamp", "item_id", "behavior")
DAY_MS = 24 * 3600 * 1000
MINUTE_MS = 60 * 1000

MANIFEST_FILE = "manifest.txt"
ITEM_VOCAB_FILE = "items.vocab"
BEHAVIOR_VOCAB_FILE = "behaviors.vocab"
TRAIN_FILE = "train.sessions"
TEST_FILE = "test.sessions"


@dataclass(frozen=True)
class RawEvent:
    session_key: str
    timestamp: int
    item: str
    behavior: str


@dataclass(frozen=True)
class Behavior:
    """One interaction.  ``item``/``btype`` hold raw tokens before encoding
    and dense indices afterwards."""

    item: int | str
    btype: int | str
    timestamp: int = 0


@dataclass(frozen=True)
class Session:
    session_id: str
    behaviors: tuple[Behavior, ...]

    def __len__(self) -> int:
        return len(self.behaviors)

    @property
    def start(self) -> int:
        return self.behaviors[0].timestamp

    @property
    def items(self) -> list:
        return [b.item for b in self.behaviors]


@dataclass(frozen=True)
class TrainingSample:
    prefix: tuple[Behavior, ...]
    label_item: int
    label_type: int
    session_id: str = ""


class EventLog(list):
    """List of :class:`RawEvent` that also remembers how many input records
    were rejected."""

    def __init__(self, events=(), malformed: int = 0):
        super().__init__(events)
        self.malformed = malformed


class Vocab:
    """Bidirectional token <-> dense index map."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = []
        self._index: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        token = str(token)
        if token in self._index:
            return self._index[token]
        if not token or "\n" in token:
            raise DataError(f"invalid vocabulary token {token!r}")
        self._index[token] = len(self._tokens)
        self._tokens.append(token)
        return self._index[token]

    def index(self, token: str) -> int:
        return self._index[token]

    def token(self, i: int) -> str:
        return self._tokens[i]

    def get(self, token: str, default=None):
        return self._index.get(token, default)

    def __contains__(self, token) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self._tokens)

    def __iter__(self):
        return iter(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self._tokens)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(line for line in text.split("\n") if line)


@dataclass
class Dataset:
    item_vocab: Vocab
    behavior_vocab: Vocab
    target_type: int
    train_sessions: list[Session]
    test_sessions: list[Session]
    stats: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def n_types(self) -> int:
        return len(self.behavior_vocab)

    def vocab_checksum(self) -> str:
        h = hashlib.sha256(self.item_vocab.to_text().encode("utf-8"))
        h.update(b"\0")
        h.update(self.behavior_vocab.to_text().encode("utf-8"))
        return h.hexdigest()


# --------------------------------------------------------------------------
# Parsing


def _iso_to_ms(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def _canonical(row: list[str]) -> RawEvent:
    if len(row) != 4:
        raise ValueError(f"expected 4 fields, got {len(row)}")
    sid, ts, item, beh = (x.strip() for x in row)
    return RawEvent(sid, int(ts), item, beh)


def _yoochoose(label: str):
    def parse(row: list[str]) -> RawEvent:
        if len(row) < 3:
            raise ValueError(f"expected at least 3 fields, got {len(row)}")
        return RawEvent(row[0].strip(), _iso_to_ms(row[1]), row[2].strip(), label)

    return parse


_RETAILROCKET_EVENTS = {"view": "view", "addtocart": "cart", "transaction": "buy"}


def _retailrocket(row: list[str]) -> RawEvent:
    if len(row) < 4:
        raise ValueError(f"expected at least 4 fields, got {len(row)}")
    ts, visitor, event, item = (x.strip() for x in row[:4])
    return RawEvent(visitor, int(ts), item, _RETAILROCKET_EVENTS[event])


ADAPTERS = {
    "canonical": (_canonical, CANONICAL_HEADER),
    "yoochoose-clicks": (_yoochoose("view"), None),
    "yoochoose-buys": (_yoochoose("buy"), None),
    "retailrocket": (_retailrocket, ("timestamp", "visitorid", "event", "itemid", "transactionid")),
}


def parse_event_log(
    stream: IO[bytes] | bytes,
    adapter: str = "canonical",
    strict: bool = False,
    behaviors: Sequence[str] | None = None,
) -> EventLog:
    """Parse a raw event file into :class:`RawEvent` records.

    Malformed records are skipped and counted on the returned log's
    ``malformed`` attribute, or raise :class:`DataError` naming the
    1-based line number when ``strict`` is set.  If ``behaviors`` is given,
    labels outside it count as malformed.
    """
    if adapter not in ADAPTERS:
        raise ConfigError(f"unknown adapter {adapter!r}; choose from {sorted(ADAPTERS)}")
    parse, header = ADAPTERS[adapter]
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    text = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    allowed = set(behaviors) if behaviors is not None else None

    events = EventLog()
    reader = csv.reader(text)
    for row in reader:
        lineno = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if lineno == 1 and header is not None and tuple(x.strip() for x in row) == header:
            continue
        try:
            ev = parse(row)
            if ev.timestamp < 0:
                raise ValueError("negative timestamp")
            if not ev.behavior or not ev.session_key or not ev.item:
                raise ValueError("empty field")
            if allowed is not None and ev.behavior not in allowed:
                raise ValueError(f"undeclared behavior {ev.behavior!r}")
        except (ValueError, KeyError) as exc:
            if strict:
                raise DataError(f"line {lineno}: malformed record ({exc})") from None
            events.malformed += 1
            continue
        events.append(ev)
    text.detach()
    if events.malformed:
        log.warning("skipped %d malformed records", events.malformed)
    return events


# --------------------------------------------------------------------------
# Sessions


def sessionize(events: Sequence[RawEvent], mode: str = "by_key", gap_ms: int | None = None) -> list[Session]:
    """Group events into sessions.

    ``by_key`` uses the source session key directly; ``by_gap`` additionally
    splits a key's timeline wherever consecutive events are more than
    ``gap_ms`` apart.
    """
    if mode not in ("by_key", "by_gap"):
        raise ConfigError(f"unknown sessionize mode {mode!r}")
    if mode == "by_gap" and (gap_ms is None or gap_ms <= 0):
        raise ConfigError("gap_ms must be positive for by_gap sessionization")

    groups: "OrderedDict[str, list[RawEvent]]" = OrderedDict()
    for ev in events:
        groups.setdefault(ev.session_key, []).append(ev)

    sessions = []
    for key, evs in groups.items():
        evs = sorted(evs, key=lambda e: e.timestamp)  # stable
        behaviors = [Behavior(e.item, e.behavior, e.timestamp) for e in evs]
        if mode == "by_key":
            sessions.append(Session(key, tuple(behaviors)))
            continue
        piece = [behaviors[0]]
        n = 0
        for prev, cur in zip(behaviors, behaviors[1:]):
            if cur.timestamp - prev.timestamp > gap_ms:
                sessions.append(Session(f"{key}#{n}", tuple(piece)))
                n += 1
                piece = []
            piece.append(cur)
        sessions.append(Session(f"{key}#{n}" if n else key, tuple(piece)))
    return sessions


def filter_dataset(sessions: Sequence[Session], min_session_len: int = 2, min_item_freq: int = 5) -> list[Session]:
    """Drop rare items and short sessions, repeating until neither rule
    removes anything."""
    if min_session_len < 1 or min_item_freq < 1:
        raise ConfigError("filter thresholds must be >= 1")
    current = list(sessions)
    while True:
        counts = Counter(b.item for s in current for b in s.behaviors)
        changed = False
        out = []
        for s in current:
            kept = tuple(b for b in s.behaviors if counts[b.item] >= min_item_freq)
            if len(kept) != len(s.behaviors):
                changed = True
            if len(kept) < min_session_len:
                changed = True
                continue
            out.append(s if len(kept) == len(s.behaviors) else Session(s.session_id, kept))
        current = out
        if not changed:
            return current


def temporal_split(sessions: Sequence[Session], test_window_ms: int) -> tuple[list[Session], list[Session]]:
    """Sessions starting less than ``test_window_ms`` before the latest
    session start form the test set."""
    if not sessions:
        return [], []
    if test_window_ms < 0:
        raise ConfigError("test window must be non-negative")
    latest = max(s.start for s in sessions)
    cutoff = latest - test_window_ms
    train = [s for s in sessions if s.start <= cutoff]
    test = [s for s in sessions if s.start > cutoff]
    return train, test


def _as_fraction(fraction) -> Fraction:
    try:
        return Fraction(fraction) if not isinstance(fraction, float) else Fraction(fraction).limit_denominator(10**6)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid fraction {fraction!r}") from exc


def take_recent_fraction(train: Sequence[Session], fraction) -> list[Session]:
    """Keep the ``ceil(fraction * n)`` most recently started sessions,
    preserving their relative order."""
    frac = _as_fraction(fraction)
    if not 0 < frac <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n_keep = math.ceil(frac * len(train))
    order = sorted(range(len(train)), key=lambda i: (train[i].start, i), reverse=True)
    keep = set(order[:n_keep])
    return [s for i, s in enumerate(train) if i in keep]


def sequence_split(session: Session, target_type, restrict_to_target: bool = True) -> list[TrainingSample]:
    """Turn a session into (prefix, next behavior) samples."""
    bs = session.behaviors
    out = []
    for t in range(1, len(bs)):
        label = bs[t]
        if restrict_to_target and label.btype != target_type:
            continue
        out.append(TrainingSample(bs[:t], label.item, label.btype, session.session_id))
    return out


def split_sessions(sessions: Iterable[Session], target_type, restrict_to_target: bool = True) -> list[TrainingSample]:
    return [x for s in sessions for x in sequence_split(s, target_type, restrict_to_target)]


# --------------------------------------------------------------------------
# Encoding and the full pipeline


def build_vocab(sessions: Iterable[Session]) -> Vocab:
    """Item vocabulary in order of first appearance."""
    vocab = Vocab()
    for s in sessions:
        for b in s.behaviors:
            vocab.add(b.item)
    return vocab


def encode_sessions(sessions, item_vocab: Vocab, behavior_vocab: Vocab, min_session_len: int = 1):
    """Map tokens to indices.  Behaviors on unknown items are dropped; returns
    the encoded sessions and the number of dropped behaviors."""
    out, dropped = [], 0
    for s in sessions:
        kept = []
        for b in s.behaviors:
            i = item_vocab.get(b.item)
            if i is None:
                dropped += 1
                continue
            kept.append(Behavior(i, behavior_vocab.index(b.btype), b.timestamp))
        if len(kept) >= min_session_len:
            out.append(Session(s.session_id, tuple(kept)))
    return out, dropped


def collapse_types(sessions: Iterable[Session], btype: int = 0) -> list[Session]:
    """Replace every behavior type by ``btype`` (type-blind ablation)."""
    return [
        Session(s.session_id, tuple(Behavior(b.item, btype, b.timestamp) for b in s.behaviors))
        for s in sessions
    ]


def blind_samples(samples: Iterable[TrainingSample]) -> list[TrainingSample]:
    """Same samples with every prefix behavior typed 0."""
    return [
        TrainingSample(tuple(Behavior(b.item, 0, b.timestamp) for b in s.prefix), s.label_item, 0, s.session_id)
        for s in samples
    ]


def preprocess(
    events: Sequence[RawEvent],
    *,
    behaviors: Sequence[str],
    target: str,
    mode: str = "by_key",
    gap_ms: int | None = None,
    min_session_len: int = 2,
    min_item_freq: int = 5,
    test_window_ms: int = DAY_MS,
    fraction=1,
    restrict_to_target: bool = True,
) -> Dataset:
    """Run sessionize, filter, split, fraction and encoding."""
    if target not in behaviors:
        raise ConfigError(f"target behavior {target!r} not among {list(behaviors)}")
    sessions = sessionize(events, mode, gap_ms)
    n_raw_sessions = len(sessions)
    sessions = filter_dataset(sessions, min_session_len, min_item_freq)
    train, test = temporal_split(sessions, test_window_ms)
    train = take_recent_fraction(train, fraction) if train else train

    item_vocab = build_vocab(train)
    behavior_vocab = Vocab(behaviors)
    train_enc, _ = encode_sessions(train, item_vocab, behavior_vocab, min_session_len)
    test_enc, dropped = encode_sessions(test, item_vocab, behavior_vocab, min_session_len)
    target_idx = behavior_vocab.index(target)

    ds = Dataset(item_vocab, behavior_vocab, target_idx, train_enc, test_enc)
    ds.stats = {
        "n_events": len(events),
        "n_raw_sessions": n_raw_sessions,
        "n_test_dropped_behaviors": dropped,
        **dataset_statistics(ds, restrict_to_target),
    }
    return ds


def dataset_statistics(ds: Dataset, restrict_to_target: bool = True) -> dict:
    everything = ds.train_sessions + ds.test_sessions
    n_sessions = max(len(everything), 1)
    n_views = sum(1 for s in everything for b in s.behaviors if b.btype == ds.target_type)
    n_conv = sum(1 for s in everything for b in s.behaviors if b.btype != ds.target_type)
    return {
        "n_train_sessions": len(ds.train_sessions),
        "n_test_sessions": len(ds.test_sessions),
        "n_items": ds.n_items,
        "n_behavior_types": ds.n_types,
        "n_views": n_views,
        "n_conversions": n_conv,
        "avg_views": round(n_views / n_sessions, 4),
        "avg_conversions": round(n_conv / n_sessions, 4),
        "n_train_samples": len(split_sessions(ds.train_sessions, ds.target_type, restrict_to_target)),
        "n_test_samples": len(split_sessions(ds.test_sessions, ds.target_type, restrict_to_target)),
    }


# --------------------------------------------------------------------------
# Processed-dataset artifact


def format_session(s: Session) -> str:
    body = ",".join(f"{b.item}:{b.btype}:{b.timestamp}" for b in s.behaviors)
    return f"{s.session_id}\t{body}\n"


def parse_session(line: str) -> Session:
    sid, _, body = line.rstrip("\n").partition("\t")
    behaviors = []
    for part in body.split(","):
        item, btype, ts = part.split(":")
        behaviors.append(Behavior(int(item), int(btype), int(ts)))
    return Session(sid, tuple(behaviors))


def _artifact_texts(ds: Dataset) -> dict[str, str]:
    return {
        ITEM_VOCAB_FILE: ds.item_vocab.to_text(),
        BEHAVIOR_VOCAB_FILE: ds.behavior_vocab.to_text(),
        TRAIN_FILE: "".join(format_session(s) for s in ds.train_sessions),
        TEST_FILE: "".join(format_session(s) for s in ds.test_sessions),
    }


def _checksum(texts: dict[str, str]) -> str:
    h = hashlib.sha256()
    for name in sorted(texts):
        h.update(name.encode())
        h.update(b"\0")
        h.update(texts[name].encode("utf-8"))
    return h.hexdigest()


def write_dataset(ds: Dataset, directory, extra: dict | None = None) -> dict:
    """Write vocabularies, session files and a key=value manifest.  Returns
    the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    texts = _artifact_texts(ds)
    for name, text in texts.items():
        (directory / name).write_text(text, encoding="utf-8", newline="\n")
    manifest = {
        "target_behavior": ds.behavior_vocab.token(ds.target_type),
        **ds.stats,
        **(extra or {}),
        "vocab_checksum": ds.vocab_checksum(),
        "checksum": _checksum(texts),
    }
    (directory / MANIFEST_FILE).write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return manifest


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    try:
        manifest = read_manifest(directory / MANIFEST_FILE)
        texts = {name: (directory / name).read_text(encoding="utf-8")
                 for name in (ITEM_VOCAB_FILE, BEHAVIOR_VOCAB_FILE, TRAIN_FILE, TEST_FILE)}
    except OSError as exc:
        raise DataError(f"cannot read processed dataset at {directory}: {exc}") from exc
    if manifest.get("checksum") and manifest["checksum"] != _checksum(texts):
        raise DataError(f"checksum mismatch in {directory}")
    try:
        item_vocab = Vocab.from_text(texts[ITEM_VOCAB_FILE])
        behavior_vocab = Vocab.from_text(texts[BEHAVIOR_VOCAB_FILE])
        train = [parse_session(l) for l in texts[TRAIN_FILE].splitlines() if l]
        test = [parse_session(l) for l in texts[TEST_FILE].splitlines() if l]
        target = behavior_vocab.index(manifest["target_behavior"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"corrupt processed dataset at {directory}: {exc}") from exc
    ds = Dataset(item_vocab, behavior_vocab, target, train, test)
    ds.stats = manifest
    return ds
