"""Flat ``key = value`` run configuration with preset includes and
``HICG_*`` environment overrides."""

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from . import ConfigError
from .data import DAY_MS, MINUTE_MS
from .training import HyperParams

ENV_PREFIX = "HICG_"

PRESETS = {
    "yoochoose-1-64": """
        adapter = yoochoose-clicks,yoochoose-buys
        behaviors = view,buy
        target_behavior = view
        session_mode = by_key
        test_window_days = 1
        train_fraction = 1/64
        beta = 0.2
    """,
    "diginetica": """
        adapter = canonical
        behaviors = view,cart,buy
        target_behavior = view
        session_mode = by_key
        test_window_days = 7
        train_fraction = 1
        beta = 0.1
    """,
    "retailrocket": """
        adapter = retailrocket
        behaviors = view,cart,buy
        target_behavior = view
        session_mode = by_gap
        session_gap_minutes = 30
        test_window_days = 7
        train_fraction = 1
        beta = 0.2
    """,
}


@dataclass
class RunConfig:
    raw_input: str = ""
    adapter: str = "canonical"
    processed_dir: str = "processed"
    checkpoint_dir: str = "runs"
    report_path: str = "report.json"
    behaviors: str = "view,cart,buy"
    target_behavior: str = "view"
    session_mode: str = "by_key"
    session_gap_minutes: float = 30.0
    min_session_len: int = 2
    min_item_freq: int = 5
    test_window_days: float = 1.0
    train_fraction: str = "1"
    restrict_to_target: bool = True
    validation_fraction: float = 0.1
    dim: int = 100
    dropout: float = 0.2
    batch_size: int = 100
    learning_rate: float = 3e-4
    l2: float = 1e-5
    lambda_cl: float = 0.1
    beta: float = 0.2
    temperature: float = 0.2
    steps: int = 1
    epochs: int = 30
    patience: int = 0
    seed: int = 0
    eval_ks: str = "5,20"
    iknn_neighbors: int = 500
    mode: str = "hicg-cl"

    def __post_init__(self):
        if self.mode not in ("hicg", "hicg-cl"):
            raise ConfigError(f"mode must be hicg or hicg-cl, got {self.mode!r}")
        if self.session_mode not in ("by_key", "by_gap"):
            raise ConfigError(f"unknown session_mode {self.session_mode!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.target_behavior not in self.behavior_list:
            raise ConfigError(f"target_behavior {self.target_behavior!r} not in behaviors")
        self.ks  # validate

    @property
    def behavior_list(self) -> list[str]:
        return [b.strip() for b in self.behaviors.split(",") if b.strip()]

    @property
    def ks(self) -> tuple[int, ...]:
        try:
            ks = tuple(sorted({int(k) for k in self.eval_ks.split(",") if k.strip()}))
        except ValueError:
            raise ConfigError(f"invalid eval_ks {self.eval_ks!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("eval_ks must list positive integers")
        return ks

    @property
    def inputs(self) -> list[tuple[str, str]]:
        paths = [p.strip() for p in self.raw_input.split(",") if p.strip()]
        adapters = [a.strip() for a in self.adapter.split(",") if a.strip()]
        if len(adapters) == 1:
            adapters = adapters * len(paths)
        if len(adapters) != len(paths):
            raise ConfigError("adapter list must have one entry per raw_input path (or a single entry)")
        return list(zip(adapters, paths))

    @property
    def gap_ms(self) -> int:
        return int(self.session_gap_minutes * MINUTE_MS)

    @property
    def test_window_ms(self) -> int:
        return int(self.test_window_days * DAY_MS)

    def hyperparams(self) -> HyperParams:
        names = {f.name for f in fields(HyperParams)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        if self.mode == "hicg":
            kw["lambda_cl"] = 0.0
        return HyperParams(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:8]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_text(text: str, base_dir: Path | None = None, _depth: int = 0) -> dict[str, str]:
    """Parse key=value lines into raw strings, expanding ``include`` lines
    (``preset:NAME`` or a path relative to ``base_dir``) in place."""
    if _depth > 8:
        raise ConfigError("include nesting too deep")
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, _, value = (x.strip() for x in line.partition("="))
        if key == "include":
            if value.startswith("preset:"):
                name = value[len("preset:"):]
                if name not in PRESETS:
                    raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
                out.update(parse_text(PRESETS[name], base_dir, _depth + 1))
            else:
                path = Path(value) if base_dir is None else base_dir / value
                out.update(parse_text(_read(path), path.parent, _depth + 1))
            continue
        if key not in FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _read(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def build_config(raw: dict[str, str] | None = None, env=None, overrides: dict | None = None) -> RunConfig:
    """Merge file values, then ``HICG_*`` environment variables, then
    explicit overrides (already typed or raw strings)."""
    merged = dict(raw or {})
    env = os.environ if env is None else env
    for name in FIELD_TYPES:
        key = ENV_PREFIX + name.upper()
        if key in env:
            merged[name] = env[key]
    typed = {k: _convert(k, v, FIELD_TYPES[k]) for k, v in merged.items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        typed[k] = _convert(k, v, FIELD_TYPES[k]) if isinstance(v, str) else v
    return RunConfig(**typed)


def load_config(path=None, env=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        raw = parse_text(_read(path), path.parent)
    return build_config(raw, env, overrides)
