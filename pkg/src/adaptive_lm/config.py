"""Flat ``key = value`` run configurations and the shipped presets."""
from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable

PRESET_PACKAGE = "adaptive_lm.presets"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _numbers(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(x) if "." in x else int(x) for x in text.replace(" ", "").split(","))


def _filters(text: str) -> tuple:
    out = []
    for item in text.replace(" ", "").split(","):
        w, n = item.split(":")
        out.append((int(w), int(n)))
    return tuple(out)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{w}:{n}" for w, n in value)
        return ",".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    choices: tuple = ()


def _choice(*options):
    return options


KEYS: dict[str, Key] = {
    "seed": Key(int, 1),
    "output_dir": Key(str, ""),
    # model
    "model.input": Key(str, "adaptive", _choice("adaptive", "embedding", "charcnn")),
    "model.output": Key(str, "adaptive", _choice("adaptive", "softmax")),
    "model.vocab_size": Key(int, 0),
    "model.input_dim": Key(int, 512),
    "model.output_dim": Key(int, 512),
    "model.adaptive_dim": Key(int, 1024),
    "model.adaptive_factor": Key(int, 4),
    "model.adaptive_cutoffs": Key(_numbers, (20000, 60000)),
    "model.tie_embeddings": Key(_bool, False),
    "model.tie_projections": Key(_bool, False),
    "model.output_head_projection": Key(str, "none", _choice("none", "private", "tied")),
    "model.tail_dropout": Key(float, 0.0),
    "model.n_blocks": Key(int, 16),
    "model.heads": Key(int, 16),
    "model.model_dim": Key(int, 1024),
    "model.ffn_dim": Key(int, 4096),
    "model.dropout": Key(float, 0.1),
    "model.attn_dropout": Key(float, 0.1),
    "model.relu_dropout": Key(float, 0.0),
    "model.char_dim": Key(int, 128),
    "model.char_filters": Key(_filters, ((1, 128), (2, 256), (3, 384), (4, 512), (5, 512), (6, 512), (7, 512))),
    "model.highway_layers": Key(int, 1),
    "model.char_inventory": Key(int, 0),
    "model.max_positions": Key(int, 4096),
    "model.dtype": Key(str, "float32", _choice("float32", "float64")),
    # data
    "data.min_count": Key(int, 3),
    "data.bpe_codes": Key(int, 0),
    "data.block_size": Key(int, 512),
    "data.batching": Key(str, "blocks", _choice("blocks", "sentences")),
    "data.token_budget": Key(int, 4096),
    # optimisation
    "optim.momentum": Key(float, 0.99),
    "optim.clip": Key(float, 0.1),
    "optim.lr_max": Key(float, 1.0),
    "optim.lr_min": Key(float, 1e-5),
    "optim.warmup_init": Key(float, 1e-7),
    "optim.warmup_steps": Key(int, 16000),
    "optim.cycles": Key(int, 4),
    "optim.first_cycle_steps": Key(int, 18000),
    "optim.shrink": Key(float, 0.75),
    "optim.accumulation_steps": Key(int, 1),
    "optim.max_steps": Key(int, 0),
    # training loop
    "train.log_interval": Key(int, 100),
    "train.valid_interval": Key(int, 1000),
    "train.save_interval": Key(int, 1000),
    # evaluation
    "eval.block_size": Key(int, 512),
    "eval.context_size": Key(int, 0),
    "eval.token_budget": Key(int, 4096),
    "eval.bin_by": Key(str, "train", _choice("train", "test")),
}


class ConfigError(ValueError):
    """Raised with every problem found in a configuration."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


class RunConfig:
    """Every tunable as a namespaced key; unknown keys are rejected."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: entry.default for k, entry in KEYS.items()}
        if values:
            self.update(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))

    def update(self, values: dict[str, Any]) -> "RunConfig":
        problems = []
        for key, value in values.items():
            if key not in KEYS:
                problems.append(f"unknown key {key!r}")
                continue
            if isinstance(value, str):
                try:
                    value = KEYS[key].parse(value)
                except (ValueError, TypeError) as exc:
                    problems.append(f"{key}: cannot parse {value!r} ({exc})")
                    continue
            self.values[key] = value
        if problems:
            raise ConfigError(problems)
        return self

    def set(self, assignments: Iterable[str]) -> "RunConfig":
        pairs = {}
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError([f"override {item!r} is not key=value"])
            pairs[key.strip()] = value.strip()
        return self.update(pairs)

    # -- text format --------------------------------------------------------
    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = {}
        problems = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                problems.append(f"line {lineno}: expected key = value")
                continue
            pairs[key.strip()] = value.strip()
        if problems:
            raise ConfigError(problems)
        cfg = base.copy() if base is not None else cls()
        return cfg.update(pairs)

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    def diff(self, other: "RunConfig") -> list[str]:
        return [
            f"{k}: {_fmt(self.values[k])} != {_fmt(other.values[k])}"
            for k in sorted(self.values)
            if self.values[k] != other.values[k]
        ]

    # -- validation -----------------------------------------------------------
    def problems(self, vocab_size: int | None = None) -> list[str]:
        v = self.values
        out = []
        for key, entry in KEYS.items():
            if entry.choices and v[key] not in entry.choices:
                out.append(f"{key}: {v[key]!r} not one of {', '.join(entry.choices)}")
        if v["model.model_dim"] % v["model.heads"]:
            out.append("model.model_dim must be divisible by model.heads")
        if v["model.model_dim"] % 2:
            out.append("model.model_dim must be even")
        for key in ("model.dropout", "model.attn_dropout", "model.relu_dropout", "model.tail_dropout"):
            if not 0.0 <= v[key] < 1.0:
                out.append(f"{key} must be in [0, 1)")
        if v["model.tie_projections"] and not v["model.tie_embeddings"]:
            out.append("model.tie_projections requires model.tie_embeddings")
        tied = v["model.tie_embeddings"]
        if tied and v["model.input"] == "charcnn":
            out.append("a character CNN input cannot be tied to the output")
        if tied and v["model.output"] == "softmax":
            if v["model.input"] != "embedding":
                out.append("a tied softmax needs model.input = embedding")
            elif v["model.input_dim"] != v["model.output_dim"]:
                out.append("tied softmax needs model.input_dim == model.output_dim")
            if v["model.tie_projections"]:
                out.append("a softmax output has no projections to tie")
        if tied and v["model.output"] == "adaptive" and v["model.input"] != "adaptive":
            out.append("a tied adaptive softmax needs model.input = adaptive")
        if v["model.output_head_projection"] != "none" and v["model.output"] != "adaptive":
            out.append("model.output_head_projection applies to adaptive outputs only")
        if v["model.output_head_projection"] == "tied" and v["model.input"] != "adaptive":
            out.append("a tied head projection needs model.input = adaptive")
        uses_bands = v["model.input"] == "adaptive" or v["model.output"] == "adaptive"
        if uses_bands:
            n = len(v["model.adaptive_cutoffs"]) + 1
            div = v["model.adaptive_factor"] ** (n - 1)
            if v["model.adaptive_dim"] % div:
                out.append(f"model.adaptive_dim {v['model.adaptive_dim']} not divisible by factor^{n - 1} = {div}")
            size = vocab_size or v["model.vocab_size"]
            if size:
                try:
                    self.cutoffs(size)
                except ValueError as exc:
                    out.append(str(exc))
        if v["optim.accumulation_steps"] < 1:
            out.append("optim.accumulation_steps must be >= 1")
        if v["optim.cycles"] < 1 or v["optim.first_cycle_steps"] < 1:
            out.append("optim.cycles and optim.first_cycle_steps must be positive")
        if v["data.token_budget"] < v["data.block_size"] and v["data.batching"] == "blocks":
            out.append("data.token_budget must hold at least one block")
        if not 0 <= v["eval.context_size"] < v["eval.block_size"]:
            out.append("eval.context_size must be in [0, eval.block_size)")
        return out

    def validate(self, vocab_size: int | None = None) -> "RunConfig":
        problems = self.problems(vocab_size)
        if problems:
            raise ConfigError(problems)
        return self

    def cutoffs(self, vocab_size: int) -> tuple[int, ...]:
        """Band cutoffs as absolute ids; fractional entries scale with the vocabulary."""
        raw = self.values["model.adaptive_cutoffs"]
        cuts = tuple(int(round(c * vocab_size)) if isinstance(c, float) else int(c) for c in raw)
        edges = (0,) + cuts + (vocab_size,)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"model.adaptive_cutoffs {list(cuts)} must increase strictly below vocab size {vocab_size}")
        return cuts


def preset_names() -> list[str]:
    return sorted(
        p.name[: -len(".cfg")] for p in resources.files(PRESET_PACKAGE).iterdir() if p.name.endswith(".cfg")
    )


def preset_text(name: str) -> str:
    path = resources.files(PRESET_PACKAGE) / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(preset_names())}"])
    return path.read_text(encoding="utf-8")


def load_preset(name: str) -> RunConfig:
    return RunConfig.parse(preset_text(name))


TINY_OVERRIDES = {
    "model.n_blocks": 2,
    "model.heads": 4,
    "model.model_dim": 64,
    "model.ffn_dim": 128,
    "model.adaptive_dim": 64,
    "model.adaptive_cutoffs": (0.1, 0.4),
    "model.input_dim": 32,
    "model.output_dim": 32,
    "model.char_dim": 16,
    "model.char_filters": ((1, 16), (2, 32), (3, 32)),
    "model.dropout": 0.1,
    "data.block_size": 64,
    "data.token_budget": 512,
    "optim.accumulation_steps": 1,
    "optim.lr_max": 1.0,
    "optim.lr_min": 1e-3,
    "optim.warmup_init": 1e-4,
    "optim.warmup_steps": 50,
    "optim.cycles": 1,
    "optim.first_cycle_steps": 750,
    "optim.momentum": 0.9,
    "optim.clip": 0.1,
    "train.log_interval": 10,
    "train.valid_interval": 50,
    "train.save_interval": 100,
    "eval.block_size": 64,
    "eval.context_size": 0,
    "eval.token_budget": 512,
}


def tiny(cfg: RunConfig) -> RunConfig:
    """Shrink any configuration to a desk-sized smoke model, keeping its factorization."""
    out = cfg.copy().update(TINY_OVERRIDES)
    if out["model.tie_embeddings"] and out["model.output"] == "softmax":
        out.update({"model.output_dim": out["model.input_dim"]})
    return out
