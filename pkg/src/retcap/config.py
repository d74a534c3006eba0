"""Run configuration for the command-line pipeline.

A run is described by one JSON file whose sections mirror the dataclasses
below.  Every key can be overridden from the command line with
``--set section.key=value``.  Relative paths resolve against the
directory holding the config file.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from . import captioner as cap
from . import retriever as ret
from . import rltrain
from . import shapeworld as sw
from .evalsuite import fingerprint
from .reward import CiderConfig, RewardConfig


class ConfigError(ValueError):
    pass


def _f(default, note=""):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"note": note})
    return field(default=default, metadata={"note": note})


@dataclass
class Paths:
    dataset: str = _f("data/dataset.jsonl")
    vocab: str = _f("data/vocab.json")
    split: str = _f("data/split.json")
    retriever: str = _f("checkpoints/retriever.rckpt")
    captioner: str = _f("checkpoints/captioner_mle.rckpt")
    rl: str = _f("checkpoints/captioner_rl.rckpt", "best validation epoch")
    rl_final: str = _f("checkpoints/captioner_rl_final.rckpt", "last epoch plus optimizer state")
    history: str = _f("reports/rl_history.jsonl")
    generations: str = _f("reports/generations.json")
    report: str = _f("reports/eval_report.json")


@dataclass
class DataSection:
    n_labeled: int = _f(2000)
    n_unlabeled: int = _f(2000)
    n_val: int = _f(500)
    n_test: int = _f(500)
    d_img: int = _f(64)
    noise: float = _f(0.05)
    captions_per_image: int = _f(5)
    synonyms: bool = _f(True)
    min_count: int = _f(sw.MIN_COUNT, "reference setting; words seen fewer than 6 times become UNK")
    t_max: int = _f(sw.T_MAX, "reference setting; captions truncated to 16 words")


@dataclass
class DimsSection:
    captioner_embed: int = _f(32, "full-scale setting 512")
    captioner_hidden: int = _f(64, "full-scale setting 512")
    retriever_embed: int = _f(32, "full-scale setting 300")
    retriever_hidden: int = _f(64, "full-scale setting 1024")
    joint: int = _f(32, "full-scale setting 1024")


@dataclass
class RetrieverSection:
    epochs: int = _f(30)
    batch_size: int = _f(128)
    lr: float = _f(2e-3)
    loss_kind: str = _f("vse_pp", "reference setting; VSE++ hardest negative")
    grad_clip: float = _f(2.0)


@dataclass
class MLESection:
    epochs: int = _f(12)
    batch_size: int = _f(64)
    lr: float = _f(5e-3)
    grad_clip: float = _f(5.0)
    ss_every: int = _f(5, "reference setting; scheduled sampling raised every 5 epochs")
    ss_step: float = _f(0.05, "reference setting; by 0.05")
    ss_cap: float = _f(0.25, "reference setting; up to 0.25")


@dataclass
class RLSection:
    mode: str = _f("sr-fl", "baseline | sr-fl | sr-pl")
    epochs: int = _f(8)
    batch_size: int = _f(16)
    ratio: list = _f([1, 1], "reference setting; labeled:unlabeled 1:1")
    steps_per_epoch: int | None = _f(None, "null: one pass over the labeled images")
    lr: float = _f(5e-4)
    restart_period: int | None = _f(None, "cosine warm restarts period in steps; null disables")
    restart_mult: float = _f(1.0)
    grad_clip: float = _f(5.0)
    mining_range: list = _f([100, 1000], "reference setting; negatives ranked 100..1000")
    mining_query: str = _f("ground_truth", "ground_truth | generated")


@dataclass
class RewardSection:
    alpha: float | None = _f(None, "reference setting; 1 for sr-fl/sr-pl; null picks 0 for baseline, 1 otherwise")
    loss_kind: str = _f("vse_pp", "reference setting; VSE++")
    margin: float = _f(0.2)
    temperature: float = _f(0.1)


@dataclass
class DecodeSection:
    method: str = _f("beam", "beam | greedy")
    beam_width: int = _f(5, "reference setting; beam size 5")
    checkpoint: str = _f("rl", "rl | rl_final | mle")


SECTIONS = {
    "paths": Paths, "data": DataSection, "dims": DimsSection, "retriever": RetrieverSection,
    "mle": MLESection, "rl": RLSection, "reward": RewardSection, "decode": DecodeSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    data: DataSection = field(default_factory=DataSection)
    dims: DimsSection = field(default_factory=DimsSection)
    retriever: RetrieverSection = field(default_factory=RetrieverSection)
    mle: MLESection = field(default_factory=MLESection)
    rl: RLSection = field(default_factory=RLSection)
    reward: RewardSection = field(default_factory=RewardSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    base_dir: str = field(default=".", compare=False, repr=False)

    # --- serialization -----------------------------------------------------

    def to_dict(self):
        out = asdict(self)
        out.pop("base_dir")
        return out

    @classmethod
    def from_dict(cls, obj, base_dir="."):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        kwargs = {"base_dir": str(base_dir)}
        for key, value in obj.items():
            if key == "seed":
                kwargs["seed"] = _coerce("seed", value, int)
            elif key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                kwargs[key] = _section(SECTIONS[key], key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def fingerprint(self):
        """Hash of every setting except file locations."""
        d = self.to_dict()
        d.pop("paths")
        return fingerprint(d)

    def path(self, name):
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    # --- derived settings --------------------------------------------------

    @property
    def alpha(self):
        if self.reward.alpha is not None:
            return float(self.reward.alpha)
        return 0.0 if self.rl.mode == "baseline" else 1.0

    def shapeworld(self):
        d = self.data
        return sw.ShapeWorldConfig(n_labeled=d.n_labeled, n_unlabeled=d.n_unlabeled, n_val=d.n_val,
                                   n_test=d.n_test, d_img=d.d_img, noise=d.noise,
                                   captions_per_image=d.captions_per_image, seed=self.seed,
                                   synonyms=d.synonyms)

    def retriever_dims(self, vocab_size):
        return ret.RetrieverDims(vocab_size, self.data.d_img, self.dims.retriever_embed,
                                 self.dims.retriever_hidden, self.dims.joint)

    def captioner_dims(self, vocab_size):
        return cap.CaptionerDims(vocab_size, self.data.d_img, self.dims.captioner_embed, self.dims.captioner_hidden)

    def retriever_train(self):
        r = self.retriever
        return ret.RetrieverTrainConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr, margin=self.reward.margin,
                                        loss_kind=r.loss_kind, grad_clip=r.grad_clip, seed=self.seed)

    def mle_train(self):
        m = self.mle
        return cap.MLEConfig(epochs=m.epochs, batch_size=m.batch_size, lr=m.lr, grad_clip=m.grad_clip,
                             ss_every=m.ss_every, ss_step=m.ss_step, ss_cap=m.ss_cap, t_max=self.data.t_max,
                             seed=self.seed)

    def rl_train(self):
        r = self.rl
        return rltrain.RLConfig(mode=r.mode, epochs=r.epochs, batch_size=r.batch_size, ratio=tuple(r.ratio),
                                steps_per_epoch=r.steps_per_epoch, lr=r.lr, restart_period=r.restart_period,
                                restart_mult=r.restart_mult, grad_clip=r.grad_clip,
                                mining_range=tuple(r.mining_range), mining_query=r.mining_query,
                                t_max=self.data.t_max, seed=self.seed)

    def reward_config(self):
        r = self.reward
        return RewardConfig(alpha=self.alpha, loss_kind=r.loss_kind, margin=r.margin, temperature=r.temperature,
                            cider=CiderConfig())

    # --- validation --------------------------------------------------------

    def validate(self):
        """Raise ConfigError naming the first offending key."""
        d = self.data
        for key in ("n_labeled", "n_val", "n_test", "d_img", "min_count", "t_max"):
            if getattr(d, key) <= 0:
                raise ConfigError(f"data.{key} must be positive")
        if d.n_unlabeled < 0:
            raise ConfigError("data.n_unlabeled must be nonnegative")
        if d.noise < 0:
            raise ConfigError("data.noise must be nonnegative")
        for f in fields(self.dims):
            if getattr(self.dims, f.name) <= 0:
                raise ConfigError(f"dims.{f.name} must be positive")
        for sec in ("retriever", "mle", "rl"):
            s = getattr(self, sec)
            for key in ("epochs", "batch_size"):
                if getattr(s, key) <= 0:
                    raise ConfigError(f"{sec}.{key} must be positive")
            if s.lr <= 0:
                raise ConfigError(f"{sec}.lr must be positive")
        if self.rl.mode not in rltrain.MODES:
            raise ConfigError(f"rl.mode must be one of {', '.join(rltrain.MODES)}")
        if self.rl.mining_query not in ("ground_truth", "generated"):
            raise ConfigError("rl.mining_query must be ground_truth or generated")
        if len(self.rl.ratio) != 2 or self.rl.ratio[0] <= 0 or self.rl.ratio[1] < 0:
            raise ConfigError("rl.ratio must be [labeled > 0, unlabeled >= 0]")
        lo_hi = self.rl.mining_range
        if len(lo_hi) != 2 or not 1 <= lo_hi[0] <= lo_hi[1]:
            raise ConfigError("rl.mining_range must be [h_min, h_max] with 1 <= h_min <= h_max")
        if self.rl.mode == "sr-pl":
            if d.n_unlabeled == 0:
                raise ConfigError("rl.mode=sr-pl needs an unlabeled pool but data.n_unlabeled is 0")
            if self.rl.ratio[1] == 0:
                raise ConfigError("rl.mode=sr-pl needs rl.ratio with a nonzero unlabeled share")
        if self.rl.mode == "baseline" and self.alpha != 0.0:
            raise ConfigError("rl.mode=baseline requires reward.alpha=0")
        if self.rl.mode != "baseline" and self.alpha == 0.0:
            raise ConfigError(f"rl.mode={self.rl.mode} requires reward.alpha > 0")
        if self.decode.method not in ("beam", "greedy"):
            raise ConfigError("decode.method must be beam or greedy")
        if self.decode.beam_width <= 0:
            raise ConfigError("decode.beam_width must be positive")
        if self.decode.checkpoint not in ("rl", "rl_final", "mle"):
            raise ConfigError("decode.checkpoint must be rl, rl_final or mle")
        try:
            self.reward_config()
            ret.MiningRange(*self.rl.mining_range)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def _section(cls, name, values):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", value, _default_type(known[key]))
    return cls(**kwargs)


def _default_type(f):
    default = f.default if f.default is not MISSING else f.default_factory()
    return type(default) if default is not None else None


def _coerce(key, value, kind):
    if value is None or kind is None:
        return value
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true or false")
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind in (str, list) and isinstance(value, kind):
        return value
    raise ConfigError(f"{key} expects {kind.__name__}, got {value!r}")


def parse_override(text):
    """``section.key=value`` with a JSON value (bare words are strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(obj, overrides):
    """Apply ``(dotted key, value)`` pairs to a config dict, in order."""
    obj = json.loads(json.dumps(obj))
    for key, value in overrides:
        parts = key.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            obj["seed"] = value
        elif len(parts) == 2 and parts[0] in SECTIONS:
            obj.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"unknown config key {key}")
    return obj


def load(path=None, overrides=()):
    """Read a config file (or the defaults), apply overrides and validate."""
    if path is None:
        obj, base = {}, Path.cwd()
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        base = path.resolve().parent
    obj = apply_overrides(obj, [parse_override(o) if isinstance(o, str) else o for o in overrides])
    return RunConfig.from_dict(obj, base).validate()


def documented_keys():
    """``(dotted key, default, note)`` for every setting, in file order."""
    rows = [("seed", 0, "seeds data generation and every training phase")]
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            default = f.default if f.default is not MISSING else f.default_factory()
            rows.append((f"{name}.{f.name}", default, f.metadata.get("note", "")))
    return rows
