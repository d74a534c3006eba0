"""Command-line pipeline: data, vocabulary, retriever, MLE, RL, generation, evaluation.

Every subcommand takes ``--config run.json`` plus any number of
``--set section.key=value`` overrides, writes its artifact and exits 0.
Failures print one ``error_code: message`` line to stderr and exit with

* 2 when a prerequisite artifact is missing or unreadable,
* 3 when the configuration is invalid,
* 4 when training hits a non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import captioner as cap
from . import checkpoint as ckpt
from . import config as cfgmod
from . import evalsuite
from . import retriever as ret
from . import rltrain
from . import shapeworld as sw
from .graphgrad import NonFiniteError
from .reward import strip_eos

log = logging.getLogger("retcap")

EXIT_MISSING, EXIT_CONFIG, EXIT_NONFINITE = 2, 3, 4


class CliError(Exception):
    def __init__(self, exit_code, code, message):
        super().__init__(message)
        self.exit_code = exit_code
        self.code = code


def _require(cfg, *names):
    for name in names:
        p = cfg.path(name)
        if not p.exists():
            hint = {"dataset": "gen-data", "split": "gen-data", "vocab": "build-vocab",
                    "retriever": "train-retriever", "captioner": "pretrain-captioner",
                    "rl": "train-rl", "rl_final": "train-rl", "generations": "generate"}[name]
            raise CliError(EXIT_MISSING, "missing_artifact", f"paths.{name} {p} does not exist (run {hint} first)")


def _write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _save_ckpt(cfg, name, tensors):
    path = cfg.path(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, ckpt.with_fingerprint(tensors, cfg.fingerprint()))
    return path


def _load_ckpt(cfg, name, cls):
    _require(cfg, name)
    try:
        tensors = ckpt.load(cfg.path(name))
        return cls.from_arrays(tensors)
    except (ckpt.CheckpointError, KeyError) as exc:
        raise CliError(EXIT_MISSING, "invalid_artifact", f"paths.{name}: {exc}") from None


def _data(cfg, need_vocab=True):
    _require(cfg, "dataset", "split", *(("vocab",) if need_vocab else ()))
    try:
        records = sw.load_dataset(cfg.path("dataset"))
        split = sw.load_split(cfg.path("split"))
        split.validate([r.id for r in records])
        if not need_vocab:
            return records, split, None
        vocab = sw.load_vocab(cfg.path("vocab"))
        return records, split, sw.EncodedDataset(records, split, vocab, cfg.data.t_max)
    except (sw.DatasetFormatError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_MISSING, "invalid_artifact", str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg):
    sw_cfg = cfg.shapeworld()
    records = sw.generate(sw_cfg)
    path = cfg.path("dataset")
    path.parent.mkdir(parents=True, exist_ok=True)
    sw.save_dataset(records, path)
    _write_text(Path(str(path) + ".fingerprint"), cfg.fingerprint() + "\n")
    split_path = cfg.path("split")
    split_path.parent.mkdir(parents=True, exist_ok=True)
    sw.save_split(sw.default_split(sw_cfg), split_path, cfg.fingerprint())
    return f"wrote {len(records)} records to {path}"


def cmd_build_vocab(cfg):
    records, split, _ = _data(cfg, need_vocab=False)
    by_id = {r.id: r for r in records}
    corpus = [c for i in split.labeled for c in by_id[i].captions]
    if not corpus:
        raise CliError(EXIT_CONFIG, "config_error", "no labeled captions to build a vocabulary from")
    vocab = sw.build_vocab(corpus, cfg.data.min_count)
    path = cfg.path("vocab")
    path.parent.mkdir(parents=True, exist_ok=True)
    sw.save_vocab(vocab, path, cfg.fingerprint())
    return f"wrote {len(vocab)} tokens to {path}"


def cmd_train_retriever(cfg):
    _, split, data = _data(cfg)
    params, history = ret.train_retriever(
        data.refs_of(split.labeled), data.features_of(split.labeled),
        data.refs_of(split.val), data.features_of(split.val),
        cfg.retriever_dims(len(data.vocab)), cfg.retriever_train())
    path = _save_ckpt(cfg, "retriever", params.named_arrays())
    best = max(h["val_recall_at_1"] for h in history)
    return f"retriever val R@1 {best:.3f}; wrote {path}"


def cmd_pretrain_captioner(cfg):
    _, split, data = _data(cfg)
    params, history = cap.pretrain_mle(
        data.features_of(split.labeled), data.refs_of(split.labeled),
        data.features_of(split.val), data.refs_of(split.val),
        cfg.captioner_dims(len(data.vocab)), cfg.mle_train())
    path = _save_ckpt(cfg, "captioner", params.named_arrays())
    best = min(h["val_loss"] for h in history)
    return f"captioner val loss {best:.4f}; wrote {path}"


def cmd_train_rl(cfg):
    _, split, data = _data(cfg)
    if cfg.rl.mode == "sr-pl" and not split.unlabeled:
        raise CliError(EXIT_CONFIG, "config_error", "rl.mode=sr-pl needs an unlabeled pool but the split has none")
    retriever = _load_ckpt(cfg, "retriever", ret.RetrieverParams)
    init = _load_ckpt(cfg, "captioner", cap.CaptionerParams)
    final, best, history, state = rltrain.train_rl(data, retriever, init, cfg.rl_train(), cfg.reward_config())
    _save_ckpt(cfg, "rl", best.named_arrays())
    _save_ckpt(cfg, "rl_final", {**final.named_arrays(), **state.arrays()})
    fp = cfg.fingerprint()
    lines = [json.dumps({**row, "config_fingerprint": fp}, sort_keys=True) for row in history]
    _write_text(cfg.path("history"), "\n".join(lines) + "\n")
    last = history[-1]
    return (f"rl {cfg.rl.mode}: val CIDEr-D {last['val_cider']:.3f} R@1 {last['val_recall_at_1']:.3f}; "
            f"wrote {cfg.path('rl')}")


def _generate(cfg, data, split):
    name = {"rl": "rl", "rl_final": "rl_final", "mle": "captioner"}[cfg.decode.checkpoint]
    params = _load_ckpt(cfg, name, cap.CaptionerParams)
    feats = data.features_of(split.test)
    if cfg.decode.method == "beam":
        out = cap.beam_search_batch(params, feats, cfg.decode.beam_width, cfg.data.t_max)
    else:
        out = cap.greedy_decode_batch(params, feats, cfg.data.t_max)
    return {
        "config_fingerprint": cfg.fingerprint(),
        "checkpoint": cfg.decode.checkpoint,
        "method": cfg.decode.method,
        "beam_width": cfg.decode.beam_width,
        "captions": [{"id": i, "tokens": data.vocab.decode(strip_eos(c))} for i, c in zip(split.test, out)],
    }


def cmd_generate(cfg):
    _, split, data = _data(cfg)
    gen = _generate(cfg, data, split)
    _write_text(cfg.path("generations"), json.dumps(gen, indent=1) + "\n")
    return f"wrote {len(gen['captions'])} captions to {cfg.path('generations')}"


def _read_generations(cfg, split):
    try:
        gen = json.loads(cfg.path("generations").read_text(encoding="utf-8"))
        by_id = {g["id"]: [str(t) for t in g["tokens"]] for g in gen["captions"]}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(EXIT_MISSING, "invalid_artifact", f"paths.generations: {exc}") from None
    missing = [i for i in split.test if i not in by_id]
    if missing:
        raise CliError(EXIT_MISSING, "invalid_artifact", f"paths.generations lacks test image {missing[0]}")
    return [by_id[i] for i in split.test]


def cmd_evaluate(cfg):
    records, split, data = _data(cfg)
    retriever = _load_ckpt(cfg, "retriever", ret.RetrieverParams)
    if cfg.path("generations").exists():
        generated = _read_generations(cfg, split)
    else:
        gen = _generate(cfg, data, split)
        _write_text(cfg.path("generations"), json.dumps(gen, indent=1) + "\n")
        generated = [g["tokens"] for g in gen["captions"]]
    by_id = {r.id: r for r in records}
    t_max = cfg.data.t_max
    refs = [[c[:t_max] for c in by_id[i].captions] for i in split.test]
    metrics = evalsuite.caption_metrics(generated, refs)
    encoded = [data.vocab.encode(g, t_max) for g in generated]
    recalls = evalsuite.self_retrieval_eval(retriever, encoded, data.features_of(split.test))
    training = [c[:t_max] for i in split.labeled for c in by_id[i].captions]
    unique, novel = evalsuite.uniqueness_novelty(generated, training)
    report = evalsuite.EvalReport(
        recall_at_1=recalls[1], recall_at_5=recalls[5], recall_at_10=recalls[10],
        unique_pct=unique, novel_pct=novel, config_fingerprint=cfg.fingerprint(), seed=cfg.seed, **metrics)
    _write_text(cfg.path("report"), report.to_json())
    return (f"CIDEr-D {report.cider_d:.3f} BLEU-4 {report.bleu_4:.3f} R@1 {report.recall_at_1:.3f} "
            f"unique {report.unique_pct:.1f}%; wrote {cfg.path('report')}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset and its split"),
    "build-vocab": (cmd_build_vocab, "build the vocabulary from labeled training captions"),
    "train-retriever": (cmd_train_retriever, "train the caption-to-image retriever"),
    "pretrain-captioner": (cmd_pretrain_captioner, "cross-entropy pretraining of the captioner"),
    "train-rl": (cmd_train_rl, "self-critical fine-tuning (baseline, sr-fl or sr-pl)"),
    "generate": (cmd_generate, "caption the test images"),
    "evaluate": (cmd_evaluate, "score generated captions and write the report"),
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _keys_help():
    lines = ["config keys (default; note):"]
    for key, default, note in cfgmod.documented_keys():
        text = f"  {key} = {json.dumps(default)}"
        lines.append(text + (f"  ({note})" if note else ""))
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="retcap", description="Discriminative captioning with self-retrieval rewards.",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_keys_help())
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=_keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. --set rl.mode=sr-pl (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return parser


def run(argv=None):
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        try:
            cfg = cfgmod.load(args.config, args.set)
        except FileNotFoundError as exc:
            raise CliError(EXIT_MISSING, "missing_artifact", str(exc)) from None
        except cfgmod.ConfigError as exc:
            raise CliError(EXIT_CONFIG, "config_error", str(exc)) from None
        fn, _ = COMMANDS[args.command]
        try:
            message = fn(cfg)
        except (rltrain.NonFiniteLoss, NonFiniteError, FloatingPointError) as exc:
            raise CliError(EXIT_NONFINITE, "non_finite", str(exc)) from None
        except ret.MiningError as exc:
            raise CliError(EXIT_CONFIG, "config_error", str(exc)) from None
    except CliError as exc:
        print(f"{exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    print(message)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
