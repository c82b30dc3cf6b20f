"""Command-line entry point: ``ssir {gen,train,eval,decode,ablate}``.

Exit codes: 0 ok, 2 invalid flags or parameters, 3 I/O failure, 4 malformed
container/checkpoint, 5 infeasible CTC target (the sample id is printed).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (SENTENCES, Vocabulary, build_splits, generate_corpus, read_container,
                      write_container)
from .errors import FormatError, InfeasibleTargetError, InvalidParameterError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, ablate, eval_cross_participant, evaluate, subsets_for_mode, train
from .ctc import beam_decode, greedy_decode, log_softmax
from .model import forward
from .signal import preprocess

log = logging.getLogger("ssir")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_INFEASIBLE = 0, 2, 3, 4, 5


def _now():
    return datetime.now(timezone.utc).isoformat()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed(args):
    env = os.environ.get("SSIR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InvalidParameterError(f"SSIR_SEED must be an integer, got {env!r}") from None
    return args.seed


def _write_manifest(out_dir, command, argv, config, seed, artifacts, inputs, started):
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _write_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "mean", "std"])
        for group, mean, std in rows:
            w.writerow([group, f"{mean:.6f}", f"{std:.6f}"])


def load_config(path, vocab_size=None):
    """``{"train": {...}, "model": {...}}`` -> (TrainConfig, ModelConfig)."""
    raw = {}
    if path:
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {"train", "model"}
        if unknown:
            raise InvalidParameterError(f"unknown config sections: {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    if vocab_size is not None:
        model["vocab_size"] = vocab_size
    return TrainConfig.from_dict(raw.get("train", {})), ModelConfig.from_dict(model)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, argv):
    started = _now()
    seed = _seed(args)
    if args.participants < 1 or args.samples_per_word < 1 or args.samples_per_sentence < 0:
        raise InvalidParameterError("participants and sample counts must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.default()
    samples = generate_corpus(vocab, args.participants, args.samples_per_word,
                              args.samples_per_sentence, seed=seed,
                              sentences=SENTENCES if args.samples_per_sentence else ())
    split = build_splits(samples, seed, args.augment_factor, vocab)
    path = out / "dataset.ssir"
    write_container(split, path)
    config = {"participants": args.participants, "samples_per_word": args.samples_per_word,
              "samples_per_sentence": args.samples_per_sentence,
              "augment_factor": args.augment_factor}
    _write_manifest(out, "gen", argv, config, seed, {"dataset": path}, [], started)
    print(f"wrote {path}: train {len(split.train)}, validation {len(split.validation)}, "
          f"test {len(split.test)}")
    return EXIT_OK


def cmd_train(args, argv):
    started = _now()
    load_config(args.config)  # validate before touching the data
    split = read_container(args.data)
    cfg, mcfg = load_config(args.config, len(split.vocab))
    seed = _seed(args)
    if seed is not None:
        cfg.seed = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    params, records = train(split, cfg, mcfg, log_path=log_path)
    best = max(records, key=lambda r: r.get("val_word_accuracy", -1.0))
    meta = {"train_config": asdict(cfg), "epochs_run": len(records),
            "best_epoch": best["epoch"], "best_val_word_accuracy": best.get("val_word_accuracy"),
            "data_sha256": _sha256(args.data)}
    ckpt = out / "model.ssim"
    save_checkpoint(ckpt, params, split.vocab.tokens, meta, cfg.seed)
    _write_manifest(out, "train", argv, {"train": asdict(cfg), "model": asdict(mcfg)},
                    cfg.seed, {"checkpoint": ckpt, "log": log_path}, [args.data], started)
    print(f"wrote {ckpt} (best epoch {best['epoch']}, "
          f"val word accuracy {best.get('val_word_accuracy')})")
    return EXIT_OK


def _train_cfg_from_header(header, override=None):
    if override:
        return load_config(override)[0]
    stored = header.get("training", {}).get("train_config")
    return TrainConfig.from_dict(stored) if stored else TrainConfig()


def cmd_eval(args, argv):
    started = _now()
    split = read_container(args.data)
    params, header = load_checkpoint(args.model)
    cfg = _train_cfg_from_header(header, args.config)
    if args.beam_width is not None:
        cfg.beam_width = args.beam_width
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate(params, split, cfg)
    artifacts = {}
    if args.cross_participant:
        per_p = {}
        for s in split.train + split.validation + split.test:
            if s.recipe is None:
                per_p.setdefault(s.participant, []).append(s)
        cross = eval_cross_participant(per_p, cfg, params.cfg, args.few_shot_k,
                                       args.augment_factor, split.vocab, cfg.seed)
        for p, row in cross.items():
            report.per_participant.setdefault(p, {}).update(
                {"blind": row["blind"], "few_shot": row["few_shot"],
                 "standard_within_participant": row["standard"]})
    if args.ablate:
        subs = subsets_for_mode(args.ablate)
        acc = ablate(split, cfg, params.cfg, subs)
        report.ablation = {s.key: a for s, a in acc.items()}
        path = out / f"ablation_{args.ablate}.csv"
        _write_csv(path, [(s.key, a, 0.0) for s, a in acc.items()])
        artifacts["ablation_csv"] = path
    rpath = out / "report.json"
    rpath.write_text(json.dumps(report.to_json(), indent=2))
    lpath = out / "accuracy_by_length.csv"
    _write_csv(lpath, [(k, m, s) for k, (m, s) in report.per_length.items()])
    ppath = out / "accuracy_by_participant.csv"
    rows = []
    for p, d in report.per_participant.items():
        for cond, val in d.items():
            rows.append((f"{p}:{cond}", val, 0.0))
    _write_csv(ppath, rows)
    artifacts.update({"report": rpath, "length_csv": lpath, "participant_csv": ppath})
    _write_manifest(out, "eval", argv, {"train": asdict(cfg)}, cfg.seed, artifacts,
                    [args.data, args.model], started)
    print(f"word accuracy {report.word_accuracy:.4f} on {report.n_test} test samples")
    for k, (m, s) in report.per_length.items():
        print(f"  length {k}: {m:.4f} +/- {s:.4f}")
    return EXIT_OK


def _load_input(args, vocab):
    path = Path(args.input)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"SSIR":
        split = read_container(path)
        pool = getattr(split, args.split)
        if not 0 <= args.index < len(pool):
            raise InvalidParameterError(f"index {args.index} outside {args.split} split")
        s = pool[args.index]
        return split.window(s), s.uid, split.vocab.decode(s.labels)
    window = np.load(path)
    return window, path.name, None


def cmd_decode(args, argv):
    params, header = load_checkpoint(args.model)
    tokens = header.get("vocabulary") or Vocabulary.default().tokens
    vocab = Vocabulary(tokens)
    window, uid, ref = _load_input(args, vocab)
    feats = preprocess(window, uid).values
    if feats.shape[1] != params.cfg.input_dim:
        raise InvalidParameterError(
            f"input has {feats.shape[1]} features, model expects {params.cfg.input_dim}")
    ctc_logits, _ = forward(params, feats, False)
    lp = log_softmax(ctc_logits.data)
    res = greedy_decode(lp) if args.beam_width == 1 else beam_decode(lp, args.beam_width)
    words = vocab.decode(res.ids)
    print(" ".join(words))
    print(f"log_prob {res.log_prob:.6f}")
    if ref is not None:
        print(f"reference {' '.join(ref)}")
    if args.out:
        started = _now()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "decode.json"
        path.write_text(json.dumps({"sample": uid, "tokens": words, "ids": list(res.ids),
                                    "log_prob": res.log_prob, "beam_width": args.beam_width}))
        _write_manifest(out, "decode", argv, {"beam_width": args.beam_width}, None,
                        {"decode": path}, [args.model, args.input], started)
    return EXIT_OK


def cmd_ablate(args, argv):
    started = _now()
    load_config(args.config)  # validate before touching the data
    split = read_container(args.data)
    cfg, mcfg = load_config(args.config, len(split.vocab))
    seed = _seed(args)
    if seed is not None:
        cfg.seed = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subs = subsets_for_mode(args.mode)
    acc = ablate(split, cfg, mcfg, subs)
    path = out / f"ablation_{args.mode}.csv"
    _write_csv(path, [(s.key, a, 0.0) for s, a in acc.items()])
    _write_manifest(out, "ablate", argv, {"train": asdict(cfg), "model": asdict(mcfg),
                                          "mode": args.mode},
                    cfg.seed, {"table": path}, [args.data], started)
    for s, a in acc.items():
        print(f"{s.key}\t{a:.4f}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="ssir", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a dataset container")
    g.add_argument("--out", required=True)
    g.add_argument("--participants", type=int, default=4)
    g.add_argument("--samples-per-word", type=int, default=100)
    g.add_argument("--samples-per-sentence", type=int, default=30)
    g.add_argument("--augment-factor", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a container")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="training config for protocols that retrain")
    e.add_argument("--beam-width", type=int)
    e.add_argument("--cross-participant", action="store_true")
    e.add_argument("--few-shot-k", type=int, default=5)
    e.add_argument("--augment-factor", type=int, default=10)
    e.add_argument("--ablate", choices=("channels", "axes"))
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="transcribe one recording")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True, help="container (.ssir) or [T, C, A] .npy window")
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--split", choices=("train", "validation", "test"), default="test")
    d.add_argument("--beam-width", type=int, default=8)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("ablate", help="retrain on channel or axis subsets")
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=("channels", "axes"), required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except InfeasibleTargetError as e:
        print(f"error: infeasible target for sample {e.sample_id}: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (InvalidParameterError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
