"""Command-line surface: train, eval, predict, gradcheck, synth, inspect.

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 I/O or data
error, 4 numeric failure (non-finite loss).

Every run is deterministic under fixed seeds and inputs, writes its
resolved configuration next to its outputs, and never mutates its inputs.
Stdout is machine-parseable key=value lines.
"""

import os


def _configure_threads() -> None:
    """Honor XCN_THREADS (0 or unset = library default) for BLAS pools.

    Must run before numpy is first imported, which is why this module does
    its heavy imports below and why the package __init__ stays numpy-free.
    """
    raw = os.environ.get("XCN_THREADS", "").strip()
    if not raw or raw == "0":
        return
    try:
        int(raw)
    except ValueError:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, raw)


_configure_threads()

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics, optim, oracle
from .errors import CheckpointError, DataError, NumericError, XCrossNetError
from .model import (BALANCE_CONVENTIONS, ModelConfig, XCrossNetModel,
                    balance_index, load_checkpoint, save_checkpoint)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# The Criteo-protocol defaults; file-based training uses these as-is.
RUN_DEFAULTS = {
    "dense_fields": 13,
    "sparse_fields": 26,
    "embed_dim": 20,
    "product_size": 100,
    "cross_depth": 4,
    "mlp_widths": (400, 400),
    "seed": 0,
    "lr": 0.001,
    "batch_size": 4096,
    "l2": 1e-4,
    "epochs": 1,
    "eval_every": 1,
    "train_data": None,
    "valid_data": None,
    "valid_fraction": 0.1,
    "min_freq": 10,
    "synth": None,
    "synth_seed": None,
}

# Architecture/batch defaults applied when training on --synth data and the
# corresponding flag was not given explicitly: the synthetic task is desk
# scale and does not need the Criteo-sized network.
SYNTH_SCALE_DEFAULTS = {
    "embed_dim": 8,
    "product_size": 8,
    "cross_depth": 3,
    "mlp_widths": (64,),
    "batch_size": 512,
}

GRADCHECK_DEFAULTS = dict(dense_fields=3, sparse_fields=4, vocab_size=5,
                          embed_dim=5, product_size=6, cross_depth=2,
                          mlp_widths=(8,))


def _parse_widths(text: str):
    text = text.strip()
    if not text or text.lower() == "none":
        return ()
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise UsageError([f"mlp_widths: cannot parse {text!r}; "
                          "expected comma-separated integers"]) from None


def _echo(key, value) -> None:
    if isinstance(value, float):
        value = repr(value)
    print(f"{key}={value}")


def _resolve_run_config(args) -> dict:
    cfg = dict(RUN_DEFAULTS)
    problems = []
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read --config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError([f"config file: invalid JSON ({exc})"]) from None
        for key, value in file_cfg.items():
            if key == "vocab_sizes":
                continue  # derived, accepted on re-load for provenance
            if key not in cfg:
                problems.append(f"{key}: unknown config key")
            else:
                cfg[key] = value
    for key in cfg:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = flag_value
    if isinstance(cfg["mlp_widths"], str):
        cfg["mlp_widths"] = _parse_widths(cfg["mlp_widths"])
    cfg["mlp_widths"] = tuple(int(w) for w in cfg["mlp_widths"])

    if cfg["synth"] is not None:
        if cfg["synth"] != "default":
            problems.append(f"synth: only 'default' is defined, got {cfg['synth']!r}")
        explicit = {k for k in SYNTH_SCALE_DEFAULTS
                    if getattr(args, k, None) is not None}
        if getattr(args, "config", None):
            try:
                with open(args.config) as f:
                    explicit |= set(json.load(f))
            except (OSError, json.JSONDecodeError):
                pass
        for key, value in SYNTH_SCALE_DEFAULTS.items():
            if key not in explicit:
                cfg[key] = value
    if not (0.0 <= float(cfg["valid_fraction"]) < 1.0):
        problems.append("valid_fraction: must be in [0, 1)")
    if int(cfg["min_freq"]) < 1:
        problems.append("min_freq: must be >= 1")
    train_cfg = optim.TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                                  l2=float(cfg["l2"]), epochs=int(cfg["epochs"]),
                                  seed=int(cfg["seed"]), eval_every=int(cfg["eval_every"]))
    problems.extend(train_cfg.validate())
    # model dims are validated after the data determines vocab sizes
    for key in ("dense_fields", "sparse_fields", "embed_dim", "product_size",
                "cross_depth"):
        if int(cfg[key]) < 1:
            problems.append(f"{key}: must be >= 1")
    if problems:
        raise UsageError(problems)
    return cfg


def _split_rows(lines: list[str], valid_fraction: float):
    n_valid = int(round(len(lines) * valid_fraction))
    n_train = len(lines) - n_valid
    return lines[:n_train], lines[n_train:]


def _load_training_data(cfg):
    """Returns (train_ds, valid_ds_or_None, vocab, vocab_sizes, provenance)."""
    if cfg["synth"] is not None:
        spec = data_mod.DEFAULT_SYNTH_SPEC
        if cfg["synth_seed"] is not None:
            spec = dataclasses.replace(spec, seed=int(cfg["synth_seed"]))
        sdata = data_mod.synth_generate(spec)
        vocab = sdata.vocab()
        cfg["dense_fields"] = spec.dense_fields
        cfg["sparse_fields"] = spec.sparse_fields
        return (sdata.train_dataset(), sdata.valid_dataset(), vocab,
                vocab.sizes(), {"synth_spec": spec.to_dict()})
    if not cfg["train_data"]:
        raise UsageError(["train_data: required unless --synth is used "
                          "(pass --train-data)"])
    n_dense, n_sparse = int(cfg["dense_fields"]), int(cfg["sparse_fields"])
    train_lines = list(data_mod.read_lines(cfg["train_data"]))
    if cfg["valid_data"]:
        valid_lines = list(data_mod.read_lines(cfg["valid_data"]))
    elif float(cfg["valid_fraction"]) > 0:
        train_lines, valid_lines = _split_rows(train_lines,
                                               float(cfg["valid_fraction"]))
    else:
        valid_lines = []
    if not train_lines:
        raise DataError("training split is empty")
    # vocab comes from the training split only
    vocab = data_mod.build_vocab(train_lines, n_dense, n_sparse,
                                 min_freq=int(cfg["min_freq"]))

    def parse_all(lines):
        dense, sparse, labels = [], [], []
        for line in lines:
            inst = data_mod.parse_criteo_line(line, vocab, n_dense, n_sparse)
            dense.append(inst.dense)
            sparse.append(inst.sparse)
            labels.append(inst.label)
        return data_mod.Dataset(np.stack(dense), np.stack(sparse),
                                np.array(labels, dtype=np.float64))

    train_ds = parse_all(train_lines)
    valid_ds = parse_all(valid_lines) if valid_lines else None
    provenance = {"train_data": cfg["train_data"], "valid_data": cfg["valid_data"],
                  "valid_fraction": cfg["valid_fraction"]}
    return train_ds, valid_ds, vocab, vocab.sizes(), provenance


def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, valid_ds, vocab, vocab_sizes, provenance = _load_training_data(cfg)

    model_cfg = ModelConfig(
        dense_fields=int(cfg["dense_fields"]),
        sparse_fields=int(cfg["sparse_fields"]),
        vocab_sizes=tuple(vocab_sizes),
        embed_dim=int(cfg["embed_dim"]),
        product_size=int(cfg["product_size"]),
        cross_depth=int(cfg["cross_depth"]),
        mlp_widths=tuple(cfg["mlp_widths"]),
        seed=int(cfg["seed"]),
    )
    problems = model_cfg.validate()
    if problems:
        raise UsageError(problems)
    train_cfg = optim.TrainConfig(
        lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
        l2=float(cfg["l2"]), epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]), eval_every=int(cfg["eval_every"]))

    resolved = dict(cfg)
    resolved["vocab_sizes"] = list(vocab_sizes)
    resolved.update(provenance)
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2,
                                                    sort_keys=True) + "\n")
    (out_dir / "vocab.json").write_text(vocab.to_json() + "\n")

    model = XCrossNetModel.init(model_cfg)
    checkpoint_path = out_dir / "checkpoint.xcn"
    log_path = out_dir / "train_log.ndjson"
    interrupted = False
    with open(log_path, "w") as log_file:
        def on_record(record):
            log_file.write(json.dumps(record) + "\n")
            if "val_logloss" in record:
                _echo("epoch", record["epoch"])
                _echo("val_auc", record["val_auc"])
                _echo("val_logloss", record["val_logloss"])

        try:
            optim.fit(model, train_ds, train_cfg, valid=valid_ds,
                      callbacks=[on_record])
        except KeyboardInterrupt:
            interrupted = True
    save_checkpoint(model, checkpoint_path)
    _echo("checkpoint", checkpoint_path)
    _echo("train_log", log_path)
    if interrupted:
        _echo("interrupted", "true")
        return 130
    if valid_ds is not None:
        report = metrics.evaluate(model, valid_ds)
        for line in report.lines():
            print(f"final_{line}")
    return EXIT_OK


def _load_vocab_for(args, checkpoint_path) -> data_mod.FieldVocab:
    vocab_path = getattr(args, "vocab", None)
    if vocab_path is None:
        vocab_path = Path(checkpoint_path).parent / "vocab.json"
        if not Path(vocab_path).exists():
            raise DataError(
                f"no vocab file next to the checkpoint ({vocab_path}); "
                "pass --vocab explicitly")
    try:
        return data_mod.FieldVocab.from_json(Path(vocab_path).read_text())
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot load vocab from {vocab_path}: {exc}") from None


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vocab = _load_vocab_for(args, args.checkpoint)
    ds = data_mod.load_tsv(args.data, vocab, model.config.dense_fields,
                           model.config.sparse_fields)
    report = metrics.evaluate(model, ds)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vocab = _load_vocab_for(args, args.checkpoint)
    ds = data_mod.load_tsv(args.data, vocab, model.config.dense_fields,
                           model.config.sparse_fields)
    preds = metrics.predict_dataset(model, ds)
    with open(args.out, "w") as f:
        for p in preds:
            f.write(repr(float(p)) + "\n")
    _echo("predictions", args.out)
    _echo("n", len(preds))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    d = GRADCHECK_DEFAULTS
    config = ModelConfig(
        dense_fields=args.dense_fields or d["dense_fields"],
        sparse_fields=args.sparse_fields or d["sparse_fields"],
        vocab_sizes=(args.vocab_size or d["vocab_size"],) *
                    (args.sparse_fields or d["sparse_fields"]),
        embed_dim=args.embed_dim or d["embed_dim"],
        product_size=args.product_size or d["product_size"],
        cross_depth=args.cross_depth or d["cross_depth"],
        mlp_widths=_parse_widths(args.mlp_widths) if args.mlp_widths is not None
                   else d["mlp_widths"],
        seed=args.seed,
    )
    problems = config.validate()
    if problems:
        raise UsageError(problems)
    model, batch = oracle.gradcheck_point(config, args.seed,
                                          instances=args.instances)
    perturb = "cross.w0" if args.corrupt else None
    worst = oracle.gradcheck_model(model, batch, eps=args.eps,
                                   perturb_group=perturb)
    ok = True
    for entry in model.registry:
        err = worst[entry.name]
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"gradcheck group={entry.name} size={entry.values.size} "
              f"max_rel_err={err:.3e} {status}")
        ok = ok and err < args.tolerance
    _echo("gradcheck_pass", "true" if ok else "false")
    _echo("tolerance", args.tolerance)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_synth(args) -> int:
    spec = data_mod.DEFAULT_SYNTH_SPEC
    overrides = {}
    for key in ("dense_fields", "sparse_fields", "vocab_size", "n_train",
                "n_valid", "seed", "dense_cross_coef", "pair_coef"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    sdata = data_mod.synth_generate(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path, valid_path = out_dir / "train.tsv", out_dir / "valid.tsv"
    sdata.write_tsv(train_path, valid_path)
    np.savetxt(out_dir / "train_scores.txt", sdata.train_scores)
    np.savetxt(out_dir / "valid_scores.txt", sdata.valid_scores)
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2,
                                                  sort_keys=True) + "\n")
    _echo("train_tsv", train_path)
    _echo("valid_tsv", valid_path)
    _echo("n_train", spec.n_train)
    _echo("n_valid", spec.n_valid)
    _echo("positive_ratio_train", float(np.mean(sdata.train_labels)))
    _echo("bayes_auc_train", metrics.auc(sdata.train_scores, sdata.train_labels))
    _echo("bayes_auc_valid", metrics.auc(sdata.valid_scores, sdata.valid_labels))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    for key, value in model.config.to_dict().items():
        _echo(f"config.{key}", value)
    for stage, count in model.num_parameters().items():
        _echo(f"params.{stage}", count)
    for convention in BALANCE_CONVENTIONS:
        _echo(f"balance_index.{convention}",
              balance_index(model.config, convention))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xcrossnet",
        description="Train and inspect the XCrossNet CTR model. "
                    "Set XCN_THREADS to cap BLAS threads (0 = auto).")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--dense-fields", dest="dense_fields", type=int)
        p.add_argument("--sparse-fields", dest="sparse_fields", type=int)
        p.add_argument("--embed-dim", dest="embed_dim", type=int)
        p.add_argument("--product-size", dest="product_size", type=int)
        p.add_argument("--cross-depth", dest="cross_depth", type=int)
        p.add_argument("--mlp-widths", dest="mlp_widths",
                       help="comma-separated hidden widths, e.g. 400,400; "
                            "'none' for no hidden layers")

    p_train = sub.add_parser("train", help="train a model, write checkpoint+log")
    p_train.add_argument("--config", help="JSON config file; flags override it")
    p_train.add_argument("--train-data", dest="train_data")
    p_train.add_argument("--valid-data", dest="valid_data")
    p_train.add_argument("--valid-fraction", dest="valid_fraction", type=float,
                         help="held-out tail fraction of --train-data rows "
                              "when no --valid-data is given")
    p_train.add_argument("--synth", choices=["default"],
                         help="train on the built-in synthetic task")
    p_train.add_argument("--synth-seed", dest="synth_seed", type=int)
    p_train.add_argument("--min-freq", dest="min_freq", type=int)
    add_model_flags(p_train)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--l2", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--eval-every", dest="eval_every", type=int)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a TSV file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--vocab")
    p_eval.set_defaults(handler=cmd_eval)

    p_pred = sub.add_parser("predict", help="write one probability per input line")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--vocab")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(handler=cmd_predict)

    p_grad = sub.add_parser(
        "gradcheck",
        help="compare backward gradients with central finite differences")
    add_model_flags(p_grad)
    p_grad.add_argument("--vocab-size", dest="vocab_size", type=int)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=3)
    p_grad.add_argument("--eps", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--corrupt", action="store_true",
                        help="negative control: perturb one gradient group "
                             "and expect the check to fail")
    p_grad.set_defaults(handler=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="generate the synthetic task as TSV")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--dense-fields", dest="dense_fields", type=int)
    p_synth.add_argument("--sparse-fields", dest="sparse_fields", type=int)
    p_synth.add_argument("--vocab-size", dest="vocab_size", type=int)
    p_synth.add_argument("--n-train", dest="n_train", type=int)
    p_synth.add_argument("--n-valid", dest="n_valid", type=int)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--dense-cross-coef", dest="dense_cross_coef", type=float)
    p_synth.add_argument("--pair-coef", dest="pair_coef", type=float)
    p_synth.set_defaults(handler=cmd_synth)

    p_inspect = sub.add_parser("inspect", help="print checkpoint config and "
                                               "parameter/balance diagnostics")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.set_defaults(handler=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except XCrossNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
