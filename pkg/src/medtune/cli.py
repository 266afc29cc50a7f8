"""Command-line entry point: ``medtune <subcommand>``.

Exit status: 0 success, 1 runtime failure (including missing/unreadable
files), 2 input or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, decontam, evaluate, lora, model, synthetic, train
from . import tensor as tc
from .model import ConfigError

logger = logging.getLogger("medtune")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class UsageError(ValueError):
    pass


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def write_manifest(out_dir, args, config: dict, inputs: dict, outputs: list, started: float, seed=None) -> Path:
    path = Path(out_dir) / "manifest.json"
    dump_json(
        path,
        {
            "subcommand": args.command,
            "config": config,
            "seed": seed,
            "inputs": inputs,
            "outputs": sorted(str(o) for o in outputs),
            "threads": args.threads,
            "version": __version__,
            "duration_s": round(time.time() - started, 3),
        },
    )
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise data.DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def _tokenizer(args) -> data.ByteTokenizer:
    return data.make_tokenizer(args.tokenizer, getattr(args, "vocab_file", None))


def _load_weights(path):
    return checkpoint.load_model(path, requires_grad=False)


# --- subcommands -------------------------------------------------------------


def cmd_pack(args) -> int:
    started = time.time()
    tok = _tokenizer(args)
    if bool(args.mixture) == bool(args.data):
        raise UsageError("give exactly one of --data or --mixture")
    inputs: dict = {}
    config = {"context_length": args.context_length, "tokenizer": tok.describe()}
    seed = None
    if args.mixture:
        spec = data.MixtureSpec.from_file(args.mixture)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        if args.total is None:
            raise UsageError("--mixture needs --total")
        samples = data.assemble_mixture(spec, args.total)
        seed = spec.seed
        inputs["mixture"] = args.mixture
        config["mixture"] = [{"path": e.path, "ratio": e.ratio} for e in spec.entries]
        config["total"] = args.total
    else:
        samples = []
        for p in args.data:
            samples.extend(data.read_samples(p))
        inputs["data"] = args.data
    chunks = data.pack(samples, tok, args.context_length)
    out = _out_dir(args)
    packed = out / "packed.bin"
    data.write_packed(packed, chunks, args.context_length, tok)
    config.update(n_samples=len(samples), n_chunks=len(chunks), response_tokens=int(sum(c.loss_mask.sum() for c in chunks)))
    write_manifest(out, args, config, inputs, [packed], started, seed)
    print(f"packed {len(samples)} samples into {len(chunks)} chunks of {args.context_length} tokens -> {packed}")
    return EXIT_OK


def resolve_train_config(args) -> tuple[model.ModelConfig | None, train.TrainConfig, lora.LoraConfig | None]:
    file_cfg = _load_json(args.config) if args.config else {}
    mode = args.mode or file_cfg.get("train", {}).get("mode") or "full"
    lora_flags = args.lora_r is not None or args.lora_alpha is not None or args.lora_target is not None
    if mode == "full" and (lora_flags or "lora" in file_cfg):
        raise UsageError("LoRA settings given in full mode")
    overrides = {k: v for k, v in file_cfg.get("train", {}).items() if k != "mode"}
    for flag, key in (
        ("epochs", "epochs"),
        ("peak_lr", "peak_lr"),
        ("warmup_steps", "warmup_steps"),
        ("batch_chunks", "batch_chunks"),
        ("seed", "seed"),
        ("weight_decay", "weight_decay"),
        ("grad_clip", "grad_clip"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    try:
        tcfg = train.TrainConfig.preset(mode, **overrides)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    lcfg = None
    if mode == "lora":
        ld = {"r": 8, "alpha": 16.0, **file_cfg.get("lora", {})}
        if args.lora_r is not None:
            ld["r"] = args.lora_r
        if args.lora_alpha is not None:
            ld["alpha"] = args.lora_alpha
        if args.lora_target is not None:
            ld["target"] = args.lora_target.split(",")
        lcfg = lora.LoraConfig.from_dict(ld)
    mcfg = model.ModelConfig.from_dict(file_cfg["model"]) if "model" in file_cfg else None
    return mcfg, tcfg, lcfg


def cmd_train(args) -> int:
    started = time.time()
    header, chunks = data.read_packed(args.packed)
    out = _out_dir(args)
    resume = None
    if args.resume:
        resume = train.load_state(args.resume)
        weights, adapters, tcfg = resume.weights, resume.adapters, resume.config
        lcfg = adapters.config if adapters is not None else None
        mcfg = weights.config
    else:
        mcfg, tcfg, lcfg = resolve_train_config(args)
        if args.base:
            weights = checkpoint.load_model(args.base)
            if mcfg is not None and mcfg != weights.config:
                raise UsageError("model config in --config disagrees with --base checkpoint")
            mcfg = weights.config
        else:
            if mcfg is None:
                raise UsageError("need --base or a 'model' section in --config")
            weights = model.init_model(mcfg, tcfg.seed)
        adapters = lora.attach_adapters(weights, lcfg, tcfg.seed) if tcfg.mode == "lora" else None
    if header["context_length"] > mcfg.context_length:
        raise UsageError(f"packed context {header['context_length']} exceeds model context {mcfg.context_length}")
    if header["tokenizer"]["vocab_size"] > mcfg.vocab_size:
        raise UsageError("tokenizer vocabulary is larger than the model vocabulary")
    result = train.train(weights, adapters, chunks, tcfg, out_dir=out, resume=resume, stop_after_epoch=args.stop_after_epoch, log_every=args.log_every)
    outputs = [out / "log.jsonl"] + [out / f"state_epoch{e}.ckpt" for e in range(1, result.epochs_done + 1) if (out / f"state_epoch{e}.ckpt").exists()]
    if result.epochs_done == tcfg.epochs:
        if tcfg.mode == "lora":
            final = out / "adapters.ckpt"
            lora.save_adapters(final, adapters, mcfg, meta={"steps": result.state.step})
        else:
            final = out / "model.ckpt"
            checkpoint.save_model(final, weights, meta={"steps": result.state.step})
        outputs.append(final)
    if not args.no_plots and result.log:
        from .plotting import plot_training

        outputs.append(plot_training(result.log, out / "training.png"))
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    if lcfg is not None:
        config["lora"] = lcfg.to_dict()
        config["trainable_parameters"] = lora.count_trainable(mcfg, lcfg)
    inputs = {"packed": args.packed, "base": args.base, "resume": args.resume}
    write_manifest(out, args, config, inputs, outputs, started, tcfg.seed)
    last = result.log[-1] if result.log else {}
    print(f"trained {result.state.step} steps ({tcfg.mode}), final loss {last.get('loss', float('nan')):.4f}")
    return EXIT_OK


def _bundled_benchmark() -> Path:
    return Path(str(resources.files("medtune") / "resources" / "synthetic_benchmark.jsonl"))


def _write_eval_outputs(out: Path, report: evaluate.EvalReport, stem: str, plots: bool) -> list[Path]:
    paths = [out / f"{stem}.json", out / f"{stem}.txt", out / f"{stem}.tsv"]
    dump_json(paths[0], report.to_dict())
    paths[1].write_text(evaluate.format_table(report) + "\n", encoding="utf-8")
    with open(paths[2], "w", encoding="utf-8") as f:
        f.write("benchmark\tcorrect\tscored\taccuracy\n")
        for b, (c, n) in report.counts.items():
            f.write(f"{b}\t{c}\t{n}\t{report.accuracy[b]:.4f}\n")
    if plots:
        from .plotting import plot_accuracy

        paths.append(plot_accuracy(report, out / f"{stem}.png"))
    return paths


def cmd_eval(args) -> int:
    started = time.time()
    weights = _load_weights(args.model)
    adapters = lora.load_adapters(args.adapters) if args.adapters else None
    tok = _tokenizer(args)
    bench = args.benchmark or _bundled_benchmark()
    items = evaluate.read_benchmark(bench)
    out = _out_dir(args)
    outputs: list[Path] = []
    if args.contamination:
        report = decontam.DecontamReport.from_file(args.contamination)
        cmp = decontam.decontaminated_eval(weights, tok, items, report, args.scoring, adapters)
        outputs += _write_eval_outputs(out, cmp.full, "eval_full", not args.no_plots)
        outputs += _write_eval_outputs(out, cmp.clean, "eval_decontaminated", not args.no_plots)
        delta_path = out / "decontam_delta.tsv"
        with open(delta_path, "w", encoding="utf-8") as f:
            f.write("benchmark\tfull\tdecontaminated\tdelta\n")
            for b, d in cmp.delta.items():
                full_v = cmp.full.accuracy.get(b, getattr(cmp.full, b, None))
                clean_v = cmp.clean.accuracy.get(b, getattr(cmp.clean, b, None))
                fmt = lambda v: "" if v is None else f"{v:.4f}"
                f.write(f"{b}\t{fmt(full_v)}\t{fmt(clean_v)}\t{fmt(d)}\n")
        outputs.append(delta_path)
        if not args.no_plots:
            from .plotting import plot_decontam_delta

            outputs.append(plot_decontam_delta(cmp.delta, out / "decontam_delta.png"))
        shown = cmp.clean
        print(evaluate.format_table(cmp.full, "full"))
        print()
        print(evaluate.format_table(cmp.clean, "decontaminated"))
    else:
        shown = evaluate.run_benchmark(weights, tok, items, args.scoring, adapters=adapters)
        outputs += _write_eval_outputs(out, shown, "eval", not args.no_plots)
        print(evaluate.format_table(shown))
    inputs = {"model": args.model, "adapters": args.adapters, "benchmark": str(bench), "contamination": args.contamination}
    write_manifest(out, args, {"scoring": args.scoring, "system_prompt": evaluate.DEFAULT_SYSTEM}, inputs, outputs, started)
    return EXIT_OK


def cmd_decontam(args) -> int:
    started = time.time()
    samples = []
    for p in args.train:
        samples.extend(data.read_samples(p))
    items = evaluate.read_benchmark(args.benchmark)
    report = decontam.scan(decontam.training_pairs(samples), items, threshold=args.threshold)
    out = _out_dir(args)
    rep_path, txt_path, tsv_path = out / "contamination.json", out / "contamination.txt", out / "contamination.tsv"
    dump_json(rep_path, report.to_dict())
    txt_path.write_text(decontam.format_summary(report) + "\n", encoding="utf-8")
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("eval_id\tbenchmark\tbest_train_id\tsimilarity\tcontaminated\n")
        for r in report.records:
            f.write(f"{r.eval_id}\t{r.benchmark}\t{r.best_train_id}\t{r.similarity:.6f}\t{int(r.contaminated)}\n")
    write_manifest(
        out, args, {"threshold": args.threshold, "provider": "hashed char 3-5-gram tf-idf, dim 4096"},
        {"train": args.train, "benchmark": args.benchmark}, [rep_path, txt_path, tsv_path], started,
    )
    print(decontam.format_summary(report))
    return EXIT_OK


def cmd_count_params(args) -> int:
    started = time.time()
    if args.preset:
        mcfg = model.PRESETS[args.preset]
    elif args.model_config:
        mcfg = model.ModelConfig.from_dict(_load_json(args.model_config))
    else:
        raise UsageError("give --preset or --model-config")
    target = tuple(args.lora_target.split(",")) if args.lora_target else model.LINEAR_NAMES
    lcfg = lora.LoraConfig(r=args.lora_r, alpha=args.lora_alpha, target=target)
    n = lora.count_trainable(mcfg, lcfg)
    dense = model.count_dense(mcfg)
    print(f"trainable LoRA parameters: {n:,}")
    print(f"dense parameters: {dense:,}")
    print(f"trainable fraction: {100.0 * n / dense:.3f}%")
    if args.out_dir:
        out = _out_dir(args)
        path = out / "count.json"
        dump_json(path, {"trainable": n, "dense": dense, "model": mcfg.to_dict(), "lora": lcfg.to_dict()})
        write_manifest(out, args, {"model": mcfg.to_dict(), "lora": lcfg.to_dict()}, {"preset": args.preset}, [path], started)
    return EXIT_OK


def cmd_merge(args) -> int:
    started = time.time()
    weights = _load_weights(args.model)
    adapters = lora.load_adapters(args.adapters)
    merged = lora.merge(weights, adapters)
    out = _out_dir(args)
    path = out / "merged.ckpt"
    checkpoint.save_model(path, merged, meta={"merged_from": [str(args.model), str(args.adapters)]})
    write_manifest(out, args, {"lora": adapters.config.to_dict()}, {"model": args.model, "adapters": args.adapters}, [path], started)
    print(f"merged {len(adapters.pairs)} adapter pairs -> {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    started = time.time()
    weights = _load_weights(args.model)
    adapters = lora.load_adapters(args.adapters) if args.adapters else None
    tok = _tokenizer(args)
    prompt = evaluate.render_prompt(args.prompt, args.system)
    ids = tok.encode(prompt)
    out_ids = model.greedy_generate(weights, adapters, ids, args.max_new, stop_token=tok.end_id)
    text = tok.decode(out_ids[len(ids):])
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        path = out / "generation.json"
        dump_json(path, {"prompt": prompt, "completion": text, "tokens": out_ids})
        write_manifest(out, args, {"max_new": args.max_new}, {"model": args.model, "adapters": args.adapters}, [path], started)
    return EXIT_OK


def cmd_init(args) -> int:
    started = time.time()
    tok = _tokenizer(args)
    if args.rigged is not None:
        ids = tok.encode(args.rigged)
        if len(ids) != 1:
            raise UsageError("--rigged needs a single-token string")
        weights = synthetic.rigged_model(ids[0], tok.vocab_size, args.context_length)
    elif args.uniform:
        weights = synthetic.uniform_model(tok.vocab_size, args.context_length)
    else:
        if args.model_config:
            mcfg = model.ModelConfig.from_dict(_load_json(args.model_config))
        else:
            mcfg = synthetic.toy_config(tok.vocab_size, args.context_length)
        weights = model.init_model(mcfg, args.seed)
    out = _out_dir(args)
    path = out / "model.ckpt"
    checkpoint.save_model(path, weights)
    write_manifest(out, args, {"model": weights.config.to_dict(), "rigged": args.rigged, "uniform": args.uniform}, {}, [path], started, args.seed)
    print(f"wrote {weights.num_parameters():,}-parameter model -> {path}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _add_tokenizer_flags(p):
    p.add_argument("--tokenizer", choices=("byte_level", "external_vocab"), default="byte_level")
    p.add_argument("--vocab-file", help="JSON list of pieces for external_vocab mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medtune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"medtune {__version__}")
    parser.add_argument("--threads", type=int, default=tc.threads_from_env(), help="cap on BLAS threads (env MEDTUNE_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="render, tokenize and pack instruction data")
    p.add_argument("--data", nargs="+", help="JSONL dataset file(s), concatenated in order")
    p.add_argument("--mixture", help="JSON mixture file")
    p.add_argument("--total", type=int, help="number of samples to draw from the mixture")
    p.add_argument("--seed", type=int)
    p.add_argument("--context-length", type=int, default=4096)
    p.add_argument("--out-dir", required=True)
    _add_tokenizer_flags(p)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("init", help="write a freshly initialised (or rigged) model checkpoint")
    p.add_argument("--model-config", help="JSON model config; default is the toy config")
    p.add_argument("--context-length", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rigged", help="build a model that always predicts this one-token string")
    p.add_argument("--uniform", action="store_true", help="build a model with uniform next-token probabilities")
    p.add_argument("--out-dir", required=True)
    _add_tokenizer_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="full-parameter or LoRA training on packed chunks")
    p.add_argument("--packed", required=True)
    p.add_argument("--config", help="JSON with optional 'model', 'train' and 'lora' sections")
    p.add_argument("--mode", choices=("full", "lora"))
    p.add_argument("--base", help="starting model checkpoint")
    p.add_argument("--resume", help="training state checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--batch-chunks", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lora-r", type=int)
    p.add_argument("--lora-alpha", type=float)
    p.add_argument("--lora-target", help="comma-separated projection names")
    p.add_argument("--stop-after-epoch", type=int, help="end the run after this many epochs (resumable)")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot multiple-choice evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--benchmark", help="JSONL benchmark file (default: bundled synthetic set)")
    p.add_argument("--scoring", choices=evaluate.SCORING_MODES, default="raw")
    p.add_argument("--contamination", help="contamination report for the paired full/decontaminated output")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out-dir", required=True)
    _add_tokenizer_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decontam", help="flag benchmark items that near-duplicate training samples")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--threshold", type=float, default=decontam.DEFAULT_THRESHOLD)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_decontam)

    p = sub.add_parser("count-params", help="LoRA trainable-parameter count (no weights allocated)")
    p.add_argument("--preset", choices=sorted(model.PRESETS))
    p.add_argument("--model-config")
    p.add_argument("--lora-r", type=int, default=8)
    p.add_argument("--lora-alpha", type=float, default=16.0)
    p.add_argument("--lora-target")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("merge-lora", help="fold adapters into the base weights")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("generate", help="greedy decoding from a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--prompt", required=True)
    p.add_argument("--system", default=evaluate.DEFAULT_SYSTEM)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--out-dir")
    _add_tokenizer_flags(p)
    p.set_defaults(func=cmd_generate)
    return parser


INPUT_ERRORS = (
    UsageError,
    ConfigError,
    data.DataError,
    checkpoint.CheckpointError,
    model.InputError,
    tc.ShapeError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        tc.set_threads(args.threads)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"medtune {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"medtune {args.command}: cannot access {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"medtune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
