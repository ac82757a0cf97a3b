"""Command-line pipeline: synth, train, generate, eval, gradcheck, nearest.

Every run that writes artifacts also writes a ``manifest.json`` capturing
the resolved settings, seeds and SHA-256 hashes of the input files, so two
runs can be compared for drift.  Errors come back as a single
``error: ...`` line on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (ImageFeatureStore, SynthSpec, build_dataset,
                     build_vocabulary, generate_synthetic_corpus, load_captions,
                     load_features, load_split_map, load_vocab, save_captions,
                     save_features, save_features_tsv, save_split_map, save_vocab)
from .evaluation import (corpus_perplexity, generation_bleu, recall_curve,
                         retrieval_eval, shortlist)
from .inference import (GenerationConfig, generate, marginal_log2prob,
                        sentence_log2prob)
from .model import (ModelConfig, backward_sentence, load_checkpoint,
                    nearest_words, save_checkpoint)
from .numerics import Rng
from .training import TrainConfig, TrainingDiverged, gradient_check, train

# Settings understood by the config file and overridable by flags.
TRAIN_SETTINGS = {
    "variant": (str, "mrnn"),
    "d_e1": (int, 128),
    "d_e2": (int, 128),
    "d_r": (int, 256),
    "d_m": (int, 512),
    "learning_rate": (float, 0.05),
    "lambda_reg": (float, 1e-5),
    "batch_size": (int, 16),
    "epochs": (int, 10),
    "clip_norm": (str, "5.0"),  # a float or the word "none"
    "seed": (int, 0),
    "eval_every": (int, 1),
    "min_count": (int, 1),
    "precision": (str, "float64"),
}


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, settings: dict,
                   inputs: dict[str, str], outputs: dict[str, str]) -> Path:
    manifest = {
        "command": command,
        "inputs": {name: {"path": str(path), "sha256": sha256_file(path)}
                   for name, path in inputs.items()},
        "outputs": outputs,
        "settings": settings,
        "tool": "mrnn",
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def load_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` settings file; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in TRAIN_SETTINGS:
            raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = raw
    return values


def resolve_settings(args) -> dict:
    """Defaults, then config file, then explicit command-line flags."""
    settings = {k: default for k, (_, default) in TRAIN_SETTINGS.items()}
    if args.config:
        settings.update(load_config_file(args.config))
    for key, (typ, _) in TRAIN_SETTINGS.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            settings[key] = flag_val
    return {k: TRAIN_SETTINGS[k][0](v) for k, v in settings.items()}


def parse_clip(raw: str) -> float | None:
    return None if str(raw).lower() == "none" else float(raw)


def require_files(*paths) -> None:
    for path in paths:
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"missing file: {path}")


def parallel_map(fn, items, threads: int) -> list:
    """Order-preserving map; results are identical for any thread count."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(n_topics=args.topics, captions_per_image=args.captions_per_image,
                     noise_dim=args.noise_dim, train_frac=args.train_frac,
                     val_frac=args.val_frac)
    dataset, store, _ = generate_synthetic_corpus(Rng(args.seed), args.images, spec)

    examples = dataset.train + dataset.validation + dataset.test
    pairs = [(ex.image_id, ex.raw_text) for ex in examples]
    pairs.sort()
    split_map = {}
    for label, bucket in (("train", dataset.train), ("val", dataset.validation),
                          ("test", dataset.test)):
        for ex in bucket:
            split_map[ex.image_id] = label

    save_captions(pairs, out / "captions.tsv")
    if args.feature_format == "tsv":
        feature_name = "features.tsv"
        save_features_tsv(store, out / feature_name)
    else:
        feature_name = "features.mrnf"
        save_features(store, out / feature_name)
    save_split_map(split_map, out / "split.tsv")
    settings = {"images": args.images, "topics": args.topics,
                "captions_per_image": args.captions_per_image,
                "noise_dim": args.noise_dim, "train_frac": args.train_frac,
                "val_frac": args.val_frac, "seed": args.seed}
    write_manifest(out, "synth", settings, {},
                   {"captions": "captions.tsv", "features": feature_name,
                    "split": "split.tsv"})
    print(f"wrote {len(split_map)} images / {len(pairs)} captions to {out}")
    return 0


def cmd_train(args) -> int:
    require_files(args.captions, args.features, args.split, args.config)
    settings = resolve_settings(args)
    pairs = load_captions(args.captions)
    store = load_features(args.features)
    split_map = load_split_map(args.split)

    train_texts = [text for image_id, text in pairs if split_map.get(image_id) == "train"]
    vocab = build_vocabulary(train_texts, min_count=settings["min_count"])
    dataset = build_dataset(pairs, split_map, vocab)

    model_cfg = ModelConfig(vocab_size=vocab.size, d_i=store.feature_dim,
                            variant=settings["variant"], d_e1=settings["d_e1"],
                            d_e2=settings["d_e2"], d_r=settings["d_r"],
                            d_m=settings["d_m"])
    train_cfg = TrainConfig(model=model_cfg,
                            learning_rate=settings["learning_rate"],
                            lambda_reg=settings["lambda_reg"],
                            batch_size=settings["batch_size"],
                            epochs=settings["epochs"],
                            clip_norm=parse_clip(settings["clip_norm"]),
                            seed=settings["seed"],
                            eval_every=settings["eval_every"],
                            precision=settings["precision"])
    params, report = train(train_cfg, dataset, store)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.mrnm")
    save_vocab(vocab, out / "vocab.txt")
    report.to_csv(out / "train_report.csv")
    inputs = {"captions": args.captions, "features": args.features, "split": args.split}
    if args.config:
        inputs["config"] = args.config
    write_manifest(out, "train", settings, inputs,
                   {"checkpoint": "checkpoint.mrnm", "vocab": "vocab.txt",
                    "report": "train_report.csv"})
    last = report.rows[-1] if report.rows else None
    if last is not None:
        tail = f" val_ppl={last.val_ppl:.4f}" if last.val_ppl is not None else ""
        print(f"epoch {last.epoch}: cost={last.cost:.6f}{tail}")
    print(f"checkpoint written to {out / 'checkpoint.mrnm'}")
    return 0


def cmd_generate(args) -> int:
    require_files(args.checkpoint, args.vocab, args.features)
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    store = load_features(args.features)
    prefix = vocab.encode(args.prefix) if args.prefix else None
    gcfg = GenerationConfig(mode=args.mode, max_length=args.max_len,
                            prefix=prefix, seed=args.seed)
    for image_id in args.image_id:
        feat = store.get(image_id)  # unknown id -> error path
        tokens = generate(params, vocab, None if params.config.variant == "baseline"
                          else feat, gcfg)
        print(f"{image_id}\t{' '.join(tokens)}")
    return 0


def _load_eval_inputs(args):
    require_files(args.checkpoint, args.vocab, args.captions, args.features,
                  getattr(args, "split", None))
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    pairs = load_captions(args.captions)
    store = load_features(args.features)
    split_map = load_split_map(args.split) if args.split else None
    dataset = build_dataset(pairs, split_map or {p[0]: "test" for p in pairs}, vocab)
    subset = {"train": dataset.train, "val": dataset.validation,
              "test": dataset.test,
              "all": dataset.train + dataset.validation + dataset.test}[args.subset]
    if not subset:
        raise ValueError(f"subset {args.subset!r} is empty")
    return params, vocab, subset, store, dataset


def _write_metrics(args, command: str, metrics: dict, settings: dict) -> None:
    if not args.out:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for key in sorted(metrics):
            fh.write(f"{key},{metrics[key]!r}\n")
    inputs = {"checkpoint": args.checkpoint, "vocab": args.vocab,
              "captions": args.captions, "features": args.features}
    if args.split:
        inputs["split"] = args.split
    write_manifest(out, command, settings, inputs,
                   {"metrics_json": "metrics.json", "metrics_csv": "metrics.csv"})


def cmd_eval_ppl(args) -> int:
    params, _, subset, store, _ = _load_eval_inputs(args)
    ppl = corpus_perplexity(params, subset, store)
    print(f"ppl {ppl!r}")
    _write_metrics(args, "eval-ppl", {"ppl": ppl}, {"subset": args.subset})
    return 0


def cmd_eval_bleu(args) -> int:
    # works for the baseline variant too: its decoder ignores the image, so
    # every image gets the same (unconditioned) caption
    params, vocab, subset, store, _ = _load_eval_inputs(args)
    score, _ = generation_bleu(params, vocab, subset, store,
                               length_matched=not args.no_length_match,
                               max_length=args.max_len,
                               cumulative=not args.order_only)
    print(f"B-1 {score.b1:.4f} B-2 {score.b2:.4f} B-3 {score.b3:.4f}")
    _write_metrics(args, "eval-bleu",
                   {"b1": score.b1, "b2": score.b2, "b3": score.b3},
                   {"subset": args.subset, "order_only": args.order_only,
                    "length_matched": not args.no_length_match})
    return 0


def _norm_feature_set(dataset, store, k: int, seed: int) -> list[np.ndarray]:
    """Image features used to approximate the unconditional sentence probability.

    Sampled once per run from the training images (all images when no split
    was given), deterministically under the seed.
    """
    ids = sorted({ex.image_id for ex in dataset.train}) or store.ids()
    if k < len(ids):
        ids = sorted(Rng(seed).choice(ids, k))
    return [store.get(i) for i in ids]


def _retrieval_scores(args, params, subset, store, dataset):
    """Score matrix, groundtruth and candidate ids for one direction."""
    if args.direction == "t2i":
        image_ids = sorted({ex.image_id for ex in subset})
        feats = [store.get(i) for i in image_ids]

        def score_row(ex):
            return np.array([-sentence_log2prob(params, ex.tokens, f)[1]
                             for f in feats])

        # negative perplexity: higher = more relevant, ties by image id
        scores = np.vstack(parallel_map(score_row, subset, args.threads))
        gt = {q: {ex.image_id} for q, ex in enumerate(subset)}
        return scores, gt, image_ids

    image_ids = sorted({ex.image_id for ex in subset})
    cand_ids = [f"s{i:06d}" for i in range(len(subset))]
    norm_feats = _norm_feature_set(dataset, store, args.norm_images, args.seed)
    marginals = parallel_map(
        lambda ex: marginal_log2prob(params, ex.tokens, norm_feats), subset,
        args.threads)

    def score_row(image_id):
        feat = store.get(image_id)
        return np.array([sentence_log2prob(params, ex.tokens, feat)[0] - marg
                         for ex, marg in zip(subset, marginals)])

    scores = np.vstack(parallel_map(score_row, image_ids, args.threads))

    if getattr(args, "shortlist", None):
        sub_store = ImageFeatureStore(store.feature_dim)
        for image_id in image_ids:
            sub_store.add(image_id, store.get(image_id))
        near = shortlist(image_ids, sub_store, size=args.shortlist)
        for q, image_id in enumerate(image_ids):
            allowed = set(near[image_id])
            for c, ex in enumerate(subset):
                if ex.image_id not in allowed:
                    scores[q, c] = -np.inf

    gt = {q: {cand_ids[c] for c, ex in enumerate(subset) if ex.image_id == image_id}
          for q, image_id in enumerate(image_ids)}
    return scores, gt, cand_ids


def cmd_eval_retrieval(args) -> int:
    params, _, subset, store, dataset = _load_eval_inputs(args)
    if params.config.variant == "baseline":
        raise ValueError("retrieval needs image conditioning; train an mrnn variant")
    scores, gt, cand_ids = _retrieval_scores(args, params, subset, store, dataset)
    metrics = retrieval_eval(scores, gt, ks=(1, 5, 10), candidate_ids=cand_ids)
    print(f"{args.direction} R@1 {metrics.r_at[1]:.1f} R@5 {metrics.r_at[5]:.1f} "
          f"R@10 {metrics.r_at[10]:.1f} Med_r {metrics.med_r}")
    _write_metrics(args, "eval-retrieval",
                   {"direction": args.direction, "r_at_1": metrics.r_at[1],
                    "r_at_5": metrics.r_at[5], "r_at_10": metrics.r_at[10],
                    "med_r": metrics.med_r},
                   {"subset": args.subset, "direction": args.direction,
                    "shortlist": args.shortlist, "norm_images": args.norm_images,
                    "seed": args.seed, "threads": args.threads})
    return 0


def cmd_eval_curve(args) -> int:
    params, _, subset, store, dataset = _load_eval_inputs(args)
    if params.config.variant == "baseline":
        raise ValueError("retrieval needs image conditioning; train an mrnn variant")
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    scores, gt, cand_ids = _retrieval_scores(args, params, subset, store, dataset)
    curve = recall_curve(scores, gt, fractions, candidate_ids=cand_ids)
    for f, mean in curve.points:
        print(f"{f!r},{mean!r}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "curve.csv", "w", encoding="utf-8") as fh:
            fh.write("fraction,mean_matches\n")
            for f, mean in curve.points:
                fh.write(f"{f!r},{mean!r}\n")
        inputs = {"checkpoint": args.checkpoint, "vocab": args.vocab,
                  "captions": args.captions, "features": args.features}
        if args.split:
            inputs["split"] = args.split
        write_manifest(out, "eval-curve",
                       {"subset": args.subset, "direction": args.direction,
                        "fractions": fractions, "norm_images": args.norm_images,
                        "seed": args.seed, "threads": args.threads},
                       inputs, {"curve": "curve.csv"})
    return 0


def cmd_gradcheck(args) -> int:
    grad_fn = None
    if args.corrupt:
        def grad_fn(params, trace, targets, feat, _block=args.corrupt):
            grads, loss = backward_sentence(params, trace, targets, feat)
            grads.arrays[_block] += 0.01
            return grads, loss

    report = gradient_check(n_samples=args.samples, seed=args.seed,
                            variant=args.variant, threshold=args.threshold,
                            grad_fn=grad_fn)
    worst = report.worst
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {report.max_rel_err:.3e} "
          f"(block {worst.block}, instance {worst.instance}) over "
          f"{args.samples} instances, threshold {report.threshold:.0e}")
    return 0 if report.passed else 1


def cmd_nearest(args) -> int:
    require_files(args.checkpoint, args.vocab)
    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    for token in nearest_words(params, vocab, args.token, args.k):
        print(token)
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_eval_common(sub):
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--vocab", required=True)
    sub.add_argument("--captions", required=True)
    sub.add_argument("--features", required=True)
    sub.add_argument("--split", default=None)
    sub.add_argument("--subset", default="test",
                     choices=["train", "val", "test", "all"])
    sub.add_argument("--out", default=None, help="directory for metric files")


def _add_retrieval_common(sub):
    sub.add_argument("--direction", required=True, choices=["i2t", "t2i"])
    sub.add_argument("--norm-images", type=int, default=100,
                     help="images sampled for the sentence-probability marginal")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrnn",
        description="Multimodal RNN caption generation and image-sentence retrieval.")
    parser.add_argument("--version", action="version", version=f"mrnn {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--topics", type=int, default=4)
    p.add_argument("--captions-per-image", type=int, default=2)
    p.add_argument("--noise-dim", type=int, default=4)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--feature-format", choices=["bin", "tsv"], default="bin")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--variant", choices=["mrnn", "baseline"], default=None)
    p.add_argument("--d-e1", dest="d_e1", type=int, default=None)
    p.add_argument("--d-e2", dest="d_e2", type=int, default=None)
    p.add_argument("--d-r", dest="d_r", type=int, default=None)
    p.add_argument("--d-m", dest="d_m", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--clip-norm", dest="clip_norm", default=None,
                   help="positive float or 'none'")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--min-count", dest="min_count", type=int, default=None)
    p.add_argument("--precision", choices=["float64", "float32"], default=None)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("generate", help="caption images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--image-id", action="append", required=True)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--prefix", default=None, help="reference words to seed generation")
    p.set_defaults(func=cmd_generate)

    p = commands.add_parser("eval", help="evaluation metrics")
    evals = p.add_subparsers(dest="eval_command", required=True)

    e = evals.add_parser("ppl", help="corpus perplexity")
    _add_eval_common(e)
    e.set_defaults(func=cmd_eval_ppl)

    e = evals.add_parser("bleu", help="BLEU of greedy generations")
    _add_eval_common(e)
    e.add_argument("--order-only", action="store_true",
                   help="report order-n precision instead of cumulative B-n")
    e.add_argument("--no-length-match", action="store_true",
                   help="stop at the end sign instead of matching reference length")
    e.add_argument("--max-len", type=int, default=50)
    e.set_defaults(func=cmd_eval_bleu)

    e = evals.add_parser("retrieval", help="R@K and median rank")
    _add_eval_common(e)
    _add_retrieval_common(e)
    e.add_argument("--shortlist", type=int, default=None,
                   help="restrict i2t candidates to captions of the K nearest images")
    e.set_defaults(func=cmd_eval_retrieval)

    e = evals.add_parser("curve", help="recall curve (fraction,mean_matches CSV)")
    _add_eval_common(e)
    _add_retrieval_common(e)
    e.add_argument("--fractions", default="0.01,0.02,0.05,0.1,0.2,0.5,1.0")
    e.set_defaults(func=cmd_eval_curve)

    p = commands.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["mrnn", "baseline"], default="mrnn")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--corrupt", default=None, metavar="BLOCK",
                   help="add a constant to the named gradient block (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = commands.add_parser("nearest", help="nearest words in embedding space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_nearest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, TrainingDiverged) as exc:
        message = " ".join(str(exc).split())  # keep the error on a single line
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
