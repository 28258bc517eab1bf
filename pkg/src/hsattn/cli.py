"""``hss``: featurize, train, evaluate, predict, compare and export attention.

Failures print one line ``error[<category>]: <message>`` on stderr and exit
nonzero (2 for usage errors, 3 when featurize cached only some files, 1
otherwise). The feature cache directory defaults to ``$HSS_CACHE_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from hsattn.audio import FeatureConfig, load_wav, log_mel, write_lmel
from hsattn.corpus import LABELS, CorpusManifest, compute_features, feature_path, load_features
from hsattn.errors import ConfigError, DimensionError, HssError, UsageError
from hsattn.evaluation import evaluate, percent, write_report, z_test_uar
from hsattn.models import ModelConfig
from hsattn.training import ModelCheckpoint, TrainConfig, train, write_loss_trace

CACHE_ENV = "HSS_CACHE_DIR"
EXIT_ERROR, EXIT_USAGE, EXIT_PARTIAL = 1, 2, 3
HEAD_CHOICES = ("flatten", "maxpool", "attn-softmax", "attn-sigmoid", "last-time-stamp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _frames(text: str):
    if text.lower() in ("none", "natural"):
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'none', got {text!r}")


def _cache(args) -> str | None:
    return args.features or os.environ.get(CACHE_ENV) or None


def _checkpoint_features(ckpt: ModelCheckpoint) -> FeatureConfig:
    return FeatureConfig(**ckpt.feature_config) if ckpt.feature_config else FeatureConfig()


# -- commands ------------------------------------------------------------------------

def cmd_featurize(args) -> int:
    out_dir = args.out_dir or os.environ.get(CACHE_ENV)
    if not out_dir:
        raise UsageError(f"--out-dir is required when ${CACHE_ENV} is unset")
    manifest = CorpusManifest.load(args.manifest)
    config = FeatureConfig(num_frames=args.frames)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    failed = written = 0
    for record in manifest.records:
        target = feature_path(out_dir, record)
        if target.exists() and not args.force:
            print(f"skip {record.file} (cached)")
            continue
        try:
            spec = compute_features(record, config)
        except HssError as exc:
            failed += 1
            print(f"error[{exc.category}]: {record.file}: {exc}", file=sys.stderr)
            continue
        write_lmel(target, spec)
        written += 1
        t, m = spec.values.shape
        print(f"cached {record.file} -> {target.name} {t}x{m}")
    print(f"{written} written, {failed} failed, {len(manifest.records) - written - failed} skipped")
    if failed:
        print(f"error[ingestion]: {failed} of {len(manifest.records)} files failed", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def cmd_train(args) -> int:
    try:
        tc = TrainConfig(
            batch_size=args.batch_size,
            total_iterations=args.iterations,
            upsample=args.upsample,
            seed=args.seed,
            standardize=not args.no_standardize,
        )
        model_kwargs = dict(topology=args.topology, head=args.head, seed=args.seed)
        if args.channels:
            model_kwargs["conv_channels"] = args.channels
        if args.hidden:
            model_kwargs["hidden_sizes"] = args.hidden
        ModelConfig(**model_kwargs)  # reject bad topology/head pairs before reading data
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    manifest = CorpusManifest.load(args.manifest)
    cache = _cache(args)
    first = manifest.split("train")
    if not first:
        raise UsageError("manifest has no train records")
    sample = load_features(first[0], cache, FeatureConfig(num_frames=args.frames))
    mc = ModelConfig(**model_kwargs, input_frames=sample.shape[0], mel_bins=sample.shape[1])
    fc = FeatureConfig(num_frames=sample.shape[0], mel_bins=sample.shape[1])
    result = train(tc, mc, manifest, cache, fc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out)
    trace_path = out.with_suffix(".loss.csv")
    write_loss_trace(trace_path, result.trace)
    print(f"trained {mc.topology}/{mc.head} for {result.checkpoint.iteration} iterations, "
          f"final loss {result.trace[-1].loss:.4f}; wrote {out} and {trace_path}")
    return 0


def _evaluate(ckpt_path, manifest, split, cache):
    if not manifest.split(split):
        raise UsageError(f"split {split!r} is empty")
    return evaluate(ModelCheckpoint.load(ckpt_path), manifest, split, cache)


def cmd_evaluate(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    report = _evaluate(args.checkpoint, manifest, args.split, _cache(args))
    paths = write_report(report, args.report_dir)
    print(report.summary())
    print("recall " + " ".join(f"{lab} {percent(r)} %" for lab, r in zip(LABELS, report.recalls)))
    print(f"wrote {', '.join(p.name for p in paths)} to {args.report_dir}")
    return 0


def cmd_predict(args) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    config = _checkpoint_features(ckpt)
    print("file\tprediction\t" + "\t".join(LABELS))
    for wav in args.wav:
        spec = log_mel(load_wav(wav), config)
        probs = np.exp(ckpt.predict(spec.values).astype(np.float64))
        cells = "\t".join(f"{p:.4f}" for p in probs)
        print(f"{wav}\t{LABELS[int(probs.argmax())]}\t{cells}")
    return 0


def cmd_compare(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    cache = _cache(args)
    try:
        a = _evaluate(args.checkpoint_a, manifest, args.split, cache)
        b = _evaluate(args.checkpoint_b, manifest, args.split, cache)
    except DimensionError as exc:
        raise UsageError(f"checkpoints cannot be evaluated on the same inputs: {exc}") from exc
    if a.files != b.files:
        raise UsageError("the two evaluations cover different records")
    test = z_test_uar(a.predicted, b.predicted, a.truth)
    print(f"A: UAR {percent(a.uar)} %  WAR {percent(a.war)} %")
    print(f"B: UAR {percent(b.uar)} %  WAR {percent(b.war)} %")
    print(f"z={test.z:.4f} p={test.p:.4g} {test.verdict}")
    return 0


def _write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    span = img.max() - img.min()
    pixels = np.zeros(img.shape, np.uint8) if span <= 0 else np.round(255 * (img - img.min()) / span).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def cmd_attention(args) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    if not ckpt.model_config.has_attention:
        raise UsageError(f"checkpoint head {ckpt.model_config.head!r} has no attention map")
    spec = log_mel(load_wav(args.wav), _checkpoint_features(ckpt))
    model = ckpt.build_model()
    maps = model.attention(ckpt.norm(spec.values))
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    att_csv = Path(f"{prefix}_attention.csv")
    grids = [m.reshape(m.shape[0], -1) for m in maps]  # RNN vectors become T×1
    with open(att_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *(f"p{r}_{c}" for r, c in np.ndindex(grids[0].shape))])
        for lab, grid in zip(LABELS, grids):
            w.writerow([lab, *(repr(float(v)) for v in grid.ravel())])
    written = [att_csv]
    for lab, grid in zip(LABELS, grids):
        # time runs left to right, low frequencies at the bottom
        image = grid.T[::-1]
        path = Path(f"{prefix}_attention_{lab}.pgm")
        _write_pgm(path, image)
        written.append(path)
    mel_csv = Path(f"{prefix}_logmel.csv")
    np.savetxt(mel_csv, spec.values, delimiter=",", fmt="%.6g")
    written.append(mel_csv)
    shape = "x".join(str(s) for s in maps.shape[1:])
    print(f"{len(LABELS)} attention maps of {shape}; sums " + " ".join(f"{m.sum():.6f}" for m in maps))
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hss", description="Heart sound severity classification with attention pooling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("featurize", help="cache log-Mel spectrograms for every manifest record")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out-dir", help=f"cache directory (default ${CACHE_ENV})")
    f.add_argument("--force", action="store_true", help="rewrite existing cache entries")
    f.add_argument("--frames", type=_frames, default=936, help="pad/truncate to this many frames ('none' keeps all)")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train one topology/head configuration")
    t.add_argument("--manifest", required=True)
    t.add_argument("--features", help=f"feature cache (default ${CACHE_ENV}; computed from audio if unset)")
    t.add_argument("--topology", choices=("cnn", "lstm", "gru"), required=True)
    t.add_argument("--head", choices=HEAD_CHOICES, required=True,
                   help="for lstm/gru, 'flatten' means the last time stamp")
    t.add_argument("--upsample", action="store_true", help="balance classes by random upsampling")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path; the loss trace goes next to it")
    t.add_argument("--iterations", type=int, default=3000)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--channels", type=_ints, help="CNN block widths, e.g. 64,128,256,256")
    t.add_argument("--hidden", type=_ints, help="recurrent layer sizes, e.g. 256,1024,256")
    t.add_argument("--frames", type=_frames, default=936, help="frames when computing features from audio")
    t.add_argument("--no-standardize", action="store_true", help="skip per-bin z-normalisation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "dev", "test"), required=True)
    e.add_argument("--report-dir", required=True)
    e.add_argument("--features")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="classify WAV files")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--wav", required=True, nargs="+")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("compare", help="one-tailed z-test of checkpoint A against B")
    c.add_argument("--checkpoint-a", required=True)
    c.add_argument("--checkpoint-b", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--split", choices=("train", "dev", "test"), required=True)
    c.add_argument("--features")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("attention", help="export attention maps for one recording")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--wav", required=True)
    a.add_argument("--out-prefix", required=True)
    a.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except HssError as exc:
        print(f"error[{exc.category}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, UsageError) else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
