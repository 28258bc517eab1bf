"""Train all 24 topology × head × upsampling runs and write the results table.

With the real corpus and default sizes this is the full experiment (3000
iterations per run, many CPU hours). ``--iterations``, ``--channels``,
``--hidden`` and ``--frames`` shrink it for smoke runs.
"""

import argparse

from hsattn.audio import FeatureConfig
from hsattn.corpus import CorpusManifest, load_features
from hsattn.experiments import run_grid, write_grid_csv
from hsattn.models import ModelConfig
from hsattn.training import TrainConfig


def ints(text):
    return tuple(int(v) for v in text.split(","))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="LMEL cache directory (computed from audio if omitted)")
    p.add_argument("--out", default="grid.csv")
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=ints, default=(64, 128, 256, 256))
    p.add_argument("--hidden", type=ints, default=(256, 1024, 256))
    p.add_argument("--frames", type=int, default=936)
    args = p.parse_args()

    manifest = CorpusManifest.load(args.manifest)
    probe = load_features(manifest.split("train")[0], args.features, FeatureConfig(num_frames=args.frames))
    fc = FeatureConfig(num_frames=probe.shape[0], mel_bins=probe.shape[1])
    base = ModelConfig(seed=args.seed, conv_channels=args.channels, hidden_sizes=args.hidden,
                       input_frames=probe.shape[0], mel_bins=probe.shape[1])
    cells = run_grid(manifest, base, TrainConfig(total_iterations=args.iterations, seed=args.seed),
                     args.features, fc)
    write_grid_csv(args.out, cells)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
