"""Overfit a 12-clip synthetic corpus and report when train UAR reaches 100 %."""

import argparse
import tempfile
import time

from hsattn import autodiff as ad
from hsattn.audio import FeatureConfig
from hsattn.corpus import CorpusManifest
from hsattn.evaluation import uar
from hsattn.models import ModelConfig
from hsattn.synthetic import make_corpus
from hsattn.training import TrainConfig, load_split, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--topology", default="cnn", choices=("cnn", "lstm", "gru"))
    p.add_argument("--head", default="attention_sigmoid")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        manifest = CorpusManifest.load(make_corpus(tmp, 4, duration=1.0, seed=args.seed))
        fc = FeatureConfig(num_frames=None)
        _, x, y = load_split(manifest, "train", None, fc)
        mc = ModelConfig(args.topology, args.head, seed=args.seed, conv_channels=(16, 32),
                         hidden_sizes=(16, 16), input_frames=x.shape[1], mel_bins=x.shape[2])

        def stop(it, model, norm):
            if it % 25:
                return False
            with ad.no_grad():
                score = uar(y, model.forward(norm(x)).data.argmax(axis=1))
            print(f"iteration {it:5d}  train UAR {100 * score:5.1f} %")
            return score == 1.0

        start = time.perf_counter()
        result = train(TrainConfig(total_iterations=args.iterations, seed=args.seed), mc, manifest, None, fc, stop=stop)
        print(f"stopped at iteration {result.checkpoint.iteration} after {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
