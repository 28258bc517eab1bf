"""Write a synthetic band-limited-tone corpus (WAVs plus manifest.csv)."""

import argparse

from hsattn.synthetic import make_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--train", type=int, default=4, help="clips per class in train")
    p.add_argument("--dev", type=int, default=2)
    p.add_argument("--test", type=int, default=2)
    p.add_argument("--duration", type=float, default=1.0, help="seconds per clip")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    path = make_corpus(args.out_dir, {"train": args.train, "dev": args.dev, "test": args.test},
                       duration=args.duration, seed=args.seed)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
