import argparse
import sys
from pathlib import Path

from .extract import POOL_CHOICES, ExtractionJob, extract
from .models import ExtractError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ood-extract",
        description=(
            "Run an image classifier over a class-per-subfolder dataset and "
            "dump penultimate features, logits, labels, and the linear head."
        ),
    )
    parser.add_argument(
        "--model", required=True,
        help="torchvision model name, or a path to a torch.save()d module",
    )
    parser.add_argument("--data", required=True, type=Path,
                        help="dataset root with one subfolder per class")
    parser.add_argument("--out", required=True, type=Path,
                        help="output prefix; writes <out>.eds, <out>.head, "
                             "<out>.classes.txt, <out>.skipped.txt")
    parser.add_argument("--crop", type=int, default=224)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--weights", default=None,
                        help="state-dict path, or 'default' for the "
                             "pretrained torchvision weights")
    parser.add_argument("--pool", choices=POOL_CHOICES, default="auto",
                        help="token pooling for transformer backbones")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExtractionJob(
            model=args.model,
            data_root=args.data,
            out_prefix=args.out,
            weights=args.weights,
            crop=args.crop,
            batch_size=args.batch,
            device=args.device,
            pool=args.pool,
            threads=args.threads,
        )
        result = extract(job)
    except (ExtractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{result.eds_path}  ({result.n_rows} rows, "
          f"{len(result.classes)} classes)")
    print(result.head_path)
    print(result.classes_path)
    if result.skipped:
        print(f"skipped {len(result.skipped)} undecodable files, "
              f"see {result.skips_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
