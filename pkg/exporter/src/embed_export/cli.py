"""Command-line entry point: embed-export --input corpus.txt --encoder ID --out f.bin"""

import argparse
import sys

from .export import CorpusError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="embed-export",
        description="Encode a text corpus (one document per line, optional "
        "tab-separated integer label) into a binary embedding file.",
    )
    p.add_argument("--input", required=True, help="corpus file, one document per line")
    p.add_argument("--encoder", required=True, help="model identifier or local path")
    p.add_argument("--out", required=True, help="embedding output path")
    p.add_argument("--labels", help="label output path (required iff the corpus is labeled)")
    p.add_argument("--max-len", type=int, default=256, help="truncate documents to this many tokens")
    p.add_argument("--batch", type=int, default=8, help="documents per encoder batch")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            input_path=args.input,
            encoder=args.encoder,
            out_path=args.out,
            labels_path=args.labels,
            max_len=args.max_len,
            batch_size=args.batch,
        )
        result = export(job)
    except (CorpusError, OSError) as exc:
        print(f"embed-export: {exc}", file=sys.stderr)
        return 1
    msg = f"wrote {result.rows} x {result.dim} embeddings to {result.out_path}"
    if result.labels_path:
        msg += f", labels to {result.labels_path}"
    if result.skipped:
        msg += f" ({len(result.skipped)} empty documents skipped)"
    print(msg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
