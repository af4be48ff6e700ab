"""Write the bundled corpus, normalised, to a text file usable as ``corpus.path``.

    python3 scripts/export_corpus.py [--out data/corpus.txt]
"""

import argparse
from pathlib import Path

from fedprov.corpus import builtin_text
from fedprov.lm import normalize_text


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path("data/corpus.txt"))
    args = ap.parse_args()
    text = normalize_text(builtin_text())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text + "\n", encoding="utf-8")
    print(f"{len(text)} characters written to {args.out}")


if __name__ == "__main__":
    main()
