"""Write data/green_list_vectors.json: reference green lists computed with plain
Python integers (no numpy), for checking other implementations of the hash.

    python3 scripts/make_green_vectors.py [--out data/green_list_vectors.json]
"""

import argparse
import json
from pathlib import Path

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    x &= MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def green_list(key: int, context: list[int], vocab_size: int, gamma: float) -> list[int]:
    h = mix64(key)
    for tok in context:
        h = mix64(h ^ (((tok + 1) * GOLDEN) & MASK))
    scores = [(mix64(h + (v + 1) * GOLDEN), v) for v in range(vocab_size)]
    n_green = int(gamma * vocab_size // 1)
    return sorted(v for _, v in sorted(scores)[:n_green])


CASES = [
    (15213, [0, 0], 31, 0.25),
    (15213, [5, 17], 31, 0.25),
    (15213, [30, 1], 31, 0.25),
    (15213, [12], 31, 0.5),
    (0, [1, 2, 3], 31, 0.25),
    (2 ** 64 - 1, [7, 7], 64, 0.25),
    (42, [3, 9], 64, 0.1),
    (123456789, [0, 1], 100, 0.3),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "green_list_vectors.json")
    args = ap.parse_args()
    vectors = [{"key": str(key), "context": ctx, "vocab_size": v, "gamma": g,
                "green": green_list(key, ctx, v, g)} for key, ctx, v, g in CASES]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"hash": "splitmix64-chain", "vectors": vectors}, indent=1) + "\n")
    print(f"{len(vectors)} vectors written to {args.out}")


if __name__ == "__main__":
    main()
