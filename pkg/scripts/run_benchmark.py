"""Train the benchmark variants on the seeded synthetic world and write the
scores and claim checks as JSON.

    python3 scripts/run_benchmark.py --out results/benchmark_seed0.json
    python3 scripts/run_benchmark.py --epochs 5 --variants transunet_hybrid,transunet_direct --out /tmp/quick.json
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from gridfuse import benchmark, synth


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0, help="benchmark seed (synthetic world and model seeds)")
    p.add_argument("--variants", default=",".join(benchmark.DEFAULT_VARIANTS),
                   help=f"comma-separated subset of {', '.join(benchmark.VARIANTS)}")
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    variants = tuple(v for v in args.variants.split(",") if v)
    unknown = [v for v in variants if v not in benchmark.VARIANTS]
    if unknown:
        p.error(f"unknown variants: {', '.join(unknown)}")
    cfg = replace(benchmark.BenchmarkConfig(), epochs=args.epochs, variants=variants, seed=args.seed,
                  synth=synth.SynthConfig(seed=args.seed))
    result = benchmark.run(cfg, log=lambda s: print(s, flush=True))
    result["claims"] = benchmark.check(result)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(benchmark.dumps(result) + "\n", encoding="utf-8")
    for name, ok in result["claims"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"total {result['seconds']:.0f}s -> {out}")
    return 0 if all(result["claims"].values()) else 1


if __name__ == "__main__":
    sys.exit(main())
