"""Command-line entry point: ``compactlab <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 oracle mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import statistics
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

from .compaction import JobConfig, run
from .errors import CompactLabError
from .oracle import encode_stream, oracle_records, table_stream
from .sstable import dump_json, open_sstable
from .sstmap import build_sstmap
from .workload import WorkloadSpec, generate_inputs, manifest, records_for_blocks

SEED_ENV = "RESYSTANCE_SEED"
ORACLE_LIMIT_BYTES = 64 << 20

_SIZE = re.compile(r"^\s*(\d+)\s*([kmg]?)(i?b)?\s*$", re.IGNORECASE)


def parse_size(text: str) -> int:
    """``'4096'``, ``'64K'``, ``'16MiB'`` -> bytes (binary multiples)."""
    m = _SIZE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}")
    mult = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}[m.group(2).lower()]
    return int(m.group(1)) * mult


def fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}") from None


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


@dataclass
class BenchResultRow:
    engine: str
    merge_algo: str
    n_inputs: int
    value_len: int
    wall_ms: float
    read_crossings: int
    write_crossings: int
    comparisons: int
    records_merged: int
    output_sha256: str


BENCH_MERGE_FIELDS = list(BenchResultRow.__dataclass_fields__)
BENCH_CROSSINGS_FIELDS = [
    "n_inputs",
    "blocks_per_input",
    "key_len",
    "value_len",
    "threshold",
    "baseline_read_crossings",
    "offload_read_crossings",
    "reduction",
    "baseline_write_crossings",
    "offload_write_crossings",
    "baseline_wall_ms",
    "offload_wall_ms",
    "normalized_wall",
    "outputs_identical",
]


def _write_csv(rows: list[dict], fields: list[str], path: str | None) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if path:
        with open(path, "w", newline="") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


# gen


def cmd_gen(args) -> int:
    if args.spec:
        with open(args.spec) as f:
            spec = WorkloadSpec.from_json(f.read())
    else:
        spec = WorkloadSpec(
            n_inputs=args.inputs,
            records_per_input=args.records,
            key_len=args.key_len,
            value_len=args.value_len,
            duplicate_fraction=args.dup,
            tombstone_fraction=args.tombstones,
            seed=args.seed,
            distribution=args.distribution,
            zipf_theta=args.theta,
            block_size=args.block_size,
        )
    metas = generate_inputs(spec, args.out_dir)
    print(json.dumps({"spec": asdict(spec), "files": manifest(metas)}, indent=2))
    return 0


# compact


def _job_config(args, inputs, output_dir) -> JobConfig:
    return JobConfig(
        inputs=inputs,
        output_dir=output_dir,
        block_size=args.block_size,
        write_buffer_threshold=args.threshold,
        target_sst_size=args.target_sst_size,
        merge_algo=args.merge,
        algo_threshold=args.algo_threshold,
        drop_tombstones=args.drop_tombstones,
        per_crossing_delay_us=args.crossing_cost_us,
        queue_depth=args.queue_depth,
        prefetch_depth=args.prefetch_depth,
        write_flush_bytes=args.write_flush_bytes or args.block_size * 256,
    )


def cmd_compact(args) -> int:
    cfg = _job_config(args, args.inputs, args.out_dir)
    if args.verify_oracle:
        total = sum(os.path.getsize(p) for p in cfg.inputs)
        if total > args.oracle_limit:
            print(f"error: --verify-oracle refuses {total} input bytes (limit {args.oracle_limit})", file=sys.stderr)
            return 1
    report, backend = run(cfg, args.engine, keep_backend=True)
    doc = json.loads(report.to_json())
    if args.read_log:
        with open(args.read_log, "w") as f:
            f.write(backend.read_log_jsonl())
    status = 0
    if args.verify_oracle:
        metas = [open_sstable(p) for p in cfg.inputs]
        expected = encode_stream(oracle_records(metas, cfg.drop_tombstones))
        got = table_stream([open_sstable(p) for p in report.output_files])
        doc["oracle_match"] = expected == got
        if not doc["oracle_match"]:
            status = 3
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    if status == 3:
        print("error: compaction output differs from the brute-force oracle", file=sys.stderr)
    return status


# bench-merge


def _bench_merge_cell(task) -> list[dict]:
    n, vlen, records, reps, seed, block_size, work_dir = task
    cell_dir = os.path.join(work_dir, f"n{n}_v{vlen}")
    spec = WorkloadSpec(n_inputs=n, records_per_input=records, value_len=vlen, seed=seed + n, block_size=block_size)
    metas = generate_inputs(spec, os.path.join(cell_dir, "in"))
    rows = []
    for algo in ("linear", "minheap"):
        walls = []
        rep = None
        for r in range(reps):
            cfg = JobConfig(
                inputs=[m.path for m in metas],
                output_dir=os.path.join(cell_dir, f"out_{algo}_{r}"),
                block_size=block_size,
                merge_algo=algo,
            )
            rep = run(cfg, "offload")
            walls.append(rep.wall_ms)
        rows.append(
            asdict(
                BenchResultRow(
                    engine="offload",
                    merge_algo=algo,
                    n_inputs=n,
                    value_len=vlen,
                    wall_ms=round(statistics.median(walls), 3),
                    read_crossings=rep.stats["read_crossings"],
                    write_crossings=rep.stats["write_crossings"],
                    comparisons=rep.comparisons,
                    records_merged=rep.records_merged,
                    output_sha256=rep.output_sha256,
                )
            )
        )
    return rows


def crossover(rows: list[dict]) -> dict[int, int | None]:
    """Per value length, the first n where minheap's median wall time beats linear's."""
    out: dict[int, int | None] = {}
    by_cell = {(r["value_len"], r["n_inputs"], r["merge_algo"]): float(r["wall_ms"]) for r in rows}
    for vlen in sorted({r["value_len"] for r in rows}):
        ns = sorted({r["n_inputs"] for r in rows if r["value_len"] == vlen})
        out[vlen] = next((n for n in ns if by_cell[(vlen, n, "minheap")] < by_cell[(vlen, n, "linear")]), None)
    return out


def bench_merge(n_values, value_lens, records, reps, seed, block_size, work_dir, jobs=1) -> list[dict]:
    tasks = [(n, v, records, reps, seed, block_size, work_dir) for v in value_lens for n in n_values]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_bench_merge_cell, tasks))
    else:
        results = [_bench_merge_cell(t) for t in tasks]
    return [row for cell in results for row in cell]


def _with_work_dir(args, fn):
    if args.work_dir:
        os.makedirs(args.work_dir, exist_ok=True)
        return fn(args.work_dir)
    with tempfile.TemporaryDirectory(prefix="compactlab-") as d:
        return fn(d)


def cmd_bench_merge(args) -> int:
    n_values = list(range(args.n_min, args.n_max + 1))
    rows = _with_work_dir(
        args,
        lambda d: bench_merge(n_values, args.value_lens, args.records, args.reps, args.seed, args.block_size, d, args.jobs),
    )
    _write_csv(rows, BENCH_MERGE_FIELDS, args.out)
    mismatched = []
    for v in args.value_lens:
        for n in n_values:
            hashes = {r["output_sha256"] for r in rows if r["value_len"] == v and r["n_inputs"] == n}
            if len(hashes) != 1:
                mismatched.append((n, v))
    summary = {"crossover_n": {str(k): v for k, v in crossover(rows).items()}, "mismatched_cells": mismatched}
    print(json.dumps(summary), file=sys.stdout if args.out else sys.stderr)
    if mismatched:
        print(f"error: linear and minheap outputs differ in cells {mismatched}", file=sys.stderr)
        return 1
    return 0


# bench-crossings


def _bench_crossings_cell(task) -> dict:
    n, blocks, key_len, vlen, threshold, block_size, delay_us, seed, work_dir = task
    cell_dir = os.path.join(work_dir, f"n{n}_b{blocks}_k{key_len}_v{vlen}")
    spec = WorkloadSpec(
        n_inputs=n,
        records_per_input=records_for_blocks(blocks, key_len, vlen, block_size),
        key_len=key_len,
        value_len=vlen,
        seed=seed,
        block_size=block_size,
    )
    metas = generate_inputs(spec, os.path.join(cell_dir, "in"))
    reps = {}
    for engine in ("baseline", "offload"):
        cfg = JobConfig(
            inputs=[m.path for m in metas],
            output_dir=os.path.join(cell_dir, engine),
            block_size=block_size,
            write_buffer_threshold=threshold,
            per_crossing_delay_us=delay_us,
        )
        reps[engine] = run(cfg, engine)
    b, o = reps["baseline"], reps["offload"]
    return {
        "n_inputs": n,
        "blocks_per_input": blocks,
        "key_len": key_len,
        "value_len": vlen,
        "threshold": threshold,
        "baseline_read_crossings": b.stats["read_crossings"],
        "offload_read_crossings": o.stats["read_crossings"],
        "reduction": round(1 - o.stats["read_crossings"] / b.stats["read_crossings"], 6),
        "baseline_write_crossings": b.stats["write_crossings"],
        "offload_write_crossings": o.stats["write_crossings"],
        "baseline_wall_ms": round(b.wall_ms, 3),
        "offload_wall_ms": round(o.wall_ms, 3),
        "normalized_wall": round(o.wall_ms / b.wall_ms, 4),
        "outputs_identical": b.output_sha256 == o.output_sha256,
    }


def bench_crossings(blocks_list, key_lens, value_lens, n_inputs, threshold, block_size, delay_us, seed, work_dir, jobs=1):
    tasks = [
        (n, blocks, k, v, threshold, block_size, delay_us, seed, work_dir)
        for n in n_inputs
        for blocks in blocks_list
        for k in key_lens
        for v in value_lens
    ]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_bench_crossings_cell, tasks))
    return [_bench_crossings_cell(t) for t in tasks]


def cmd_bench_crossings(args) -> int:
    blocks = args.blocks or ([16384] if args.paper_scale else [4096])
    threshold = args.threshold or ((16 << 20) if args.paper_scale else (2 << 20))
    rows = _with_work_dir(
        args,
        lambda d: bench_crossings(
            blocks, args.key_lens, args.value_lens, args.n_inputs, threshold, args.block_size,
            args.crossing_cost_us, args.seed, d, args.jobs,
        ),
    )
    _write_csv(rows, BENCH_CROSSINGS_FIELDS, args.out)
    if not all(r["outputs_identical"] for r in rows):
        print("error: baseline and offload outputs differ", file=sys.stderr)
        return 1
    return 0


# sstdump / sstmap


def cmd_sstdump(args) -> int:
    print(json.dumps(dump_json(open_sstable(args.path), with_records=not args.no_records), indent=2))
    return 0


def cmd_sstmap_dump(args) -> int:
    m = build_sstmap([open_sstable(p) for p in args.inputs])
    print(json.dumps(m.to_json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compactlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate sorted input tables")
    g.add_argument("--inputs", type=int, default=4)
    g.add_argument("--records", type=int, default=1000, help="records per input")
    g.add_argument("--key-len", type=int, default=16)
    g.add_argument("--value-len", type=int, default=1024)
    g.add_argument("--dup", type=fraction, default=0.0, help="duplicate fraction in [0, 1]")
    g.add_argument("--tombstones", type=fraction, default=0.0, help="tombstone fraction in [0, 1]")
    g.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")
    g.add_argument("--distribution", choices=("uniform", "zipfian"), default="uniform")
    g.add_argument("--theta", type=float, default=0.99)
    g.add_argument("--block-size", type=parse_size, default=4096)
    g.add_argument("--spec", help="WorkloadSpec JSON file (overrides the flags)")
    g.add_argument("--out-dir", default="inputs")
    g.set_defaults(func=cmd_gen)

    def job_flags(sp):
        sp.add_argument("--block-size", type=parse_size, default=4096)
        sp.add_argument("--threshold", type=parse_size, default=16 << 20, help="write buffer threshold T")
        sp.add_argument("--target-sst-size", type=parse_size, default=64 << 20)
        sp.add_argument("--merge", choices=("linear", "minheap", "auto"), default="auto")
        sp.add_argument("--algo-threshold", type=int, default=6)
        sp.add_argument("--drop-tombstones", action="store_true")
        sp.add_argument("--crossing-cost-us", type=float, default=0.0)
        sp.add_argument("--queue-depth", type=int, default=256)
        sp.add_argument("--prefetch-depth", type=int, default=1)
        sp.add_argument("--write-flush-bytes", type=parse_size, default=None,
                        help="bytes per accounted write (default 256 blocks)")

    c = sub.add_parser("compact", help="run one compaction job")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--engine", choices=("baseline", "offload"), default="offload")
    c.add_argument("--out-dir", default="compacted")
    c.add_argument("--out", help="write the report JSON here instead of stdout")
    c.add_argument("--read-log", help="write the block read log as JSONL")
    c.add_argument("--verify-oracle", action="store_true")
    c.add_argument("--oracle-limit", type=parse_size, default=ORACLE_LIMIT_BYTES)
    job_flags(c)
    c.set_defaults(func=cmd_compact)

    bm = sub.add_parser("bench-merge", help="sweep input counts for both merge engines")
    bm.add_argument("--n-min", type=int, default=2)
    bm.add_argument("--n-max", type=int, default=16)
    bm.add_argument("--value-lens", type=int_list, default=[128, 1024])
    bm.add_argument("--records", type=int, default=1000, help="records per input")
    bm.add_argument("--reps", type=int, default=3)
    bm.add_argument("--block-size", type=parse_size, default=4096)
    bm.add_argument("--seed", type=int, default=None)
    bm.add_argument("--work-dir")
    bm.add_argument("--jobs", type=int, default=1)
    bm.add_argument("--out", help="CSV path (default stdout)")
    bm.set_defaults(func=cmd_bench_merge)

    bc = sub.add_parser("bench-crossings", help="paired baseline/offload crossing counts")
    bc.add_argument("--n-inputs", type=int_list, default=[4])
    bc.add_argument("--blocks", type=int_list, default=None, help="blocks per input (default 4096)")
    bc.add_argument("--key-lens", type=int_list, default=[16])
    bc.add_argument("--value-lens", type=int_list, default=[1024])
    bc.add_argument("--threshold", type=parse_size, default=None, help="T (default 2MiB, 16MiB with --paper-scale)")
    bc.add_argument("--block-size", type=parse_size, default=4096)
    bc.add_argument("--crossing-cost-us", type=float, default=0.0)
    bc.add_argument("--paper-scale", action="store_true", help="64 MiB inputs, T = 16 MiB")
    bc.add_argument("--seed", type=int, default=None)
    bc.add_argument("--work-dir")
    bc.add_argument("--jobs", type=int, default=1)
    bc.add_argument("--out", help="CSV path (default stdout)")
    bc.set_defaults(func=cmd_bench_crossings)

    d = sub.add_parser("sstdump", help="print a table's footer, index and records as JSON")
    d.add_argument("path")
    d.add_argument("--no-records", action="store_true")
    d.set_defaults(func=cmd_sstdump)

    sm = sub.add_parser("sstmap", help="SST-Map tools")
    smsub = sm.add_subparsers(dest="sstmap_command", required=True)
    smd = smsub.add_parser("dump", help="print the block plan for a set of inputs")
    smd.add_argument("inputs", nargs="+")
    smd.set_defaults(func=cmd_sstmap_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None:
        try:
            args.seed = default_seed()
        except ValueError:
            parser.error(f"${SEED_ENV} must be an integer")
    try:
        return args.func(args)
    except ValueError as exc:
        if args.command == "gen":
            parser.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CompactLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
