"""Command line entry point: ``flat compress|importance|plan|verify|random-model|calib``.

Exit codes: 0 success, 2 usage, 3 data/format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import verify
from .compress import block_sparsity, compress_model, realized_sparsity
from .errors import CheckpointError, FlatError, NumericalError
from .forward import MAX_RETAINED_ROWS, importance_scores, mean_cosine, run_calibration
from .iprs import RankPlan, make_plan
from .model import ModelConfig, load_checkpoint, random_model, read_tensor_dir, save_checkpoint, write_tensor_dir

log = logging.getLogger("flat")

SCHEMA_VERSION = 1
CALIB_FORMAT = "flat-calibration"


# -- calibration files ---------------------------------------------------------------


def write_calibration(path, batches) -> None:
    """Store M equally sized ``N x d_hid`` batches as one ``(M, N, d_hid)`` tensor."""
    arr = np.stack([np.asarray(b, dtype=np.float64) for b in batches])
    header = {"format": CALIB_FORMAT, "version": 1}
    write_tensor_dir(path, header, [("batches", None, arr)])


def read_calibration(path) -> list[np.ndarray]:
    manifest, tensors = read_tensor_dir(path)
    if manifest.get("format") != CALIB_FORMAT or "batches" not in tensors:
        raise CheckpointError(f"{path} is not a calibration file")
    arr = tensors["batches"]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise CheckpointError(f"calibration tensor must be (M, N, d_hid), got {arr.shape}")
    return list(arr)


def parse_synthetic(spec: str, default_seed: int) -> dict:
    opts = {"seed": default_seed, "batches": 4, "tokens": 64}
    for part in filter(None, spec.split(",")):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in opts or not value:
            raise ValueError(f"bad --calib-synthetic entry {part!r}")
        opts[key] = int(value)
    if opts["batches"] < 1 or opts["tokens"] < 1:
        raise ValueError("--calib-synthetic needs batches>=1 and tokens>=1")
    return opts


def load_batches(args, config: ModelConfig) -> list[np.ndarray]:
    if args.calib:
        batches = read_calibration(args.calib)
    else:
        opts = parse_synthetic(args.calib_synthetic or "", args.seed)
        batches = verify.synthetic_batches(opts["seed"], opts["batches"], opts["tokens"], config.d_hid)
    if batches[0].shape[1] != config.d_hid:
        raise CheckpointError(f"calibration width {batches[0].shape[1]} != d_hid {config.d_hid}")
    return batches


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _scores_doc(capture, config: ModelConfig, source: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "importance",
        "source": source,
        "cosine": [mean_cosine(a, b) for a, b in zip(capture.x_in, capture.x_out)],
        "t": importance_scores(capture).tolist(),
        "n_tokens": capture.n_tokens,
        "config": config.to_dict(),
    }


def _threads(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


# -- subcommands -------------------------------------------------------------------------


def cmd_random_model(args) -> int:
    config = ModelConfig(args.d_hid, args.d_head, args.n_q_heads, args.n_kv_heads,
                         args.d_int, args.n_layers, args.norm_eps)
    if args.branch_scales:
        scales = [float(x) for x in args.branch_scales.split(",")]
        layers = verify.engineered_model(config, args.seed, scales)
    else:
        layers = random_model(config, args.seed)
    save_checkpoint(config, layers, args.out)
    print(f"wrote {config.n_layers}-layer model to {args.out}")
    return 0


def cmd_calib(args) -> int:
    write_calibration(args.out, verify.synthetic_batches(args.seed, args.batches, args.tokens, args.d_hid))
    print(f"wrote {args.batches} batches of {args.tokens}x{args.d_hid} to {args.out}")
    return 0


def cmd_importance(args) -> int:
    config, layers = load_checkpoint(args.model)
    batches = load_batches(args, config)
    cap = run_calibration(layers, batches, config, max_rows=args.max_rows, threads=_threads(args))
    doc = _scores_doc(cap, config, "original")
    _write_json(args.out, doc)
    print("t = " + " ".join(f"{x:.4f}" for x in doc["t"]))
    return 0


def cmd_plan(args) -> int:
    try:
        doc = json.loads(Path(args.scores).read_text())
        config = ModelConfig.from_dict(doc["config"])
        t = doc["t"]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot read scores file {args.scores}: {exc}") from exc
    plan = make_plan(t, args.sparsity, config, args.mode)
    Path(args.out).write_text(plan.to_json())
    print(f"w = {np.round(plan.w, 4).tolist()}  ranks_attn = {plan.ranks_attn.tolist()}")
    return 0


def compress_pipeline(args) -> dict:
    """Calibrate, score, plan, compress and report. Returns the written documents."""
    config, layers = load_checkpoint(args.model)
    batches = load_batches(args, config)
    threads = _threads(args)
    cap = run_calibration(layers, batches, config, value_source=args.value_source,
                          max_rows=args.max_rows, threads=threads)
    scores = _scores_doc(cap, config, "original")
    t = np.asarray(scores["t"])
    log.info("calibrated on %d batches (%d tokens)", cap.n_batches, cap.n_tokens)

    if args.plan:
        plan = RankPlan.from_dict(json.loads(Path(args.plan).read_text()))
    else:
        plan = make_plan(t, args.sparsity, config, args.mode)
        if args.importance_on_compressed:
            # re-score on the model compressed with the first plan, then re-plan
            first = compress_model(layers, cap, plan, config, qk=args.qk)
            cap2 = run_calibration(first, batches, config, max_rows=args.max_rows, threads=threads)
            scores = _scores_doc(cap2, config, "compressed")
            plan = make_plan(scores["t"], args.sparsity, config, args.mode)

    log.info("ranks_attn=%s ranks_mlp=%s", plan.ranks_attn.tolist(), plan.ranks_mlp.tolist())
    compressed = compress_model(layers, cap, plan, config, qk=args.qk)
    out = Path(args.out)
    save_checkpoint(config, compressed, out, dtype="f32" if args.f32 else "f64")

    if args.eval:
        x_eval = read_calibration(args.eval)[0]
    else:
        x_eval = verify.synthetic_batches(args.seed + 1, 1, batches[0].shape[0], config.d_hid)[0]
    extra = {
        "plan": plan.to_dict(),
        "target_sparsity": plan.s,
        "realized_sparsity": realized_sparsity(layers, compressed, include_qk=args.qk),
        "block_sparsity": block_sparsity(layers, compressed),
        "qk_compressed": bool(args.qk),
    }
    report = verify.end_to_end_report(layers, compressed, x_eval, config, extra).to_dict()
    _write_json(out / "scores.json", scores)
    (out / "plan.json").write_text(plan.to_json())
    _write_json(out / "report.json", report)
    return {"scores": scores, "plan": plan.to_dict(), "report": report}


def cmd_compress(args) -> int:
    if Path(args.out).resolve() == Path(args.model).resolve():
        raise _Usage("--out must differ from --model")
    docs = compress_pipeline(args)
    rep = docs["report"]
    print(f"ranks_attn = {docs['plan']['ranks_attn']}  ranks_mlp = {docs['plan']['ranks_mlp']}")
    print(f"realized sparsity {rep['extra']['realized_sparsity']:.4f} (target {args.sparsity})")
    print(f"output relative error {rep['output_error']:.3e}")
    return 0


def cmd_verify(args) -> int:
    fn = verify.SUITES[args.suite]
    result = fn(args.seed) if args.trials is None else fn(args.seed, args.trials)
    result["schema_version"] = SCHEMA_VERSION
    if args.json:
        _write_json(args.json, result)
    print(f"{args.suite}: {'PASS' if result['passed'] else 'FAIL'}")
    return 0 if result["passed"] else NumericalError.exit_code


# -- argument parsing -----------------------------------------------------------------------


class _Usage(Exception):
    pass


def _sparsity(text: str) -> float:
    try:
        s = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 <= s < 1:
        raise argparse.ArgumentTypeError(f"sparsity must lie in [0, 1), got {s}")
    return s


def _add_calib(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--calib", help="calibration tensor directory")
    g.add_argument("--calib-synthetic", metavar="SPEC",
                   help="Gaussian calibration data, e.g. seed=0,batches=4,tokens=64 (default batches=4,tokens=64)")
    p.add_argument("--max-rows", type=int, default=MAX_RETAINED_ROWS,
                   help="hidden-state rows kept per layer for importance scoring (default %(default)s)")
    p.add_argument("--threads", type=int, default=1, help="calibration worker threads (default %(default)s)")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded accumulation")


def build_parser() -> argparse.ArgumentParser:
    default_seed = int(os.environ.get("FLAT_SEED", "0"))
    parser = argparse.ArgumentParser(prog="flat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("random-model", help="write a seeded toy model checkpoint")
    p.add_argument("--d-hid", type=int, default=64)
    p.add_argument("--d-head", type=int, default=16)
    p.add_argument("--n-q-heads", type=int, default=4)
    p.add_argument("--n-kv-heads", type=int, default=2)
    p.add_argument("--d-int", type=int, default=128)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--norm-eps", type=float, default=1e-6)
    p.add_argument("--branch-scales", help="comma-separated residual-branch scale per layer")
    p.add_argument("--seed", type=int, default=default_seed, help="default: $FLAT_SEED or 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_random_model)

    p = sub.add_parser("calib", help="write a synthetic calibration file")
    p.add_argument("--d-hid", type=int, required=True)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=default_seed, help="default: $FLAT_SEED or 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calib)

    p = sub.add_parser("importance", help="decoder importance scores")
    p.add_argument("--model", required=True)
    _add_calib(p)
    p.add_argument("--seed", type=int, default=default_seed, help="default: $FLAT_SEED or 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("plan", help="per-decoder rank plan from importance scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--sparsity", type=_sparsity, required=True)
    p.add_argument("--mode", choices=("iprs", "uniform"), default="iprs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compress", help="run the full compression pipeline")
    p.add_argument("--model", required=True)
    _add_calib(p)
    p.add_argument("--sparsity", type=_sparsity, required=True)
    p.add_argument("--mode", choices=("iprs", "uniform"), default="iprs")
    p.add_argument("--plan", help="use this plan.json instead of planning")
    p.add_argument("--qk", action="store_true", help="also compress query/key heads")
    p.add_argument("--value-source", choices=("value", "attention"), default="value",
                   help="activations behind the value covariance (default %(default)s)")
    p.add_argument("--importance-on-compressed", action="store_true",
                   help="re-score importance on a first-pass compressed model")
    p.add_argument("--eval", help="held-out batch file for the report (default: synthetic)")
    p.add_argument("--f32", action="store_true", help="store tensors as float32 (lossy)")
    p.add_argument("--seed", type=int, default=default_seed, help="default: $FLAT_SEED or 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="numerical self-checks")
    p.add_argument("--suite", choices=sorted(verify.SUITES), default="theorems")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, default=default_seed, help="default: $FLAT_SEED or 0")
    p.add_argument("--json", help="write the suite result here")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except ValueError:
        print("flat: FLAT_SEED must be an integer", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.error(str(exc))
    except FlatError as exc:
        print(f"flat: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"flat: error: {exc}", file=sys.stderr)
        return CheckpointError.exit_code


if __name__ == "__main__":
    sys.exit(main())
