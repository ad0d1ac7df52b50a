"""Batch experiment runner: optimize ansatze, extract spectra, sweep models.

Subcommands
-----------
optimize   minimize one model, write checkpoint + trace CSV + summary JSON
spectrum   eigenvalue moduli and exponent report for a saved checkpoint
sweep      optimize + spectrum across a list of xxz anisotropies
oracle     exact reference data (energies, exponents) as JSON
gradcheck  finite-difference validation of the analytic gradient

Exit codes: 0 success, 1 usage or IO failure, 2 optimizer abort,
3 validation failure.  Config files are flat ``key = value`` lines with
flag names (dashes or underscores); precedence is flags > file > defaults.
All outputs are deterministic for a fixed seed: CSV floats carry 14
significant digits, JSON is key-sorted, and no timestamps are recorded.
The QUMERA_THREADS environment variable caps sweep parallelism.
"""

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import channel as ch
from . import models as md
from . import optimize as op
from . import spectra as sp

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORT = 2
EXIT_VALIDATION = 3


class UsageError(Exception):
    pass


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.14e}"
    return str(x)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _read_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _merge_options(defaults, types, args):
    """flags > config file > defaults; config values parsed per `types`."""
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        if not Path(cfg_path).is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        for key, val in _read_config_file(cfg_path).items():
            if key not in merged:
                raise UsageError(f"unknown config key {key!r}")
            merged[key] = types[key](val)
    for key in merged:
        given = getattr(args, key, None)
        if given is not None:
            merged[key] = given
    return argparse.Namespace(**merged)


def _optimizer_config(ns):
    return op.OptimizerConfig(
        epsilon_start=ns.eps_start, epsilon_min=ns.eps_min,
        epsilon_decay=ns.eps_decay, sweeps=ns.sweeps,
        moves_per_tensor=ns.moves_per_tensor, fp_tol=ns.fp_tol,
        seed=ns.seed)


_OPT_DEFAULTS = {
    "model": "ising", "m": 4, "seed": 0, "sweeps": 400,
    "moves_per_tensor": 6, "eps_start": 0.1, "eps_min": 1e-5,
    "eps_decay": 0.5, "fp_tol": 1e-8, "out_dir": "qumera_run",
    "checkpoint_every": 0, "init": "",
}
_OPT_TYPES = {
    "model": str, "m": int, "seed": int, "sweeps": int,
    "moves_per_tensor": int, "eps_start": float, "eps_min": float,
    "eps_decay": float, "fp_tol": float, "out_dir": str,
    "checkpoint_every": int, "init": str,
}


def _add_optimizer_flags(p, with_model_m=True):
    if with_model_m:
        p.add_argument("--model", help="'ising' or 'xxz:<delta>'")
        p.add_argument("--m", type=int, help="bond dimension, a power of 2")
    p.add_argument("--seed", type=int)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--moves-per-tensor", type=int, dest="moves_per_tensor")
    p.add_argument("--eps-start", type=float, dest="eps_start")
    p.add_argument("--eps-min", type=float, dest="eps_min")
    p.add_argument("--eps-decay", type=float, dest="eps_decay")
    p.add_argument("--fp-tol", type=float, dest="fp_tol")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--config")


def _blocking_for(m):
    b = int(round(np.log2(m)))
    if 2 ** b != m or b < 1:
        raise UsageError(f"m={m} is not a power of 2 (m = 2^blocking)")
    if b > 2:
        raise UsageError(f"m={m} needs blocking {b}, beyond the supported 1, 2")
    return b


def _run_one_optimization(preset, m, ns, out_dir, seed):
    b = _blocking_for(m)
    h = md.build_local_h(preset.params, b)
    cfg = op.OptimizerConfig(
        epsilon_start=ns.eps_start, epsilon_min=ns.eps_min,
        epsilon_decay=ns.eps_decay, sweeps=ns.sweeps,
        moves_per_tensor=ns.moves_per_tensor, fp_tol=ns.fp_tol, seed=seed)
    init = None
    if getattr(ns, "init", ""):
        init, _ = ch.load_ansatz(ns.init)
    hooks = None
    every = getattr(ns, "checkpoint_every", 0)
    if every:
        def hooks(state):
            if state.sweeps_run % every == 0:
                ch.save_ansatz(out_dir / "checkpoint.mera", state.ansatz,
                               seed=seed, iterations=state.sweeps_run)
    state = op.optimize(h, cfg, init=init, on_sweep=hooks)
    ref = md.reference_energy(preset)
    ch.save_ansatz(out_dir / "ansatz.mera", state.ansatz, seed=seed,
                   iterations=state.sweeps_run)
    _write_csv(out_dir / "trace.csv",
               ["sweep", "epsilon", "energy", "residual", "accepted_target"],
               [(t.sweep, t.epsilon, t.energy, t.residual, t.accepted_target)
                for t in state.trace])
    summary = {
        "model": preset.label, "m": m, "b": b, "seed": seed,
        "sweeps_run": state.sweeps_run, "accepted_moves": state.accepted_moves,
        "energy_per_spin": state.energy, "block_energy": state.block_energy,
        "residual": state.residual, "epsilon_final": state.epsilon_final,
        "reference_energy": ref.value, "reference_uncertainty": ref.uncertainty,
        "reference_provenance": ref.provenance,
        "delta_e": state.energy - ref.value,
    }
    _write_json(out_dir / "summary.json", summary)
    return state, summary


def cmd_optimize(args):
    ns = _merge_options(_OPT_DEFAULTS, _OPT_TYPES, args)
    preset = md.parse_preset(ns.model)
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        _, summary = _run_one_optimization(preset, ns.m, ns, out_dir, ns.seed)
    except op.OptimizerAbort as exc:
        print(f"optimizer abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"energy per spin {summary['energy_per_spin']:.8f} "
          f"(reference {summary['reference_energy']:.8f}, "
          f"delta {summary['delta_e']:+.2e})")
    return EXIT_OK


_SPEC_DEFAULTS = {"checkpoint": "", "model": "", "k": 10,
                  "out_dir": "qumera_run", "match_tol": 5e-2}
_SPEC_TYPES = {"checkpoint": str, "model": str, "k": int,
               "out_dir": str, "match_tol": float}


def cmd_spectrum(args):
    ns = _merge_options(_SPEC_DEFAULTS, _SPEC_TYPES, args)
    if not ns.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(ns.checkpoint).is_file():
        print(f"checkpoint not found: {ns.checkpoint}", file=sys.stderr)
        return EXIT_USAGE
    try:
        ansatz, _ = ch.load_ansatz(ns.checkpoint)
    except Exception as exc:
        print(f"cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vals = ch.spectrum(ansatz, k=min(ns.k, ansatz.m ** 6))
    try:
        report = sp.exponents_from_spectrum(vals)
    except sp.SpectraError as exc:
        print(f"spectrum validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    model = ns.model or None
    if model:
        exact = md.exact_exponents(md.parse_preset(model))
        sp.match_report(report, exact, tol_per_label=ns.match_tol)
    _write_csv(out_dir / "spectrum.csv", ["rank", "re", "im", "modulus"],
               [(r + 1, v.real, v.imag, abs(v)) for r, v in enumerate(vals)])
    _write_json(out_dir / "spectrum.json",
                sp.report_as_dict(report, model=model, m=ansatz.m))
    print(f"leading modulus {abs(vals[0]):.10f}; "
          f"next {[round(abs(v), 6) for v in vals[1:4]]}")
    return EXIT_OK


_SWEEP_DEFAULTS = dict(_OPT_DEFAULTS, deltas="", k=10, seeds=1, match_tol=5e-2)
_SWEEP_DEFAULTS.pop("model")
_SWEEP_DEFAULTS.pop("init")
_SWEEP_DEFAULTS.pop("checkpoint_every")
_SWEEP_TYPES = dict(_OPT_TYPES, deltas=str, k=int, seeds=int, match_tol=float)
_SWEEP_TYPES.pop("model")
_SWEEP_TYPES.pop("init")
_SWEEP_TYPES.pop("checkpoint_every")


def _sweep_point(payload):
    """One anisotropy point: best-of-N optimize, then spectrum + matching."""
    ns = argparse.Namespace(**payload["ns"])
    delta = payload["delta"]
    index = payload["index"]
    preset = md.xxz(delta)
    out_dir = Path(ns.out_dir) / f"delta_{delta:g}"
    out_dir.mkdir(parents=True, exist_ok=True)
    best = None
    for attempt in range(ns.seeds):
        seed = int(np.random.SeedSequence(
            entropy=ns.seed, spawn_key=(index, attempt)).generate_state(1)[0])
        run_dir = out_dir if ns.seeds == 1 else out_dir / f"seed_{attempt}"
        run_dir.mkdir(parents=True, exist_ok=True)
        state, summary = _run_one_optimization(preset, ns.m, ns, run_dir, seed)
        if best is None or summary["energy_per_spin"] < best[1]["energy_per_spin"]:
            best = (state, summary)
    state, summary = best
    vals = ch.spectrum(state.ansatz, k=min(ns.k, state.ansatz.m ** 6))
    report = sp.exponents_from_spectrum(vals)
    exact = md.exact_exponents(preset)
    comparison = sp.match_report(report, exact, tol_per_label=ns.match_tol)
    _write_json(out_dir / "spectrum.json",
                sp.report_as_dict(report, model=preset.label, m=ns.m))
    nus = {m_["label"]: m_["nu_computed"] for m_ in comparison.matches}
    return {
        "delta": delta,
        "delta_e": summary["delta_e"],
        "nu_x": nus.get("x"), "nu_y": nus.get("y"), "nu_z": nus.get("z"),
        "spurious_count": len(comparison.spurious),
        "status": "ok",
        "energy_per_spin": summary["energy_per_spin"],
        "reference_energy": summary["reference_energy"],
    }


def cmd_sweep(args):
    ns = _merge_options(_SWEEP_DEFAULTS, _SWEEP_TYPES, args)
    raw = [tok for tok in ns.deltas.replace(";", ",").split(",") if tok.strip()]
    if not raw:
        raise UsageError("no anisotropy points given (use --deltas 0.2,0.5,0.8)")
    try:
        deltas = [float(tok) for tok in raw]
    except ValueError as exc:
        raise UsageError(f"bad --deltas entry: {exc}") from exc
    for delta in deltas:
        if not -1.0 <= delta <= 1.0:
            raise UsageError(f"delta {delta} outside the critical range [-1, 1]")
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [{"ns": vars(ns), "delta": d, "index": i}
                for i, d in enumerate(deltas)]
    workers = int(os.environ.get("QUMERA_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(payloads)))
    results = []
    if workers == 1:
        for payload in payloads:
            results.append(_sweep_result(payload))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_result, payloads))
    results.sort(key=lambda r: r["delta"])
    header = ["delta", "delta_e", "nu_x", "nu_y", "nu_z",
              "spurious_count", "status"]
    rows = []
    for r in results:
        rows.append([r["delta"],
                     r["delta_e"] if r["delta_e"] is not None else float("nan"),
                     r["nu_x"] if r["nu_x"] is not None else float("nan"),
                     r["nu_y"] if r["nu_y"] is not None else float("nan"),
                     r["nu_z"] if r["nu_z"] is not None else float("nan"),
                     r["spurious_count"], r["status"]])
    _write_csv(out_dir / "sweep.csv", header, rows)
    _write_json(out_dir / "sweep.json", results)
    n_ok = sum(1 for r in results if r["status"] == "ok")
    print(f"{n_ok}/{len(results)} points succeeded; output in {out_dir}")
    return EXIT_OK if n_ok >= 1 else EXIT_ABORT


def _sweep_result(payload):
    try:
        return _sweep_point(payload)
    except Exception as exc:  # recorded per point, the sweep itself continues
        return {"delta": payload["delta"], "delta_e": None, "nu_x": None,
                "nu_y": None, "nu_z": None, "spurious_count": 0,
                "status": f"failed: {type(exc).__name__}: {exc}",
                "energy_per_spin": None, "reference_energy": None}


_ORACLE_DEFAULTS = {"model": "ising", "ed_max_L": 16, "out_dir": "qumera_run"}
_ORACLE_TYPES = {"model": str, "ed_max_L": int, "out_dir": str}


def cmd_oracle(args):
    ns = _merge_options(_ORACLE_DEFAULTS, _ORACLE_TYPES, args)
    preset = md.parse_preset(ns.model)
    exact = md.exact_exponents(preset)
    if preset.tag == "ising_critical":
        ref = md.reference_energy(preset)
    else:
        sizes = [L for L in (8, 10, 12, 14, 16) if L <= ns.ed_max_L]
        ref = md.reference_energy(preset, ed_sizes=tuple(sizes))
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": preset.label,
        "exponents": {label: nu for label, nu in exact.exponents},
        "energy": ref.value,
        "uncertainty": ref.uncertainty,
        "provenance": ref.provenance,
    }
    _write_json(out_dir / "reference.json", payload)
    print(f"{preset.label}: energy {ref.value:.10f} +- {ref.uncertainty:.1e}")
    return EXIT_OK


_GRAD_DEFAULTS = {"model": "ising", "m": 2, "seed": 0, "directions": 20,
                  "step": 1e-5, "tol": 1e-6, "out_dir": "qumera_run",
                  "corrupt": False}
_GRAD_TYPES = {"model": str, "m": int, "seed": int, "directions": int,
               "step": float, "tol": float, "out_dir": str,
               "corrupt": lambda s: s.lower() in ("1", "true", "yes")}


def cmd_gradcheck(args):
    ns = _merge_options(_GRAD_DEFAULTS, _GRAD_TYPES, args)
    preset = md.parse_preset(ns.model)
    b = _blocking_for(ns.m)
    h = md.build_local_h(preset.params, b)
    records = op.gradient_check(h, m=ns.m, b=b, seed=ns.seed,
                                n_directions=ns.directions, step=ns.step,
                                corrupt=ns.corrupt)
    worst = max(r["rel_err"] for r in records)
    failures = [r for r in records if r["rel_err"] > ns.tol]
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "gradcheck.json", {
        "model": preset.label, "m": ns.m, "seed": ns.seed, "step": ns.step,
        "tolerance": ns.tol, "worst_rel_err": worst,
        "failures": [{"target": r["target"], "direction": r["direction"],
                      "rel_err": r["rel_err"]} for r in failures],
        "records": records,
    })
    if failures:
        print(f"gradient check FAILED: worst relative error {worst:.3e} "
              f"({len(failures)} directions over tolerance {ns.tol:g})",
              file=sys.stderr)
        return EXIT_VALIDATION
    print(f"gradient check passed: worst relative error {worst:.3e}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qumera",
        description="Homogeneous binary-MERA optimization via the transfer "
                    "channel, with critical-exponent extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="variationally optimize one model")
    _add_optimizer_flags(p)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--init", help="warm-start checkpoint path")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("spectrum", help="channel spectrum of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--model")
    p.add_argument("--k", type=int)
    p.add_argument("--match-tol", type=float, dest="match_tol")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("sweep", help="optimize + spectrum across anisotropies")
    _add_optimizer_flags(p, with_model_m=False)
    p.add_argument("--m", type=int)
    p.add_argument("--deltas", help="comma-separated xxz anisotropies")
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", type=int, help="independent starts per point")
    p.add_argument("--match-tol", type=float, dest="match_tol")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="exact reference data as JSON")
    p.add_argument("--model")
    p.add_argument("--ed-max-L", type=int, dest="ed_max_L")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--model")
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--directions", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--config")
    p.add_argument("--corrupt", action="store_const", const=True,
                   help=argparse.SUPPRESS)  # negative-control test hook
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, md.ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except op.OptimizerAbort as exc:
        print(f"optimizer abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
