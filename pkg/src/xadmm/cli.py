"""Experiment command line: run | scaling | verify | generate.

Runs emit one CSV row per iteration plus a JSON sidecar with the fully
resolved configuration, seed and build tag, so every figure can be
reproduced from its artifacts.  Configuration comes from an INI file
(key-value with sections); command-line flags override file values, which
override built-in defaults.
"""

import argparse
import configparser
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, zoo
from .admm import StoppingRule, compute_metrics, initial_state, solve
from .baseline import BaselineOptions, baseline_solve
from .errors import InvalidConfig, NoConvergence, SolverError
from .lbfgs import InnerSolverOptions
from .oracles import FunctionOracle, check_affine, finite_diff_check
from .reference import CACHE_ENV_VAR, get_reference

SCHEMA_NAME = "xadmm-metrics-v1"
CSV_COLUMNS = [
    "k", "f_k", "r_g_norm", "r_h_norm", "r_consensus_norm", "z_change",
    "dist_z_2", "dist_z_inf", "dist_lambda", "V_k",
    "inner_iters_this_round", "elapsed_ns",
]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_REFERENCE = 3

DEFAULTS = {
    "problem": {
        "kind": "robust-svm",
        "points": "200",
        "features": "10",
        "batches": "4",
        "c": "1.0",
        "delta": "0.5",
        "seed": "0",
        "ball_dim": "2",
    },
    "solver": {
        "engine": "extended",
        "rho": "1.0",
        "workers": "1",
        "inner_grad_tol": "1e-6",
        "inner_max_iters": "500",
        "rho_outer": "10.0",
        "rho_admm": "1.0",
        "outer_tol": "1e-4",
        "middle_tol": "1e-3",
    },
    "stopping": {
        "mode": "residual",
        "tol_residual": "1e-4",
        "z_change_tol": "1e-6",
        "tol_reference_inf": "5e-3",
        "max_iters": "10000",
    },
    "reference": {
        "tight_tol": "1e-9",
        "harvest_iters": "1200",
        "harvest_rho": "50.0",
    },
    "output": {
        "dir": "out",
    },
}


def build_tag():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(__file__), capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"xadmm-{__version__}"


def load_config(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    merged = {section: dict(values) for section, values in DEFAULTS.items()}
    if path is not None:
        read = parser.read(path)
        if not read:
            raise InvalidConfig(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in merged:
                raise InvalidConfig(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in merged[section]:
                    raise InvalidConfig(f"unknown config key {key!r} in [{section}]")
                merged[section][key] = value
    return merged


def apply_overrides(config, args):
    """Command-line flags take precedence over config-file values."""
    mapping = [
        ("problem", "kind", "problem"),
        ("problem", "points", "points"),
        ("problem", "features", "features"),
        ("problem", "batches", "batches"),
        ("problem", "c", "c"),
        ("problem", "delta", "delta"),
        ("problem", "seed", "seed"),
        ("solver", "engine", "solver"),
        ("solver", "rho", "rho"),
        ("solver", "workers", "workers"),
        ("stopping", "mode", "tol_mode"),
        ("stopping", "tol_residual", "tol"),
        ("stopping", "tol_reference_inf", "tol_reference"),
        ("stopping", "max_iters", "max_iters"),
        ("output", "dir", "out"),
    ]
    for section, key, attr in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            config[section][key] = str(value)
    return config


def _stopping_from_config(config):
    s = config["stopping"]
    mode = s["mode"]
    if mode == "reference":
        mode = "reference-distance"
    return StoppingRule(
        mode=mode,
        tol_residual=float(s["tol_residual"]),
        z_change_tol=float(s["z_change_tol"]),
        tol_reference_inf=float(s["tol_reference_inf"]),
        max_iters=int(s["max_iters"]),
    )


def _instance_from_config(config, instance_path=None):
    if instance_path is not None:
        return zoo.load_instance(instance_path)
    p = config["problem"]
    kind = p["kind"]
    seed = int(p["seed"])
    if kind == "robust-svm":
        _, instance = zoo.generate_robust_svm(
            int(p["points"]), int(p["features"]), int(p["batches"]),
            c=float(p["c"]), delta=float(p["delta"]), seed=seed,
        )
        return instance
    if kind == "enclosing-ball":
        rng = np.random.default_rng(seed)
        points = rng.uniform(-1.0, 1.0, size=(int(p["points"]), int(p["ball_dim"])))
        _, instance = zoo.generate_enclosing_ball(points, int(p["batches"]), seed=seed)
        return instance
    if kind == "toy-qp":
        _, instance = zoo.toy_1d_qp()
        return instance
    raise InvalidConfig(f"unknown problem kind {kind!r}")


def _csv_format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Streams iteration rows into a schema-pinned CSV file."""

    def __init__(self, path, extra_columns=()):
        self.columns = CSV_COLUMNS + list(extra_columns)
        header = ",".join(self.columns)
        digest = hashlib.sha256(header.encode()).hexdigest()
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(f"# schema={SCHEMA_NAME} header_sha256={digest}\n")
        self._fh.write(header + "\n")

    def write(self, row):
        values = [
            row.k, row.f_k, row.r_g_norm, row.r_h_norm, row.r_consensus_norm,
            row.z_change, row.dist_z_2, row.dist_z_inf, row.dist_lambda, row.v_k,
            row.inner_iters, row.elapsed_ns,
        ]
        if "outer_iter" in self.columns:
            values.append(row.outer_iter)
        self._fh.write(",".join(_csv_format(v) for v in values) + "\n")

    def close(self):
        self._fh.close()


def write_sidecar(out_dir, name, config, argv, extra=None):
    payload = {
        "config": config,
        "argv": argv,
        "build": build_tag(),
        "version": __version__,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        payload.update(extra)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _reference_for(instance, config, cache_dir):
    r = config["reference"]
    return get_reference(
        instance,
        cache_dir=cache_dir,
        tight_tol=float(r["tight_tol"]),
        harvest_iters=int(r["harvest_iters"]),
        harvest_rho=float(r["harvest_rho"]),
    )


def cmd_run(args, argv):
    config = apply_overrides(load_config(args.config), args)
    try:
        stopping = _stopping_from_config(config)
        instance = _instance_from_config(config, args.instance)
        problem = zoo.problem_from_instance(instance)
        engine = config["solver"]["engine"]
        if engine not in ("extended", "baseline"):
            raise InvalidConfig(f"unknown solver engine {engine!r}")
        workers = int(config["solver"]["workers"])
        rho = float(config["solver"]["rho"])
        inner = InnerSolverOptions(
            grad_tol=float(config["solver"]["inner_grad_tol"]),
            max_iters=int(config["solver"]["inner_max_iters"]),
        )
    except (InvalidConfig, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    reference = None
    need_reference = stopping.mode == "reference-distance" or args.with_reference
    if need_reference:
        try:
            reference = _reference_for(instance, config, args.cache_dir)
        except (NoConvergence, SolverError) as exc:
            print(f"reference failure: {exc}", file=sys.stderr)
            return EXIT_REFERENCE

    out_dir = config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    extra_cols = ("outer_iter",) if engine == "baseline" else ()
    csv_path = os.path.join(out_dir, "metrics.csv")
    writer = MetricsWriter(csv_path, extra_cols)
    try:
        if engine == "extended":
            state, trace = solve(
                problem, rho=rho, stopping=stopping, inner_opts=inner,
                reference=reference, workers=workers, metrics_sink=writer.write,
            )
            counters = None
        else:
            opts = BaselineOptions(
                rho_outer=float(config["solver"]["rho_outer"]),
                rho_admm=float(config["solver"]["rho_admm"]),
                outer_tol=float(config["solver"]["outer_tol"]),
                inner_admm_tol=float(config["solver"]["middle_tol"]),
            )
            state, trace, counters = baseline_solve(
                problem, opts, inner_opts=inner, reference=reference,
                stopping=stopping if stopping.mode == "reference-distance" else None,
                workers=workers, metrics_sink=writer.write,
            )
    except SolverError as exc:
        writer.close()
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    writer.close()

    summary = {
        "iterations": state.k,
        "converged": state.converged,
        "stop_reason": state.stop_reason,
        "f_final": trace[-1].f_k if trace else None,
        "csv": csv_path,
    }
    if counters is not None:
        summary["work"] = {
            "outer_iterations": counters.outer_iterations,
            "middle_iterations": counters.middle_iterations,
            "inner_iterations": counters.inner_iterations,
        }
    write_sidecar(out_dir, "run_meta.json", config, argv, extra={"summary": summary})
    print(json.dumps(summary))
    return EXIT_OK


def _parse_grid(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_scaling(args, argv):
    config = apply_overrides(load_config(args.config), args)
    study = args.study
    seeds = list(range(int(args.seeds)))
    solvers = [args.solver] if args.solver else ["extended", "baseline"]
    out_dir = config["output"]["dir"]
    try:
        os.makedirs(out_dir, exist_ok=True)
        if study == "node":
            grid = [int(v) for v in _parse_grid(args.grid or "2,4,8")]
        elif study == "data":
            grid = [int(v) for v in _parse_grid(args.grid or "500,1000,2000")]
        elif study == "accuracy":
            grid = [float(v) for v in _parse_grid(args.grid or "1e-1,1e-2,5e-3,1e-3")]
        else:
            raise InvalidConfig(f"unknown study {study!r}")
    except (InvalidConfig, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    p = config["problem"]
    base_points = int(p["points"])
    base_features = int(p["features"])
    base_batches = int(p["batches"])
    max_iters = int(config["stopping"]["max_iters"])
    rho = float(config["solver"]["rho"])
    inner = InnerSolverOptions(grad_tol=float(config["solver"]["inner_grad_tol"]))

    rows = []
    for value in grid:
        points, batches, tol = base_points, base_batches, float(config["stopping"]["tol_reference_inf"])
        if study == "node":
            batches = int(value)
        elif study == "data":
            points = int(value)
        else:
            tol = float(value)
        for engine in solvers:
            iters, inner_work, failures = [], [], 0
            for seed in seeds:
                try:
                    _, instance = zoo.generate_robust_svm(
                        points, base_features, batches,
                        c=float(p["c"]), delta=float(p["delta"]), seed=seed,
                    )
                    problem = zoo.problem_from_instance(instance)
                    reference = _reference_for(instance, config, args.cache_dir)
                    stopping = StoppingRule(
                        mode="reference-distance", tol_reference_inf=tol, max_iters=max_iters,
                    )
                    if engine == "extended":
                        state, trace = solve(
                            problem, rho=rho, stopping=stopping,
                            inner_opts=inner, reference=reference,
                            workers=batches if study == "node" else 1,
                        )
                        work = sum(r.inner_iters for r in trace)
                    else:
                        opts = BaselineOptions(
                            rho_outer=float(config["solver"]["rho_outer"]),
                            rho_admm=float(config["solver"]["rho_admm"]),
                            outer_tol=float(config["solver"]["outer_tol"]),
                            inner_admm_tol=float(config["solver"]["middle_tol"]),
                        )
                        state, trace, counters = baseline_solve(
                            problem, opts, inner_opts=inner,
                            reference=reference, stopping=stopping,
                        )
                        work = counters.inner_iterations
                    if not state.converged:
                        failures += 1
                    else:
                        iters.append(state.k)
                        inner_work.append(work)
                except SolverError as exc:
                    print(f"cell failure ({study}={value} {engine} seed={seed}): {exc}",
                          file=sys.stderr)
                    failures += 1
            rows.append({
                "study": study,
                "value": value,
                "solver": engine,
                "seeds": len(seeds),
                "failures": failures,
                "mean_iters": float(np.mean(iters)) if iters else None,
                "std_iters": float(np.std(iters)) if iters else None,
                "mean_inner_iters": float(np.mean(inner_work)) if inner_work else None,
            })
            print(json.dumps(rows[-1]))

    csv_path = os.path.join(out_dir, f"scaling_{study}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        header = "study,value,solver,seeds,failures,mean_iters,std_iters,mean_inner_iters"
        digest = hashlib.sha256(header.encode()).hexdigest()
        fh.write(f"# schema=xadmm-scaling-v1 header_sha256={digest}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_csv_format(row[c]) for c in
                              ("study", "value", "solver", "seeds", "failures",
                               "mean_iters", "std_iters", "mean_inner_iters")) + "\n")
    write_sidecar(out_dir, f"scaling_{study}_meta.json", config, argv)
    print(f"wrote {csv_path}")
    return EXIT_OK


def _corrupted_gradient_problem():
    """Self-test fixture whose Jacobian is deliberately wrong."""
    problem, _ = zoo.toy_1d_qp()

    def bad_g0(x):
        return np.array([x[0] - 1.0]), np.array([[3.0]])  # true derivative is 1

    problem.batches[0].g0 = FunctionOracle(1, 1, bad_g0, "corrupted-g0")
    return problem, None


def cmd_verify(args, argv):
    config = apply_overrides(load_config(args.config), args)
    try:
        if args.target == "corrupt-demo":
            problem, instance = _corrupted_gradient_problem()
        elif os.path.exists(args.target):
            instance = zoo.load_instance(args.target)
            problem = zoo.problem_from_instance(instance)
        else:
            config["problem"]["kind"] = args.target
            instance = _instance_from_config(config)
            problem = zoo.problem_from_instance(instance)
    except (InvalidConfig, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    checks = []
    rng = np.random.default_rng(int(config["problem"]["seed"]) + 2024)

    worst = 0.0
    for i, batch in enumerate(problem.batches):
        dim = problem.batch_dim(i)
        oracles = [problem.objectives[i]]
        if batch.g0 is not None:
            oracles.append(batch.g0)
        if batch.h is not None:
            oracles.append(batch.h)
        for oracle in oracles:
            for _ in range(args.gradient_points):
                worst = max(worst, finite_diff_check(oracle, rng.standard_normal(dim)))
    checks.append(("gradient-integrity", worst <= 1e-5, f"max fd error {worst:.3e}"))

    affine_ok = True
    for i, batch in enumerate(problem.batches):
        if batch.h is not None and not check_affine(batch.h, 20, 7):
            affine_ok = False
    checks.append(("affine-equality", affine_ok, "midpoint checks on h oracles"))

    mu_ok, v_ok, v_msg = True, None, ""
    try:
        reference = None
        if instance is not None:
            reference = _reference_for(instance, config, args.cache_dir)
        state, trace = solve(
            problem, rho=float(config["solver"]["rho"]),
            stopping=StoppingRule(mode="max-iters", max_iters=args.verify_iters),
            inner_opts=InnerSolverOptions(grad_tol=1e-8), reference=reference,
        )
        mu_ok = all(
            float(np.min(state.mu_g_i[i], initial=0.0)) >= 0.0 for i in range(problem.m)
        )
        if reference is not None:
            vs = np.array([r.v_k for r in trace])
            slack = 1e-6 * (1.0 + vs[0])
            bad = int(np.sum(vs[1:] > vs[:-1] + slack))
            v_ok = bad == 0
            v_msg = f"{bad} ascent steps over {len(vs)} iterations"
    except (SolverError, ValueError) as exc:
        mu_ok = False
        v_msg = str(exc)
    checks.append(("dual-nonnegativity", mu_ok, "min mu over a short run"))
    if v_ok is not None:
        checks.append(("v-descent", v_ok, v_msg))

    failed = False
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        failed = failed or not ok
        print(f"{status} {name}: {detail}")
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_generate(args, argv):
    config = apply_overrides(load_config(args.config), args)
    try:
        instance = _instance_from_config(config)
        out_dir = config["output"]["dir"]
        os.makedirs(out_dir, exist_ok=True)
        path = args.instance or os.path.join(out_dir, "instance.json")
        zoo.save_instance(path, instance)
    except (InvalidConfig, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(path)
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="xadmm",
        description="Distributed consensus solver experiments for constrained convex problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file; flags override its values")
        p.add_argument("--problem", help="problem kind: robust-svm | enclosing-ball | toy-qp")
        p.add_argument("--points", type=int)
        p.add_argument("--features", type=int)
        p.add_argument("--batches", type=int)
        p.add_argument("--c", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--solver", choices=["extended", "baseline"])
        p.add_argument("--workers", type=int)
        p.add_argument("--rho", type=float)
        p.add_argument("--tol-mode", dest="tol_mode", choices=["residual", "reference", "max-iters"])
        p.add_argument("--tol", type=float, help="residual stopping tolerance")
        p.add_argument("--tol-reference", dest="tol_reference", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--cache-dir", dest="cache_dir",
                       help=f"reference cache directory (default ${CACHE_ENV_VAR})")

    run = sub.add_parser("run", help="solve one instance and emit a metrics CSV")
    common(run)
    run.add_argument("--instance", help="load this instance file instead of generating")
    run.add_argument("--with-reference", action="store_true",
                     help="compute the reference even in residual mode (fills distance columns)")
    run.set_defaults(fn=cmd_run)

    scaling = sub.add_parser("scaling", help="node | data | accuracy study over seeds")
    common(scaling)
    scaling.add_argument("study", choices=["node", "data", "accuracy"])
    scaling.add_argument("--grid", help="comma separated grid values")
    scaling.add_argument("--seeds", type=int, default=10)
    scaling.set_defaults(fn=cmd_scaling)

    verify = sub.add_parser("verify", help="run the invariant suite on an instance")
    common(verify)
    verify.add_argument("target",
                        help="instance file, problem kind, or 'corrupt-demo'")
    verify.add_argument("--gradient-points", type=int, default=20)
    verify.add_argument("--verify-iters", type=int, default=200)
    verify.set_defaults(fn=cmd_verify)

    generate = sub.add_parser("generate", help="write an instance file")
    common(generate)
    generate.add_argument("--instance", help="output path for the instance file")
    generate.set_defaults(fn=cmd_generate)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
