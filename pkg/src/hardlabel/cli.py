"""Experiment runner: ``hardlabel {mi-sweep,attack,deviation,fid} CONFIG.json``.

A run is described by one JSON document, merged over :data:`DEFAULTS`;
``--set a.b=value`` overrides a leaf (``value`` is parsed as JSON when it can
be). Every CSV written starts with ``# config_sha256=<hex> seed=<seed>``.

Exit codes: 0 success, 1 configuration error, 2 some samples failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._rng import derive_seed, make_rng
from .attacks import (AttackConfig, StepRule, _problem_for, _init, _hsja_estimate,
                      _signopt_estimate, _opt_estimate, run_attack, write_trace_csv)
from .dimred import DimReducer, ae_train, biln_resample
from .errors import ParameterError, UnsupportedVictimError
from .gaussmix import make_spec, sample_dataset
from .metrics import (EmbeddingSpec, TRAJECTORY_HEADER, gradient_deviation,
                      manifold_distance_trajectory, summarize_deviations)
from .mi import log_spaced_dims, mi_sweep, write_sweep_csv
from .oracle import (HardLabelOracle, LinearVictim, MlpVictim, SmoothedVictim, SmoothingConfig,
                     input_gradient, load_victim, train_mlp)

log = logging.getLogger("hardlabel")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "workers": 1,
    "mi_sweep": {
        "d_values": None,
        "c2_values": [1, 5, 10, 15],
        "epsilon_values": [0.0, 0.125, 0.25],
        "c": 0.5,
        "c1": 0.5,
        "theta": 1.0,
        "mode": "definition",
        "partition_mode": "quantile-grid",
    },
    "victim": {
        "kind": "linear",
        "d": 20,
        "image_shape": [1, 16, 16],
        "coarse": 4,
        "path": None,
        "hidden": [16],
        "epochs": 500,
        "learning_rate": 0.1,
        "train_size": 400,
        "smoothing": None,
    },
    "data": {"batch": 10, "kind": "normal"},
    "attack": {
        "variant": "sign-opt",
        "q": 200,
        "beta": 0.005,
        "budget": 25_000,
        "binsearch_tol": 1e-5,
        "step_rule": {},
        "reducer": {"kind": "identity"},
        "targeted": False,
        "target_label": None,
        "num_probes": 100,
        "rays_a": 0,
        "rays_b": 1,
        "snapshot_every": 1000,
        "checkpoints": None,
        "threshold": "inf",
    },
    "deviation": {
        "variants": ["sign-opt", "hsja"],
        "samples": 50,
        "q": 200,
        "num_probes": 100,
    },
    "fid": {
        "attack_dir": None,
        "embedding": {"kind": "identity"},
        "checkpoints": None,
    },
}


class ConfigError(Exception):
    pass


# -- config -------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path, overrides=()) -> dict:
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


# Where results go and how many threads compute them do not change the results.
_UNHASHED = ("output_dir", "workers")


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_safe(obj):
    """Non-finite floats become the strings ``inf``/``-inf``/``nan``."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def meta_line(cfg: dict) -> str:
    return f"config_sha256={config_hash(cfg)} seed={cfg['seed']}"


def _float(v) -> float:
    return float(v) if not isinstance(v, str) else float(v.strip())


def _checkpoints(spec, budget: int, every: int = 1000) -> list[int]:
    if spec is None:
        return list(range(0, budget + 1, every))
    return sorted(int(c) for c in spec)


# -- victims and data ---------------------------------------------------------

def _image_shape(vcfg) -> tuple:
    return tuple(int(v) for v in vcfg["image_shape"])


def build_victim(cfg: dict):
    """Victim and input shape described by ``cfg['victim']``."""
    v = cfg["victim"]
    seed = cfg["seed"]
    kind = v["kind"]
    if kind == "linear":
        d = int(v["d"])
        victim, shape = LinearVictim(make_rng(seed, "victim", "linear").standard_normal(d)), (d,)
    elif kind == "smooth-linear":
        shape = _image_shape(v)
        C, H, W = shape
        k = int(v["coarse"])
        pattern = make_rng(seed, "victim", "smooth").standard_normal((C, k, k))
        victim = LinearVictim(biln_resample(pattern, H, W).ravel())
    elif kind == "mlp":
        d = int(v["d"])
        spec = make_spec(d, seed=seed)
        data = sample_dataset(spec, int(v["train_size"]), derive_seed(seed, "victim-train"))
        victim = train_mlp(data, list(v["hidden"]) + [2], int(v["epochs"]),
                           float(v["learning_rate"]), derive_seed(seed, "mlp"))
        shape = (d,)
    elif kind == "file":
        if not v.get("path"):
            raise ConfigError("victim.kind=file needs victim.path")
        victim = load_victim(v["path"])
        shape = tuple(v["image_shape"]) if v.get("image_shape") and \
            int(np.prod(v["image_shape"])) == victim.input_dim else (victim.input_dim,)
    else:
        raise ConfigError(f"unknown victim kind {kind!r}")
    if v.get("smoothing"):
        s = v["smoothing"]
        victim = SmoothedVictim(victim, SmoothingConfig(float(s["noise_sigma"]),
                                                        int(s.get("mc_rounds", 100)),
                                                        int(s.get("seed", seed))))
    return victim, shape


def draw_inputs(cfg: dict, shape: tuple, count: int, key: str) -> np.ndarray:
    """``count`` flat inputs; ``key`` separates attack inputs from held-out data."""
    d = int(np.prod(shape))
    kind = cfg["data"]["kind"]
    if kind == "normal":
        return make_rng(cfg["seed"], "data", key).standard_normal((count, d))
    if kind == "mixture":
        spec = make_spec(d, seed=cfg["seed"])
        return sample_dataset(spec, count, derive_seed(cfg["seed"], "data", key)).X
    raise ConfigError(f"unknown data kind {kind!r}")


def build_reducer(cfg: dict, shape: tuple) -> DimReducer:
    r = cfg["attack"]["reducer"] or {"kind": "identity"}
    kind = r.get("kind", "identity")
    if kind == "identity":
        return DimReducer.identity(shape)
    if kind == "biln":
        if len(shape) != 3:
            raise ConfigError("biln reducer needs an image-shaped victim")
        return DimReducer.biln(shape, tuple(r["reduced_hw"]))
    if kind == "autoencoder":
        held_out = draw_inputs(cfg, shape, int(r.get("train_size", 500)), "ae-held-out")
        ae = ae_train(held_out, int(r["latent_dim"]), int(r.get("epochs", 2000)),
                      float(r.get("learning_rate", 0.1)), derive_seed(cfg["seed"], "ae"))
        return DimReducer.autoencoder(ae, shape)
    raise ConfigError(f"unknown reducer kind {kind!r}")


def attack_config(cfg: dict, reducer: DimReducer, seed: int) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        variant=a["variant"], q=int(a["q"]), beta=float(a["beta"]), budget=int(a["budget"]),
        binsearch_tol=float(a["binsearch_tol"]), step_rule=StepRule(**a["step_rule"]),
        reducer=reducer, targeted=bool(a["targeted"]), target_label=a["target_label"],
        seed=seed, num_probes=int(a["num_probes"]), rays_a=int(a["rays_a"]),
        rays_b=int(a["rays_b"]), snapshot_every=int(a["snapshot_every"]))


# -- commands -----------------------------------------------------------------

def cmd_mi_sweep(cfg: dict) -> int:
    m = cfg["mi_sweep"]
    dims = m["d_values"] or log_spaced_dims(1, 1000, 30)
    cells = mi_sweep(dims, m["c2_values"], m["epsilon_values"], c=m["c"], c1=m["c1"],
                     mode=m["mode"], seed=cfg["seed"], theta=m["theta"],
                     partition_mode=m["partition_mode"])
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mi_sweep.csv", "w", encoding="utf-8", newline="") as fh:
        write_sweep_csv(cells, fh, meta_line(cfg))
    manifest = {"config_sha256": config_hash(cfg), "seed": cfg["seed"], "c": m["c"],
                "c1": m["c1"], "theta": m["theta"], "mode": m["mode"],
                "partition_mode": m["partition_mode"], "d_values": list(dims),
                "c2_values": m["c2_values"], "epsilon_values": m["epsilon_values"],
                "rows": len(cells)}
    (out / "mi_sweep.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _run_one(oracle_victim, x0, acfg: AttackConfig, candidates):
    oracle = HardLabelOracle(oracle_victim)
    try:
        return run_attack(oracle, x0, acfg, candidate_targets=candidates)
    except Exception as exc:  # recorded per sample; the batch continues
        log.warning("sample failed: %s", exc)
        return exc


def summarize_traces(traces, checkpoints, threshold: float, budget: int) -> dict:
    ok = [t for t in traces if not isinstance(t, Exception)]
    med = {}
    for c in checkpoints:
        vals = [t.distortion_at(c) for t in ok]
        med[str(c)] = float(np.median(vals)) if vals else math.inf
    hits = sum(1 for t in ok if t.success and t.final_l2 <= threshold)
    return {
        "samples": len(traces),
        "failed": len(traces) - len(ok),
        "median_l2_at_checkpoint": med,
        "threshold": threshold,
        "success_rate": hits / len(traces) if traces else 0.0,
        "queries": {"budget": budget, "per_sample": [t.queries_used for t in ok],
                    "total": int(sum(t.queries_used for t in ok))},
    }


def cmd_attack(cfg: dict) -> int:
    victim, shape = build_victim(cfg)
    reducer = build_reducer(cfg, shape)
    batch = int(cfg["data"]["batch"])
    if batch < 1:
        raise ConfigError("data.batch must be >= 1")
    X = draw_inputs(cfg, shape, batch, "attack")
    a = cfg["attack"]
    candidates = None
    if a["targeted"]:
        candidates = list(draw_inputs(cfg, shape, 50, "targets"))
    seeds = [derive_seed(cfg["seed"], "sample", i) for i in range(batch)]
    jobs = [(victim, X[i].reshape(shape) if a["variant"] == "rays" else X[i],
             attack_config(cfg, reducer, seeds[i]), candidates) for i in range(batch)]
    workers = max(1, int(cfg["workers"]))
    if workers == 1:
        traces = [_run_one(*j) for j in jobs]
    else:
        with ThreadPoolExecutor(workers) as pool:
            traces = list(pool.map(lambda j: _run_one(*j), jobs))

    out = Path(cfg["output_dir"]) / "attack"
    out.mkdir(parents=True, exist_ok=True)
    meta = meta_line(cfg)
    np.savez(out / "references.npz", X=X)
    failed = 0
    for i, tr in enumerate(traces):
        if isinstance(tr, Exception):
            failed += 1
            (out / f"sample_{i:04d}.error").write_text(f"{type(tr).__name__}: {tr}\n")
            continue
        if tr.error:
            failed += 1
        with open(out / f"sample_{i:04d}.csv", "w", encoding="utf-8", newline="") as fh:
            write_trace_csv(tr, fh, f"{meta} sample={i} sample_seed={seeds[i]}")
        np.savez(out / f"sample_{i:04d}.npz",
                 **{f"q{k}": v for k, v in sorted(tr.snapshots.items())})
    checkpoints = _checkpoints(a["checkpoints"], int(a["budget"]), int(a["snapshot_every"]))
    summary = summarize_traces(traces, checkpoints, _float(a["threshold"]), int(a["budget"]))
    summary.update({"config_sha256": config_hash(cfg), "seed": cfg["seed"],
                    "variant": a["variant"], "failed_samples": failed})
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return EXIT_PARTIAL if failed else EXIT_OK


def estimate_direction(variant: str, victim, x0, acfg: AttackConfig) -> tuple[np.ndarray, int]:
    """Unit-norm first gradient estimate in input space and the adversarial label.

    The estimate points toward the adversarial side so it is comparable to the
    negated cross-entropy gradient of the adversarial label.
    """
    oracle = HardLabelOracle(victim)
    prob = _problem_for(oracle, x0, acfg)
    rng = make_rng(acfg.seed, "deviation", variant)
    sd = _init(prob, acfg, None, rng)
    xb = prob.point(sd.theta_prime, sd.g_value)
    adv = oracle.label_free(xb)
    red = prob.reducer
    if variant == "sign-opt":
        est = -red.decode(_signopt_estimate(prob, sd, acfg.q, acfg.beta, rng)[0])
    elif variant == "opt":
        est = -red.decode(_opt_estimate(prob, sd, acfg.q, acfg.beta, rng)[0])
    elif variant == "hsja":
        import warnings
        from .attacks import DegenerateEstimateWarning
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateEstimateWarning)
            est = red.decode(_hsja_estimate(prob, xb, acfg.num_probes,
                                            sd.g_value / prob.x0.size, rng)[0])
    elif variant == "exact":
        est = -input_gradient(victim, x0, adv)
    else:
        raise ConfigError(f"unknown deviation variant {variant!r}")
    n = float(np.linalg.norm(est))
    return (est / n if n > 0 else est), adv


def cmd_deviation(cfg: dict) -> int:
    victim, shape = build_victim(cfg)
    base = victim
    if isinstance(base, SmoothedVictim) or not isinstance(base, (LinearVictim, MlpVictim)):
        raise UnsupportedVictimError("deviation needs a linear or mlp victim")
    reducer = build_reducer(cfg, shape)
    dcfg = cfg["deviation"]
    n = int(dcfg["samples"])
    X = draw_inputs(cfg, shape, n, "deviation")
    rows = []
    failed = 0
    for variant in dcfg["variants"]:
        reports = []
        for i in range(n):
            acfg = replace(attack_config(cfg, reducer, derive_seed(cfg["seed"], "deviation", i)),
                           variant="hsja" if variant == "hsja" else "sign-opt",
                           q=int(dcfg["q"]), num_probes=int(dcfg["num_probes"]))
            try:
                est, adv = estimate_direction(variant, victim, X[i], acfg)
            except (ArithmeticError, RuntimeError) as exc:
                log.warning("deviation sample %d (%s) failed: %s", i, variant, exc)
                failed += 1
                continue
            true = -input_gradient(victim, X[i], adv)
            true = true / np.linalg.norm(true)
            reports.append(gradient_deviation(true, est))
        if reports:
            s = summarize_deviations(reports)
            rows.append([variant, s.linf_mean, s.linf_std, s.l2_mean, s.l2_std, s.count])
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "deviation.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_line(cfg)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "linf_mean", "linf_std", "l2_mean", "l2_std", "samples"])
        for r in rows:
            w.writerow([r[0]] + [format(v, ".17g") for v in r[1:5]] + [r[5]])
    return EXIT_PARTIAL if failed else EXIT_OK


def load_snapshots(path) -> dict:
    with np.load(path) as z:
        return {int(k[1:]): z[k] for k in z.files}


def cmd_fid(cfg: dict) -> int:
    f = cfg["fid"]
    attack_dir = Path(f["attack_dir"] or Path(cfg["output_dir"]) / "attack")
    refs_path = attack_dir / "references.npz"
    if not refs_path.exists():
        raise ConfigError(f"no attack output at {attack_dir}")
    with np.load(refs_path) as z:
        refs = z["X"]
    snaps = [load_snapshots(p) for p in sorted(attack_dir.glob("sample_*.npz"))]
    emb = dict(f["embedding"])
    if emb.get("kind") == "average-pool" and "image_shape" not in emb:
        emb["image_shape"] = cfg["victim"]["image_shape"]
    spec = EmbeddingSpec(**emb)
    budget = int(cfg["attack"]["budget"])
    checkpoints = _checkpoints(f["checkpoints"], budget)
    traj = manifold_distance_trajectory(snaps, refs, spec, checkpoints)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fid.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_line(cfg)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for q, val in traj:
            w.writerow([q, format(val, ".17g"), spec.kind, len(snaps)])
    return EXIT_OK


COMMANDS = {"mi-sweep": cmd_mi_sweep, "attack": cmd_attack,
            "deviation": cmd_deviation, "fid": cmd_fid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardlabel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf by dotted path")
        sp.add_argument("-o", "--output-dir", help="shorthand for --set output_dir=...")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"output_dir={json.dumps(args.output_dir)}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ParameterError, UnsupportedVictimError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
