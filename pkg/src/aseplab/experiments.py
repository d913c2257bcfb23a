"""Named verification experiments, their result rows, and file emission.

Each experiment compares Monte Carlo estimates against a closed-form
reference, an exact oracle, or a proved bound, and reports one verdict
per row: PASS iff |estimate - reference| <= 3 stderr for identity rows,
estimate <= reference + 3 stderr for bound rows.  Given (spec, seed) the
emitted files are byte-identical across runs and worker counts.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import couplings, observables, oracle
from .engine import auto_window
from .lattice import Configuration, Rates, Ring, char_speed, mean_current
from .observables import EstimateWithCI
from .parallel import run_replicas
from .rng import RngStream

EXPERIMENTS = (
    "identity-covariance",
    "identity-variance",
    "identity-derivative",
    "mean-current",
    "mean-q",
    "coupling-order",
    "coupling-marginal",
    "label-tail",
    "rw-environment",
    "scaling-psi",
    "oracle-compare",
    "window-doubling",
)

CSV_HEADER = (
    "experiment,rho,lambda,p,q,t,z,m,replicas,seed,estimate,stderr,ci_lo,ci_hi,reference,verdict"
)


@dataclass
class ResultRow:
    """One emitted comparison; reference_source records its provenance."""

    experiment: str
    rho: float | None = None
    lam: float | None = None
    p: float | None = None
    q: float | None = None
    t: float | None = None
    z: float | None = None
    m: float | None = None
    replicas: int | None = None
    seed: int | None = None
    estimate: float | None = None
    stderr: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    reference: float | None = None
    verdict: str = "N-A"
    reference_source: str = ""

    _emitted = (
        "experiment", "rho", "lam", "p", "q", "t", "z", "m", "replicas",
        "seed", "estimate", "stderr", "ci_lo", "ci_hi", "reference", "verdict",
    )

    def emitted_values(self) -> list:
        return [getattr(self, name) for name in self._emitted]


def _plain(v):
    if v is None or isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def _fmt(v) -> str:
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return repr(v)


def emit(results: Sequence[ResultRow], fmt: str, path: str | Path) -> Path:
    """Write rows as CSV (pinned header) or JSON (same keys)."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    path = Path(path)
    if fmt == "csv":
        lines = [CSV_HEADER]
        for row in results:
            lines.append(",".join(_fmt(v) for v in row.emitted_values()))
        path.write_text("\n".join(lines) + "\n")
    else:
        keys = CSV_HEADER.split(",")
        payload = [
            dict(zip(keys, (_plain(v) for v in row.emitted_values()))) for row in results
        ]
        path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_rows(path: str | Path) -> list[ResultRow]:
    """Parse an emitted CSV or JSON file back into rows."""
    path = Path(path)
    rows = []
    keys = CSV_HEADER.split(",")
    if path.suffix == ".json":
        records = json.loads(path.read_text())
    else:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != keys:
                raise ValueError("unexpected CSV header")
            records = [dict(zip(keys, line)) for line in reader]
    for rec in records:
        kwargs = {}
        for key, val in rec.items():
            name = "lam" if key == "lambda" else key
            if val in ("", None):
                kwargs[name] = None
            elif name == "experiment" or name == "verdict":
                kwargs[name] = val
            elif name in ("replicas", "seed"):
                kwargs[name] = int(val)
            else:
                kwargs[name] = float(val)
        rows.append(ResultRow(**kwargs))
    return rows


# ---------------------------------------------------------------------------
# Spec files


_SPEC_KEYS = {
    "experiment", "rho", "lambda", "p", "q", "t", "z", "m", "delta",
    "replicas", "seed", "window", "k", "out",
}


@dataclass
class ExperimentSpec:
    """Validated description of one experiment run."""

    name: str
    params: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; known: {', '.join(EXPERIMENTS)}")
        p = self.params
        if "seed" not in p:
            raise ValueError("seed is mandatory (no wall-clock default)")
        self.seed = int(p["seed"])
        if "replicas" not in p:
            raise ValueError("replicas is required")
        if int(p["replicas"]) < 1:
            raise ValueError("replicas must be >= 1")
        if self.name in ("identity-covariance", "identity-variance", "identity-derivative",
                         "mean-current", "mean-q", "coupling-order", "coupling-marginal",
                         "label-tail", "scaling-psi", "window-doubling"):
            rho = p.get("rho")
            if rho is None or not 0.0 < float(rho) < 1.0:
                raise ValueError(f"{self.name} needs a density rho in (0, 1)")
        if "p" not in p:
            raise ValueError("jump rate p is required")
        self.rates = Rates(float(p["p"]), float(p["q"])) if "q" in p else Rates(float(p["p"]))
        if self.name == "scaling-psi":
            ts = p.get("t")
            if not isinstance(ts, (list, tuple)) or len(ts) < 3:
                raise ValueError("scaling-psi needs a t-list of at least 3 times")
        elif self.name != "rw-environment" and "t" not in p:
            raise ValueError("time t is required")
        if self.name == "identity-derivative":
            delta = float(p.get("delta", 0.0))
            rho = float(p["rho"])
            if not (0.0 < rho - delta and rho + delta < 1.0 and delta > 0.0):
                raise ValueError("need 0 < rho - delta and rho + delta < 1 with delta > 0")


def parse_spec_file(path: str | Path) -> ExperimentSpec:
    """Read a flat key=value experiment file (one experiment per file)."""
    text = Path(path).read_text()
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SPEC_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = val
    if "experiment" not in raw:
        raise ValueError(f"{path}: missing experiment name")
    name = raw.pop("experiment")
    out = raw.pop("out", None)
    params: dict = {}
    for key, val in raw.items():
        if key in ("t", "k") and "," in val:
            params[key] = [float(v) if key == "t" else int(v) for v in val.split(",")]
        elif key in ("replicas", "seed", "window", "z", "m"):
            params[key] = int(val)
        elif key == "k":
            params[key] = [int(val)]
        else:
            params[key] = float(val)
    if "lambda" in params:
        params["lam"] = params.pop("lambda")
    return ExperimentSpec(name, params, out)


# ---------------------------------------------------------------------------
# Experiment implementations


def _pass(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _identity_row(name, est_lhs, est_rhs, source, **cols) -> ResultRow:
    pooled = math.hypot(est_lhs.stderr, est_rhs.stderr)
    ok = abs(est_lhs.estimate - est_rhs.estimate) <= 3.0 * pooled
    return ResultRow(
        experiment=name,
        estimate=est_lhs.estimate,
        stderr=pooled,
        ci_lo=est_lhs.estimate - 3.0 * pooled,
        ci_hi=est_lhs.estimate + 3.0 * pooled,
        reference=est_rhs.estimate,
        verdict=_pass(ok),
        reference_source=source,
        **cols,
    )


def _bound_row(name, est: EstimateWithCI, bound, source, **cols) -> ResultRow:
    ok = est.estimate <= bound + 3.0 * est.stderr
    return ResultRow(
        experiment=name,
        estimate=est.estimate,
        stderr=est.stderr,
        ci_lo=est.estimate - 3.0 * est.stderr,
        ci_hi=est.estimate + 3.0 * est.stderr,
        reference=bound,
        verdict=_pass(ok),
        reference_source=source,
        **cols,
    )


def _formula_row(name, est: EstimateWithCI, reference, source, **cols) -> ResultRow:
    return ResultRow(
        experiment=name,
        estimate=est.estimate,
        stderr=est.stderr,
        ci_lo=est.estimate - 3.0 * est.stderr,
        ci_hi=est.estimate + 3.0 * est.stderr,
        reference=reference,
        verdict=_pass(est.agrees_with(reference)),
        reference_source=source,
        **cols,
    )


def _exp_identity_covariance(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, n = float(p["rho"]), float(p["t"]), int(p["replicas"])
    j_lo, j_hi = int(p.get("z", 5)) * -1, int(p.get("z", 5))
    res = observables.estimate_two_point(
        rho, spec.rates, t, (j_lo, j_hi), n, RngStream(spec.seed),
        workers=workers, window=p.get("window"),
    )
    rows = []
    common = dict(rho=rho, p=spec.rates.p, q=spec.rates.q, t=t, replicas=n, seed=spec.seed)
    for k, j in enumerate(res.j_sites):
        rows.append(
            _identity_row(spec.name, res.covariance[k], res.q_scaled[k],
                          "two-point identity (Monte Carlo both sides)", z=int(j), **common)
        )
    ex = oracle.exact_second_class(6, rho, spec.rates, min(t, 1.0), 1e-12)
    rows.append(ResultRow(
        experiment=spec.name, rho=rho, p=spec.rates.p, q=spec.rates.q, t=min(t, 1.0),
        seed=spec.seed, estimate=ex.identity_residual(), stderr=0.0,
        reference=1e-10, verdict=_pass(ex.identity_residual() <= 1e-10),
        reference_source="exact pair-chain identity residual tolerance",
    ))
    artifacts = {"kind": spec.name, "j": res.j_sites,
                 "cov": [e.estimate for e in res.covariance],
                 "cov_se": [e.stderr for e in res.covariance],
                 "q_scaled": [e.estimate for e in res.q_scaled],
                 "q_se": [e.stderr for e in res.q_scaled]}
    return rows, artifacts


def _exp_identity_variance(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, z, n = float(p["rho"]), float(p["t"]), int(p.get("z", 0)), int(p["replicas"])
    chk = observables.variance_identity_check(
        rho, spec.rates, t, z, n, RngStream(spec.seed), workers=workers, window=p.get("window")
    )
    row = _identity_row(
        spec.name, chk.lhs, chk.rhs, "current-variance identity (Monte Carlo both sides)",
        rho=rho, p=spec.rates.p, q=spec.rates.q, t=t, z=z, replicas=n, seed=spec.seed,
    )
    return [row], {"kind": spec.name, "lhs": chk.lhs, "rhs": chk.rhs, "z": z}


def _exp_identity_derivative(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, z, n = float(p["rho"]), float(p["t"]), int(p.get("z", 0)), int(p["replicas"])
    delta = float(p["delta"])
    chk = observables.derivative_identity_check(
        rho, delta, spec.rates, t, z, n, RngStream(spec.seed),
        workers=workers, window=p.get("window"),
    )
    row = _identity_row(
        spec.name, chk.lhs, chk.rhs, "density-derivative identity (coupled central difference)",
        rho=rho, lam=rho - delta, p=spec.rates.p, q=spec.rates.q, t=t, z=z,
        replicas=n, seed=spec.seed,
    )
    return [row], {"kind": spec.name, "lhs": chk.lhs, "rhs": chk.rhs}


def _exp_mean_current(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, z, n = float(p["rho"]), float(p["t"]), int(p.get("z", 0)), int(p["replicas"])
    est = observables.mean_current_estimate(
        rho, spec.rates, t, z, n, RngStream(spec.seed), workers=workers, window=p.get("window")
    )
    ref = mean_current(rho, spec.rates, z, t)
    row = _formula_row(
        spec.name, est, ref, "t*flux(rho) - x*rho",
        rho=rho, p=spec.rates.p, q=spec.rates.q, t=t, z=z, replicas=n, seed=spec.seed,
    )
    return [row], {"kind": spec.name, "est": est, "ref": ref}


def _exp_mean_q(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, n = float(p["rho"]), float(p["t"]), int(p["replicas"])
    est = observables.mean_q_estimate(
        rho, spec.rates, t, n, RngStream(spec.seed), workers=workers, window=p.get("window")
    )
    ref = t * char_speed(rho, spec.rates)
    row = _formula_row(
        spec.name, est, ref, "t * flux'(rho)",
        rho=rho, p=spec.rates.p, q=spec.rates.q, t=t, replicas=n, seed=spec.seed,
    )
    return [row], {"kind": spec.name, "est": est, "ref": ref}


def _concavity_hists(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, n = float(p["rho"]), float(p["t"]), int(p["replicas"])
    lam = float(p.get("lam", rho / 2.0))
    if not 0.0 <= lam < rho:
        raise ValueError("need auxiliary density lam < rho")
    plan = auto_window(spec.rates, t)
    out = run_replicas(
        couplings.concavity_chunk,
        {"rho": rho, "lam": lam, "p": spec.rates.p, "q": spec.rates.q, "t": t,
         "plan": plan, "tag": 33},
        n, spec.seed, workers,
    )
    return out, plan, rho, lam, t, n


def _exp_coupling_order(spec: ExperimentSpec, workers: int):
    out, plan, rho, lam, t, n = _concavity_hists(spec, workers)
    row = ResultRow(
        experiment=spec.name, rho=rho, lam=lam, p=spec.rates.p, q=spec.rates.q, t=t,
        replicas=n, seed=spec.seed, estimate=float(out["violations"]), stderr=0.0,
        reference=0.0, verdict=_pass(out["violations"] == 0),
        reference_source="pathwise ordering of the tracked pair (hard assert)",
    )
    return [row], {"kind": spec.name, "violations": out["violations"]}


def two_sample_binned(h1: np.ndarray, h2: np.ndarray, alpha: float = 0.01,
                      min_expected: float = 10.0) -> tuple[float, float, int]:
    """Two-sample per-bin proportion test with Bonferroni correction.

    Lumps the support into bins with pooled expected count >= min_expected
    and returns (max |z|, corrected critical value, bins used).
    """
    n1, n2 = int(h1.sum()), int(h2.sum())
    pooled = h1 + h2
    keep = np.flatnonzero(pooled)
    lumps = []
    acc = 0
    start = keep[0]
    for idx in range(keep[0], keep[-1] + 1):
        acc += pooled[idx]
        if acc >= min_expected:
            lumps.append((start, idx))
            start = idx + 1
            acc = 0
    if acc > 0 and lumps:
        lumps[-1] = (lumps[-1][0], keep[-1])
    zs = []
    for a, b in lumps:
        c1 = h1[a : b + 1].sum()
        c2 = h2[a : b + 1].sum()
        p1, p2 = c1 / n1, c2 / n2
        pp = (c1 + c2) / (n1 + n2)
        se = math.sqrt(pp * (1 - pp) * (1 / n1 + 1 / n2))
        zs.append(abs(p1 - p2) / se if se > 0 else 0.0)
    crit = float(stats.norm.ppf(1.0 - alpha / (2 * len(lumps))))
    return float(max(zs)), crit, len(lumps)


def _exp_coupling_marginal(spec: ExperimentSpec, workers: int):
    out, plan, rho, lam, t, n = _concavity_hists(spec, workers)
    ref = run_replicas(
        observables.tracker_chunk,
        {"rho": rho, "p": spec.rates.p, "q": spec.rates.q, "t": t, "plan": plan,
         "overrides": {0: 0.0}, "tag": 34},
        n, spec.seed, workers,
    )
    max_z, crit, bins = two_sample_binned(out["hist_dense"], ref["q_hist"])
    row = ResultRow(
        experiment=spec.name, rho=rho, lam=lam, p=spec.rates.p, q=spec.rates.q, t=t,
        replicas=n, seed=spec.seed, estimate=max_z, stderr=0.0, reference=crit,
        verdict=_pass(max_z <= crit and out["violations"] == 0),
        reference_source=f"two-sample critical value, {bins} bins, corrected alpha 0.01",
    )
    arts = {"kind": spec.name, "sites": plan.segment.sites(),
            "hist_new": out["hist_dense"], "hist_ref": ref["q_hist"], "n": n}
    return [row], arts


def _exp_label_tail(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, n = float(p["rho"]), float(p["t"]), int(p["replicas"])
    lam = float(p.get("lam", rho / 2.0))
    ks = [int(k) for k in p.get("k", [1, 2, 3, 4, 5, 6])]
    rows = []
    arts = {"kind": spec.name, "sides": {}}
    for side, sign in (("upper", 1), ("lower", -1)):
        res = couplings.measure_label_tail(
            rho, spec.rates, t, ks, n, RngStream(spec.seed), lam=lam, side=side,
            workers=workers,
        )
        for k, tail, se, bound in zip(res.k_values, res.tails, res.stderrs, res.bounds):
            rows.append(_bound_row(
                spec.name, EstimateWithCI(float(tail), float(se), n), float(bound),
                "label-walk geometric domination bound exp(-2 theta k)",
                rho=rho, lam=lam, p=spec.rates.p, q=spec.rates.q, t=t,
                m=int(sign * k), replicas=n, seed=spec.seed,
            ))
        arts["sides"][side] = res
    return rows, arts


def _exp_rw_environment(spec: ExperimentSpec, workers: int):
    p = spec.params
    n = int(p["replicas"])
    t = float(p.get("t", 5.0))
    ks = [int(k) for k in p.get("k", [1, 2, 3, 4, 5, 6, 7, 8])]
    rates = spec.rates
    theta = rates.theta
    stream = RngStream(spec.seed)
    span = int(math.ceil(t + 8 * math.sqrt(t))) + 12
    schedules = [oracle.EnvironmentSchedule(1)]
    for i in range(3):
        schedules.append(
            oracle.adversarial_schedule(range(-4 * span, span + 1), t, 10, stream.child(50 + i))
        )
    rows = []
    arts = {"kind": spec.name, "schedules": []}
    for idx, sched in enumerate(schedules):
        ys = oracle.simulate_reflected_walk(
            sched, rates, t, "geometric", stream.child(60 + idx), samples=n
        )
        kmax = 15
        counts = np.bincount(np.minimum(-ys, kmax), minlength=kmax + 1).astype(np.float64)
        probs = np.array([oracle.geometric_pi(j, rates) for j in range(kmax)] + [0.0])
        probs[kmax] = max(1.0 - probs.sum(), 0.0)
        expect = probs * n
        while len(expect) > 2 and expect[-1] < 5.0:  # lump the thin tail bins
            expect[-2] += expect[-1]
            counts[-2] += counts[-1]
            expect, counts = expect[:-1], counts[:-1]
        if len(expect) >= 2:
            expect *= counts.sum() / expect.sum()
            chi_p = float(stats.chisquare(counts, expect).pvalue)
        else:  # degenerate law (e.g. q = 0): the marginal is a point mass
            chi_p = 1.0 if counts[0] == n else 0.0
        rows.append(ResultRow(
            experiment=spec.name, p=rates.p, q=rates.q, t=t, z=idx, replicas=n,
            seed=spec.seed, estimate=chi_p, stderr=0.0, reference=0.01,
            verdict=_pass(chi_p >= 0.01),
            reference_source="chi-square significance for the geometric marginal",
        ))
        zs = oracle.simulate_reflected_walk(
            sched, rates, t, 0, stream.child(70 + idx), samples=n, reflected=False
        )
        for k in ks:
            tail = float(np.mean(zs <= -k))
            se = math.sqrt(tail * (1 - tail) / n)
            rows.append(_bound_row(
                spec.name, EstimateWithCI(tail, se, n), math.exp(-2 * theta * k),
                "walk lower-tail bound exp(-2 theta k)",
                p=rates.p, q=rates.q, t=t, z=idx, m=k, replicas=n, seed=spec.seed,
            ))
        arts["schedules"].append((idx, counts, expect, ys))
    return rows, arts


def _exp_scaling_psi(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, n = float(p["rho"]), int(p["replicas"])
    t_list = [float(t) for t in p["t"]]
    series = observables.psi_series(
        rho, spec.rates, t_list, n, RngStream(spec.seed), workers=workers,
        window=p.get("window"),
    )
    fit = observables.fit_exponent(series)
    rows = []
    common = dict(rho=rho, p=spec.rates.p, q=spec.rates.q, replicas=n, seed=spec.seed)
    for t_k, est in zip(series.t_values, series.estimates):
        rows.append(ResultRow(
            experiment=spec.name, t=float(t_k), estimate=est.estimate, stderr=est.stderr,
            ci_lo=est.ci_lo, ci_hi=est.ci_hi, verdict="N-A",
            reference_source="centered absolute moment (no closed form)", **common,
        ))
    slope_ok = 0.55 <= fit.slope <= 0.78
    rows.append(ResultRow(
        experiment=spec.name, estimate=fit.slope, stderr=fit.stderr, reference=2.0 / 3.0,
        ci_lo=fit.slope - 3 * fit.stderr, ci_hi=fit.slope + 3 * fit.stderr,
        verdict=_pass(slope_ok),
        reference_source="log-log slope, acceptance band [0.55, 0.78]", **common,
    ))
    ratios = [e.estimate / tk ** (2.0 / 3.0) for tk, e in zip(series.t_values, series.estimates)]
    band = max(ratios) / min(ratios)
    rows.append(ResultRow(
        experiment=spec.name, estimate=band, stderr=0.0, reference=2.0,
        verdict=_pass(band <= 2.0), m=1,
        reference_source="max/min of psi / t^(2/3) across the grid (factor-2 band)", **common,
    ))
    arts = {"kind": spec.name, "series": series, "fit": fit, "ratios": ratios}
    return rows, arts


def ring_occupancy_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Occupancy-vector counts for a ring evolved to time t."""
    from . import _kernels

    n = params["sites"]
    init = params["init"]
    p, q, t = params["p"], params["q"], params["t"]
    lam = float(n) * (p + q)
    counts = np.zeros(1 << n, dtype=np.int64)
    powers = 1 << np.arange(n)
    act_lo = np.zeros(1, dtype=np.int64)
    act_hi = np.full(1, n - 1, dtype=np.int64)
    e0 = np.zeros(0, dtype=np.int64)
    layers = np.empty((1, n), dtype=np.uint8)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        layers[0, :] = init
        n_ev = gen.poisson(lam * t)
        _kernels.evolve_layers(
            layers, act_lo, act_hi, e0, e0, e0, e0.copy(), e0.copy(),
            True, p, q, n_ev, 0, gen,
        )
        counts[int(layers[0] @ powers)] += 1
    return {"counts": counts, "n": hi - lo}


def _exp_oracle_compare(spec: ExperimentSpec, workers: int):
    from .engine import NearestNeighbor

    p = spec.params
    n_sites = int(p.get("z", 6))
    n_particles = int(p.get("m", 3))
    t, n = float(p["t"]), int(p["replicas"])
    ring = Ring(n_sites)
    init_sites = [round(i * n_sites / n_particles) for i in range(n_particles)]
    init = Configuration.from_sites(ring, init_sites)
    exact = oracle.exact_distribution(init, NearestNeighbor(spec.rates), ring, t, 1e-12)
    out = run_replicas(
        ring_occupancy_chunk,
        {"sites": n_sites, "init": init.occupancy, "p": spec.rates.p, "q": spec.rates.q,
         "t": t, "tag": 41},
        n, spec.seed, workers,
    )
    emp = out["counts"] / out["n"]
    tv = 0.5 * float(np.abs(emp - exact).sum())
    row = ResultRow(
        experiment=spec.name, p=spec.rates.p, q=spec.rates.q, t=t, z=n_sites,
        m=n_particles, replicas=n, seed=spec.seed, estimate=tv, stderr=0.0,
        reference=0.01, verdict=_pass(tv <= 0.01),
        reference_source="total variation against the exact transient law",
    )
    return [row], {"kind": spec.name, "emp": emp, "exact": exact, "tv": tv}


def _exp_window_doubling(spec: ExperimentSpec, workers: int):
    p = spec.params
    rho, t, n = float(p["rho"]), float(p["t"]), int(p["replicas"])
    z = int(p.get("z", 0))
    rates = spec.rates
    j_sites = list(range(-5, 6))
    x_sites = [0, z] if z != 0 else [0]
    obs_lo, obs_hi = min(-5, z, 0), max(5, z, 0)
    plan_small = auto_window(rates, t, obs_lo, obs_hi)
    plan_big = auto_window(rates, t, obs_lo, obs_hi, scale=2.0)
    base = {"rho": rho, "p": rates.p, "q": rates.q, "t": t,
            "plan_big": plan_big, "plan_small": plan_small}
    st = run_replicas(
        observables.doubling_stationary_chunk,
        {**base, "x_sites": x_sites, "j_sites": j_sites, "tag": 43},
        n, spec.seed, workers,
    )
    tr = run_replicas(
        observables.doubling_tracker_chunk, {**base, "tag": 44}, n, spec.seed, workers
    )
    rows = []
    common = dict(rho=rho, p=rates.p, q=rates.q, t=t, replicas=n, seed=spec.seed)

    def add(label_z, label_m, big_est, small_est, what):
        delta = abs(big_est.estimate - small_est.estimate)
        rows.append(ResultRow(
            experiment=spec.name, z=label_z, m=label_m, estimate=delta,
            stderr=small_est.stderr, reference=small_est.stderr,
            verdict=_pass(delta < small_est.stderr),
            reference_source=f"single-window stderr of {what}", **common,
        ))

    nrep = st["n"]
    for k, j in enumerate(j_sites):  # covariance members (criterion-2 inputs)
        ests = []
        for w in (0, 1):
            mean = st["z_sum2"][w, k] / nrep
            var = max(st["z_sq2"][w, k] / nrep - mean * mean, 0.0) * nrep / (nrep - 1)
            ests.append(EstimateWithCI(mean, math.sqrt(var / nrep), nrep))
        add(j, 1, ests[0], ests[1], f"Cov[w_{j}(t), w_0(0)]")
    for k, x in enumerate(x_sites):  # mean and variance of the current
        for which, mcode in (("mean", 2), ("var", 3)):
            ests = []
            for w in (0, 1):
                sums = st["j_sums2"][w, :, k].astype(np.float64)
                if which == "mean":
                    mean = sums[0] / nrep
                    var = max(sums[1] / nrep - mean * mean, 0.0) * nrep / (nrep - 1)
                    ests.append(EstimateWithCI(mean, math.sqrt(var / nrep), nrep))
                else:
                    ests.append(observables._variance_estimate(sums, nrep))
            add(x, mcode, ests[0], ests[1], f"{which} of J_{x}(t)")
    seg = plan_big.segment
    for center, mcode in ((z, 4), (None, 5)):  # E|Q-z| and E Q
        ests = []
        for w in (0, 1):
            if center is None:
                mean, se, m = observables._hist_stats(tr["q_hist2"][w], seg, lambda s: s)
            else:
                mean, se, m = observables._hist_stats(
                    tr["q_hist2"][w], seg, lambda s: np.abs(s - center)
                )
            ests.append(EstimateWithCI(mean, se, m))
        what = f"E|Q(t)-{center}|" if center is not None else "E Q(t)"
        add(z if center is not None else 0, mcode, ests[0], ests[1], what)
    return rows, {"kind": spec.name}


_DISPATCH = {
    "identity-covariance": _exp_identity_covariance,
    "identity-variance": _exp_identity_variance,
    "identity-derivative": _exp_identity_derivative,
    "mean-current": _exp_mean_current,
    "mean-q": _exp_mean_q,
    "coupling-order": _exp_coupling_order,
    "coupling-marginal": _exp_coupling_marginal,
    "label-tail": _exp_label_tail,
    "rw-environment": _exp_rw_environment,
    "scaling-psi": _exp_scaling_psi,
    "oracle-compare": _exp_oracle_compare,
    "window-doubling": _exp_window_doubling,
}


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> tuple[list[ResultRow], dict]:
    """Run one named experiment; returns (rows, figure artifacts)."""
    return _DISPATCH[spec.name](spec, workers)
