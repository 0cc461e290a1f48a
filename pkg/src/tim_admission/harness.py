"""Topology generation, topology files, single solves and experiment sweeps.

Topology files are plain text: a header line ``K L`` followed by ``L``
lines ``i j``, one directed interfering pair per line, 1-based, sorted.
Blank lines and lines starting with ``#`` are ignored on reading.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .admission import (
    ORACLE_MAX_K,
    AdmissionConfig,
    exhaustive_oracle,
    orthogonal_baseline,
    run_pipeline,
)
from .objectives import NetworkTopology

__all__ = [
    "gen_topology",
    "format_topology",
    "parse_topology",
    "read_topology",
    "write_topology",
    "instance_seed",
    "ExperimentSpec",
    "SWEEP_COLUMNS",
    "solve_report",
    "run_sweep",
    "sweep_to_csv",
]

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("K", "links", "r", "lambda", "method", "mean_admitted", "stderr", "n")
METHODS = ("pipeline", "oracle", "baseline")


def gen_topology(K: int, link_count: int, seed=None) -> NetworkTopology:
    """Uniformly random set of ``link_count`` distinct ordered pairs ``i != j``."""
    pairs = [(i, j) for i in range(1, K + 1) for j in range(1, K + 1) if i != j]
    if not 0 <= link_count <= len(pairs):
        raise ValueError(f"link_count must lie in [0, {len(pairs)}] for K={K}, got {link_count}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pairs), size=link_count, replace=False)
    return NetworkTopology(K, frozenset(pairs[k] for k in idx))


def format_topology(topo: NetworkTopology) -> str:
    lines = [f"{topo.K} {len(topo)}"]
    lines += [f"{i} {j}" for i, j in topo.sorted_links()]
    return "\n".join(lines) + "\n"


def parse_topology(text: str) -> NetworkTopology:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected two integers, got {line!r}")
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ValueError(f"line {lineno}: expected two integers, got {line!r}") from None
    if not rows:
        raise ValueError("missing header line 'K L'")
    (K, L), links = rows[0], rows[1:]
    if len(links) != L:
        raise ValueError(f"header declares {L} links, found {len(links)}")
    return NetworkTopology.from_pairs(K, links)


def read_topology(path) -> NetworkTopology:
    with open(path) as fh:
        return parse_topology(fh.read())


def write_topology(path, topo: NetworkTopology):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_topology(topo))


def instance_seed(master_seed: int, index: int) -> int:
    """Independent, individually re-runnable seed of realization ``index``."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


def solve_report(topo: NetworkTopology, cfg: AdmissionConfig, emit="json") -> str:
    """Run the pipeline and render it as JSON or CSV text."""
    res = run_pipeline(topo, cfg)
    data = res.to_dict()
    data.update(K=topo.K, links=len(topo), r=cfg.r, seed=cfg.seed, mode="scan" if cfg.scan else "bisection")
    if emit == "json":
        return json.dumps(data, sort_keys=True, indent=2) + "\n"
    if emit == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "links", "r", "seed", "N0", "admitted", "residual"])
        w.writerow([topo.K, len(topo), cfg.r, cfg.seed, res.N0, " ".join(map(str, res.admitted)),
                    repr(res.feasibility_residual)])
        return buf.getvalue()
    raise ValueError(f"unknown emit format {emit!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    K: int = 8
    link_count: int = 45
    r_values: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    lambda_values: tuple = (0.5,)
    realizations: int = 50
    seed: int = 0
    mode: str = "all"
    base: AdmissionConfig = field(default_factory=lambda: AdmissionConfig(r=1))

    def __post_init__(self):
        if not 0 <= self.link_count <= self.K * (self.K - 1):
            raise ValueError("link_count must not exceed K(K-1)")
        if self.realizations < 1:
            raise ValueError("realizations must be at least 1")
        if self.mode not in METHODS + ("all",):
            raise ValueError(f"unknown mode {self.mode!r}")
        if any(r < 1 or r > self.K for r in self.r_values):
            raise ValueError("every rank must lie in [1, K]")

    def methods(self):
        if self.mode == "all":
            ms = METHODS
        else:
            ms = (self.mode,)
        if self.K > ORACLE_MAX_K:
            ms = tuple(m for m in ms if m != "oracle")
        return ms


def _run_cell(task):
    """One (r, realization) unit: oracle once, pipeline for every lambda."""
    spec, r, idx = task
    seed = instance_seed(spec.seed, idx)
    topo = gen_topology(spec.K, spec.link_count, seed)
    methods = spec.methods()
    out = {}
    for lam in spec.lambda_values:
        cfg = replace(spec.base, r=r, seed=seed, params=replace(spec.base.params, lam=lam))
        if "pipeline" in methods:
            try:
                out[("pipeline", lam)] = run_pipeline(topo, cfg).N0
            except Exception as exc:  # counted as a failure, excluded from means
                log.warning("pipeline failed (r=%d, realization=%d, lambda=%g): %s", r, idx, lam, exc)
                out[("pipeline", lam)] = None
        if "baseline" in methods:
            out[("baseline", lam)] = orthogonal_baseline(spec.K, r)
    if "oracle" in methods:
        cfg = replace(spec.base, r=r, seed=seed)
        try:
            nmax = exhaustive_oracle(topo, cfg)[0]
        except Exception as exc:
            log.warning("oracle failed (r=%d, realization=%d): %s", r, idx, exc)
            nmax = None
        for lam in spec.lambda_values:
            out[("oracle", lam)] = nmax
    return out


def run_sweep(spec: ExperimentSpec, jobs: int = 1):
    """Per-instance admitted counts.

    Returns ``(rows, samples)``: ``rows`` are dicts keyed by
    :data:`SWEEP_COLUMNS`, ordered by (r, lambda, method); ``samples`` maps
    ``(r, lambda, method)`` to the list of per-realization counts (``None``
    marks a failed solve).
    """
    tasks = [(spec, r, idx) for r in spec.r_values for idx in range(spec.realizations)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, tasks, chunksize=1))
    else:
        results = [_run_cell(t) for t in tasks]

    samples = {}
    for (_, r, _), out in zip(tasks, results):
        for (method, lam), v in out.items():
            samples.setdefault((r, lam, method), []).append(v)

    rows = []
    for r in spec.r_values:
        for lam in spec.lambda_values:
            for method in spec.methods():
                vals = samples[(r, lam, method)]
                ok = np.array([v for v in vals if v is not None], dtype=float)
                failed = len(vals) - len(ok)
                if failed:
                    log.warning("%d of %d %s solves failed at r=%d, lambda=%g", failed, len(vals), method, r, lam)
                n = len(ok)
                mean = float(ok.mean()) if n else math.nan
                se = float(ok.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                rows.append(dict(zip(SWEEP_COLUMNS, (spec.K, spec.link_count, r, lam, method, mean, se, n))))
    return rows, samples


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
