"""Batch driver: ``rbmlab --config run.yaml [--out DIR] COMMAND [COMMAND ...]``.

One YAML config drives every command; ``--set key.sub=value`` flags and
``RBMLAB_KEY__SUB=value`` environment variables override config keys (flags
win over the environment).  Each command writes CSV/JSON into
``OUT/<command>/`` and a ``summary.json`` listing every file with its
SHA-256.  The exit status is nonzero iff a command raised or one of its
checks failed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .discretize import assemble_neumann, assemble_part, write_operator
from .exhaust import build_ladder, certified_kernel, limit_kernel, part_kernel
from .geometry import (DomainError, DomainSpec, TruncationScheme, build_domain, build_grid,
                       bundled_domain, bundled_domains)
from .simulate import (Ball, Registrations, displacement_tail, kato_modulus, mc_exit_tail,
                       mc_kernel, mc_local_time, sample_paths)
from .spectral import eigensolve, heat_kernel
from .verify import (fit_exit_bound, fit_gaussian_bound, fit_kato_rate, quarter_time,
                     sobolev_scan)

log = logging.getLogger("rbmlab")

ENV_PREFIX = "RBMLAB_"
MC_COMMANDS = {"simulate", "local-time", "verify-exit", "verify-quarter"}

DEFAULTS: dict[str, Any] = {
    "domain": "square",
    "grid": {"h": 1.0 / 32, "max_cells": 400_000},
    "eigen": {"K": None, "dense_max": 2500, "dump_vectors": 0},
    "times": [0.05, 0.1, 0.2, 0.5, 1.0],
    "points": [[0.25, 0.25], [0.5, 0.5], [0.75, 0.4]],
    "part": {"kind": "ball", "center": [0.5, 0.5], "radius": 0.3},
    "exhaust": {"scheme": "ball", "levels": [0.3, 0.45, 2.0], "R": 0.1, "eps": 0.2,
                "center": [0.5, 0.5], "margin": 0.1, "K": None, "t_target": None,
                "samples": 50, "t_range": [0.05, 0.5], "tol": 1e-3},
    "mc": {"delta": 1e-4, "paths": 10_000, "seed": None, "eps_list": [0.02, 0.01],
           "checkpoint_times": [0.05, 0.1], "x0": [0.5, 0.5], "radii": [0.1, 0.2],
           "exit_times": [0.005, 0.01, 0.02, 0.04, 0.08], "bridge": False,
           "quarter_ratios": [0.1, 0.2, 0.3, 0.35, 0.4, 0.5]},
    "kato": {"times": [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1], "mask": "all"},
    "sobolev": {"p": 4.0, "truncations": [4.0, 16.0], "h": 0.05, "restarts": 20,
                "iters": 2000, "seed": 0},
    "threads": 1,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value: Any) -> None:
    keys = [k for k in dotted.split(".") if k]
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def env_overrides(environ: dict[str, str] | None = None) -> dict[str, Any]:
    """``RBMLAB_MC__PATHS=1000`` becomes ``{"mc.paths": 1000}`` (values parsed as YAML)."""
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX) and len(k) > len(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = yaml.safe_load(v)
    return out


def load_config(path: str | Path | None, sets: list[str] | None = None,
                environ: dict[str, str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        cfg = _merge(cfg, doc)
        base_dir = path.resolve().parent
    for k, v in env_overrides(environ).items():
        _set_path(cfg, k, v)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg, k.strip(), yaml.safe_load(v))
    cfg["_base_dir"] = str(base_dir)
    return cfg


def resolve_domain(cfg: dict) -> DomainSpec:
    spec = cfg["domain"]
    if isinstance(spec, dict):
        return build_domain(spec)
    spec = str(spec)
    cand = Path(spec)
    if not cand.is_absolute():
        cand = Path(cfg.get("_base_dir", ".")) / cand
    if cand.is_file():
        return build_domain(cand.read_text())
    if spec in bundled_domains():
        return bundled_domain(spec)
    raise ConfigError(f"domain {spec!r} is neither a file nor a bundled domain {bundled_domains()}")


def validate(cfg: dict, commands: list[str]) -> list[str]:
    """All problems with the config, collected before any computation."""
    errs = []
    unknown = [c for c in commands if c not in COMMANDS]
    if unknown:
        errs.append(f"unknown command(s) {unknown}; choose from {sorted(COMMANDS)}")
    try:
        resolve_domain(cfg)
    except (ConfigError, DomainError) as exc:
        errs.append(f"domain: {exc}")

    def positive(path, v, allow_none=False):
        if v is None and allow_none:
            return
        try:
            ok = float(v) > 0
        except (TypeError, ValueError):
            ok = False
        if not ok:
            errs.append(f"{path} must be a positive number, got {v!r}")

    positive("grid.h", cfg["grid"].get("h"))
    positive("eigen.K", cfg["eigen"].get("K"), allow_none=True)
    for t in cfg.get("times", []):
        positive("times[]", t)
    mc = cfg["mc"]
    positive("mc.delta", mc.get("delta"))
    positive("mc.paths", mc.get("paths"))
    for e in mc.get("eps_list", []):
        positive("mc.eps_list[]", e)
    try:
        threads = int(cfg.get("threads", 1))
        if threads < 1:
            raise ValueError
    except (TypeError, ValueError):
        errs.append(f"threads must be a positive integer, got {cfg.get('threads')!r}")
    if MC_COMMANDS.intersection(commands):
        seed = mc.get("seed")
        if seed is None:
            errs.append("mc.seed is required for Monte Carlo commands (use --seed or mc.seed)")
        else:
            try:
                if int(seed) < 0 or int(seed) >= 2 ** 64:
                    raise ValueError
            except (TypeError, ValueError):
                errs.append(f"mc.seed must be an unsigned 64-bit integer, got {seed!r}")
    sob = cfg["sobolev"]
    if "verify-sobolev" in commands:
        try:
            if float(sob["p"]) <= 2:
                errs.append("sobolev.p must exceed 2")
        except (TypeError, ValueError):
            errs.append("sobolev.p must be a number")
    return errs


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@dataclass
class Output:
    root: Path
    files: list[Path] = field(default_factory=list)

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.root / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.files.append(path)
        return path

    def json(self, name: str, obj) -> Path:
        path = self.root / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.files.append(path)
        return path

    def add(self, path: Path) -> None:
        self.files.append(Path(path))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o)}")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands


@dataclass
class Context:
    cfg: dict
    out: Output
    domain: DomainSpec
    _cache: dict = field(default_factory=dict)

    @property
    def threads(self) -> int:
        return int(self.cfg.get("threads", 1))

    @property
    def seed(self) -> int:
        return int(self.cfg["mc"]["seed"])

    def grid(self):
        if "grid" not in self._cache:
            g = self.cfg["grid"]
            self._cache["grid"] = build_grid(self.domain, float(g["h"]),
                                             max_cells=int(g.get("max_cells", 400_000)))
        return self._cache["grid"]

    def neumann(self):
        if "sd" not in self._cache:
            e = self.cfg["eigen"]
            K = e.get("K")
            self._cache["sd"] = eigensolve(assemble_neumann(self.grid()),
                                           None if K is None else int(K),
                                           dense_max=int(e.get("dense_max", 2500)))
        return self._cache["sd"]

    def point_cells(self):
        g = self.grid()
        pts = np.asarray(self.cfg["points"], dtype=float).reshape(-1, 2)
        return g.locate(pts)


def cmd_grid(ctx: Context) -> bool:
    g = ctx.grid()
    ctx.out.csv("cells.csv", ["cell", "x", "y", "measure"],
                ((k, c[0], c[1], m) for k, (c, m) in enumerate(zip(g.centers, g.measure))))
    ctx.out.csv("faces.csv", ["i", "j", "transmissibility"],
                ((f[0], f[1], w) for f, w in zip(g.faces, g.trans)))
    ctx.out.csv("boundary_faces.csv", ["cell", "length", "x", "y"],
                ((c, l, m[0], m[1]) for c, l, m in zip(g.bface_cell, g.bface_length, g.bface_mid)))
    ctx.out.json("grid.json", {"h": g.h, "n_cells": g.n_cells, "total_measure": g.total_measure,
                               "domain_area": ctx.domain.area,
                               "polygon_area": ctx.domain.polygon_area,
                               "boundary_length": g.boundary_length,
                               "polygon_perimeter": ctx.domain.perimeter})
    if ctx.cfg.get("dump_operator"):
        for p in write_operator(assemble_neumann(g), ctx.out.root / "operator.txt"):
            ctx.out.add(p)
    return True


def cmd_eig(ctx: Context) -> bool:
    sd = ctx.neumann()
    ctx.out.csv("eigenvalues.csv", ["k", "lambda"], ((k + 1, v) for k, v in enumerate(sd.lam)))
    nvec = int(ctx.cfg["eigen"].get("dump_vectors", 0) or 0)
    if nvec > 0:
        nvec = min(nvec, sd.K)
        ctx.out.csv("eigenvectors.csv", ["cell"] + [f"phi_{k + 1}" for k in range(nvec)],
                    ([c] + list(sd.phi[c, :nvec]) for c in range(sd.n)))
    ctx.out.json("eig.json", {"K": sd.K, "n": sd.n, "method": sd.method, "residual": sd.residual,
                              "t_min": sd.t_min, "lambda_1": float(sd.lam[0])})
    return bool(sd.lam[0] >= -1e-10)


def _kernel_rows(sd, cells, times, offset_cells=None):
    rows = []
    loc = sd.op.local_index(cells)
    for t in times:
        if t < sd.t_min:
            continue
        for a, ia in zip(cells, loc):
            for b, ib in zip(cells, loc):
                ke = heat_kernel(sd, t, ia, ib)
                rows.append((t, a, b, ke.scalar(), float(np.ravel(ke.tail)[0])))
    return rows


def cmd_kernel(ctx: Context) -> bool:
    sd = ctx.neumann()
    cells = ctx.point_cells()
    rows = _kernel_rows(sd, cells, ctx.cfg["times"])
    ctx.out.csv("kernel.csv", ["t", "i", "j", "value", "tail"], rows)
    return all(r[3] >= 0 for r in rows)


def _mask_from(ctx: Context, spec: dict):
    g = ctx.grid()
    kind = spec.get("kind", "ball")
    if kind == "ball":
        return g.ball_mask(float(spec["radius"]), tuple(spec.get("center", (0.0, 0.0))))
    if kind == "cut":
        return g.cut_mask(float(spec["x"]))
    if kind == "all":
        return g.all_mask()
    raise ConfigError(f"unknown mask kind {kind!r}")


def cmd_part(ctx: Context) -> bool:
    g = ctx.grid()
    U = _mask_from(ctx, ctx.cfg["part"])
    sdU = eigensolve(assemble_part(g, U), dense_max=int(ctx.cfg["eigen"].get("dense_max", 2500)))
    sd = ctx.neumann()
    cells = [c for c in ctx.point_cells() if U.cells[c]]
    rows, ok = [], True
    for t in ctx.cfg["times"]:
        for a in cells:
            for b in cells:
                pk = part_kernel(g, U, t, a, b, sd=sdU).scalar()
                full = heat_kernel(sd, t, *sd.op.local_index([a, b])).scalar()
                ok &= pk <= full + 1e-10 * max(1.0, full)
                rows.append((t, a, b, pk, full))
    ctx.out.csv("part_kernel.csv", ["t", "i", "j", "part", "ambient"], rows)
    ctx.out.json("part.json", {"mask": U.name, "cells": U.count, "lambda_1": float(sdU.lam[0]),
                               "dominated": bool(ok)})
    return bool(ok)


def cmd_exhaust(ctx: Context) -> bool:
    e = ctx.cfg["exhaust"]
    g = ctx.grid()
    scheme = TruncationScheme(e["scheme"], tuple(e["levels"]), tuple(e.get("center", (0.0, 0.0))))
    lad = build_ladder(g, scheme, float(e["R"]), float(e["eps"]), e.get("K"),
                       t_target=e.get("t_target"), center=tuple(e.get("center", (0.0, 0.0))),
                       margin=float(e.get("margin", 1.0)))
    rng = np.random.default_rng(int(ctx.cfg["mc"].get("seed") or 0))
    win = lad.window_cells()
    lo, hi = (float(v) for v in e["t_range"])
    lo = max(lo, lad.t_min)
    rows, ok = [], True
    for _ in range(int(e["samples"])):
        t = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        x, y = (int(v) for v in rng.choice(win, 2))
        lim = limit_kernel(lad, t, x, y, float(e["tol"]))
        prev = None
        for n in range(1, lad.n_levels + 1):
            ck = certified_kernel(lad, n, t, x, y)
            rows.append((n, t, x, y, ck.value, ck.certificate, ck.c_hat, lim.n_used))
            if prev is not None:
                inc = ck.value - prev.value
                slack = ck.error + prev.error
                ok &= inc >= -slack and inc <= prev.certificate + slack
            prev = ck
    ctx.out.csv("exhaust.csv", ["n", "t", "x", "y", "value", "certificate", "C_hat", "n_used"], rows)
    ctx.out.json("exhaust.json", {"levels": [m.name for m in lad.masks],
                                  "K": [sd.K for sd in lad.sds],
                                  "t_min": [sd.t_min for sd in lad.sds],
                                  "window_cells": int(len(win)), "checks_passed": bool(ok)})
    return bool(ok)


def cmd_simulate(ctx: Context) -> bool:
    mc = ctx.cfg["mc"]
    x0 = tuple(float(v) for v in mc["x0"])
    times = [float(t) for t in mc["exit_times"]]
    rows = []
    for r in mc["radii"]:
        tl = mc_exit_tail(ctx.domain, x0, float(r), times, float(mc["delta"]), int(mc["paths"]),
                          ctx.seed, threads=ctx.threads, bridge=bool(mc.get("bridge", False)))
        rows += [(r, t, p, s) for t, p, s in zip(tl.times, tl.p_hat, tl.stderr)]
    ctx.out.csv("exit_tails.csv", ["r", "t", "p_hat", "stderr"], rows)
    t_k = float(mc["checkpoint_times"][-1])
    hist = mc_kernel(ctx.domain, x0, t_k, ctx.grid(), float(mc["delta"]), int(mc["paths"]),
                     ctx.seed, threads=ctx.threads)
    ctx.out.csv("kernel_histogram.csv", ["cell", "density", "stderr"],
                ((c, d, s) for c, (d, s) in enumerate(zip(hist.density, hist.stderr))))
    return True


def cmd_local_time(ctx: Context) -> bool:
    mc = ctx.cfg["mc"]
    st = mc_local_time(ctx.domain, tuple(mc["x0"]), tuple(mc["checkpoint_times"]),
                       tuple(float(e) for e in mc["eps_list"]), float(mc["delta"]),
                       int(mc["paths"]), ctx.seed, threads=ctx.threads)
    rows = [(T, e, st.mean[i, j], st.stderr[i, j])
            for j, T in enumerate(st.T) for i, e in enumerate(st.eps)]
    ctx.out.csv("local_time.csv", ["T", "eps", "mean", "stderr"], rows)
    ctx.out.json("local_time.json", {"flags": list(st.flags),
                                     "extrapolated": st.extrapolated,
                                     "extrapolated_se": st.extrapolated_se})
    return True


def _kato_curve(ctx: Context):
    g = ctx.grid()
    sd = ctx.neumann()
    kspec = ctx.cfg["kato"].get("mask", "all")
    K = g.all_mask() if kspec == "all" else _mask_from(ctx, kspec)
    return kato_modulus(sd, g, K, np.asarray(ctx.cfg["kato"]["times"], dtype=float))


def cmd_kato(ctx: Context) -> bool:
    kc = _kato_curve(ctx)
    ctx.out.csv("kato.csv", ["t", "modulus"], zip(kc.times, kc.modulus))
    return True


def cmd_verify_gaussian(ctx: Context) -> bool:
    sd = ctx.neumann()
    g = ctx.grid()
    cells = ctx.point_cells()
    rows = _kernel_rows(sd, cells, ctx.cfg["times"])
    ctx.out.csv("gaussian_samples.csv", ["t", "i", "j", "value", "tail"], rows)
    t = np.array([r[0] for r in rows])
    xi = g.centers[[r[1] for r in rows]]
    yi = g.centers[[r[2] for r in rows]]
    fit = fit_gaussian_bound(t, xi, yi, np.array([r[3] for r in rows]),
                             window={"times": ctx.cfg["times"]})
    ctx.out.json("gaussian_fit.json", fit.to_dict())
    return fit.ok


def cmd_verify_exit(ctx: Context) -> bool:
    mc = ctx.cfg["mc"]
    x0 = tuple(float(v) for v in mc["x0"])
    rr, tt, pp, ss = [], [], [], []
    for r in mc["radii"]:
        tl = mc_exit_tail(ctx.domain, x0, float(r), mc["exit_times"], float(mc["delta"]),
                          int(mc["paths"]), ctx.seed, threads=ctx.threads)
        rr += [float(r)] * len(tl.times)
        tt += list(tl.times)
        pp += list(tl.p_hat)
        ss += list(tl.stderr)
    ctx.out.csv("exit_tails.csv", ["r", "t", "p_hat", "stderr"], zip(rr, tt, pp, ss))
    fit = fit_exit_bound(rr, tt, pp, ss, window={"x": x0})
    ctx.out.json("exit_fit.json", fit.to_dict())
    return fit.ok


def cmd_verify_quarter(ctx: Context) -> bool:
    mc = ctx.cfg["mc"]
    x0 = np.asarray(mc["x0"], dtype=float)
    rows = []
    for r in mc["radii"]:
        r = float(r)
        cks = sorted({float(q) * r * r for q in mc["quarter_ratios"]})
        delta = min(float(mc["delta"]), cks[0] / 10.0)
        ens = sample_paths(ctx.domain, x0, cks[-1], delta, int(mc["paths"]), ctx.seed,
                           Registrations(checkpoints=tuple(cks)), threads=ctx.threads)
        p, s = displacement_tail(ens, [r])
        rows += [(r, t, p[k, 0], s[k, 0]) for k, t in enumerate(cks)]
    ctx.out.csv("displacement_tails.csv", ["r", "t", "p_hat", "stderr"], rows)
    arr = np.array(rows)
    fit = quarter_time(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], window={"x": x0.tolist()})
    ctx.out.json("quarter_fit.json", fit.to_dict())
    return fit.ok


def cmd_verify_kato(ctx: Context) -> bool:
    kc = _kato_curve(ctx)
    ctx.out.csv("kato.csv", ["t", "modulus"], zip(kc.times, kc.modulus))
    fit = fit_kato_rate(kc.times, kc.modulus)
    d = fit.to_dict()
    d["flags"] = list(kc.flags)
    ctx.out.json("kato_fit.json", d)
    return fit.ok


def cmd_verify_sobolev(ctx: Context) -> bool:
    s = ctx.cfg["sobolev"]
    fit = sobolev_scan(ctx.domain, s["truncations"], float(s["p"]), float(s["h"]),
                       seed=int(s.get("seed", 0)), restarts=int(s.get("restarts", 20)),
                       iters=int(s.get("iters", 2000)))
    ctx.out.csv("sobolev.csv", ["truncation", "S"],
                zip(fit.window["truncations"], fit.constants["S"]))
    ctx.out.json("sobolev_fit.json", fit.to_dict())
    return fit.ok


def cmd_report(ctx: Context) -> bool:
    root = ctx.out.root.parent
    report = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and p.name != "report"):
        summ = sub / "summary.json"
        if summ.is_file():
            report[sub.name] = json.loads(summ.read_text())
    ctx.out.json("report.json", report)
    return all(v.get("status") == "ok" for v in report.values())


COMMANDS: dict[str, Callable[[Context], bool]] = {
    "grid": cmd_grid,
    "eig": cmd_eig,
    "kernel": cmd_kernel,
    "part": cmd_part,
    "exhaust": cmd_exhaust,
    "simulate": cmd_simulate,
    "local-time": cmd_local_time,
    "kato": cmd_kato,
    "verify-gaussian": cmd_verify_gaussian,
    "verify-exit": cmd_verify_exit,
    "verify-quarter": cmd_verify_quarter,
    "verify-kato": cmd_verify_kato,
    "verify-sobolev": cmd_verify_sobolev,
    "report": cmd_report,
}


def run(cfg: dict, commands: list[str], out_dir: str | Path) -> int:
    """Run ``commands`` in order; returns the process exit status."""
    errs = validate(cfg, commands)
    if errs:
        for e in errs:
            log.error("config: %s", e)
        return 2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = resolve_domain(cfg)
    cache: dict = {}
    status = 0
    for name in commands:
        final = out_dir / name
        tmp = Path(tempfile.mkdtemp(prefix=f".{name}-", dir=out_dir))
        out = Output(tmp)
        ctx = Context(cfg=cfg, out=out, domain=domain, _cache=cache)
        try:
            ok = bool(COMMANDS[name](ctx))
            state = "ok" if ok else "failed"
            err = None
        except Exception as exc:  # isolate failures per command
            log.exception("command %s raised", name)
            state, err = "error", f"{type(exc).__name__}: {exc}"
        files = [{"path": p.name, "sha256": sha256(p)} for p in sorted(out.files)]
        summary = {"command": name, "status": state, "files": files, "version": __version__}
        if err:
            summary["error"] = err
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
        log.info("%s: %s (%d files)", name, state, len(files))
        if state != "ok":
            status = 1
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbmlab", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog=f"commands: {', '.join(COMMANDS)}\n"
                                        f"environment overrides: {ENV_PREFIX}KEY__SUBKEY=value")
    ap.add_argument("commands", nargs="+", metavar="COMMAND", help="commands to run in order")
    ap.add_argument("--config", type=Path, help="YAML run configuration")
    ap.add_argument("--out", type=Path, default=Path("rbmlab-out"), help="output directory")
    ap.add_argument("--seed", type=int, help="Monte Carlo seed (overrides mc.seed)")
    ap.add_argument("--threads", type=int, help="worker threads (never changes results)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. --set grid.h=0.01")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"mc.seed={args.seed}")
    if args.threads is not None:
        sets.append(f"threads={args.threads}")
    try:
        cfg = load_config(args.config, sets)
    except ConfigError as exc:
        print(f"rbmlab: {exc}", file=sys.stderr)
        return 2
    errs = validate(cfg, args.commands)
    if errs:
        for e in errs:
            print(f"rbmlab: config error: {e}", file=sys.stderr)
        return 2
    return run(cfg, args.commands, args.out)


if __name__ == "__main__":
    sys.exit(main())
