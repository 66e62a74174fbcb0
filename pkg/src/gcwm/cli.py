"""Command-line front end: ``gcwm fit | classify | lrtest | simulate``.

Exit codes: 0 success, 2 input error, 3 convergence failure, 4 sizing
refusal.  Every command appends one JSON line to ``manifest.jsonl`` in its
output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import Dataset, DesignSpec, Schema, load_csv
from .em import (ComponentParams, InitStrategy, StopRule, _Context, _estep, hard_labels,
                 marginal_logpdf, marginal_parameter_count, marginal_update)
from .errors import ConvergenceError, GcwmError, InputError, NestingError, SizingError
from .metrics import align_posteriors
from .selection import (format_selection_table, select_k, selection_table_csv,
                        zero_inflation_lr_test)
from .serialize import load_model, save_model

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_SIZING = 0, 2, 3, 4
MODEL_KINDS = ("cwm", "gcwm", "zi-gcwm")
RESPONSES = {"severity": "gaussian-severity", "frequency": "poisson-frequency",
             "zero": "bernoulli-zero"}
MANIFEST = "manifest.jsonl"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _selection(text):
    if text is None:
        return ()
    return tuple(t.strip() for t in text.split(",") if t.strip())


def parse_k(k, k_range):
    """K values from ``--k`` (single) or ``--k-range`` (``a:b``, ``a-b`` or ``a,b,c``)."""
    if (k is None) == (k_range is None):
        raise InputError("give exactly one of --k or --k-range")
    if k is not None:
        try:
            ks = [int(k)]
        except ValueError:
            raise InputError(f"--k must be an integer, got {k!r}") from None
        flag = "--k"
    else:
        flag = "--k-range"
        text = k_range.strip()
        try:
            if ":" in text or ("-" in text.lstrip("-") and "," not in text):
                sep = ":" if ":" in text else "-"
                a, b = text.split(sep, 1)
                ks = list(range(int(a), int(b) + 1))
            else:
                ks = [int(v) for v in text.split(",")]
        except ValueError:
            raise InputError(f"{flag} must look like 1:5, 1-5 or 1,2,3; got {k_range!r}") from None
        if not ks:
            raise InputError(f"{flag} is empty")
    bad = [v for v in ks if v < 1]
    if bad:
        raise InputError(f"{flag}: component counts must be >= 1, got {bad[0]}")
    return ks


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"--out: cannot create {p}: {exc}") from None
    return p


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def append_manifest(out: Path, command: str, args, outputs, started: float, config=None):
    """Append one run record; earlier records are never rewritten."""
    rec = {"command": command, "config": config, "seed": getattr(args, "seed", None),
           "inputs": {k: str(v) for k, v in vars(args).items()
                      if k in ("data", "schema", "model", "poisson", "zip", "config")
                      and v is not None},
           "outputs": sorted(str(o) for o in outputs), "engine_version": __version__,
           "wall_time": round(time.perf_counter() - started, 6),
           "argv": [str(a) for a in getattr(args, "_argv", [])]}
    with open(out / MANIFEST, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_data(args) -> Dataset:
    if not args.data or not args.schema:
        raise InputError("--data and --schema are required")
    try:
        schema = Schema.load(args.schema)
    except OSError as exc:
        raise InputError(f"--schema: cannot read {args.schema}: {exc}") from None
    except yaml.YAMLError as exc:
        raise InputError(f"--schema: invalid YAML: {exc}") from None
    try:
        return load_csv(args.data, schema)
    except OSError as exc:
        raise InputError(f"--data: cannot read {args.data}: {exc}") from None


def _unit_weights(ds: Dataset) -> Dataset:
    return Dataset(ds.specs, ds.gaussian, ds.lognormal, ds.discrete, ds.response, ds.exposure,
                   np.ones(ds.n), ds.response_name)


def _design(args) -> DesignSpec:
    bern = _selection(args.select_bernoulli) if args.select_bernoulli is not None else None
    return DesignSpec(_selection(args.select_response), bern, args.offset_exposure, args.link)


def _match_model_specs(ds: Dataset, model) -> Dataset:
    """Apply the model's covariate roles (CWM models treat log-normal columns as Gaussian)."""
    want = {s.name: s.role for s in model.specs}
    got = {s.name: s.role for s in ds.specs}
    if set(want) != set(got):
        raise InputError("data covariates do not match the model's covariates")
    if any(got[n] == "lognormal" and want[n] == "gaussian" for n in want):
        ds = ds.as_cwm()
    if [(s.name, s.role, s.levels) for s in ds.specs] != \
            [(s.name, s.role, s.levels) for s in model.specs]:
        raise InputError("data covariate schema does not match the model's schema")
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    started = time.perf_counter()
    ks = parse_k(args.k, args.k_range)
    if args.kind == "zi-gcwm":
        response_kind = "zip-frequency"
    else:
        response_kind = RESPONSES[args.response]
    out = _out_dir(args.out)
    ds = _load_data(args)
    if not args.weights_claims:
        ds = _unit_weights(ds)
    if args.kind == "cwm":
        ds = ds.as_cwm()
    design = _design(args)
    init = InitStrategy(n_random=args.restarts, seed=args.seed)
    stop = StopRule(args.tol, args.max_iter)
    best, rows = select_k(ds, ks, response_kind, design, init, stop)
    save_model(best, out / "model.json", manifest=MANIFEST)
    _write(out / "selection.csv", selection_table_csv(rows, args.kind))
    print(format_selection_table(rows, args.kind.upper(), best.K))
    append_manifest(out, "fit", args, ["model.json", "selection.csv"], started,
                    config=args.schema)
    return EXIT_OK


def _summary_rows(labels, y, K):
    sizes, resp = [], []
    for k in range(K):
        yk = y[labels == k]
        sizes.append({"cluster": k + 1, "size": int(yk.size)})
        if yk.size:
            resp.append({"cluster": k + 1, "min": float(yk.min()), "mean": float(yk.mean()),
                         "max": float(yk.max()),
                         "sd": float(yk.std(ddof=1)) if yk.size > 1 else 0.0})
        else:
            nan = float("nan")
            resp.append({"cluster": k + 1, "min": nan, "mean": nan, "max": nan, "sd": nan})
    return sizes, resp


def _csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_classify(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    model = load_model(args.model)
    ds = _load_data(args)
    if not args.weights_claims:
        ds = _unit_weights(ds)
    ds = _match_model_specs(ds, model)
    ctx = _Context(ds, model.response_kind, model.design)
    post, _ = _estep(ctx, model.components)
    labels = hard_labels(post)
    K = model.K
    rows = []
    for i in range(ds.n):
        r = {"row": i + 1, "cluster": int(labels[i]) + 1}
        r.update({f"posterior_{k + 1}": float(post[i, k]) for k in range(K)})
        rows.append(r)
    _write(out / "labels.csv", _csv_text(rows, ["row", "cluster"] +
                                         [f"posterior_{k + 1}" for k in range(K)]))
    sizes, resp = _summary_rows(labels, ds.response, K)
    _write(out / "cluster_sizes.csv", _csv_text(sizes, ["cluster", "size"]))
    _write(out / "response_summary.csv",
           _csv_text(resp, ["cluster", "min", "mean", "max", "sd"]))
    print("  ".join(f"Cluster {s['cluster']}: {s['size']}" for s in sizes))
    print(f"{'Cluster':<9}{'Minimum':>14}{'Mean':>14}{'Maximum':>14}{'sd':>14}")
    for r in resp:
        print(f"{r['cluster']:<9}{r['min']:>14.4g}{r['mean']:>14.4g}{r['max']:>14.4g}"
              f"{r['sd']:>14.4g}")
    append_manifest(out, "classify", args,
                    ["labels.csv", "cluster_sizes.csv", "response_summary.csv"], started)
    return EXIT_OK


def _cluster_loglik(ctx, rows_w, inflated, starts):
    """Maximized log-likelihood on the rows: Poisson, or ZIP from several starts."""
    from .glm import fit_poisson_weighted
    from .zigcwm import BOUNDARY_LOGIT, zip_em

    pois = fit_poisson_weighted(ctx.X, ctx.y, rows_w, ctx.offset)
    if not inflated:
        return pois.loglik
    boundary = np.zeros(ctx.Xbar.shape[1])
    boundary[0] = BOUNDARY_LOGIT
    inits = [(pois.coefficients, boundary)] + [s for s in starts if s[1] is not None]
    return max(zip_em(ctx.X, ctx.Xbar, ctx.y, rows_w, ctx.offset, init=i).loglik
               for i in inits)


BIC_FIELDS = ("bic_conditional_restricted", "bic_conditional_full",
              "bic_joint_restricted", "bic_joint_full")


def _cluster_bics(ctx, rows, logliks):
    """Per-cluster BIC from the response conditional alone and from the joint density.

    ``logliks`` maps ``"restricted"``/``"full"`` to ``(conditional loglik,
    inflated)``.  The joint version adds the covariate marginals fitted to
    the cluster's rows, which are the same under both models.
    """
    n_k = int(rows.sum())
    margs = marginal_update(ctx, rows.astype(float))
    ll_marg = float(marginal_logpdf(ctx, ComponentParams(1.0, **margs))[rows].sum())
    nu_marg = marginal_parameter_count(ctx.ds)
    out = {}
    for name, (ll, inflated) in logliks.items():
        nu = ctx.X.shape[1] + (ctx.Xbar.shape[1] if inflated else 0)
        out[f"bic_conditional_{name}"] = float(-2.0 * ll + nu * np.log(n_k))
        out[f"bic_joint_{name}"] = float(-2.0 * (ll + ll_marg) + (nu + nu_marg) * np.log(n_k))
    return out


def lr_table(ds, restricted, full, alpha=0.05):
    """Per-cluster tests of ``restricted`` against ``full`` on ``full``'s hard partition.

    Each cluster's log-likelihoods are maximized on its hard-assigned rows
    under the conditional family the respective model uses there (Poisson,
    or zero-inflated Poisson).  When both models use the same family the
    statistic is exactly 0.  Each cluster row also carries both models'
    BIC, computed once from the response conditional only and once from the
    joint density including the covariate marginals.
    """
    if restricted.K != full.K:
        raise InputError(f"models have different K ({restricted.K} vs {full.K})")
    if [(s.name, s.role, s.levels) for s in restricted.specs] != \
            [(s.name, s.role, s.levels) for s in full.specs]:
        raise InputError("models were fit with different covariate schemas")
    if restricted.design.response != full.design.response:
        raise InputError("models use different response selections")
    if restricted.n != ds.n or full.n != ds.n:
        raise InputError("models were not fit on this data (row counts differ)")
    ctx_full = _Context(ds, full.response_kind, full.design)
    post_full, _ = _estep(ctx_full, full.components)
    ctx_r = _Context(ds, restricted.response_kind, restricted.design)
    post_r, _ = _estep(ctx_r, restricted.components)
    restricted = restricted.permuted(align_posteriors(post_full, post_r))
    hard = hard_labels(post_full)
    ctx = _Context(ds, "zip-frequency", full.design)
    m = ctx.Xbar.shape[1]

    def family(comp):
        return comp.zip is not None and comp.zip.inflated

    def start(comp):
        if comp.zip is not None:
            return comp.zip.beta, comp.zip.beta_bar
        return comp.glm.coefficients, None

    rows = []
    for k in range(full.K):
        rows_w = (hard == k).astype(float) * ctx.omega
        note = ""
        bic = {f: "" for f in BIC_FIELDS}
        if rows_w.sum() == 0:
            phi = 0.0
            note = "empty"
            res = zero_inflation_lr_test(0.0, 0.0, m, alpha)
        else:
            cr, cf = restricted.components[k], full.components[k]
            starts = [start(cr), start(cf)]
            ll_r = _cluster_loglik(ctx, rows_w, family(cr), starts)
            ll_f = ll_r if family(cr) == family(cf) else _cluster_loglik(
                ctx, rows_w, family(cf), starts)
            try:
                res = zero_inflation_lr_test(ll_r, ll_f, m, alpha)
            except NestingError:
                raise InputError(f"cluster {k + 1}: the first model is not nested in the "
                                 "second (pass the Poisson model first)") from None
            phi = res.phi
            bic = _cluster_bics(ctx, hard == k, {"restricted": (ll_r, family(cr)),
                                                 "full": (ll_f, family(cf))})
        rows.append({"cluster": str(k + 1), "n_rows": int((hard == k).sum()), "phi": phi,
                     "m": res.m, "critical_95": res.critical_95, "reject": res.reject,
                     "note": note, **bic})
    tot = zero_inflation_lr_test(0.0, 0.5 * sum(r["phi"] for r in rows),
                                 sum(r["m"] for r in rows), alpha)
    rows.append({"cluster": "All", "n_rows": ds.n, "phi": tot.phi, "m": tot.m,
                 "critical_95": tot.critical_95, "reject": tot.reject, "note": "",
                 **{f: "" for f in BIC_FIELDS}})
    return rows


def cmd_lrtest(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    restricted = load_model(args.poisson)
    full = load_model(args.zip)
    ds = _load_data(args)
    if not args.weights_claims:
        ds = _unit_weights(ds)
    ds = _match_model_specs(ds, full)
    rows = lr_table(ds, restricted, full, args.alpha)
    if not args.per_cluster:
        rows = rows[-1:]
    fields = ["cluster", "n_rows", "phi", "m", "critical_95", "reject", "note", *BIC_FIELDS]
    _write(out / "lrtest.csv", _csv_text(rows, fields))
    print(f"{'Cluster':<9}{'BIC Poisson':>14}{'BIC ZIP':>14}{'chi2 crit':>12}{'phi':>14}"
          f"  decision")
    for r in rows:
        rel = ">" if r["reject"] else "<="
        dec = "zero-inflated" if r["reject"] else "Poisson"
        bp, bz = r["bic_conditional_restricted"], r["bic_conditional_full"]
        bic = (f"{bp:>14,.1f}{bz:>14,.1f}" if isinstance(bp, float) else f"{'':>14}{'':>14}")
        print(f"{r['cluster']:<9}{bic}{r['critical_95']:>12.2f}{r['phi']:>14.2f}  "
              f"phi {rel} crit: {dec}")
    print("BIC columns use the response conditional; lrtest.csv also lists the "
          "joint-density BIC.")
    append_manifest(out, "lrtest", args, ["lrtest.csv"], started)
    return EXIT_OK


def _study_config(args):
    from .simulate import StudyConfig

    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise InputError(f"--config: cannot read {args.config}: {exc}") from None
        except yaml.YAMLError as exc:
            raise InputError(f"--config: invalid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise InputError("--config: expected a key-value document")
    else:
        doc = {"study": args.study}
    if args.study and not args.config:
        doc["study"] = args.study
    doc.setdefault("study", "partitioning")
    for key, val in (("n_runs", args.runs), ("seed", args.seed), ("condition", args.condition)):
        if val is not None:
            doc[key] = val
    return StudyConfig.from_dict(doc)


def cmd_simulate(args) -> int:
    from .simulate import (generate_gcwm_study, generate_zip_study, long_format, run_study,
                           run_seeds)

    started = time.perf_counter()
    if args.condition is not None and args.condition not in ("normal", "close"):
        raise InputError(f"--condition must be 'normal' or 'close', got {args.condition!r}")
    cfg = _study_config(args)
    out = _out_dir(args.out)
    report = run_study(cfg)
    outputs = ["report.csv", "runs.csv", "plot_data.csv", "config.yaml"]
    _write(out / "report.csv", report.to_csv())
    _write(out / "runs.csv", report.runs_csv())
    _write(out / "config.yaml", yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))
    first = run_seeds(cfg.seed, 1)[0]
    if cfg.study == "partitioning":
        sim = generate_zip_study(cfg.design, first, cfg.condition)
        matrix = report.runs[0].get("matrix")
        if matrix:
            mrows = [dict(true=i + 1, **{f"classified_{j + 1}": int(v)
                                         for j, v in enumerate(r.split(","))})
                     for i, r in enumerate(matrix.split(";"))]
            _write(out / "confusion.csv", _csv_text(mrows, list(mrows[0].keys())))
            outputs.append("confusion.csv")
    else:
        sim = generate_gcwm_study(cfg.design, first)
    _write(out / "plot_data.csv", long_format(sim.dataset, sim.labels))
    print(report.to_csv(), end="")
    if any(report.failures.values()):
        print("failed runs: " + ", ".join(f"{k}={v}" for k, v in report.failures.items()))
    append_manifest(out, "simulate", args, outputs, started, config=args.config)
    return EXIT_OK


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcwm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp, required=True):
        sp.add_argument("--data", required=required, help="CSV file")
        sp.add_argument("--schema", required=required, help="YAML column-role schema")
        sp.add_argument("--weights-claims", action="store_true",
                        help="use the schema's weights column as claim weights")

    f = sub.add_parser("fit", help="fit a model over one K or a K range")
    data_args(f)
    f.add_argument("--kind", choices=MODEL_KINDS, default="gcwm")
    f.add_argument("--response", choices=sorted(RESPONSES), default="severity",
                   help="response family for cwm/gcwm fits")
    f.add_argument("--k")
    f.add_argument("--k-range")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--select-response", help="comma-separated regression terms")
    f.add_argument("--select-bernoulli", help="comma-separated zero-inflation terms")
    f.add_argument("--offset-exposure", action=argparse.BooleanOptionalAction, default=True)
    f.add_argument("--link", choices=("identity", "log"), default="identity")
    f.add_argument("--restarts", type=int, default=10, help="random restarts")
    f.add_argument("--tol", type=float, default=1e-5)
    f.add_argument("--max-iter", type=int, default=500)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("classify", help="assign rows to the components of a fitted model")
    data_args(c)
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_classify)

    t = sub.add_parser("lrtest", help="zero-inflation likelihood-ratio tests per cluster")
    data_args(t)
    t.add_argument("--poisson", required=True, help="Poisson model document")
    t.add_argument("--zip", required=True, help="zero-inflated model document")
    t.add_argument("--per-cluster", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_lrtest)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--config", help="YAML study configuration")
    s.add_argument("--study", choices=("gcwm-accuracy", "partitioning"))
    s.add_argument("--condition")
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    try:
        return args.func(args)
    except SizingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZING
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, NestingError, GcwmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
