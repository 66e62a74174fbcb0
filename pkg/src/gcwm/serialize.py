"""JSON model documents.

A document holds everything needed to score new rows: the covariate
schema, the design selections, and per-component parameter blocks.  Floats
are written with ``repr`` precision so a load/dump cycle is lossless; NaN
entries (standard errors of dropped columns) are stored as ``null``.
Posterior matrices are not stored; they are recomputed from the data.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CovariateSpec, DesignSpec
from .densities import GaussianMarginal, LogNormalMarginal, MultinomialMarginal, ZipConditional
from .em import ComponentParams, GcwmModel
from .errors import InputError
from .glm import GlmFit
from .selection import info_criteria

FORMAT_VERSION = 1


def _num(x):
    x = float(x)
    return None if math.isnan(x) else x


def _arr(a):
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _num(a)
    return [_arr(r) for r in a] if a.ndim > 1 else [_num(v) for v in a]


def _unarr(v):
    if v is None:
        return None
    return np.array(v, dtype=float)  # None entries become NaN


def _jsonable(obj):
    """Recursively convert metadata to plain JSON types; drops arrays of rows."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.ndarray):
        return _arr(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _glm_to_dict(g: Optional[GlmFit]):
    if g is None:
        return None
    return {"family": g.family, "link": g.link, "coefficients": _arr(g.coefficients),
            "dispersion": None if g.dispersion is None else _num(g.dispersion),
            "std_errors": _arr(g.std_errors), "loglik": _num(g.loglik),
            "iterations": int(g.iterations), "converged": bool(g.converged),
            "flags": list(g.flags), "dropped": [int(j) for j in g.dropped]}


def _glm_from_dict(d):
    if d is None:
        return None
    se = _unarr(d["std_errors"])
    cov = None if se is None else np.diag(se ** 2)
    return GlmFit(_unarr(d["coefficients"]), float(d["loglik"]), int(d["iterations"]),
                  bool(d["converged"]), d["family"], d["link"],
                  dispersion=None if d["dispersion"] is None else float(d["dispersion"]),
                  cov=cov, flags=tuple(d["flags"]), dropped=tuple(d["dropped"]))


def _component_to_dict(c: ComponentParams) -> dict:
    out = {"tau": _num(c.tau), "glm": _glm_to_dict(c.glm)}
    out["gaussian"] = None if c.gaussian is None else {
        "mu": _arr(c.gaussian.mu), "sigma": _arr(c.gaussian.sigma)}
    out["lognormal"] = None if c.lognormal is None else {
        "mu": _arr(c.lognormal.mu), "sigma": _arr(c.lognormal.sigma)}
    out["discrete"] = None if c.discrete is None else [_arr(g) for g in c.discrete.gamma]
    out["zip"] = None if c.zip is None else {
        "beta": _arr(c.zip.beta),
        "beta_bar": None if c.zip.beta_bar is None else _arr(c.zip.beta_bar),
        "offset_log_exposure": bool(c.zip.offset_log_exposure)}
    if c.zip_fit is not None and c.zip_fit.cov is not None:
        out["zip"]["std_errors"] = _arr(c.zip_fit.std_errors)
    return out


def _component_from_dict(d) -> ComponentParams:
    g = d["gaussian"]
    u = d["lognormal"]
    z = d["zip"]
    zc = None
    if z is not None:
        zc = ZipConditional(_unarr(z["beta"]), _unarr(z["beta_bar"]),
                            bool(z["offset_log_exposure"]))
    comp = ComponentParams(
        tau=float(d["tau"]), glm=_glm_from_dict(d["glm"]),
        gaussian=None if g is None else GaussianMarginal(_unarr(g["mu"]), _unarr(g["sigma"])),
        lognormal=None if u is None else LogNormalMarginal(_unarr(u["mu"]), _unarr(u["sigma"])),
        discrete=None if d["discrete"] is None else MultinomialMarginal(
            tuple(_unarr(v) for v in d["discrete"])),
        zip=zc)
    if z is not None and "std_errors" in z:
        comp.zip_fit = _StoredZipErrors(_unarr(z["std_errors"]))
    return comp


class _StoredZipErrors:
    """Stand-in for a ZIP fit that only carries standard errors."""

    def __init__(self, se):
        self.se = se
        self.cov = np.diag(se ** 2)

    @property
    def std_errors(self):
        return self.se


def model_to_dict(model: GcwmModel, manifest: Optional[str] = None) -> dict:
    crit = info_criteria(model)
    doc = {
        "format": "gcwm-model", "version": FORMAT_VERSION,
        "response_kind": model.response_kind, "K": int(model.K), "n": int(model.n),
        "covariates": [{"name": s.name, "role": s.role, "levels": list(s.levels)}
                       for s in model.specs],
        "design": model.design.to_dict(),
        "seed": None if model.seed is None else int(model.seed),
        "converged": bool(model.converged), "iterations": int(model.iterations),
        "loglik": _num(model.loglik), "loglik_trace": [_num(v) for v in model.loglik_trace],
        "n_params": int(model.n_params),
        "criteria": {"aic": _num(crit.aic), "bic": _num(crit.bic)},
        "components": [_component_to_dict(c) for c in model.components],
        "metadata": _jsonable(model.metadata),
    }
    if manifest is not None:
        doc["manifest"] = manifest
    return doc


def model_from_dict(doc: dict) -> GcwmModel:
    if doc.get("format") != "gcwm-model":
        raise InputError("not a model document")
    if doc.get("version") != FORMAT_VERSION:
        raise InputError(f"unsupported model document version {doc.get('version')!r}")
    specs = tuple(CovariateSpec(c["name"], c["role"], tuple(c["levels"]))
                  for c in doc["covariates"])
    comps = [_component_from_dict(c) for c in doc["components"]]
    if len(comps) != doc["K"]:
        raise InputError("model document K does not match its component count")
    return GcwmModel(
        K=int(doc["K"]), components=comps, posteriors=None,
        loglik_trace=[float("nan") if v is None else float(v) for v in doc["loglik_trace"]],
        loglik=float(doc["loglik"]), n_params=int(doc["n_params"]),
        converged=bool(doc["converged"]), response_kind=doc["response_kind"],
        design=DesignSpec.from_dict(doc["design"]), specs=specs, n=int(doc["n"]),
        seed=doc["seed"], iterations=int(doc["iterations"]),
        metadata=dict(doc.get("metadata", {})))


def dumps(model: GcwmModel, manifest: Optional[str] = None) -> str:
    return json.dumps(model_to_dict(model, manifest), indent=2, allow_nan=False) + "\n"


def loads(text: str) -> GcwmModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"model document is not valid JSON: {exc}") from None
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"malformed model document: {exc}") from None


def save_model(model: GcwmModel, path, manifest: Optional[str] = None) -> None:
    Path(path).write_text(dumps(model, manifest), encoding="utf-8")


def load_model(path) -> GcwmModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read model document {path}: {exc}") from None
    return loads(text)
