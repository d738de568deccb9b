"""Command-line interface.

Every subcommand reads the same configuration: a TOML (or JSON) file given
with ``--config`` whose values are overridden by command-line flags. All
outputs go to ``paths.output_dir``; commands that build on earlier results
read the artifacts written there (``fit.npz``, ``infer.npz``, ``ale.npz``,
``calibration.csv``).

Exit codes: 0 on success, 1 for invalid input or a missing prerequisite,
2 for numerical failure (including non-convergence).
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from cbmr import __version__
from cbmr import stochastic_models as sm
from cbmr.errors import CBMRError, NumericalError, ValidationError

LGR = logging.getLogger("cbmr")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
THREADS_ENV = "CBMR_THREADS"


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ConfigKey:
    key: str
    default: Any
    kind: Callable
    help: str
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        section, _, name = self.key.rpartition(".")
        stem = name if section in ("", "paths") else f"{section}_{name}"
        return "--" + stem.replace("_", "-")

    @property
    def dest(self) -> str:
        return self.key.replace(".", "__")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str_list(v) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    s = str(v).strip()
    if not s:
        return []
    return [part.strip() for part in s.split(",") if part.strip()]


def _optional(kind):
    def parse(v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none", "null")):
            return None
        return kind(v)

    parse.__name__ = getattr(kind, "__name__", "value")
    return parse


CONFIG_KEYS: tuple[ConfigKey, ...] = (
    ConfigKey("paths.foci", None, _optional(str), "foci table (CSV or TSV with study_id,x,y,z and covariate columns)"),
    ConfigKey("paths.mask", None, _optional(str), "NIfTI brain mask; the bundled MNI152 2mm mask when unset"),
    ConfigKey("paths.output_dir", "cbmr_out", str, "directory for all outputs and intermediate artifacts"),
    ConfigKey("model.kind", sm.POISSON, str, "stochastic model", sm.MODEL_KINDS),
    ConfigKey("model.spline_spacing_mm", 20.0, float, "B-spline knot spacing in mm"),
    ConfigKey("model.support_threshold", 0.1, float, "drop bases whose in-mask maximum is below this"),
    ConfigKey(
        "model.covariates", [], _str_list,
        "study covariates as 'name[:none|sqrt][:standardize]', comma separated on the command line",
    ),
    ConfigKey("fit.max_iter", 1000, int, "iteration cap"),
    ConfigKey("fit.tol_loglik", 1e-8, float, "log-likelihood change tolerance"),
    ConfigKey("fit.tol_grad", 1e-6, float, "gradient sup-norm tolerance for convergence"),
    ConfigKey("fit.lbfgs_memory", 10, int, "L-BFGS correction pairs"),
    ConfigKey("fit.init_strategy", "homogeneous", str, "starting point", ("homogeneous", "random", "poisson")),
    ConfigKey("inference.sided", "one", str, "homogeneity test sidedness", ("one", "two")),
    ConfigKey("inference.q", 0.05, float, "Benjamini-Hochberg FDR level"),
    ConfigKey("inference.truncation_floor", 1e-3, float, "p-value floor applied before BH"),
    ConfigKey("glh.contrast", None, _optional(str), "contrast matrix on the covariate effects as JSON, e.g. '[1,0]'"),
    ConfigKey("selection.n_obs", None, _optional(int), "observation count for BIC; number of voxels when unset"),
    ConfigKey(
        "simulation.sampler", "model_based", str, "null sampler", ("model_based", "empirical_shuffle"),
    ),
    ConfigKey("simulation.n_realizations", 100, int, "number of null realizations"),
    ConfigKey("simulation.model_kind", None, _optional(str), "model fitted to null data; model.kind when unset"),
    ConfigKey("simulation.with_covariates", False, _bool, "carry the template covariates into the null fits"),
    ConfigKey("simulation.alpha", None, _optional(float), "NB dispersion for sampling; estimated when unset"),
    ConfigKey("ale.fwhm_mm", 14.0, float, "ALE kernel FWHM in mm"),
    ConfigKey("ale.n_iter", 1000, int, "ALE Monte Carlo null iterations"),
    ConfigKey("compare.alpha", 0.05, float, "uncorrected threshold for the overlap table"),
    ConfigKey("seed", 0, int, "root seed; each command draws from its own named substream"),
    ConfigKey("threads", None, _optional(int), f"BLAS threads (also {THREADS_ENV}); machine default when unset"),
)
_BY_KEY = {k.key: k for k in CONFIG_KEYS}


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for name, value in tree.items():
        key = f"{prefix}{name}"
        if isinstance(value, dict) and not any(c.key == key for c in CONFIG_KEYS):
            flat.update(_flatten(value, key + "."))
        else:
            flat[key] = value
    return flat


def read_config_file(path: str | Path) -> dict:
    """Flattened ``section.key`` mapping from a TOML or JSON file."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config: file not found: {path}")
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            tree = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            tree = tomllib.loads(text.decode("utf-8"))
    except Exception as exc:
        raise ValidationError(f"config: cannot parse {path}: {exc}") from None
    flat = _flatten(tree)
    unknown = sorted(set(flat) - set(_BY_KEY))
    if unknown:
        raise ValidationError(f"config: unknown keys {unknown}")
    return flat


def resolve_config(file_values: dict, overrides: dict) -> dict:
    """Defaults, then file values, then command-line overrides, each validated."""
    cfg = {}
    for ck in CONFIG_KEYS:
        raw = overrides.get(ck.key, file_values.get(ck.key, ck.default))
        try:
            value = ck.kind(raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{ck.key}: {exc}") from None
        if ck.choices is not None and value not in ck.choices:
            raise ValidationError(f"{ck.key}: must be one of {list(ck.choices)}, got {value!r}")
        cfg[ck.key] = value
    return cfg


def _config_epilog() -> str:
    lines = ["configuration keys (TOML sections; flags override file values):"]
    for ck in CONFIG_KEYS:
        extra = f" {{{','.join(ck.choices)}}}" if ck.choices else ""
        lines.append(f"  {ck.key:<30} {ck.flag:<28} default={ck.default!r}{extra}")
        lines.append(f"      {ck.help}")
    lines.append(f"environment: {THREADS_ENV} sets threads when --threads is absent")
    return "\n".join(lines)


def substream(seed: int, name: str) -> np.random.SeedSequence:
    """Named child of the root seed, independent across names."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def substream_int(seed: int, name: str) -> int:
    return int(substream(seed, name).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------- artifacts


def write_npz(path: Path, arrays: dict[str, np.ndarray]) -> Path:
    """``.npz`` archive with fixed member timestamps, for byte-identical reruns."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def _require(out: Path, name: str, producer: str) -> Path:
    path = out / name
    if not path.is_file():
        raise ValidationError(f"missing prerequisite artifact {path} (run 'cbmr {producer}' first)")
    return path


def _load_npz(path: Path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg["paths.output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"paths.output_dir: cannot create {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ValidationError(f"paths.output_dir: {out} is not writable")
    return out


# ---------------------------------------------------------------- pipeline pieces


@dataclass
class Prepared:
    data: Any
    mask: Any
    design: Any
    counts: Any
    covariates: Any
    stats: Any


def _covariate_specs(entries) -> list:
    from cbmr.data_io import TRANSFORMS, CovariateSpec

    specs = []
    for e in entries:
        if isinstance(e, dict):
            specs.append(CovariateSpec(e["name"], e.get("transform", "none"), bool(e.get("standardize", False))))
            continue
        parts = [p.strip() for p in str(e).split(":") if p.strip()]
        if not parts:
            raise ValidationError(f"model.covariates: empty entry {e!r}")
        transform, standardize = "none", False
        for p in parts[1:]:
            if p in TRANSFORMS:
                transform = p
            elif p == "standardize":
                standardize = True
            else:
                raise ValidationError(f"model.covariates: unknown option {p!r} in {e!r}")
        specs.append(CovariateSpec(parts[0], transform, standardize))
    return specs


def _load_mask(cfg: dict):
    from cbmr.data_io import load_mask, reference_mask

    path = cfg["paths.mask"]
    if path is None:
        return reference_mask()
    if not Path(path).is_file():
        raise ValidationError(f"paths.mask: file not found: {path}")
    return load_mask(path)


def _load_foci(cfg: dict):
    from cbmr.data_io import load_foci

    path = cfg["paths.foci"]
    if path is None:
        raise ValidationError("paths.foci: required (set it in the config or pass --foci)")
    if not Path(path).is_file():
        raise ValidationError(f"paths.foci: file not found: {path}")
    return load_foci(path)


def prepare(cfg: dict, covariate_constants=None) -> Prepared:
    from cbmr.data_io import build_counts, prepare_covariates
    from cbmr.spline_basis import build_design

    data = _load_foci(cfg)
    mask = _load_mask(cfg)
    design = build_design(mask, cfg["model.spline_spacing_mm"], cfg["model.support_threshold"])
    counts = build_counts(data, mask)
    specs = _covariate_specs(cfg["model.covariates"])
    covs = prepare_covariates(data, specs, covariate_constants) if specs else None
    stats = sm.sufficient_stats(counts, design, covs)
    return Prepared(data, mask, design, counts, covs, stats)


def _fit_config(cfg: dict, seed_name: str = "fit"):
    from cbmr.optimizer import FitConfig

    return FitConfig(
        max_iter=cfg["fit.max_iter"],
        tol_loglik=cfg["fit.tol_loglik"],
        tol_grad=cfg["fit.tol_grad"],
        lbfgs_memory=cfg["fit.lbfgs_memory"],
        init_strategy=cfg["fit.init_strategy"],
        seed=substream_int(cfg["seed"], seed_name),
    )


def _fit_arrays(fit, prep: Prepared) -> dict:
    p = fit.params
    return {
        "model_kind": np.array(fit.model_kind),
        "beta": p.beta,
        "gamma": p.gamma,
        "log_alpha": np.array(np.nan if p.log_alpha is None else p.log_alpha),
        "theta": np.array(np.nan if p.theta is None else p.theta),
        "theta_hat": np.array(np.nan if fit.theta_hat is None else fit.theta_hat),
        "loglik": np.array(np.nan if fit.loglik is None else fit.loglik),
        "n_iter": np.array(fit.n_iter),
        "converged": np.array(fit.converged),
        "grad_norm": np.array(fit.grad_norm),
        "fisher_info": fit.fisher_info,
        "fisher_condition": np.array(fit.fisher_condition),
        "singular_flag": np.array(fit.singular_flag),
        "dispersion_at_boundary": np.array(fit.dispersion_at_boundary),
        "n_clamped": np.array(fit.n_clamped),
        "n_obs": np.array(fit.n_obs),
        "notes": np.array(json.dumps(fit.notes)),
        "covariate_log": np.array(json.dumps(list(prep.covariates.transform_log) if prep.covariates else [])),
        "n_voxels": np.array(prep.stats.n),
        "n_bases": np.array(prep.stats.p),
    }


def _fit_from_arrays(a: dict):
    from cbmr.optimizer import FitResult
    from cbmr.stochastic_models import ModelParams

    la = float(a["log_alpha"])
    th = float(a["theta_hat"])
    ll = float(a["loglik"])
    th_used = float(a["theta"])
    params = ModelParams(a["beta"], a["gamma"], None if np.isnan(la) else la, None if np.isnan(th_used) else th_used)
    return FitResult(
        model_kind=str(a["model_kind"]),
        params=params,
        loglik=None if np.isnan(ll) else ll,
        n_iter=int(a["n_iter"]),
        converged=bool(a["converged"]),
        grad_norm=float(a["grad_norm"]),
        fisher_info=a["fisher_info"],
        fisher_condition=float(a["fisher_condition"]),
        singular_flag=bool(a["singular_flag"]),
        theta_hat=None if np.isnan(th) else th,
        n_clamped=int(a["n_clamped"]),
        n_obs=int(a["n_obs"]),
        dispersion_at_boundary=bool(a["dispersion_at_boundary"]),
        notes=json.loads(str(a["notes"])),
    )


def _load_fit(cfg: dict, out: Path):
    """Reload ``fit.npz`` and rebuild the statistics it was fitted on."""
    arrays = _load_npz(_require(out, "fit.npz", "fit"))
    log = json.loads(str(arrays["covariate_log"]))
    prep = prepare(cfg, log if log else None)
    if int(arrays["n_voxels"]) != prep.stats.n or int(arrays["n_bases"]) != prep.stats.p:
        raise ValidationError(f"{out / 'fit.npz'} was made with a different mask or spline configuration")
    if len(log) != prep.stats.r:
        raise ValidationError(f"{out / 'fit.npz'} was made with a different covariate configuration")
    return _fit_from_arrays(arrays), prep


# ---------------------------------------------------------------- commands


def cmd_fit(cfg: dict) -> int:
    from cbmr.data_io import write_json, write_stat_map
    from cbmr.optimizer import fit

    out = _output_dir(cfg)
    prep = prepare(cfg)
    result = fit(cfg["model.kind"], prep.stats, _fit_config(cfg))
    f = sm.intensity_factors(result.params, prep.stats)
    summary = result.summary()
    summary.update({
        "n_studies": prep.counts.n_studies,
        "n_foci_in_file": prep.counts.n_foci_in_file,
        "n_foci_in_mask": int(prep.counts.total),
        "n_dropped_outside_mask": prep.counts.n_dropped_outside,
        "n_deduplicated": prep.counts.n_deduplicated,
        "n_voxels": prep.stats.n,
        "n_bases": prep.stats.p,
        "covariates": list(prep.covariates.transform_log) if prep.covariates else [],
        "version": __version__,
    })
    write_json(summary, out / "fit.json")
    write_npz(out / "fit.npz", _fit_arrays(result, prep))
    write_stat_map(f.eta_x, prep.mask, out / "eta_x.nii.gz")
    write_stat_map(f.mu_x, prep.mask, out / "mu_x.nii.gz")
    if not result.converged:
        LGR.error("fit did not converge (gradient sup-norm %.3g); outputs written for inspection", result.grad_norm)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    from cbmr.data_io import write_json, write_stat_map
    from cbmr.inference import homogeneity_test

    out = _output_dir(cfg)
    result, prep = _load_fit(cfg, out)
    maps = homogeneity_test(
        result, prep.stats, cfg["inference.sided"], cfg["inference.q"], cfg["inference.truncation_floor"]
    )
    write_stat_map(maps.z, prep.mask, out / "z.nii.gz")
    write_stat_map(maps.z_mu, prep.mask, out / "z_intensity.nii.gz")
    write_stat_map(-np.log10(maps.p), prep.mask, out / "neglog10p.nii.gz")
    write_stat_map(maps.fdr.rejected.astype(float), prep.mask, out / "fdr_rejected.nii.gz")
    write_stat_map(maps.se_eta, prep.mask, out / "se_eta.nii.gz")
    write_npz(out / "infer.npz", {"p": maps.p, "z": maps.z, "rejected": maps.fdr.rejected})
    write_json(maps.summary(), out / "infer.json")
    return EXIT_OK


def cmd_glh(cfg: dict) -> int:
    from cbmr.data_io import write_json
    from cbmr.inference import glh_test

    if cfg["glh.contrast"] is None:
        raise ValidationError("glh.contrast: required, e.g. --glh-contrast '[1,0]'")
    try:
        contrast = json.loads(cfg["glh.contrast"])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"glh.contrast: not valid JSON: {exc}") from None
    out = _output_dir(cfg)
    arrays = _load_npz(_require(out, "fit.npz", "fit"))
    result = _fit_from_arrays(arrays)
    res = glh_test(result, contrast)
    summary = res.summary()
    summary["covariates"] = [e["name"] for e in json.loads(str(arrays["covariate_log"]))]
    write_json(summary, out / "glh.json")
    return EXIT_OK


def cmd_select(cfg: dict) -> int:
    from cbmr.data_io import write_json
    from cbmr.model_selection import select_models
    from cbmr.optimizer import fit

    out = _output_dir(cfg)
    prep = prepare(cfg)
    fc = _fit_config(cfg)
    fits = {kind: fit(kind, prep.stats, fc) for kind in sm.MODEL_KINDS}
    report = select_models(fits, prep.stats, prep.mask, cfg["selection.n_obs"])
    for kind, f in fits.items():
        if not f.converged:
            report.notes.append(f"{kind} fit did not converge (gradient sup-norm {f.grad_norm:.3g})")
    report.write_csv(out / "selection_report.csv")
    write_json(report.summary(), out / "selection.json")
    return EXIT_OK


def cmd_simulate_null(cfg: dict) -> int:
    from cbmr.data_io import write_json
    from cbmr.null_simulation import NullConfig, run_calibration
    from cbmr.spline_basis import build_design

    out = _output_dir(cfg)
    data = _load_foci(cfg)
    mask = _load_mask(cfg)
    design = build_design(mask, cfg["model.spline_spacing_mm"], cfg["model.support_threshold"])
    kind = cfg["simulation.model_kind"] or cfg["model.kind"]
    sm.check_kind(kind)
    null_cfg = NullConfig(
        template=data,
        sampler=cfg["simulation.sampler"],
        n_realizations=cfg["simulation.n_realizations"],
        model_kind=kind,
        with_covariates=cfg["simulation.with_covariates"],
        covariates=tuple(_covariate_specs(cfg["model.covariates"])),
        seed=substream_int(cfg["seed"], "simulation"),
        alpha=cfg["simulation.alpha"],
        sided=cfg["inference.sided"],
        q=cfg["inference.q"],
        truncation_floor=cfg["inference.truncation_floor"],
    )
    res = run_calibration(null_cfg, mask, design, _fit_config(cfg))
    res.write_csv(out / "calibration.csv")
    summary = res.summary()
    summary.update({"n_realizations": null_cfg.n_realizations, "sampler": null_cfg.sampler, "model_kind": kind})
    write_json(summary, out / "calibration.json")
    return EXIT_OK


def cmd_ale(cfg: dict) -> int:
    from cbmr.ale_baseline import ale_null_test, p_to_z
    from cbmr.data_io import write_json, write_stat_map

    out = _output_dir(cfg)
    data = _load_foci(cfg)
    mask = _load_mask(cfg)
    rng = np.random.default_rng(substream(cfg["seed"], "ale"))
    observed, p = ale_null_test(data, mask, cfg["ale.fwhm_mm"], cfg["ale.n_iter"], rng)
    z = p_to_z(p)
    write_stat_map(observed.stat, mask, out / "ale.nii.gz")
    write_stat_map(z, mask, out / "ale_z.nii.gz")
    write_npz(out / "ale.npz", {"stat": observed.stat, "p": p})
    write_json(
        {
            "fwhm_mm": observed.fwhm_mm,
            "n_studies": observed.ma_count,
            "n_iter": cfg["ale.n_iter"],
            "max_ale": float(observed.stat.max()),
            "n_p_below_0.05": int((p < 0.05).sum()),
        },
        out / "ale.json",
    )
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    from cbmr.ale_baseline import compare_masks, write_comparison

    out = _output_dir(cfg)
    cbmr_p = _load_npz(_require(out, "infer.npz", "infer"))["p"]
    ale_p = _load_npz(_require(out, "ale.npz", "ale"))["p"]
    if cbmr_p.shape != ale_p.shape:
        raise ValidationError("infer.npz and ale.npz were computed on different masks")
    rows = compare_masks(cbmr_p, ale_p, cfg["compare.alpha"], cfg["inference.q"], cfg["inference.truncation_floor"])
    write_comparison(rows, out / "comparison.csv")
    for r in rows:
        print(f"{r.threshold}: CBMR {r.n_cbmr}, ALE {r.n_ale}, both {r.n_both}, DSC {r.dsc:.4f}")
    return EXIT_OK


def cmd_plot_pp(cfg: dict) -> int:
    import csv

    out = _output_dir(cfg)
    path = _require(out, "calibration.csv", "simulate-null")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "rank"}
    try:
        import matplotlib
    except ModuleNotFoundError:
        raise ValidationError("plot-pp needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cbmr"
    e = cols["expected_neglog10p"]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.fill_between(e, cols["lo_neglog10p"], cols["hi_neglog10p"], color="0.8", label="mean ± 1.96 sd")
    ax.plot(e, cols["mean_neglog10p"], color="C0", lw=1.2, label="mean")
    top = float(max(e.max(), cols["hi_neglog10p"].max()))
    ax.plot([0, top], [0, top], color="k", lw=0.8, ls="--", label="identity")
    ax.set_xlabel("expected -log10 p")
    ax.set_ylabel("observed -log10 p")
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    fig.savefig(out / "pp_plot.svg", format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return EXIT_OK


def cmd_make_example(cfg: dict) -> int:
    """Write a synthetic planted-cluster dataset, its mask and a config file."""
    from cbmr.data_io import write_foci, write_mask
    from cbmr.synthetic import ellipsoid_mask, gaussian_bump, sample_foci

    out = _output_dir(cfg)
    rng = np.random.default_rng(substream(cfg["seed"], "example"))
    mask = ellipsoid_mask((34, 40, 34))
    n_studies = 80
    weights = gaussian_bump(mask, (16.0, -10.0, 8.0), 8.0, 12.0)
    covariates = {
        "sample_size": rng.integers(12, 60, size=n_studies).astype(float),
        "year": rng.integers(2000, 2022, size=n_studies).astype(float),
    }
    data = sample_foci(mask, rng.poisson(12, size=n_studies), rng, weights, covariates)
    write_foci(data, out / "example_foci.csv")
    write_mask(mask, out / "example_mask.nii.gz")
    toml = (
        "seed = 0\n\n"
        "[paths]\n"
        'foci = "example_foci.csv"\n'
        'mask = "example_mask.nii.gz"\n'
        'output_dir = "results"\n\n'
        "[model]\n"
        'kind = "poisson"\n'
        "spline_spacing_mm = 20.0\n"
        'covariates = ["sample_size:sqrt:standardize", "year:standardize"]\n\n'
        "[glh]\n"
        'contrast = "[1, 0]"\n\n'
        "[simulation]\n"
        "n_realizations = 20\n\n"
        "[ale]\n"
        "n_iter = 1000\n"
    )
    (out / "config.toml").write_text(toml, encoding="utf-8")
    print(f"wrote example_foci.csv, example_mask.nii.gz and config.toml to {out}")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[dict], int], str]] = {
    "fit": (cmd_fit, "fit the intensity model; writes fit.json, fit.npz, eta_x/mu_x maps"),
    "infer": (cmd_infer, "voxelwise homogeneity tests with FDR; needs fit.npz"),
    "glh": (cmd_glh, "Wald test of a covariate contrast; needs fit.npz"),
    "select": (cmd_select, "fit all four models; LRT, AIC/BIC and bias criteria"),
    "simulate-null": (cmd_simulate_null, "Monte Carlo null calibration; calibration.csv/json"),
    "ale": (cmd_ale, "ALE map with Monte Carlo p-values; ale.nii.gz, ale_z.nii.gz"),
    "compare": (cmd_compare, "Dice overlap of CBMR and ALE masks; needs infer.npz and ale.npz"),
    "plot-pp": (cmd_plot_pp, "render calibration.csv as pp_plot.svg"),
    "make-example": (cmd_make_example, "write a synthetic example dataset and config"),
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    epilog = _config_epilog()
    parser = argparse.ArgumentParser(
        prog="cbmr",
        description="Coordinate-based meta-regression with spline intensity models.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"cbmr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name, help=help_text, description=help_text, epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="TOML or JSON configuration file")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
        for ck in CONFIG_KEYS:
            kwargs = {"dest": ck.dest, "default": argparse.SUPPRESS, "help": f"{ck.key}: {ck.help}"}
            if ck.choices:
                kwargs["choices"] = ck.choices
            p.add_argument(ck.flag, **kwargs)
    return parser


def _origin_module(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "cbmr"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("cbmr"):
            name = mod
        tb = tb.tb_next
    return name


def _threads(cfg: dict) -> int | None:
    if cfg["threads"] is not None:
        return cfg["threads"]
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    handler, _ = COMMANDS[args.command]
    try:
        file_values = read_config_file(args.config) if args.config else {}
        if args.config:
            # relative paths in a config file resolve against the file's directory
            base = Path(args.config).resolve().parent
            for key in ("paths.foci", "paths.mask", "paths.output_dir"):
                if file_values.get(key) is not None and not Path(file_values[key]).is_absolute():
                    file_values[key] = str(base / file_values[key])
        overrides = {ck.key: getattr(args, ck.dest) for ck in CONFIG_KEYS if hasattr(args, ck.dest)}
        cfg = resolve_config(file_values, overrides)
        threads = _threads(cfg)
        if threads is not None and threads < 1:
            raise ValidationError("threads must be at least 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return handler(cfg)
    except ValidationError as exc:
        print(f"cbmr {args.command}: error [{_origin_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"cbmr {args.command}: numerical failure [{_origin_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CBMRError as exc:
        print(f"cbmr {args.command}: error [{_origin_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
