"""Command-line interface: ``gsu test | power | samplesize | simulate | generate``.

Exit codes: 0 success, 2 input error, 3 numerical-engine failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from importlib import resources

import numpy as np

from . import io as gio
from . import report as rpt
from . import simkernel as sk
from . import simlab
from .gsucore import DegenerateKernelError, GsuOptions, centered_kernels, eigen_spectrum, gsu_test, null_mixture
from .power import (
    AlternativeMoments,
    NoAssociationError,
    SampleSizeInconsistency,
    compute_power,
    critical_value,
    estimate_moments,
    required_sample_size,
)
from .qfdist import ChiSquareMixture, QfError

logger = logging.getLogger("gsu")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ENGINE = 3
THREADS_ENV = "GSU_THREADS"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _emit(text: str, out):
    if out:
        gio.atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _options(args, covariates=None) -> GsuOptions:
    return GsuOptions(
        genetic_kernel=args.kernel,
        pheno_kernel=args.pheno_sim,
        covariates=covariates,
        covariate_mode=args.covariate_mode,
        missing=args.missing,
        permutations=getattr(args, "permutations", 0) or 0,
        seed=args.seed,
        small_sample_correction=not args.no_small_sample_correction,
    )


def _load(geno, pheno, use_covariates: bool):
    G = gio.read_genotype_file(geno)
    P = gio.read_phenotype_file(pheno)
    G, P, dropped = gio.align_subjects(G, P)
    if dropped:
        logger.warning("dropped %d subjects present in only one input file", dropped)
    X = None
    if use_covariates:
        if P.covariates is None:
            raise CliError(f"{pheno}: --covariates given but the file has no {gio.COVARIATE_PREFIX} columns")
        X = np.column_stack([np.ones(G.n), P.covariates])
    return G, P, X, dropped


def _kernel_block(args, P) -> dict:
    out = {"genetic": args.kernel, "phenotypic": args.pheno_sim, "missing_genotypes": args.missing,
           "small_sample_correction": not args.no_small_sample_correction}
    if getattr(args, "covariates", False):
        out["covariates"] = list(P.covariate_names)
        out["covariate_mode"] = args.covariate_mode
    return out


def cmd_test(args) -> int:
    G, P, X, dropped = _load(args.geno, args.pheno, args.covariates)
    if args.permutations and args.permutations < 100:
        raise CliError("--permutations must be at least 100")
    res = gsu_test(G, P.table, _options(args, X))
    rep = rpt.base_report("test", args.seed)
    rep["inputs"] = {
        "genotype_file": os.path.abspath(args.geno),
        "genotype_digest": gio.file_digest(args.geno),
        "phenotype_file": os.path.abspath(args.pheno),
        "phenotype_digest": gio.file_digest(args.pheno),
        "subjects_used": G.n,
        "subjects_dropped_unmatched": dropped,
    }
    rep["kernels"] = _kernel_block(args, P)
    rep["statistic"] = {"U": res.statistic.U, "nU": res.statistic.scaled, "n": res.statistic.n}
    pv = {"asymptotic": res.p_asymptotic, "engine": res.p_engine, "alpha": args.alpha,
          "reject": bool(res.p_asymptotic < args.alpha)}
    if res.p_permutation is not None:
        pv["permutation"] = res.p_permutation
        pv["permutations"] = res.permutations_used
    rep["p_values"] = pv
    rep["diagnostics"] = res.diagnostics
    _emit(rpt.dumps(rep), args.out)
    return EXIT_OK


def _parse_weights(text: str) -> ChiSquareMixture:
    try:
        w = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"--weights: cannot parse {text!r}") from None
    try:
        return ChiSquareMixture(w, centered=True)
    except ValueError as exc:
        raise CliError(f"--weights: {exc}") from None


def _moments_and_mixture(args, rep):
    pilot = args.pilot_geno or args.pilot_pheno
    if pilot:
        if not (args.pilot_geno and args.pilot_pheno):
            raise CliError("--pilot-geno and --pilot-pheno must be given together")
        if args.mu is not None or args.zeta1 is not None:
            raise CliError("give either --mu/--zeta1 or pilot files, not both")
        G, P, X, dropped = _load(args.pilot_geno, args.pilot_pheno, args.covariates)
        opts = _options(args, X)
        res = gsu_test(G, P.table, opts)
        if res.p_asymptotic >= args.pilot_alpha:
            raise NoAssociationError(
                f"no detectable association in pilot data (p = {res.p_asymptotic:.4g} >= {args.pilot_alpha})"
            )
        m = estimate_moments(G, P.table, opts)
        Kc, Sc, _ = centered_kernels(G, P.table, opts)
        mixture = null_mixture(eigen_spectrum(Kc, Sc), Kc.n)
        rep["inputs"] = {
            "genotype_file": os.path.abspath(args.pilot_geno),
            "genotype_digest": gio.file_digest(args.pilot_geno),
            "phenotype_file": os.path.abspath(args.pilot_pheno),
            "phenotype_digest": gio.file_digest(args.pilot_pheno),
            "subjects_used": G.n,
            "subjects_dropped_unmatched": dropped,
        }
        rep["kernels"] = _kernel_block(args, P)
        return m, mixture, "pilot", res.p_asymptotic
    if args.mu is None or args.zeta1 is None:
        raise CliError("give --mu and --zeta1, or --pilot-geno and --pilot-pheno")
    if not args.mu > 0:
        raise NoAssociationError(f"--mu must be positive for a power calculation (got {args.mu})")
    if not args.zeta1 > 0:
        raise CliError(f"--zeta1 must be positive (got {args.zeta1})")
    return AlternativeMoments(args.mu, args.zeta1), _parse_weights(args.weights), "given", None


def cmd_power(args) -> int:
    if args.command == "samplesize" and args.beta is None:
        raise CliError("samplesize needs --beta")
    if (args.n is None) == (args.beta is None):
        raise CliError("give exactly one of --n (power) or --beta (sample size)")
    rep = rpt.base_report("power" if args.n is not None else "samplesize", args.seed)
    m, mixture, source, pilot_p = _moments_and_mixture(args, rep)
    q = critical_value(mixture, args.alpha)
    block = {"mu": m.mu, "zeta1": m.zeta1, "zeta0": None if np.isnan(m.zeta0) else m.zeta0,
             "alpha": args.alpha, "q_crit": q, "moments_source": source, "mixture_terms": len(mixture)}
    if pilot_p is not None:
        block["pilot_p_value"] = pilot_p
    if args.n is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = compute_power(m, mixture, args.alpha, args.n, q_crit=q)
        for w in caught:
            logger.warning("%s", w.message)
        block.update(n=res.n, power=res.power)
    else:
        res = required_sample_size(m, mixture, args.alpha, args.beta, q_crit=q)
        block.update(n=res.n, target_power=res.target_power, achieved_power=res.achieved_power,
                     closed_form_n=res.closed_form)
    rep["power"] = block
    _emit(rpt.dumps(rep), args.out)
    return EXIT_OK


def bundled_config(name: str):
    """Path of a config shipped with the package, or None."""
    path = resources.files("gsu") / "configs" / f"{name}.cfg"
    return str(path) if path.is_file() else None


def cmd_simulate(args) -> int:
    path = args.config
    if not os.path.isfile(path):
        path = bundled_config(path)
        if path is None:
            raise CliError(f"config file {args.config!r} not found")
    cfg = simlab.read_config(path)
    threads = args.threads or int(os.environ.get(THREADS_ENV, "1"))
    summary = simlab.run_experiment(cfg, threads=threads)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    gio.atomic_write(os.path.join(outdir, "summary.json"), summary.to_json() + "\n")
    lines = ["replicate\tp_value"] + [f"{i}\t{p!r}" for i, p in zip(summary.replicate_index, summary.p_values)]
    gio.atomic_write(os.path.join(outdir, "pvalues.tsv"), "\n".join(lines) + "\n")
    gio.atomic_write(os.path.join(outdir, "summary.txt"), summary.table() + "\n")
    sys.stdout.write(summary.table() + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    items = {"n": args.n, "M": args.m, "phenotypes": args.phenotypes, "seed": args.seed,
             "mu_beta": args.mu_beta, "sigma2_beta": args.sigma2_beta, "maf_spectrum": args.maf_spectrum,
             "replicates": 1}
    cfg = simlab.config_from_mapping({k: v for k, v in items.items() if v is not None})
    G, Y = simlab.simulate_dataset(cfg, 0)
    gio.write_genotype_file(args.out_geno, G)
    gio.write_phenotype_file(args.out_pheno, Y)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def kernel_flags(sp):
        sp.add_argument("--kernel", choices=["ibs", "wibs", "ed"], default="wibs")
        sp.add_argument("--pheno-sim", choices=["ed", "ed-corr"], default="ed")
        sp.add_argument("--covariates", action="store_true", help="adjust for cov_ columns of the phenotype file")
        sp.add_argument("--covariate-mode", choices=["projection", "residualize"], default="projection")
        sp.add_argument("--missing", choices=["impute", "drop"], default="impute")
        sp.add_argument("--no-small-sample-correction", action="store_true")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out")

    t = sub.add_parser("test", help="test one SNV set for association")
    t.add_argument("--geno", required=True)
    t.add_argument("--pheno", required=True)
    t.add_argument("--permutations", type=int, default=0)
    t.add_argument("--alpha", type=float, default=0.05)
    kernel_flags(t)
    t.set_defaults(func=cmd_test)

    for name in ("power", "samplesize"):
        sp = sub.add_parser(name, help="power at --n, or sample size for --beta")
        sp.add_argument("--mu", type=float)
        sp.add_argument("--zeta1", type=float)
        sp.add_argument("--weights", default="1", help="null mixture weights, comma separated")
        sp.add_argument("--pilot-geno")
        sp.add_argument("--pilot-pheno")
        sp.add_argument("--pilot-alpha", type=float, default=0.05)
        sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--n", type=int)
        sp.add_argument("--beta", type=float)
        kernel_flags(sp)
        sp.set_defaults(func=cmd_power)

    s = sub.add_parser("simulate", help="run a replicate experiment from a config file")
    s.add_argument("--config", required=True, help="config file, or the name of a bundled config")
    s.add_argument("--out")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("generate", help="write a simulated genotype/phenotype file pair")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--m", type=int, default=30)
    g.add_argument("--phenotypes", default="G")
    g.add_argument("--maf-spectrum")
    g.add_argument("--mu-beta", type=float)
    g.add_argument("--sigma2-beta", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-geno", required=True)
    g.add_argument("--out-pheno", required=True)
    g.set_defaults(func=cmd_generate)
    return p


INPUT_ERRORS = (CliError, gio.InputError, sk.KernelError, simlab.ConfigError, NoAssociationError,
                DegenerateKernelError, ValueError, OSError)
ENGINE_ERRORS = (QfError, np.linalg.LinAlgError, SampleSizeInconsistency, simlab.ExperimentFailed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="gsu: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ENGINE_ERRORS as exc:
        sys.stderr.write(f"gsu: numerical failure: {exc}\n")
        return EXIT_ENGINE
    except INPUT_ERRORS as exc:
        code = exc.code if isinstance(exc, CliError) else EXIT_INPUT
        sys.stderr.write(f"gsu: error: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
