"""Generalized similarity U test for rare-variant sets and mixed-type phenotypes."""

__version__ = "0.1.0"

from .simkernel import (
    GenotypeMatrix,
    PhenotypeTable,
    WeightVector,
    SimilarityMatrix,
    CenteredSimilarityMatrix,
    compute_maf,
    maf_weights,
    ibs_similarity,
    wibs_similarity,
    ed_genotype_similarity,
    rank_quantile_transform,
    ed_phenotype_similarity,
    correlation_adjusted_similarity,
    center_similarity,
    covariate_adjusted_center,
)
from .qfdist import (
    ChiSquareMixture,
    QfAccuracy,
    davies_survival,
    liu_survival,
    mc_survival,
    mixture_quantile,
)
from .gsucore import (
    GsuOptions,
    GsuStatistic,
    TestResult,
    compute_u,
    eigen_spectrum,
    null_mixture,
    asymptotic_pvalue,
    permutation_pvalue,
    gsu_test,
)
from .power import AlternativeMoments, estimate_moments, compute_power, required_sample_size
