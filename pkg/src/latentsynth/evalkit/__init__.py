from .identification import build_gallery, identify_1toN
from .metrics import (
    MetricError, ScoreMatrix, cmc_ranks, far_threshold, mate_ranks, roc_curve, roc_tdr_at_far,
    write_cmc_csv, write_roc_csv,
)
from .minutiae import (
    BIFURCATION, ENDING, REFERENCE_MEAN_COUNTS, Minutia, MinutiaSet, TierStats, count_minutiae,
    crossing_numbers, extract_minutiae, minutiae_tier_stats, raw_minutiae,
)
from .quality import EXTERNAL_NFIQ2, INTERNAL_PROXY, QualityReport, QualityScore, proxy_quality, quality_histogram
from .tsne import scatter_groups, tsne_embed, write_scatter_json

__all__ = [
    "BIFURCATION", "ENDING", "EXTERNAL_NFIQ2", "INTERNAL_PROXY", "REFERENCE_MEAN_COUNTS", "MetricError",
    "Minutia", "MinutiaSet", "QualityReport", "QualityScore", "ScoreMatrix", "TierStats", "build_gallery",
    "cmc_ranks", "count_minutiae", "crossing_numbers", "extract_minutiae", "far_threshold", "identify_1toN",
    "mate_ranks", "minutiae_tier_stats", "proxy_quality", "quality_histogram", "raw_minutiae", "roc_curve",
    "roc_tdr_at_far", "scatter_groups", "tsne_embed", "write_cmc_csv", "write_roc_csv", "write_scatter_json",
]
