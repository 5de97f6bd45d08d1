//! Zero-shot evaluation and the analysis reports built on it.

mod analysis;
mod report;
mod svg;

pub use analysis::{
    concept_coverage, manipulation_ablation, prototype_orthogonality, sweep, topn_ablation,
    AblationReport, CoverageItem, CoverageReport, OrthogonalityReport, OverlapPair, SweepGrid,
    TopNCurve, TopNPoint,
};
pub use report::{
    class_deltas, classify, evaluate, top_changes, ClassDelta, ClassStat, EvalReport, SteerFn,
};
pub use svg::{sweep_heatmap_svg, topn_curve_svg};
