//! Mild solutions of the semilinear valuation PDE by Picard iteration over
//! Feynman–Kac representations.

pub mod feynman_kac;
pub mod grid;
pub mod oracle;
pub mod picard;
pub mod residual;

pub use feynman_kac::{feynman_kac_apply, FeynmanKac, McConfig, NoiseTable, SlabEstimate, Terminal};
pub use grid::{Axis, Bracket, GridFunction};
pub use oracle::{bs_call, capped_call, linear_oracle, lognormal_excess, OracleValue};
pub use picard::{
    auto_hull, bound_violations, compare_grids, comparison_check, picard_solve, time_slabs, ComparisonReport, GridSpec,
    Hull, PicardReport, SlabTrace, SolverConfig, ValidationReport,
};
pub use residual::{interior_probes, pde_residual};
