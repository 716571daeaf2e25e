//! Fixtures shared by the benchmarks.

use nmfre::simulation::{generate_dataset, ErrorDist, Scenario, SimDesign};
use nmfre::DataSet;

/// One draw of the Orthodont-based design with `n` units.
pub fn baseline_draw(n: usize, seed: u64) -> DataSet {
    let design = SimDesign {
        seed,
        ..SimDesign::baseline(n, ErrorDist::Gaussian, Scenario::AlternativeInterior)
    };
    generate_dataset(&design, 0).data
}

/// One draw of the three-trend stress design.
pub fn stress_draw(seed: u64) -> DataSet {
    let design = SimDesign {
        seed,
        ..SimDesign::stress(Some(0.21), ErrorDist::Gaussian, Scenario::NullBoundary)
    };
    generate_dataset(&design, 0).data
}
