#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(grid) = cdg_cli::grid::SweepGrid::parse(text) {
            // Every accepted grid enumerates exactly len() finite-weight points.
            let pts = grid.points();
            assert_eq!(pts.len(), grid.len());
            assert!(pts.iter().all(|w| {
                w.kappa.is_finite() && w.lambda.is_finite() && w.eta.is_finite()
            }));
        }
    }
});
