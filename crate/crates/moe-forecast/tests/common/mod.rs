//! Shared fixtures for the integration suites.

use std::path::PathBuf;

use moe_forecast::numerics::SeededRng;

/// Synthetic regime-switching stream: two AR(1) regimes alternating every
/// `block` steps. Regime A reverts to +5 with coefficient +0.7, regime B to
/// -5 with coefficient -0.7, both with uniform noise. A single global linear
/// map cannot carry both slopes, which is the point.
pub fn regime_switch_stream(n: usize, block: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    let mut y = 5.0;
    (0..n)
        .map(|t| {
            let eps = rng.uniform_in(-1.0, 1.0);
            y = if (t / block).is_multiple_of(2) {
                5.0 + 0.7 * (y - 5.0) + 0.5 * eps
            } else {
                -5.0 - 0.7 * (y + 5.0) + 0.5 * eps
            };
            y
        })
        .collect()
}

/// Locate the Saugeen river `.tsf` file for the network-optional
/// reproductions: the `MOE_FORECAST_SAUGEEN` environment variable wins,
/// otherwise `data/` at the workspace root is searched for a `saugeen*.tsf`.
pub fn saugeen_path() -> Option<PathBuf> {
    if let Ok(path) = std::env::var("MOE_FORECAST_SAUGEEN") {
        let path = PathBuf::from(path);
        return path.exists().then_some(path);
    }
    let data_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let entries = std::fs::read_dir(&data_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_lowercase();
        if name.starts_with("saugeen") && name.ends_with(".tsf") {
            return Some(entry.path());
        }
    }
    None
}
