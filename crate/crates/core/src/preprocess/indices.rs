//! NDVI, EVI and MSI from Sentinel-2 surface reflectance.
//!
//! Bands: B02 (blue), B04 (red), B08 (NIR), B11 (SWIR).

use log::debug;

/// Denominators with magnitude below this produce an index value of 0.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indices {
    pub ndvi: f64,
    pub evi: f64,
    pub msi: f64,
}

fn guarded_ratio(name: &str, num: f64, den: f64) -> f64 {
    if den.abs() < DEGENERATE_DENOMINATOR {
        debug!("DegenerateDenominator: {name} denominator {den:e}, emitting 0");
        0.0
    } else {
        num / den
    }
}

pub fn ndvi(b04: f64, b08: f64) -> f64 {
    guarded_ratio("ndvi", b08 - b04, b08 + b04)
}

pub fn compute_indices(b02: f64, b04: f64, b08: f64, b11: f64) -> Indices {
    Indices {
        ndvi: ndvi(b04, b08),
        evi: guarded_ratio(
            "evi",
            2.5 * (b08 - b04),
            b08 + 6.0 * b04 - 7.5 * b02 + 1.0,
        ),
        msi: guarded_ratio("msi", b11, b08),
    }
}
