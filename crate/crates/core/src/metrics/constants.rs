//! Constants of the no-reference underwater quality measures.
//!
//! Source: K. Panetta, C. Gao, S. Agaian, "Human-Visual-System-Inspired
//! Underwater Image Quality Measures", IEEE Journal of Oceanic Engineering
//! 41(3), 2016. Values are evaluated on the 0–255 intensity scale.

/// UIQM = C1·UICM + C2·UISM + C3·UIConM.
pub const UIQM_C1: f64 = 0.0282;
pub const UIQM_C2: f64 = 0.2953;
pub const UIQM_C3: f64 = 3.5753;

/// UICM = UICM_MEAN·sqrt(μ_RG² + μ_YB²) + UICM_VAR·sqrt(σ²_RG + σ²_YB).
pub const UICM_MEAN: f64 = -0.0268;
pub const UICM_VAR: f64 = 0.1586;

/// Fraction of sorted samples dropped from the low and the high end of the trimmed mean.
pub const TRIM_LOW: f64 = 0.1;
pub const TRIM_HIGH: f64 = 0.1;

/// Side of the square blocks used by EME and logAMEE.
pub const BLOCK: usize = 8;

/// Per-channel weights of the Sobel EME in UISM (R, G, B).
pub const UISM_LAMBDA: [f64; 3] = [0.299, 0.587, 0.114];

/// Pixel scale the measures are defined on.
pub const INTENSITY_SCALE: f64 = 255.0;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
