//! Visual-token budget planning for screenshots.
//!
//! An image is cut into 28×28 patches, one token each. Images larger than
//! `max_tokens` patches are scaled by `beta = sqrt(W·H / (M·28·28))` and each
//! side is floored to a whole number of patches, which keeps the aspect ratio
//! up to rounding. Images within budget are only snapped down to patch
//! multiples. Only the plan is computed; no pixels are resampled.

use serde::{Deserialize, Serialize};

/// Side length of one visual patch in pixels.
pub const PATCH: u64 = 28;
/// Token budget of the generative encoder.
pub const DEFAULT_MAX_TOKENS: u64 = 2500;
/// Fixed square input of the CLIP-style encoder (no planning needed).
pub const CLIP_INPUT_SIDE: u64 = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height_px: u64,
    pub width_px: u64,
}

impl ImageDims {
    pub fn new(height_px: u64, width_px: u64) -> Self {
        Self {
            height_px: height_px.max(1),
            width_px: width_px.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub out_height: u64,
    pub out_width: u64,
    pub beta: f64,
    pub token_count: u64,
    /// A side fell below one patch and was raised to the 28 px floor, or the
    /// opposite side was cut back to stay within budget. Aspect ratio is not
    /// preserved in that case.
    pub clamped: bool,
}

impl ResizePlan {
    /// `|out_h/out_w − h/w| / (h/w)`.
    pub fn aspect_distortion(&self, dims: ImageDims) -> f64 {
        let raw = dims.height_px as f64 / dims.width_px as f64;
        let out = self.out_height as f64 / self.out_width as f64;
        (out - raw).abs() / raw
    }

    /// Worst-case distortion that patch rounding alone can introduce.
    pub fn rounding_bound(&self) -> f64 {
        let (lo, hi) = if self.out_height <= self.out_width {
            (self.out_height, self.out_width)
        } else {
            (self.out_width, self.out_height)
        };
        PATCH as f64 / lo as f64 + PATCH as f64 / hi as f64
    }
}

/// Largest `p` with `p² · den ≤ num`.
fn floor_sqrt_ratio(num: u128, den: u128) -> u64 {
    let approx = ((num as f64) / (den as f64)).sqrt() as u128;
    let mut p = approx.saturating_sub(2);
    while (p + 1) * (p + 1) * den <= num {
        p += 1;
    }
    while p > 0 && p * p * den > num {
        p -= 1;
    }
    p as u64
}

/// Plans the output size for `dims` under a budget of `max_tokens` patches
/// (a zero budget is treated as one).
pub fn smart_resize(dims: ImageDims, max_tokens: u64) -> ResizePlan {
    let m = max_tokens.max(1);
    let (h, w) = (dims.height_px.max(1), dims.width_px.max(1));
    let budget = u128::from(m) * u128::from(PATCH * PATCH);
    let area = u128::from(h) * u128::from(w);

    let (mut hp, mut wp, beta) = if area <= budget {
        (h / PATCH, w / PATCH, 1.0)
    } else {
        // floor(H / (28·beta)) = floor(sqrt(H·M / W)), computed exactly
        let hp = floor_sqrt_ratio(u128::from(h) * u128::from(m), u128::from(w));
        let wp = floor_sqrt_ratio(u128::from(w) * u128::from(m), u128::from(h));
        let beta = ((h as f64 * w as f64) / (m as f64 * (PATCH * PATCH) as f64)).sqrt();
        (hp, wp, beta)
    };

    let mut clamped = false;
    if hp == 0 || wp == 0 {
        clamped = true;
        hp = hp.max(1);
        wp = wp.max(1);
    }
    if hp * wp > m {
        clamped = true;
        if hp >= wp {
            hp = m / wp;
        } else {
            wp = m / hp;
        }
    }

    ResizePlan {
        out_height: hp * PATCH,
        out_width: wp * PATCH,
        beta,
        token_count: hp * wp,
        clamped,
    }
}
