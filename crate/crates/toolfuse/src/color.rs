//! Color-constancy normalization and color-threshold marker extraction.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::toolbox::FeatureMap;

/// Default Minkowski exponent for the shades-of-gray transform.
pub const DEFAULT_MINKOWSKI_P: f64 = 6.0;

/// Default minimum connected-component area (source pixels) for marker maps.
pub const DEFAULT_MIN_AREA: usize = 10;

/// Inclusive value band on one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub const ANY: Band = Band { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A per-channel threshold predicate over normalized (R,G,B) values. A pixel
/// satisfies the rule when all three channel values fall in their bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorRule {
    pub r: Band,
    pub g: Band,
    pub b: Band,
}

impl ColorRule {
    pub fn satisfied(&self, r: f64, g: f64, b: f64) -> bool {
        self.r.contains(r) && self.g.contains(g) && self.b.contains(b)
    }
}

/// Threshold bands for melanoma-associated colors (very dark/black,
/// blue-gray, white). The exact constants are configurable defaults.
pub fn malignant_color_rules() -> Vec<ColorRule> {
    vec![
        // very dark / black
        ColorRule { r: Band::new(0.0, 0.25), g: Band::new(0.0, 0.25), b: Band::new(0.0, 0.25) },
        // blue-gray
        ColorRule { r: Band::new(0.0, 0.55), g: Band::new(0.2, 0.65), b: Band::new(0.45, 1.0) },
        // white structures
        ColorRule { r: Band::new(0.85, 1.0), g: Band::new(0.85, 1.0), b: Band::new(0.85, 1.0) },
    ]
}

/// Threshold bands for light and dark brown pigment.
pub fn brown_color_rules() -> Vec<ColorRule> {
    vec![
        // dark brown
        ColorRule { r: Band::new(0.25, 0.6), g: Band::new(0.1, 0.45), b: Band::new(0.0, 0.35) },
        // light brown
        ColorRule { r: Band::new(0.6, 0.95), g: Band::new(0.35, 0.75), b: Band::new(0.15, 0.55) },
    ]
}

/// Shades-of-gray color constancy: divide each channel by its Minkowski-p
/// mean, then rescale globally so the maximum value is 1.
pub fn shades_of_gray_normalize(rgb: &Array3<f64>, minkowski_p: f64) -> Result<Array3<f64>> {
    if rgb.shape()[0] != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 channels, got {}",
            rgb.shape()[0]
        )));
    }
    if minkowski_p < 1.0 {
        return Err(Error::InvalidInput(format!("minkowski_p {minkowski_p} must be >= 1")));
    }
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("rgb values must lie in [0,1]".into()));
    }
    let mut out = rgb.clone();
    for c in 0..3 {
        let channel = rgb.index_axis(ndarray::Axis(0), c);
        let n = channel.len() as f64;
        let mean_p = channel.iter().map(|v| v.powf(minkowski_p)).sum::<f64>() / n;
        let illuminant = mean_p.powf(1.0 / minkowski_p);
        if illuminant == 0.0 {
            return Err(Error::InvalidInput("degenerate illuminant estimate".into()));
        }
        out.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v / illuminant);
    }
    let max = out.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        out.mapv_inplace(|v| v / max);
    }
    Ok(out)
}

/// 4-connected components of pixels where `mask == target`; each component
/// is a list of `(row, col)` pixels.
pub fn connected_components(mask: &Array2<bool>, target: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut components = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != target || seen[[r, c]] {
                continue;
            }
            let mut stack = vec![(r, c)];
            let mut comp = Vec::new();
            seen[[r, c]] = true;
            while let Some((pr, pc)) = stack.pop() {
                comp.push((pr, pc));
                let neighbors = [
                    (pr.wrapping_sub(1), pc),
                    (pr + 1, pc),
                    (pr, pc.wrapping_sub(1)),
                    (pr, pc + 1),
                ];
                for (nr, nc) in neighbors {
                    if nr < h && nc < w && mask[[nr, nc]] == target && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            components.push(comp);
        }
    }
    components
}

/// Binary marker map: union of rule-satisfying pixels restricted to the
/// lesion region, with small components removed and small holes filled.
pub fn color_marker_map(
    rgb_normalized: &Array3<f64>,
    rules: &[ColorRule],
    lesion_mask: &FeatureMap,
    min_area: usize,
) -> Result<FeatureMap> {
    let (ch, h, w) = rgb_normalized.dim();
    if ch != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {ch}")));
    }
    if lesion_mask.channels() != 1 || lesion_mask.height() != h || lesion_mask.width() != w {
        return Err(Error::InvalidInput("lesion mask resolution mismatch".into()));
    }
    if lesion_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("lesion mask must be binary".into()));
    }
    let mut mask = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            let inside = lesion_mask.data()[[0, r, c]] == 1.0;
            if !inside {
                continue;
            }
            let (rv, gv, bv) = (
                rgb_normalized[[0, r, c]],
                rgb_normalized[[1, r, c]],
                rgb_normalized[[2, r, c]],
            );
            mask[[r, c]] = rules.iter().any(|rule| rule.satisfied(rv, gv, bv));
        }
    }
    // Remove foreground components below the area threshold.
    for comp in connected_components(&mask, true) {
        if comp.len() < min_area {
            for (r, c) in comp {
                mask[[r, c]] = false;
            }
        }
    }
    // Fill background holes below the area threshold, then clip back to the
    // lesion so the support invariant holds.
    for comp in connected_components(&mask, false) {
        if comp.len() < min_area {
            for (r, c) in comp {
                mask[[r, c]] = true;
            }
        }
    }
    let mut out = Array3::zeros((1, h, w));
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] && lesion_mask.data()[[0, r, c]] == 1.0 {
                out[[0, r, c]] = 1.0;
            }
        }
    }
    FeatureMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn uniform_rgb(r: f64, g: f64, b: f64, h: usize, w: usize) -> Array3<f64> {
        let mut arr = Array3::zeros((3, h, w));
        arr.index_axis_mut(ndarray::Axis(0), 0).fill(r);
        arr.index_axis_mut(ndarray::Axis(0), 1).fill(g);
        arr.index_axis_mut(ndarray::Axis(0), 2).fill(b);
        arr
    }

    fn channel_mean(arr: &Array3<f64>, c: usize) -> f64 {
        let ch = arr.index_axis(ndarray::Axis(0), c);
        ch.sum() / ch.len() as f64
    }

    #[test]
    fn uniform_gray_maps_to_ones() {
        let rgb = uniform_rgb(0.3, 0.3, 0.3, 8, 8);
        let out = shades_of_gray_normalize(&rgb, 6.0).unwrap();
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn channel_gains_are_equalized_at_p1() {
        // Gray image with channel gains (2,1,1): p=1 division restores
        // equal channel means.
        let rgb = uniform_rgb(0.8, 0.4, 0.4, 8, 8);
        let out = shades_of_gray_normalize(&rgb, 1.0).unwrap();
        let means: Vec<f64> = (0..3).map(|c| channel_mean(&out, c)).collect();
        assert!((means[0] - means[1]).abs() < 1e-12);
        assert!((means[1] - means[2]).abs() < 1e-12);
    }

    #[test]
    fn large_p_approaches_max_rgb() {
        let mut rgb = uniform_rgb(0.2, 0.5, 0.3, 8, 8);
        rgb[[0, 0, 0]] = 0.9;
        rgb[[1, 3, 4]] = 0.7;
        rgb[[2, 5, 6]] = 0.6;
        let out = shades_of_gray_normalize(&rgb, 64.0).unwrap();

        // Explicit per-channel max division, then the same global rescale.
        let mut expected = rgb.clone();
        for c in 0..3 {
            let max = expected
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .cloned()
                .fold(0.0_f64, f64::max);
            expected.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v / max);
        }
        let gmax = expected.iter().cloned().fold(0.0_f64, f64::max);
        expected.mapv_inplace(|v| v / gmax);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_channel_is_degenerate() {
        let rgb = uniform_rgb(0.5, 0.0, 0.5, 4, 4);
        assert!(shades_of_gray_normalize(&rgb, 6.0).is_err());
    }

    fn full_lesion(h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Array3::from_elem((1, h, w), 1.0)).unwrap()
    }

    fn dark_rule() -> ColorRule {
        ColorRule {
            r: Band::new(0.0, 0.2),
            g: Band::new(0.0, 0.2),
            b: Band::new(0.0, 0.2),
        }
    }

    #[test]
    fn empty_lesion_annihilates() {
        let rgb = uniform_rgb(0.1, 0.1, 0.1, 8, 8);
        let lesion = FeatureMap::zeros(1, 8, 8);
        let out = color_marker_map(&rgb, &[dark_rule()], &lesion, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dark_patch_detected_inside_lesion() {
        let mut rgb = uniform_rgb(0.6, 0.6, 0.6, 16, 16);
        for r in 4..9 {
            for c in 4..9 {
                for ch in 0..3 {
                    rgb[[ch, r, c]] = 0.1;
                }
            }
        }
        let out = color_marker_map(&rgb, &[dark_rule()], &full_lesion(16, 16), 4).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let expected = if (4..9).contains(&r) && (4..9).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(out.data()[[0, r, c]], expected);
            }
        }
    }

    #[test]
    fn small_component_removed() {
        let mut rgb = uniform_rgb(0.6, 0.6, 0.6, 16, 16);
        // 3-pixel patch, below min_area 4.
        for c in 4..7 {
            for ch in 0..3 {
                rgb[[ch, 4, c]] = 0.1;
            }
        }
        let out = color_marker_map(&rgb, &[dark_rule()], &full_lesion(16, 16), 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_hole_filled() {
        let mut rgb = uniform_rgb(0.6, 0.6, 0.6, 16, 16);
        for r in 2..12 {
            for c in 2..12 {
                for ch in 0..3 {
                    rgb[[ch, r, c]] = 0.1;
                }
            }
        }
        // Punch a 1-pixel hole.
        for ch in 0..3 {
            rgb[[ch, 6, 6]] = 0.6;
        }
        let out = color_marker_map(&rgb, &[dark_rule()], &full_lesion(16, 16), 4).unwrap();
        assert_eq!(out.data()[[0, 6, 6]], 1.0);
    }

    #[test]
    fn support_stays_inside_lesion() {
        let rgb = uniform_rgb(0.1, 0.1, 0.1, 16, 16);
        let mut lesion = Array3::zeros((1, 16, 16));
        for r in 3..10 {
            for c in 5..12 {
                lesion[[0, r, c]] = 1.0;
            }
        }
        let lesion = FeatureMap::new(lesion).unwrap();
        let out = color_marker_map(&rgb, &[dark_rule()], &lesion, 4).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert!(out.data()[[0, r, c]] <= lesion.data()[[0, r, c]]);
            }
        }
    }
}
