//! Rasterization of instance-level tool outputs into aligned feature maps.
//!
//! All procedures draw on the source canvas in integer pixel coordinates
//! (floating-point inputs are rounded to the nearest pixel), merge overlaps
//! by per-pixel maximum, and downsample to the experiment resolution with
//! block-max pooling. Polygon interiors use the even-odd rule evaluated at
//! half-integer pixel centers with exact integer arithmetic, so results are
//! reproducible bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::toolbox::{FeatureMap, InstanceRecord};

/// Default blob radius (in source pixels) for centroid rasterization.
pub const DEFAULT_BLOB_RADIUS: i64 = 2;

/// Default number of instance type classes.
pub const DEFAULT_NUM_TYPES: usize = 6;

/// Map a source row/column index to its output cell under block-max pooling.
/// Non-integer ratios assign each source pixel to the nearest block.
#[inline]
pub fn pool_cell(src_index: usize, src_extent: usize, out_extent: usize) -> usize {
    (src_index * out_extent) / src_extent
}

/// Block-max downsample from the source canvas to `(h, w)`.
pub fn downsample_block_max(src: &Array2<f64>, out_size: (usize, usize)) -> Result<Array2<f64>> {
    let (h0, w0) = src.dim();
    let (h, w) = out_size;
    if h == 0 || w == 0 || h > h0 || w > w0 {
        return Err(Error::InvalidInput(format!(
            "output size {h}x{w} must be nonzero and no larger than source {h0}x{w0}"
        )));
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h0 {
        let or = pool_cell(r, h0, h);
        for c in 0..w0 {
            let oc = pool_cell(c, w0, w);
            let v = src[[r, c]];
            if v > out[[or, oc]] {
                out[[or, oc]] = v;
            }
        }
    }
    Ok(out)
}

/// Integer line trace between two pixels.
///
/// Steps along the major axis; the minor coordinate at step `t` is
/// `floor((2*t*minor_delta + major_delta) / (2*major_delta))`, applied with
/// the axis signs. Implemented incrementally with integer error
/// accumulation; `verify::line_pixels_oracle` evaluates the closed form.
pub fn trace_line(p0: (i64, i64), p1: (i64, i64)) -> Vec<(i64, i64)> {
    let (x0, y0) = p0;
    let (x1, y1) = p1;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let (ax, ay) = (dx.abs(), dy.abs());
    let (sx, sy) = (dx.signum(), dy.signum());
    if ax == 0 && ay == 0 {
        return vec![p0];
    }
    let mut pixels = Vec::with_capacity((ax.max(ay) + 1) as usize);
    if ax >= ay {
        let (mut x, mut y) = (x0, y0);
        let mut rem = ax;
        for _ in 0..=ax {
            pixels.push((x, y));
            rem += 2 * ay;
            if rem >= 2 * ax {
                y += sy;
                rem -= 2 * ax;
            }
            x += sx;
        }
    } else {
        let (mut x, mut y) = (x0, y0);
        let mut rem = ay;
        for _ in 0..=ay {
            pixels.push((x, y));
            rem += 2 * ax;
            if rem >= 2 * ay {
                x += sx;
                rem -= 2 * ay;
            }
            y += sy;
        }
    }
    pixels
}

/// Round polygon vertices to integer pixel coordinates, `(x, y)`.
fn rounded_vertices(contour: &[[f64; 2]]) -> Vec<(i64, i64)> {
    contour.iter().map(|&[x, y]| (x.round() as i64, y.round() as i64)).collect()
}

/// Even-odd interior test support: does the horizontal ray from doubled test
/// point `(tx, ty)` toward +x cross edge `(a, b)` (doubled coordinates)?
#[inline]
fn edge_crossing_x(a: (i64, i64), b: (i64, i64), ty: i128) -> Option<(i128, i128)> {
    let (ax2, ay2) = (a.0 as i128 * 2, a.1 as i128 * 2);
    let (bx2, by2) = (b.0 as i128 * 2, b.1 as i128 * 2);
    if (ay2 > ty) == (by2 > ty) {
        return None;
    }
    // x_cross = (ax2*den + (ty - ay2)*(bx2 - ax2)) / den, den = by2 - ay2.
    let mut den = by2 - ay2;
    let mut num = ax2 * den + (ty - ay2) * (bx2 - ax2);
    if den < 0 {
        num = -num;
        den = -den;
    }
    Some((num, den))
}

/// Fill the even-odd interior of a polygon onto the canvas with `value`,
/// merging by per-pixel maximum. Scanline over rows; membership is "an odd
/// number of edge crossings lie strictly right of the pixel center".
fn fill_polygon_max(canvas: &mut Array2<f64>, verts: &[(i64, i64)], value: f64) {
    let (h0, w0) = canvas.dim();
    let n = verts.len();
    for r in 0..h0 {
        let ty = 2 * r as i128 + 1;
        let crossings: Vec<(i128, i128)> = (0..n)
            .filter_map(|i| edge_crossing_x(verts[i], verts[(i + 1) % n], ty))
            .collect();
        if crossings.is_empty() {
            continue;
        }
        for c in 0..w0 {
            let tx = 2 * c as i128 + 1;
            let right = crossings.iter().filter(|(num, den)| *num > tx * den).count();
            if right % 2 == 1 && value > canvas[[r, c]] {
                canvas[[r, c]] = value;
            }
        }
    }
}

/// Mark polygon boundary pixels (edge traces only, no interior).
fn draw_polygon_boundary(canvas: &mut Array2<f64>, verts: &[(i64, i64)]) {
    let (h0, w0) = canvas.dim();
    let n = verts.len();
    for i in 0..n {
        for (x, y) in trace_line(verts[i], verts[(i + 1) % n]) {
            if x >= 0 && y >= 0 && (y as usize) < h0 && (x as usize) < w0 {
                canvas[[y as usize, x as usize]] = 1.0;
            }
        }
    }
}

fn validate_all(instances: &[InstanceRecord], source_size: (usize, usize)) -> Result<()> {
    for (index, inst) in instances.iter().enumerate() {
        inst.validate(source_size)
            .map_err(|reason| Error::BadInstance { index, reason })?;
    }
    Ok(())
}

/// Binary map of filled bounding boxes, block-max downsampled.
pub fn rasterize_bboxes(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<FeatureMap> {
    validate_all(instances, source_size)?;
    let (h0, w0) = source_size;
    let mut canvas = Array2::zeros((h0, w0));
    for inst in instances {
        let x = inst.bbox[0].round() as i64;
        let y = inst.bbox[1].round() as i64;
        let bw = inst.bbox[2].round() as i64;
        let bh = inst.bbox[3].round() as i64;
        for r in y..(y + bh).min(h0 as i64) {
            for c in x..(x + bw).min(w0 as i64) {
                if r >= 0 && c >= 0 {
                    canvas[[r as usize, c as usize]] = 1.0;
                }
            }
        }
    }
    let out = downsample_block_max(&canvas, out_size)?;
    FeatureMap::new(to3(out))
}

/// Binary map with a filled disc of `blob_radius` at each centroid.
pub fn rasterize_centroids(
    instances: &[InstanceRecord],
    blob_radius: i64,
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<FeatureMap> {
    validate_all(instances, source_size)?;
    let (h0, w0) = source_size;
    let mut canvas = Array2::zeros((h0, w0));
    for inst in instances {
        let cx = inst.centroid[0].round() as i64;
        let cy = inst.centroid[1].round() as i64;
        for r in (cy - blob_radius).max(0)..=(cy + blob_radius).min(h0 as i64 - 1) {
            for c in (cx - blob_radius).max(0)..=(cx + blob_radius).min(w0 as i64 - 1) {
                if (r - cy) * (r - cy) + (c - cx) * (c - cx) <= blob_radius * blob_radius {
                    canvas[[r as usize, c as usize]] = 1.0;
                }
            }
        }
    }
    let out = downsample_block_max(&canvas, out_size)?;
    FeatureMap::new(to3(out))
}

/// Binary map marking only polygon boundary pixels.
pub fn rasterize_contours(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<FeatureMap> {
    validate_all(instances, source_size)?;
    let (h0, w0) = source_size;
    let mut canvas = Array2::zeros((h0, w0));
    for inst in instances {
        draw_polygon_boundary(&mut canvas, &rounded_vertices(&inst.contour));
    }
    let out = downsample_block_max(&canvas, out_size)?;
    FeatureMap::new(to3(out))
}

/// Multi-channel one-hot map: channel `k` is the union of interiors of
/// instances with `type_label == k`.
pub fn rasterize_type_onehot(
    instances: &[InstanceRecord],
    num_types: usize,
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<FeatureMap> {
    validate_all(instances, source_size)?;
    for (index, inst) in instances.iter().enumerate() {
        if inst.type_label >= num_types {
            return Err(Error::BadInstance {
                index,
                reason: format!("type_label {} >= num_types {num_types}", inst.type_label),
            });
        }
    }
    let (h0, w0) = source_size;
    let mut out = Array3::zeros((num_types, out_size.0, out_size.1));
    for k in 0..num_types {
        let mut canvas = Array2::zeros((h0, w0));
        for inst in instances.iter().filter(|i| i.type_label == k) {
            fill_polygon_max(&mut canvas, &rounded_vertices(&inst.contour), 1.0);
        }
        let down = downsample_block_max(&canvas, out_size)?;
        out.index_axis_mut(ndarray::Axis(0), k).assign(&down);
    }
    FeatureMap::new(out)
}

/// Confidence map: each instance's interior carries its `type_prob`,
/// overlaps resolved by per-pixel maximum.
pub fn rasterize_type_prob(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<FeatureMap> {
    validate_all(instances, source_size)?;
    let (h0, w0) = source_size;
    let mut canvas = Array2::zeros((h0, w0));
    for inst in instances {
        fill_polygon_max(&mut canvas, &rounded_vertices(&inst.contour), inst.type_prob);
    }
    let out = downsample_block_max(&canvas, out_size)?;
    FeatureMap::new(to3(out))
}

/// Per-structure binary maps decoded from a superpixel index image.
pub fn decode_superpixel_labels(
    index_map: &Array2<i64>,
    positives_per_structure: &BTreeMap<String, BTreeSet<i64>>,
    out_size: (usize, usize),
) -> Result<BTreeMap<String, FeatureMap>> {
    let present: BTreeSet<i64> = index_map.iter().copied().collect();
    for (structure, positives) in positives_per_structure {
        if let Some(missing) = positives.iter().find(|p| !present.contains(p)) {
            return Err(Error::InvalidInput(format!(
                "structure '{structure}' references superpixel index {missing} absent from the index map"
            )));
        }
    }
    let (h0, w0) = index_map.dim();
    let mut result = BTreeMap::new();
    for (structure, positives) in positives_per_structure {
        let mut canvas = Array2::zeros((h0, w0));
        for r in 0..h0 {
            for c in 0..w0 {
                if positives.contains(&index_map[[r, c]]) {
                    canvas[[r, c]] = 1.0;
                }
            }
        }
        let down = downsample_block_max(&canvas, out_size)?;
        result.insert(structure.clone(), FeatureMap::new(to3(down))?);
    }
    Ok(result)
}

fn to3(map: Array2<f64>) -> Array3<f64> {
    let (h, w) = map.dim();
    map.into_shape_with_order((1, h, w)).expect("reshape 2d -> 3d")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_instance(x: f64, y: f64, w: f64, h: f64, type_label: usize, prob: f64) -> InstanceRecord {
        InstanceRecord {
            bbox: [x, y, w, h],
            centroid: [x + w / 2.0, y + h / 2.0],
            contour: vec![
                [x, y],
                [x + w - 1.0, y],
                [x + w - 1.0, y + h - 1.0],
                [x, y + h - 1.0],
            ],
            type_label,
            type_prob: prob,
        }
    }

    #[test]
    fn full_canvas_box_saturates() {
        let inst = rect_instance(0.0, 0.0, 16.0, 16.0, 0, 1.0);
        let map = rasterize_bboxes(&[inst], (16, 16), (8, 8)).unwrap();
        assert!(map.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_instances_give_zeros() {
        for map in [
            rasterize_bboxes(&[], (16, 16), (8, 8)).unwrap(),
            rasterize_centroids(&[], 2, (16, 16), (8, 8)).unwrap(),
            rasterize_contours(&[], (16, 16), (8, 8)).unwrap(),
            rasterize_type_prob(&[], (16, 16), (8, 8)).unwrap(),
        ] {
            assert!(map.data().iter().all(|&v| v == 0.0));
        }
        let onehot = rasterize_type_onehot(&[], 6, (16, 16), (8, 8)).unwrap();
        assert_eq!(onehot.channels(), 6);
        assert!(onehot.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlapping_boxes_merge_to_one() {
        let a = rect_instance(0.0, 0.0, 8.0, 8.0, 0, 1.0);
        let b = rect_instance(4.0, 4.0, 8.0, 8.0, 0, 1.0);
        let map = rasterize_bboxes(&[a, b], (16, 16), (16, 16)).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(map.data()[[0, 5, 5]], 1.0);
    }

    #[test]
    fn small_box_lands_on_top_left_block() {
        let inst = rect_instance(0.0, 0.0, 4.0, 4.0, 0, 1.0);
        let map = rasterize_bboxes(&[inst], (16, 16), (8, 8)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expected = if r < 2 && c < 2 { 1.0 } else { 0.0 };
                assert_eq!(map.data()[[0, r, c]], expected, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn box_outside_canvas_rejected_with_index() {
        let good = rect_instance(0.0, 0.0, 4.0, 4.0, 0, 1.0);
        let bad = rect_instance(14.0, 14.0, 4.0, 4.0, 0, 1.0);
        match rasterize_bboxes(&[good, bad], (16, 16), (8, 8)) {
            Err(Error::BadInstance { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected BadInstance, got {other:?}"),
        }
    }

    #[test]
    fn radius_zero_centroid_is_single_pixel() {
        let mut inst = rect_instance(6.0, 6.0, 4.0, 4.0, 0, 1.0);
        inst.centroid = [8.0, 8.0];
        let map = rasterize_centroids(&[inst], 0, (16, 16), (16, 16)).unwrap();
        let ones: usize = map.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 1);
        assert_eq!(map.data()[[0, 8, 8]], 1.0);
    }

    #[test]
    fn close_centroids_merge_as_disc_union() {
        let mut a = rect_instance(4.0, 4.0, 4.0, 4.0, 0, 1.0);
        a.centroid = [8.0, 8.0];
        let mut b = rect_instance(4.0, 4.0, 4.0, 4.0, 0, 1.0);
        b.centroid = [9.0, 8.0];
        let map = rasterize_centroids(&[a, b], 2, (16, 16), (16, 16)).unwrap();
        // Union of two radius-2 discs, centers 1 px apart: per-pixel check.
        for r in 0..16i64 {
            for c in 0..16i64 {
                let in_a = (r - 8) * (r - 8) + (c - 8) * (c - 8) <= 4;
                let in_b = (r - 8) * (r - 8) + (c - 9) * (c - 9) <= 4;
                let expected = if in_a || in_b { 1.0 } else { 0.0 };
                assert_eq!(map.data()[[0, r as usize, c as usize]], expected);
            }
        }
    }

    #[test]
    fn square_contour_is_hollow() {
        let inst = rect_instance(4.0, 4.0, 8.0, 8.0, 0, 1.0);
        let map = rasterize_contours(&[inst], (16, 16), (16, 16)).unwrap();
        // Boundary marked, interior empty.
        assert_eq!(map.data()[[0, 4, 4]], 1.0);
        assert_eq!(map.data()[[0, 4, 8]], 1.0);
        assert_eq!(map.data()[[0, 8, 4]], 1.0);
        assert_eq!(map.data()[[0, 7, 7]], 0.0);
    }

    #[test]
    fn degenerate_polygon_rejected() {
        let mut inst = rect_instance(4.0, 4.0, 4.0, 4.0, 0, 1.0);
        inst.contour.truncate(2);
        assert!(matches!(
            rasterize_contours(&[inst], (16, 16), (16, 16)),
            Err(Error::BadInstance { index: 0, .. })
        ));
    }

    #[test]
    fn onehot_channels_follow_labels() {
        let a = rect_instance(1.0, 1.0, 5.0, 5.0, 0, 1.0);
        let b = rect_instance(9.0, 9.0, 5.0, 5.0, 3, 1.0);
        let map = rasterize_type_onehot(&[a, b], 6, (16, 16), (16, 16)).unwrap();
        for k in 0..6 {
            let any: f64 = map.data().index_axis(ndarray::Axis(0), k).sum();
            if k == 0 || k == 3 {
                assert!(any > 0.0, "channel {k} should be populated");
            } else {
                assert_eq!(any, 0.0, "channel {k} should be empty");
            }
        }
        // Disjoint instances -> disjoint supports.
        let c0 = map.data().index_axis(ndarray::Axis(0), 0);
        let c3 = map.data().index_axis(ndarray::Axis(0), 3);
        assert!(c0.iter().zip(c3.iter()).all(|(&a, &b)| a * b == 0.0));
    }

    #[test]
    fn out_of_range_type_rejected() {
        let inst = rect_instance(1.0, 1.0, 5.0, 5.0, 6, 1.0);
        assert!(matches!(
            rasterize_type_onehot(&[inst], 6, (16, 16), (16, 16)),
            Err(Error::BadInstance { index: 0, .. })
        ));
    }

    #[test]
    fn overlapping_probs_take_max() {
        let a = rect_instance(2.0, 2.0, 8.0, 8.0, 0, 0.4);
        let b = rect_instance(6.0, 6.0, 8.0, 8.0, 0, 0.9);
        let map = rasterize_type_prob(&[a, b], (16, 16), (16, 16)).unwrap();
        assert_eq!(map.data()[[0, 7, 7]], 0.9); // overlap region
        assert_eq!(map.data()[[0, 3, 3]], 0.4); // a only
    }

    #[test]
    fn full_prob_gives_binary_mask() {
        let a = rect_instance(2.0, 2.0, 8.0, 8.0, 0, 1.0);
        let map = rasterize_type_prob(&[a], (16, 16), (16, 16)).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn superpixel_decode_halves() {
        // 2x2 superpixel grid over a 4x4 canvas, indices row-major 0..4.
        let mut idx = Array2::zeros((4, 4));
        for r in 0..4 {
            for c in 0..4 {
                idx[[r, c]] = (r / 2 * 2 + c / 2) as i64;
            }
        }
        let mut positives = BTreeMap::new();
        positives.insert("right_half".to_string(), BTreeSet::from([1i64, 3]));
        positives.insert("none".to_string(), BTreeSet::new());
        positives.insert("all".to_string(), BTreeSet::from([0i64, 1, 2, 3]));
        let maps = decode_superpixel_labels(&idx, &positives, (4, 4)).unwrap();
        let right = maps["right_half"].data();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(right[[0, r, c]], if c >= 2 { 1.0 } else { 0.0 });
            }
        }
        assert!(maps["none"].data().iter().all(|&v| v == 0.0));
        assert!(maps["all"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unknown_positive_index_rejected() {
        let idx = Array2::zeros((4, 4));
        let mut positives = BTreeMap::new();
        positives.insert("ghost".to_string(), BTreeSet::from([7i64]));
        assert!(decode_superpixel_labels(&idx, &positives, (4, 4)).is_err());
    }

    #[test]
    fn rasterizers_invariant_to_instance_order() {
        let a = rect_instance(1.0, 2.0, 6.0, 5.0, 1, 0.3);
        let b = rect_instance(7.0, 6.0, 7.0, 8.0, 2, 0.8);
        let c = rect_instance(3.0, 9.0, 5.0, 4.0, 1, 0.6);
        let fwd = [a.clone(), b.clone(), c.clone()];
        let rev = [c, b, a];
        assert_eq!(
            rasterize_bboxes(&fwd, (16, 16), (8, 8)).unwrap(),
            rasterize_bboxes(&rev, (16, 16), (8, 8)).unwrap()
        );
        assert_eq!(
            rasterize_type_prob(&fwd, (16, 16), (8, 8)).unwrap(),
            rasterize_type_prob(&rev, (16, 16), (8, 8)).unwrap()
        );
        assert_eq!(
            rasterize_contours(&fwd, (16, 16), (8, 8)).unwrap(),
            rasterize_contours(&rev, (16, 16), (8, 8)).unwrap()
        );
    }
}
