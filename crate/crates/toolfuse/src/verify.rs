//! Acceptance checks: every derived quantity in the pipeline is verified
//! against an independent brute-force oracle implemented here, on synthetic
//! tasks with known ground truth.
//!
//! The oracles deliberately take different computational routes from the
//! production code (closed-form line evaluation vs incremental error
//! accumulation, per-pixel predicates vs scanline fills, pair counting vs
//! rank sums) while sharing the same mathematical definitions.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::Result;
use crate::knockout::{
    enumerate_masks, expected_loss_decomposition_check, marginal_conditional_oracle,
    PlaceholderSpec,
};
use crate::metrics::MetricKind;
use crate::nn::{class_weighted_loss, class_weighted_loss_grad, FusionModel, FusionModelConfig};
use crate::seed::derive_rng;
use crate::selection::{
    calibrate_dynamic_cutoff, perturb_selection, select_by_cutoff, SelectionSource,
    SelectionVector, ToolScoreSheet,
};
use crate::synth::{
    discrete_joint, discrete_toolbox, generate_discrete_dataset,
    generate_image_dataset, image_toolbox, DiscreteLabelRule, DiscreteTaskSpec, ImageLabelRule,
    ImageTaskSpec, MarkerSpec,
};
use crate::tbm::{
    predict, train, DatasetItem, InputSpace, LabeledDataset, Schedule, Split, TrainConfig,
};
use crate::toolbox::InstanceRecord;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn summary_line(&self) -> String {
        format!(
            "criterion {:2} [{}] {} ({:.1}s): {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.details
        )
    }
}

fn finish(
    id: usize,
    name: &'static str,
    started: Instant,
    passed: bool,
    details: String,
) -> CriterionResult {
    CriterionResult { id, name, passed, details, seconds: started.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Closed-form integer line: pixel `t` along the major axis carries minor
/// offset `floor((major_delta + 2 t minor_delta) / (2 major_delta))`.
pub fn line_pixels_oracle(p0: (i64, i64), p1: (i64, i64)) -> Vec<(i64, i64)> {
    let (x0, y0) = p0;
    let (ax, ay) = ((p1.0 - x0).abs(), (p1.1 - y0).abs());
    let (sx, sy) = ((p1.0 - x0).signum(), (p1.1 - y0).signum());
    if ax == 0 && ay == 0 {
        return vec![p0];
    }
    if ax >= ay {
        (0..=ax)
            .map(|t| {
                let off = (ax as i128 + 2 * t as i128 * ay as i128) / (2 * ax as i128);
                (x0 + sx * t, y0 + sy * off as i64)
            })
            .collect()
    } else {
        (0..=ay)
            .map(|t| {
                let off = (ay as i128 + 2 * t as i128 * ax as i128) / (2 * ay as i128);
                (x0 + sx * off as i64, y0 + sy * t)
            })
            .collect()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Block-max downsample by explicit block intervals: source row `r` belongs
/// to output row `or` iff `r` lies in `[ceil(or*h0/h), ceil((or+1)*h0/h))`.
pub fn downsample_oracle(src: &Array2<f64>, out_size: (usize, usize)) -> Array2<f64> {
    let (h0, w0) = src.dim();
    let (h, w) = out_size;
    let mut out = Array2::zeros((h, w));
    for or in 0..h {
        let r_range = ceil_div(or * h0, h)..ceil_div((or + 1) * h0, h);
        for oc in 0..w {
            let c_range = ceil_div(oc * w0, w)..ceil_div((oc + 1) * w0, w);
            let mut best = 0.0f64;
            for r in r_range.clone() {
                for c in c_range.clone() {
                    best = best.max(src[[r, c]]);
                }
            }
            out[[or, oc]] = best;
        }
    }
    out
}

/// Even-odd interior membership of pixel center `(c+1/2, r+1/2)` via a sign
/// test per edge (doubled integer coordinates, no rational normalization).
pub fn polygon_interior_oracle(verts: &[(i64, i64)], r: usize, c: usize) -> bool {
    let ty = 2 * r as i128 + 1;
    let tx = 2 * c as i128 + 1;
    let n = verts.len();
    let mut crossings = 0usize;
    for i in 0..n {
        let (ax2, ay2) = (verts[i].0 as i128 * 2, verts[i].1 as i128 * 2);
        let j = (i + 1) % n;
        let (bx2, by2) = (verts[j].0 as i128 * 2, verts[j].1 as i128 * 2);
        if (ay2 > ty) == (by2 > ty) {
            continue;
        }
        let value = (ax2 - tx) * (by2 - ay2) + (bx2 - ax2) * (ty - ay2);
        let right = if by2 > ay2 { value > 0 } else { value < 0 };
        if right {
            crossings += 1;
        }
    }
    crossings % 2 == 1
}

fn rounded(contour: &[[f64; 2]]) -> Vec<(i64, i64)> {
    contour.iter().map(|&[x, y]| (x.round() as i64, y.round() as i64)).collect()
}

/// Per-pixel predicate oracle for the bounding-box map.
pub fn bbox_map_oracle(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Array2<f64> {
    let (h0, w0) = source_size;
    let src = Array2::from_shape_fn((h0, w0), |(r, c)| {
        let hit = instances.iter().any(|inst| {
            let x = inst.bbox[0].round() as i64;
            let y = inst.bbox[1].round() as i64;
            let bw = inst.bbox[2].round() as i64;
            let bh = inst.bbox[3].round() as i64;
            let (r, c) = (r as i64, c as i64);
            c >= x && c < x + bw && r >= y && r < y + bh
        });
        hit as u8 as f64
    });
    downsample_oracle(&src, out_size)
}

/// Per-pixel predicate oracle for the centroid-blob map.
pub fn centroid_map_oracle(
    instances: &[InstanceRecord],
    blob_radius: i64,
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Array2<f64> {
    let (h0, w0) = source_size;
    let src = Array2::from_shape_fn((h0, w0), |(r, c)| {
        let hit = instances.iter().any(|inst| {
            let cx = inst.centroid[0].round() as i64;
            let cy = inst.centroid[1].round() as i64;
            let (dr, dc) = (r as i64 - cy, c as i64 - cx);
            dr * dr + dc * dc <= blob_radius * blob_radius
        });
        hit as u8 as f64
    });
    downsample_oracle(&src, out_size)
}

/// Boundary oracle: the union of closed-form line pixels over all edges.
pub fn contour_map_oracle(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Array2<f64> {
    let (h0, w0) = source_size;
    let mut boundary: BTreeSet<(i64, i64)> = BTreeSet::new();
    for inst in instances {
        let verts = rounded(&inst.contour);
        let n = verts.len();
        for i in 0..n {
            boundary.extend(line_pixels_oracle(verts[i], verts[(i + 1) % n]));
        }
    }
    let src = Array2::from_shape_fn((h0, w0), |(r, c)| {
        boundary.contains(&(c as i64, r as i64)) as u8 as f64
    });
    downsample_oracle(&src, out_size)
}

/// Per-pixel oracle for the type one-hot interiors.
pub fn type_onehot_oracle(
    instances: &[InstanceRecord],
    num_types: usize,
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Array3<f64> {
    let (h0, w0) = source_size;
    let mut out = Array3::zeros((num_types, out_size.0, out_size.1));
    for k in 0..num_types {
        let members: Vec<Vec<(i64, i64)>> = instances
            .iter()
            .filter(|i| i.type_label == k)
            .map(|i| rounded(&i.contour))
            .collect();
        let src = Array2::from_shape_fn((h0, w0), |(r, c)| {
            members.iter().any(|v| polygon_interior_oracle(v, r, c)) as u8 as f64
        });
        out.index_axis_mut(Axis(0), k).assign(&downsample_oracle(&src, out_size));
    }
    out
}

/// Per-pixel oracle for the type-probability map (max over containing
/// instances).
pub fn type_prob_oracle(
    instances: &[InstanceRecord],
    source_size: (usize, usize),
    out_size: (usize, usize),
) -> Array2<f64> {
    let (h0, w0) = source_size;
    let polys: Vec<(Vec<(i64, i64)>, f64)> = instances
        .iter()
        .map(|i| (rounded(&i.contour), i.type_prob))
        .collect();
    let src = Array2::from_shape_fn((h0, w0), |(r, c)| {
        polys
            .iter()
            .filter(|(v, _)| polygon_interior_oracle(v, r, c))
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max)
    });
    downsample_oracle(&src, out_size)
}

/// Quadratic pair-counting AUC oracle: concordant pairs plus half credit for
/// ties, normalized by `n_pos * n_neg`.
pub fn auc_pair_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut concordant = 0.0f64;
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (i, (&s_pos, &y_pos)) in scores.iter().zip(labels).enumerate() {
        if y_pos != 1 {
            n_neg += 1;
            continue;
        }
        n_pos += 1;
        let _ = i;
        for (&s_neg, &y_neg) in scores.iter().zip(labels) {
            if y_neg == 1 {
                continue;
            }
            if s_pos > s_neg {
                concordant += 1.0;
            } else if s_pos == s_neg {
                concordant += 0.5;
            }
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    Some(concordant / (n_pos as f64 * n_neg as f64))
}

/// Exact central 99% binomial interval `[q_{0.005}, q_{0.995}]` (inclusive).
pub fn binomial_99_interval(n: usize, p: f64) -> (usize, usize) {
    if p <= 0.0 {
        return (0, 0);
    }
    if p >= 1.0 {
        return (n, n);
    }
    // Log-space pmf from a cumulative log-factorial table.
    let mut ln_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut cdf = 0.0f64;
    let mut lo = None;
    let mut hi = n;
    for k in 0..=n {
        let lnpmf = ln_fact[n] - ln_fact[k] - ln_fact[n - k] + k as f64 * lp + (n - k) as f64 * lq;
        cdf += lnpmf.exp();
        if lo.is_none() && cdf >= 0.005 {
            lo = Some(k);
        }
        if cdf >= 0.995 {
            hi = k;
            break;
        }
    }
    (lo.unwrap_or(n), hi)
}

// ---------------------------------------------------------------------------
// Shared helpers for the training-based criteria
// ---------------------------------------------------------------------------

fn constant_stack(z: &[f64], resolution: (usize, usize)) -> Array3<f64> {
    crate::synth::render_symbol_stack(z, resolution)
}

fn stack_space<'a>(toolbox: &'a crate::toolbox::Toolbox) -> InputSpace<'a> {
    InputSpace::ToolStack { toolbox, placeholder: PlaceholderSpec::default() }
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// Criterion 1: a knockout-trained estimator matches the exact marginal
/// conditional within L-inf 0.05 over all masks and observed configurations.
pub fn criterion_1() -> Result<CriterionResult> {
    let started = Instant::now();
    let spec = DiscreteTaskSpec::binary(
        3,
        DiscreteLabelRule::Noisy {
            base: Box::new(DiscreteLabelRule::CountThreshold { threshold: 1 }),
            flip_prob: 0.1,
        },
        (8, 8),
        101,
    );
    let joint = discrete_joint(&spec)?;
    let toolbox = discrete_toolbox(&spec)?;
    let train_set = generate_discrete_dataset(&spec, Split::Train, 8192)?;
    let val_set = generate_discrete_dataset(&spec, Split::ValId, 512)?;
    let mut model = FusionModel::build(FusionModelConfig::new(3, vec![8, 8], (8, 8)), 101)?;
    let config = TrainConfig {
        learning_rate: 3e-3,
        epochs: 50,
        batch_size: 64,
        schedule: Schedule::Cosine,
        alpha: 0.0,
        ..TrainConfig::cosine_defaults(101)
    };
    train(&mut model, &train_set, &val_set, stack_space(&toolbox), &config)?;

    let mut linf = 0.0f64;
    for mask in enumerate_masks(3)? {
        for code in 0..8usize {
            let z: Vec<f64> = (0..3).map(|i| ((code >> (2 - i)) & 1) as f64).collect();
            let stack = constant_stack(&z, (8, 8));
            let estimate = predict(&model, &stack, &mask, &toolbox, PlaceholderSpec::default())?;
            let oracle = marginal_conditional_oracle(&joint, &mask, &z)?[1];
            linf = linf.max((estimate - oracle).abs());
        }
    }
    Ok(finish(
        1,
        "knockout training estimates the marginal conditional",
        started,
        linf <= 0.05,
        format!("L-inf over 8 masks x 8 configs = {linf:.4} (limit 0.05)"),
    ))
}

/// Criterion 2: the Monte Carlo knockout objective equals the exact
/// mask-enumerated weighted sum within 3 standard errors.
pub fn criterion_2() -> Result<CriterionResult> {
    let started = Instant::now();
    let spec = DiscreteTaskSpec::binary(
        4,
        DiscreteLabelRule::Xor { tools: vec![0, 1, 2, 3] },
        (8, 8),
        202,
    );
    let joint = discrete_joint(&spec)?;
    let model = FusionModel::build(FusionModelConfig::new(4, vec![4], (8, 8)), 202)?;

    // Mask distribution induced by alpha = 0.9 perturbation of an all-ones
    // selection: each tool knocked out independently with probability 0.05.
    let masks = enumerate_masks(4)?;
    let mask_distribution: Vec<f64> = masks
        .iter()
        .map(|m| {
            m.bits
                .iter()
                .map(|&knocked| if knocked { 0.05 } else { 0.95 })
                .product()
        })
        .collect();

    let loss = |y: u8, z_prime: &[f64]| {
        let stack = constant_stack(z_prime, (8, 8));
        let logit = model.forward(&stack).expect("forward on fixed model");
        class_weighted_loss(&[logit], &[y], 1.0).expect("bce")
    };
    let mut rng = derive_rng(202, "decomposition_mc");
    let check = expected_loss_decomposition_check(loss, &joint, &mask_distribution, 200_000, &mut rng)?;
    let gap = (check.mc_estimate - check.exact_weighted_sum).abs();
    let passed = gap <= 3.0 * check.std_error;
    Ok(finish(
        2,
        "expected loss decomposes into a mask-weighted sum",
        started,
        passed,
        format!(
            "MC {:.5} vs exact {:.5}, |gap| {:.5} <= 3 x stderr {:.5}",
            check.mc_estimate, check.exact_weighted_sum, gap, 3.0 * check.std_error
        ),
    ))
}

/// Criterion 3: empirical inclusion under alpha-perturbation lies in the
/// exact 99% binomial interval; alpha = 1 is deterministic.
pub fn criterion_3() -> Result<CriterionResult> {
    let started = Instant::now();
    let n_draws = 10_000usize;
    let mut worst = String::new();
    let mut passed = true;
    for &alpha in &[0.0, 0.5, 0.9, 1.0] {
        // One tool with s = 0, one with s = 1.
        let selection = SelectionVector { bits: vec![false, true], source: SelectionSource::Scripted };
        let mut counts = [0usize; 2];
        let mut rng = derive_rng(303, &format!("perturb_law/{alpha}"));
        for _ in 0..n_draws {
            let include = perturb_selection(&selection, alpha, &mut rng)?;
            for (t, &inc) in include.iter().enumerate() {
                counts[t] += inc as usize;
            }
        }
        for (t, &s) in [0.0f64, 1.0].iter().enumerate() {
            let p = (1.0 - alpha) * 0.5 + alpha * s;
            let (lo, hi) = binomial_99_interval(n_draws, p);
            let k = counts[t];
            let ok = k >= lo && k <= hi;
            if alpha == 1.0 {
                let exact = if s > 0.5 { n_draws } else { 0 };
                if k != exact {
                    passed = false;
                    worst = format!("alpha=1 not deterministic: s={s}, count {k}");
                }
            }
            if !ok {
                passed = false;
                worst = format!("alpha={alpha}, s={s}: count {k} outside [{lo}, {hi}]");
            }
        }
    }
    let details = if passed {
        "all (alpha, s) cells inside the exact 99% binomial interval; alpha=1 exact".to_string()
    } else {
        worst
    };
    Ok(finish(3, "alpha-perturbation follows the stated Bernoulli law", started, passed, details))
}

/// Criterion 4: rasterizer outputs are bit-identical to per-pixel predicate
/// oracles on randomized instance sets.
pub fn criterion_4() -> Result<CriterionResult> {
    use crate::raster::{
        downsample_block_max, rasterize_bboxes, rasterize_centroids, rasterize_contours,
        rasterize_type_onehot, rasterize_type_prob, trace_line,
    };
    let started = Instant::now();
    let mut rng = derive_rng(404, "raster_oracle_cases");
    let num_types = 6usize;
    let mut mismatches: Vec<String> = Vec::new();

    // Line tracer against the closed form.
    for _ in 0..500 {
        let p0 = (rng.gen_range(-40i64..40), rng.gen_range(-40i64..40));
        let p1 = (rng.gen_range(-40i64..40), rng.gen_range(-40i64..40));
        if trace_line(p0, p1) != line_pixels_oracle(p0, p1) {
            mismatches.push(format!("line {p0:?}->{p1:?}"));
        }
    }
    // Downsampler against the interval oracle.
    for _ in 0..50 {
        let h0 = rng.gen_range(2usize..=32);
        let w0 = rng.gen_range(2usize..=32);
        let src = Array2::from_shape_fn((h0, w0), |_| rng.gen::<f64>());
        let out = (rng.gen_range(1..=h0), rng.gen_range(1..=w0));
        if downsample_block_max(&src, out)? != downsample_oracle(&src, out) {
            mismatches.push(format!("downsample {h0}x{w0}->{out:?}"));
        }
    }

    for case in 0..200 {
        let h0 = rng.gen_range(8usize..=32);
        let w0 = rng.gen_range(8usize..=32);
        let out = (rng.gen_range(4..=h0), rng.gen_range(4..=w0));
        let blob_radius = rng.gen_range(0i64..=3);
        let n_inst = rng.gen_range(0usize..=5);
        let instances: Vec<InstanceRecord> = (0..n_inst)
            .map(|_| {
                let x = rng.gen_range(0.0..(w0 as f64 - 1.5));
                let y = rng.gen_range(0.0..(h0 as f64 - 1.5));
                let bw = rng.gen_range(1.0..=(w0 as f64 - x));
                let bh = rng.gen_range(1.0..=(h0 as f64 - y));
                let n_verts = rng.gen_range(3usize..=7);
                let contour = (0..n_verts)
                    .map(|_| {
                        [
                            rng.gen_range(0.0..(w0 as f64 - 0.51)),
                            rng.gen_range(0.0..(h0 as f64 - 0.51)),
                        ]
                    })
                    .collect();
                InstanceRecord {
                    bbox: [x, y, bw, bh],
                    centroid: [rng.gen_range(0.0..w0 as f64 - 0.51), rng.gen_range(0.0..h0 as f64 - 0.51)],
                    contour,
                    type_label: rng.gen_range(0..num_types),
                    type_prob: rng.gen_range(0.0..=1.0),
                }
            })
            .collect();
        let source = (h0, w0);

        let checks: [(&str, bool); 5] = [
            (
                "bbox",
                rasterize_bboxes(&instances, source, out)?.data().index_axis(Axis(0), 0)
                    == bbox_map_oracle(&instances, source, out),
            ),
            (
                "centroid",
                rasterize_centroids(&instances, blob_radius, source, out)?
                    .data()
                    .index_axis(Axis(0), 0)
                    == centroid_map_oracle(&instances, blob_radius, source, out),
            ),
            (
                "contour",
                rasterize_contours(&instances, source, out)?.data().index_axis(Axis(0), 0)
                    == contour_map_oracle(&instances, source, out),
            ),
            (
                "type_onehot",
                *rasterize_type_onehot(&instances, num_types, source, out)?.data()
                    == type_onehot_oracle(&instances, num_types, source, out),
            ),
            (
                "type_prob",
                rasterize_type_prob(&instances, source, out)?.data().index_axis(Axis(0), 0)
                    == type_prob_oracle(&instances, source, out),
            ),
        ];
        for (name, ok) in checks {
            if !ok {
                mismatches.push(format!("case {case}: {name} differs"));
            }
        }
    }
    let passed = mismatches.is_empty();
    let details = if passed {
        "200 instance sets + 500 lines + 50 downsamples bit-identical to oracles".to_string()
    } else {
        format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
    };
    Ok(finish(4, "rasterizers equal the per-pixel predicate oracles", started, passed, details))
}

/// Balanced enumerated validation set for the copy task: every (z1,z2,z3)
/// configuration replicated equally, label = z1. Knocking out tool 1 then
/// caps accuracy at exactly 0.5.
fn enumerated_copy_val(resolution: (usize, usize), copies: usize) -> LabeledDataset {
    let mut items = Vec::with_capacity(8 * copies);
    for code in 0..8usize {
        let z: Vec<f64> = (0..3).map(|i| ((code >> (2 - i)) & 1) as f64).collect();
        for rep in 0..copies {
            items.push(DatasetItem {
                image_id: format!("val_{code}_{rep}"),
                tool_stack: Some(constant_stack(&z, resolution)),
                raw_image: None,
                instances: vec![],
                source_size: resolution,
                label: z[0] as u8,
                selection: SelectionVector::all_selected(3),
            });
        }
    }
    LabeledDataset { items, split: Split::ValId }
}

/// Criterion 5: leave-one-out importance on the Y = z1 task concentrates on
/// tool 1.
pub fn criterion_5() -> Result<CriterionResult> {
    let started = Instant::now();
    let mut passed = true;
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let spec = DiscreteTaskSpec::binary(3, DiscreteLabelRule::Copy { tool: 0 }, (8, 8), 500 + seed);
        let toolbox = discrete_toolbox(&spec)?;
        let train_set = generate_discrete_dataset(&spec, Split::Train, 2048)?;
        let val_set = enumerated_copy_val((8, 8), 32);
        let mut model = FusionModel::build(FusionModelConfig::new(3, vec![8, 8], (8, 8)), seed)?;
        let config = TrainConfig {
            learning_rate: 2e-3,
            epochs: 30,
            batch_size: 32,
            schedule: Schedule::Cosine,
            alpha: 0.9,
            seed,
            ..TrainConfig::cosine_defaults(seed)
        };
        let (ckpt, _) = train(&mut model, &train_set, &val_set, stack_space(&toolbox), &config)?;
        let report = crate::analysis::tool_importance(
            &ckpt.restore()?,
            &val_set,
            &toolbox,
            PlaceholderSpec::default(),
            MetricKind::Accuracy,
        )?;
        let i1 = report.rows[0].importance;
        let ok = (0.4..=0.5).contains(&i1)
            && report.rows[1..].iter().all(|r| r.importance.abs() <= 0.05);
        passed &= ok;
        lines.push(format!(
            "seed {seed}: I = [{:.3}, {:.3}, {:.3}]",
            report.rows[0].importance, report.rows[1].importance, report.rows[2].importance
        ));
    }
    Ok(finish(
        5,
        "importance isolates the label-carrying tool",
        started,
        passed,
        lines.join("; "),
    ))
}

/// Criterion 6: fraction-negative is non-decreasing in instance-dropout
/// probability on the count-threshold task, and 1.0 at p_mask = 1.
pub fn criterion_6() -> Result<CriterionResult> {
    let started = Instant::now();
    let mut passed = true;
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let spec = ImageTaskSpec {
            canvas_size: (48, 48),
            out_size: (16, 16),
            num_types: 3,
            instance_count_range: (0, 7),
            instance_radius_range: (2.5, 4.0),
            min_separation: 12.0,
            label_rule: ImageLabelRule::CountThreshold { threshold: 3 },
            raw_contrast: 0.3,
            raw_noise_std: 0.0,
            type_flip_prob: 0.0,
            marker: None,
            seed: 600 + seed,
        };
        let toolbox = image_toolbox(&spec)?;
        let train_set = generate_image_dataset(&spec, Split::Train, 512)?;
        let val_set = generate_image_dataset(&spec, Split::ValId, 200)?;
        let mut model = FusionModel::build(
            FusionModelConfig::new(toolbox.total_channels(), vec![8, 16], (16, 16)),
            seed,
        )?;
        let config = TrainConfig {
            epochs: 15,
            batch_size: 32,
            alpha: 1.0,
            seed,
            ..TrainConfig::cosine_defaults(seed)
        };
        train(&mut model, &train_set, &val_set, stack_space(&toolbox), &config)?;
        let grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let points = crate::analysis::intervention_sweep(
            &model,
            &val_set,
            &toolbox,
            PlaceholderSpec::default(),
            &grid,
            900 + seed,
        )?;
        let fractions: Vec<f64> = points.iter().map(|p| p.fraction_negative).collect();
        let monotone = fractions[..5].windows(2).all(|w| w[1] >= w[0]);
        let saturated = fractions[5] == 1.0;
        passed &= monotone && saturated;
        lines.push(format!(
            "seed {seed}: {:?}{}",
            fractions,
            if monotone && saturated { "" } else { " <- violation" }
        ));
    }
    Ok(finish(6, "instance dropout drives predictions negative", started, passed, lines.join("; ")))
}

fn planted_type_spec(seed: u64, type_flip_prob: f64, marker: Option<MarkerSpec>) -> ImageTaskSpec {
    ImageTaskSpec {
        canvas_size: (48, 48),
        out_size: (16, 16),
        num_types: 3,
        instance_count_range: (2, 5),
        instance_radius_range: (2.5, 4.0),
        min_separation: 12.0,
        label_rule: ImageLabelRule::PlantedType { type_label: 0 },
        raw_contrast: 0.12,
        raw_noise_std: 0.15,
        type_flip_prob,
        marker,
        seed,
    }
}

/// Criterion 7: the tool-stack model dominates the raw-pixel baseline in the
/// small-data regime.
pub fn criterion_7() -> Result<CriterionResult> {
    let started = Instant::now();
    let spec = planted_type_spec(700, 0.0, None);
    let toolbox = image_toolbox(&spec)?;
    let pool = generate_image_dataset(&spec, Split::Train, 512)?;
    let val_set = generate_image_dataset(&spec, Split::ValId, 192)?;
    let base_config = TrainConfig {
        learning_rate: 3e-3,
        epochs: 60,
        batch_size: 8,
        alpha: 1.0,
        ..TrainConfig::cosine_defaults(0)
    };
    let trainers = vec![
        crate::analysis::TrainerSpec {
            name: "tool_stack".into(),
            model_config: FusionModelConfig::new(toolbox.total_channels(), vec![8, 16], (16, 16)),
            space: stack_space(&toolbox),
            train_config: base_config.clone(),
        },
        crate::analysis::TrainerSpec {
            name: "raw_pixels".into(),
            model_config: FusionModelConfig::new(3, vec![8, 16], (16, 16)),
            space: InputSpace::RawImage,
            train_config: base_config,
        },
    ];
    let sizes = [4usize, 16, 64];
    let seeds = [1u64, 2, 3, 4, 5];
    let curves = crate::analysis::data_efficiency_run(&pool, &val_set, &sizes, &seeds, &trainers)?;
    let stack_curve = &curves[0];
    let raw_curve = &curves[1];
    let mut passed = true;
    let mut lines = Vec::new();
    for (sp, rp) in stack_curve.points.iter().zip(&raw_curve.points) {
        let ok = sp.mean >= rp.mean && (sp.n != 4 || sp.mean > rp.mean);
        passed &= ok;
        lines.push(format!("n={}: stack {:.3} vs raw {:.3}", sp.n, sp.mean, rp.mean));
    }
    Ok(finish(7, "tool stacks dominate raw pixels at small n", started, passed, lines.join("; ")))
}

/// Criterion 8: rank-based AUC equals the quadratic pair-counting oracle
/// exactly.
pub fn criterion_8() -> Result<CriterionResult> {
    let started = Instant::now();
    let mut rng = derive_rng(808, "auc_cases");
    let mut passed = true;
    let mut detail = String::new();
    for case in 0..100 {
        let n = rng.gen_range(2usize..=200);
        // Quantized scores force plenty of ties, including at 0.5.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..=10) as f64) / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        // Ensure both classes.
        labels[0] = 0;
        if n > 1 {
            labels[1] = 1;
        }
        let fast = crate::metrics::compute_auc(&scores, &labels)?;
        let slow = auc_pair_oracle(&scores, &labels).expect("both classes present");
        if fast != slow {
            passed = false;
            detail = format!("case {case}: midrank {fast} != pairs {slow}");
            break;
        }
    }
    if passed {
        detail = "100 random score sets agree exactly with the pair oracle".to_string();
    }
    Ok(finish(8, "midrank AUC equals the pair-counting oracle", started, passed, detail))
}

/// Criterion 9: the dynamic cutoff selects n*k slots (plus ties) on the
/// calibration pool, exactly n*k when scores are distinct.
pub fn criterion_9() -> Result<CriterionResult> {
    let started = Instant::now();
    let mut rng = derive_rng(909, "dynamic_cutoff");
    let n = 50usize;
    let n_tools = 6usize;
    let k = 3usize;
    let mut passed = true;
    let mut lines = Vec::new();

    // Distinct scores: exact n*k.
    let pool: Vec<ToolScoreSheet> = (0..n)
        .map(|i| {
            let scores = (0..n_tools).map(|_| rng.gen::<f64>()).collect();
            ToolScoreSheet::new(format!("img_{i}"), scores).expect("scores in range")
        })
        .collect();
    let cutoff = calibrate_dynamic_cutoff(&pool, k)?;
    let selected: usize = pool.iter().map(|s| select_by_cutoff(s, cutoff).count_selected()).sum();
    if selected != n * k {
        passed = false;
    }
    lines.push(format!("distinct scores: {selected} slots (want exactly {})", n * k));

    // Quantized scores: ties allowed above the floor.
    let pool: Vec<ToolScoreSheet> = (0..n)
        .map(|i| {
            let scores = (0..n_tools).map(|_| (rng.gen_range(0..=4) as f64) / 4.0).collect();
            ToolScoreSheet::new(format!("img_{i}"), scores).expect("scores in range")
        })
        .collect();
    let cutoff = calibrate_dynamic_cutoff(&pool, k)?;
    let selected: usize = pool.iter().map(|s| select_by_cutoff(s, cutoff).count_selected()).sum();
    let ties: usize = pool
        .iter()
        .map(|s| s.scores.iter().filter(|&&v| v == cutoff).count())
        .sum();
    let ok = selected >= n * k && selected <= n * k + ties;
    passed &= ok;
    lines.push(format!(
        "tied scores: {selected} slots in [{}, {}]",
        n * k,
        n * k + ties
    ));
    Ok(finish(9, "dynamic cutoff calibrates the average selection size", started, passed, lines.join("; ")))
}

/// Criterion 10: analytic gradients of loss-of-model match central finite
/// differences on 10 random probes.
pub fn criterion_10() -> Result<CriterionResult> {
    let started = Instant::now();
    let mut worst_rel = 0.0f64;
    let mut passed = true;
    for probe in 0..10u64 {
        let mut rng = derive_rng(1000 + probe, "grad_probe");
        let channels = rng.gen_range(1usize..=3);
        let widths = vec![rng.gen_range(2usize..=4), rng.gen_range(2usize..=4)];
        let config = FusionModelConfig::new(channels, widths, (8, 8));
        let mut model = FusionModel::build(config.clone(), probe)?;
        let x = Array3::from_shape_fn((channels, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let label = rng.gen_range(0..=1u8);
        let pos_weight = rng.gen_range(0.5..2.0);

        let (logit, cache) = model.forward_cached(&x)?;
        let d_logit = class_weighted_loss_grad(&[logit], &[label], pos_weight)[0];
        let analytic = model.backward(&cache, d_logit);
        let params = model.params_flat();
        let step = 1e-3;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += step;
            model.set_params_flat(&plus)?;
            let lp = class_weighted_loss(&[model.forward(&x)?], &[label], pos_weight)?;
            let mut minus = params.clone();
            minus[i] -= step;
            model.set_params_flat(&minus)?;
            let lm = class_weighted_loss(&[model.forward(&x)?], &[label], pos_weight)?;
            let numeric = (lp - lm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[i] - numeric).abs() / denom;
            worst_rel = worst_rel.max(rel);
            if rel > 1e-4 {
                passed = false;
            }
        }
        model.set_params_flat(&params)?;
    }
    Ok(finish(
        10,
        "analytic gradients match finite differences",
        started,
        passed,
        format!("worst relative error {worst_rel:.2e} over 10 probes (limit 1e-4)"),
    ))
}

/// Noisy scripted per-item selections for the ablation experiment: the
/// informative type tool is usually picked, geometry tools are coin-flips,
/// and the spurious marker tool is picked occasionally.
fn noisy_selection(toolbox: &crate::toolbox::Toolbox, image_id: &str, seed: u64) -> SelectionVector {
    let mut rng = derive_rng(seed, &format!("noisy_selector/{image_id}"));
    let bits = toolbox
        .tool_ids()
        .iter()
        .map(|id| {
            let p = match id.as_str() {
                "nuc_type" => 0.8,
                "corner_marker" => 0.4,
                _ => 0.5,
            };
            rng.gen::<f64>() < p
        })
        .collect();
    SelectionVector { bits, source: SelectionSource::Scripted }
}

/// Criterion 11: alpha = 0.9 training beats both alpha = 1 and the all-tools
/// configuration (mean over 5 seeds) under a noisy selector and a spurious
/// train-only cue.
pub fn criterion_11() -> Result<CriterionResult> {
    let started = Instant::now();
    let spec =
        planted_type_spec(1100, 0.1, Some(MarkerSpec { train_correlation: 0.95, val_correlation: 0.5 }));
    let toolbox = image_toolbox(&spec)?;
    let base_train = generate_image_dataset(&spec, Split::Train, 512)?;
    let base_val = generate_image_dataset(&spec, Split::ValOod, 192)?;

    let with_noisy_selections = |set: &LabeledDataset| {
        let mut out = set.clone();
        for item in &mut out.items {
            item.selection = noisy_selection(&toolbox, &item.image_id, 1111);
        }
        out
    };
    let noisy_train = with_noisy_selections(&base_train);
    let noisy_val = with_noisy_selections(&base_val);

    let run = |alpha: f64, train_set: &LabeledDataset, val_set: &LabeledDataset, seed: u64| -> Result<f64> {
        let mut model = FusionModel::build(
            FusionModelConfig::new(toolbox.total_channels(), vec![8, 16], (16, 16)),
            seed,
        )?;
        let config = TrainConfig {
            learning_rate: 3e-3,
            epochs: 80,
            batch_size: 8,
            alpha,
            seed,
            ..TrainConfig::cosine_defaults(seed)
        };
        let (ckpt, _) = train(&mut model, train_set, val_set, stack_space(&toolbox), &config)?;
        Ok(ckpt.val_metric)
    };

    let seeds = [1u64, 2, 3, 4, 5];
    let mean = |values: &[f64]| values.iter().sum::<f64>() / values.len() as f64;
    let mut perturbed = Vec::new();
    let mut unperturbed = Vec::new();
    let mut all_tools = Vec::new();
    for &seed in &seeds {
        perturbed.push(run(0.9, &noisy_train, &noisy_val, seed)?);
        unperturbed.push(run(1.0, &noisy_train, &noisy_val, seed)?);
        all_tools.push(run(1.0, &base_train, &base_val, seed)?);
    }
    let (m_p, m_u, m_a) = (mean(&perturbed), mean(&unperturbed), mean(&all_tools));
    let passed = m_p >= m_u && m_p >= m_a;
    Ok(finish(
        11,
        "perturbed selection beats alpha=1 and all-tools",
        started,
        passed,
        format!("mean val accuracy: alpha=0.9 {m_p:.3}, alpha=1 {m_u:.3}, all-tools {m_a:.3}"),
    ))
}

/// Run every acceptance criterion, converting errors into failed results.
pub fn run_all() -> Vec<CriterionResult> {
    type Check = fn() -> Result<CriterionResult>;
    let checks: [(usize, &'static str, Check); 11] = [
        (1, "knockout training estimates the marginal conditional", criterion_1),
        (2, "expected loss decomposes into a mask-weighted sum", criterion_2),
        (3, "alpha-perturbation follows the stated Bernoulli law", criterion_3),
        (4, "rasterizers equal the per-pixel predicate oracles", criterion_4),
        (5, "importance isolates the label-carrying tool", criterion_5),
        (6, "instance dropout drives predictions negative", criterion_6),
        (7, "tool stacks dominate raw pixels at small n", criterion_7),
        (8, "midrank AUC equals the pair-counting oracle", criterion_8),
        (9, "dynamic cutoff calibrates the average selection size", criterion_9),
        (10, "analytic gradients match finite differences", criterion_10),
        (11, "perturbed selection beats alpha=1 and all-tools", criterion_11),
    ];
    checks
        .into_iter()
        .map(|(id, name, check)| match check() {
            Ok(result) => result,
            Err(e) => CriterionResult {
                id,
                name,
                passed: false,
                details: format!("errored: {e}"),
                seconds: 0.0,
            },
        })
        .collect()
}
