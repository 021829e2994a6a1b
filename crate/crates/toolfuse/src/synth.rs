//! Synthetic tasks with known ground truth.
//!
//! Two families: discrete tasks whose exact joint distribution is available
//! for oracle verification (tool values rendered as constant maps), and
//! image tasks with instance annotations so the full rasterization pipeline
//! runs end to end. Both are deterministic functions of their seed.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::connected_components;
use crate::error::{Error, Result};
use crate::knockout::{DiscreteJointTable, JointRow};
use crate::raster::{
    rasterize_bboxes, rasterize_centroids, rasterize_contours, rasterize_type_onehot,
    rasterize_type_prob, DEFAULT_BLOB_RADIUS,
};
use crate::seed::derive_rng;
use crate::selection::SelectionVector;
use crate::tbm::{DatasetItem, LabeledDataset, Split};
use crate::toolbox::{
    compute_tool_stack, FeatureMap, InstanceRecord, Modality, ToolInput, ToolSpec, Toolbox,
};

/// Label rule of a discrete task, as a conditional probability p(Y=1 | z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiscreteLabelRule {
    /// Y equals the indicated binary tool.
    Copy { tool: usize },
    /// Y is the parity of the indicated binary tools.
    Xor { tools: Vec<usize> },
    /// Y = 1 iff the number of tools at their maximum symbol exceeds the
    /// threshold.
    CountThreshold { threshold: usize },
    /// Base rule with labels flipped with probability `flip_prob`.
    Noisy {
        base: Box<DiscreteLabelRule>,
        flip_prob: f64,
    },
}

impl DiscreteLabelRule {
    /// p(Y=1 | symbols).
    pub fn prob_positive(&self, symbols: &[usize], cardinalities: &[usize]) -> f64 {
        match self {
            DiscreteLabelRule::Copy { tool } => symbols[*tool] as f64,
            DiscreteLabelRule::Xor { tools } => {
                let parity: usize = tools.iter().map(|&t| symbols[t]).sum();
                (parity % 2) as f64
            }
            DiscreteLabelRule::CountThreshold { threshold } => {
                let count = symbols
                    .iter()
                    .zip(cardinalities)
                    .filter(|(&s, &c)| s == c - 1)
                    .count();
                if count > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            DiscreteLabelRule::Noisy { base, flip_prob } => {
                let p = base.prob_positive(symbols, cardinalities);
                p * (1.0 - flip_prob) + (1.0 - p) * flip_prob
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTaskSpec {
    pub n_tools: usize,
    /// Symbols per tool; each must be >= 2.
    pub cardinalities: Vec<usize>,
    pub rule: DiscreteLabelRule,
    /// Resolution of the constant maps.
    pub map_resolution: (usize, usize),
    pub seed: u64,
}

impl DiscreteTaskSpec {
    /// Uniform binary tools with the given rule.
    pub fn binary(n_tools: usize, rule: DiscreteLabelRule, map_resolution: (usize, usize), seed: u64) -> Self {
        Self {
            n_tools,
            cardinalities: vec![2; n_tools],
            rule,
            map_resolution,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tools == 0 || self.cardinalities.len() != self.n_tools {
            return Err(Error::InvalidConfig(
                "cardinalities must list one entry per tool".into(),
            ));
        }
        if self.cardinalities.iter().any(|&c| c < 2) {
            return Err(Error::InvalidConfig("tool cardinalities must be >= 2".into()));
        }
        if self.map_resolution.0 == 0 || self.map_resolution.1 == 0 {
            return Err(Error::InvalidConfig("map resolution must be nonzero".into()));
        }
        Ok(())
    }

    /// Map a symbol to its constant map value in [0,1].
    pub fn symbol_value(&self, tool: usize, symbol: usize) -> f64 {
        symbol as f64 / (self.cardinalities[tool] - 1) as f64
    }
}

/// Exact joint distribution of the generating process: tools uniform and
/// independent, label from the rule. Zero-probability rows are omitted.
pub fn discrete_joint(spec: &DiscreteTaskSpec) -> Result<DiscreteJointTable> {
    spec.validate()?;
    let total: usize = spec.cardinalities.iter().product();
    if total > 1 << 20 {
        return Err(Error::InvalidConfig("discrete task state space too large".into()));
    }
    let prior = 1.0 / total as f64;
    let mut rows = Vec::new();
    let mut symbols = vec![0usize; spec.n_tools];
    loop {
        let z: Vec<f64> = symbols
            .iter()
            .enumerate()
            .map(|(t, &s)| spec.symbol_value(t, s))
            .collect();
        let p1 = spec.rule.prob_positive(&symbols, &spec.cardinalities);
        for (y, p) in [(0u8, prior * (1.0 - p1)), (1u8, prior * p1)] {
            if p > 0.0 {
                rows.push(JointRow { z: z.clone(), y, p });
            }
        }
        // Mixed-radix increment.
        let mut t = spec.n_tools;
        loop {
            if t == 0 {
                return DiscreteJointTable::new(rows);
            }
            t -= 1;
            symbols[t] += 1;
            if symbols[t] < spec.cardinalities[t] {
                break;
            }
            symbols[t] = 0;
        }
    }
}

/// Toolbox matching a discrete task's layout: one single-channel symbolic
/// tool per position. The compute procedures return all-zero maps; datasets
/// render the actual constant maps directly from the sampled symbols.
pub fn discrete_toolbox(spec: &DiscreteTaskSpec) -> Result<Toolbox> {
    let (h, w) = spec.map_resolution;
    let tools = (0..spec.n_tools)
        .map(|i| {
            ToolSpec::new(
                format!("sym_{i}"),
                Modality::Synthetic,
                1,
                format!("symbolic tool {i} rendered as a constant map"),
                std::sync::Arc::new(move |_: &ToolInput<'_>| Ok(FeatureMap::zeros(1, h, w))),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Toolbox::new(tools)
}

/// Render a symbol vector as a stack of constant feature maps.
pub fn render_symbol_stack(z: &[f64], resolution: (usize, usize)) -> Array3<f64> {
    let (h, w) = resolution;
    let mut stack = Array3::zeros((z.len(), h, w));
    for (t, &v) in z.iter().enumerate() {
        stack.index_axis_mut(Axis(0), t).fill(v);
    }
    stack
}

/// Sample a dataset of constant-map stacks from the task's joint.
pub fn generate_discrete_dataset(
    spec: &DiscreteTaskSpec,
    split: Split,
    n_items: usize,
) -> Result<LabeledDataset> {
    let joint = discrete_joint(spec)?;
    let (h, w) = spec.map_resolution;
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut rng = derive_rng(spec.seed, &format!("discrete/{split:?}/{i}"));
        let row = &joint.rows()[joint.sample_row(&mut rng)];
        let stack = render_symbol_stack(&row.z, (h, w));
        items.push(DatasetItem {
            image_id: format!("{split:?}_{i}").to_lowercase(),
            tool_stack: Some(stack),
            raw_image: None,
            instances: vec![],
            source_size: (h, w),
            label: row.y,
            selection: SelectionVector::all_selected(spec.n_tools),
        });
    }
    Ok(LabeledDataset { items, split })
}

/// Label rule of an image task, a deterministic function of the annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageLabelRule {
    /// Y = 1 iff the instance count exceeds the threshold.
    CountThreshold { threshold: usize },
    /// Y = 1 iff any instance carries the planted type.
    PlantedType { type_label: usize },
}

/// Apply the label rule to stored annotations.
pub fn apply_image_label_rule(rule: &ImageLabelRule, instances: &[InstanceRecord]) -> u8 {
    let hit = match rule {
        ImageLabelRule::CountThreshold { threshold } => instances.len() > *threshold,
        ImageLabelRule::PlantedType { type_label } => {
            instances.iter().any(|i| i.type_label == *type_label)
        }
    };
    hit as u8
}

/// A spurious corner patch painted into the raw image: present with
/// probability `correlation` for positive items and `1 - correlation` for
/// negative ones. Training and validation splits can correlate differently,
/// which makes the cue unreliable out of distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub train_correlation: f64,
    pub val_correlation: f64,
}

pub const MARKER_PATCH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTaskSpec {
    /// Source canvas the annotations live on.
    pub canvas_size: (usize, usize),
    /// Resolution of rasterized maps and the rendered raw image.
    pub out_size: (usize, usize),
    pub num_types: usize,
    pub instance_count_range: (usize, usize),
    pub instance_radius_range: (f64, f64),
    /// Minimum distance between centroids, in source pixels. Keeps centroid
    /// blobs disjoint after downsampling so component counting is exact.
    pub min_separation: f64,
    pub label_rule: ImageLabelRule,
    /// Brightness added to the raw image where an instance sits.
    pub raw_contrast: f64,
    /// Per-pixel Gaussian noise on the raw image.
    pub raw_noise_std: f64,
    /// Probability that a stored instance type annotation is resampled to a
    /// different type. The item label always reflects the true types, so a
    /// positive value makes the type tools imperfect predictors.
    pub type_flip_prob: f64,
    pub marker: Option<MarkerSpec>,
    pub seed: u64,
}

impl ImageTaskSpec {
    fn validate(&self) -> Result<()> {
        let (h0, w0) = self.canvas_size;
        let (h, w) = self.out_size;
        if h == 0 || w == 0 || h > h0 || w > w0 {
            return Err(Error::InvalidConfig(
                "out_size must be nonzero and no larger than the canvas".into(),
            ));
        }
        if self.num_types == 0 {
            return Err(Error::InvalidConfig("num_types must be >= 1".into()));
        }
        if let ImageLabelRule::PlantedType { type_label } = self.label_rule {
            if type_label >= self.num_types {
                return Err(Error::InvalidConfig("planted type outside the type range".into()));
            }
            if self.num_types < 2 {
                return Err(Error::InvalidConfig(
                    "planted-type tasks need at least one non-planted type".into(),
                ));
            }
        }
        if self.instance_count_range.0 > self.instance_count_range.1 {
            return Err(Error::InvalidConfig("empty instance count range".into()));
        }
        let (r_lo, r_hi) = self.instance_radius_range;
        if r_lo.is_nan() || r_lo <= 0.0 || r_hi < r_lo {
            return Err(Error::InvalidConfig("bad instance radius range".into()));
        }
        if r_hi * 2.0 + 6.0 > h0.min(w0) as f64 {
            return Err(Error::InvalidConfig("instances too large for the canvas".into()));
        }
        if self.raw_noise_std < 0.0 || self.raw_contrast < 0.0 {
            return Err(Error::InvalidConfig("raw image parameters must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.type_flip_prob) {
            return Err(Error::InvalidConfig("type_flip_prob must lie in [0,1]".into()));
        }
        if self.type_flip_prob > 0.0 && self.num_types < 2 {
            return Err(Error::InvalidConfig(
                "type_flip_prob needs at least two types".into(),
            ));
        }
        Ok(())
    }

    fn marker_correlation(&self, split: Split) -> Option<f64> {
        self.marker.map(|m| match split {
            Split::Train => m.train_correlation,
            _ => m.val_correlation,
        })
    }
}

/// The instance-derived tools for image tasks, plus the marker-patch reader
/// when the task plants one.
pub fn image_toolbox(spec: &ImageTaskSpec) -> Result<Toolbox> {
    let out = spec.out_size;
    let num_types = spec.num_types;
    let mut tools = vec![
        ToolSpec::new(
            "nuc_centroid",
            Modality::Synthetic,
            1,
            "instance centroids as small disc blobs",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                rasterize_centroids(inp.instances, DEFAULT_BLOB_RADIUS, inp.source_size, out)
            }),
        )?,
        ToolSpec::new(
            "nuc_bbox",
            Modality::Synthetic,
            1,
            "filled instance bounding boxes",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                rasterize_bboxes(inp.instances, inp.source_size, out)
            }),
        )?,
        ToolSpec::new(
            "nuc_contour",
            Modality::Synthetic,
            1,
            "instance boundary polygons",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                rasterize_contours(inp.instances, inp.source_size, out)
            }),
        )?,
        ToolSpec::new(
            "nuc_type",
            Modality::Synthetic,
            num_types,
            "one-hot instance type interiors",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                rasterize_type_onehot(inp.instances, num_types, inp.source_size, out)
            }),
        )?,
        ToolSpec::new(
            "nuc_type_prob",
            Modality::Synthetic,
            1,
            "type confidence over instance interiors",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                rasterize_type_prob(inp.instances, inp.source_size, out)
            }),
        )?,
    ];
    if spec.marker.is_some() {
        tools.push(ToolSpec::new(
            "corner_marker",
            Modality::Synthetic,
            1,
            "bright corner calibration patch detector",
            std::sync::Arc::new(move |inp: &ToolInput<'_>| {
                let image = inp.image.ok_or_else(|| {
                    Error::InvalidInput("corner_marker needs the raw image".into())
                })?;
                let patch = image.slice(ndarray::s![0, 0..MARKER_PATCH, 0..MARKER_PATCH]);
                let present = patch.mean().unwrap_or(0.0) > 0.5;
                Ok(FeatureMap::zeros(1, out.0, out.1).into_inner())
                    .and_then(|mut m: Array3<f64>| {
                        if present {
                            m.fill(1.0);
                        }
                        FeatureMap::new(m)
                    })
            }),
        )?);
    }
    Toolbox::new(tools)
}

fn place_instances<R: Rng>(spec: &ImageTaskSpec, want_label: Option<u8>, rng: &mut R) -> Vec<InstanceRecord> {
    let (h0, w0) = (spec.canvas_size.0 as f64, spec.canvas_size.1 as f64);
    let (lo, hi) = spec.instance_count_range;
    let count = rng.gen_range(lo..=hi);
    let mut centroids: Vec<(f64, f64)> = Vec::new();
    let mut instances = Vec::with_capacity(count);
    for j in 0..count {
        let r = rng.gen_range(spec.instance_radius_range.0..=spec.instance_radius_range.1);
        // Rejection-sample a centroid honoring the separation constraint.
        let mut placed = None;
        for _ in 0..200 {
            let cx = rng.gen_range(r + 2.0..w0 - r - 3.0);
            let cy = rng.gen_range(r + 2.0..h0 - r - 3.0);
            if centroids
                .iter()
                .all(|&(px, py)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() >= spec.min_separation)
            {
                placed = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = placed else { break };
        centroids.push((cx, cy));

        let n_vertices = rng.gen_range(5..=8);
        let mut contour = Vec::with_capacity(n_vertices);
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in 0..n_vertices {
            let angle = 2.0 * std::f64::consts::PI * v as f64 / n_vertices as f64
                + rng.gen_range(-0.2..0.2);
            let rv = (r * rng.gen_range(0.7..=1.0)).max(1.0);
            let vx = (cx + rv * angle.cos()).clamp(0.0, w0 - 1.0);
            let vy = (cy + rv * angle.sin()).clamp(0.0, h0 - 1.0);
            min_x = min_x.min(vx);
            min_y = min_y.min(vy);
            max_x = max_x.max(vx);
            max_y = max_y.max(vy);
            contour.push([vx, vy]);
        }
        let bbox = [
            min_x.floor(),
            min_y.floor(),
            (max_x - min_x).max(1.0).ceil(),
            (max_y - min_y).max(1.0).ceil(),
        ];

        let type_label = match (&spec.label_rule, want_label) {
            (ImageLabelRule::PlantedType { type_label }, Some(1)) if j == 0 => *type_label,
            (ImageLabelRule::PlantedType { type_label }, _) => {
                // Any non-planted type.
                let mut t = rng.gen_range(0..spec.num_types - 1);
                if t >= *type_label {
                    t += 1;
                }
                t
            }
            _ => rng.gen_range(0..spec.num_types),
        };
        instances.push(InstanceRecord {
            bbox,
            centroid: [cx, cy],
            contour,
            type_label,
            type_prob: rng.gen_range(0.6..=1.0),
        });
    }
    instances
}

/// Render the raw RGB image at `out_size`: dim background, instance discs
/// tinted by type, Gaussian pixel noise, and the optional marker patch.
pub fn render_raw_image<R: Rng>(
    spec: &ImageTaskSpec,
    instances: &[InstanceRecord],
    marker_present: bool,
    rng: &mut R,
) -> Array3<f64> {
    let (h, w) = spec.out_size;
    let (h0, w0) = (spec.canvas_size.0 as f64, spec.canvas_size.1 as f64);
    let (sy, sx) = (h as f64 / h0, w as f64 / w0);
    let mut image = Array3::from_elem((3, h, w), 0.2);
    for inst in instances {
        let cx = inst.centroid[0] * sx;
        let cy = inst.centroid[1] * sy;
        let radius = ((inst.bbox[2].max(inst.bbox[3]) / 2.0) * sx).max(1.0);
        let c_main = inst.type_label % 3;
        let c_side = (inst.type_label + 1) % 3;
        for row in 0..h {
            for col in 0..w {
                let d = ((col as f64 - cx).powi(2) + (row as f64 - cy).powi(2)).sqrt();
                if d <= radius {
                    image[[c_main, row, col]] += spec.raw_contrast;
                    image[[c_side, row, col]] += spec.raw_contrast * 0.5;
                }
            }
        }
    }
    if spec.raw_noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.raw_noise_std).unwrap();
        for v in image.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    if marker_present {
        for row in 0..MARKER_PATCH.min(h) {
            for col in 0..MARKER_PATCH.min(w) {
                image[[0, row, col]] = 1.0;
            }
        }
    }
    image
}

/// Generate an image dataset: annotations, rendered raw image, and the tool
/// stack computed through the task's toolbox.
pub fn generate_image_dataset(
    spec: &ImageTaskSpec,
    split: Split,
    n_items: usize,
) -> Result<LabeledDataset> {
    spec.validate()?;
    let toolbox = image_toolbox(spec)?;
    let marker_corr = spec.marker_correlation(split);
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut rng = derive_rng(spec.seed, &format!("image/{split:?}/{i}"));
        // Alternate the intended label so tiny subsets stay balanceable;
        // the stored label is always re-derived from the annotations.
        let want = match spec.label_rule {
            ImageLabelRule::PlantedType { .. } => Some((i % 2) as u8),
            ImageLabelRule::CountThreshold { .. } => None,
        };
        let mut instances = place_instances(spec, want, &mut rng);
        let label = apply_image_label_rule(&spec.label_rule, &instances);
        let marker_present = match marker_corr {
            Some(corr) => {
                let p = if label == 1 { corr } else { 1.0 - corr };
                rng.gen::<f64>() < p
            }
            None => false,
        };
        // The raw image reflects the true instances; annotation noise below
        // only corrupts the stored records the tools read.
        let raw = render_raw_image(spec, &instances, marker_present, &mut rng);
        if spec.type_flip_prob > 0.0 {
            for inst in &mut instances {
                if rng.gen::<f64>() < spec.type_flip_prob {
                    let mut t = rng.gen_range(0..spec.num_types - 1);
                    if t >= inst.type_label {
                        t += 1;
                    }
                    inst.type_label = t;
                }
            }
        }
        let input = ToolInput {
            image: Some(&raw),
            instances: &instances,
            source_size: spec.canvas_size,
        };
        let stack = compute_tool_stack(&input, &toolbox)?;
        items.push(DatasetItem {
            image_id: format!("{split:?}_{i}").to_lowercase(),
            tool_stack: Some(stack),
            raw_image: Some(raw),
            instances,
            source_size: spec.canvas_size,
            label,
            selection: SelectionVector::all_selected(toolbox.len()),
        });
    }
    Ok(LabeledDataset { items, split })
}

/// Independent oracle that reads the label back off the rasterized stack:
/// planted type from the one-hot block, instance count from the connected
/// components of the centroid map.
pub fn stack_label_oracle(
    rule: &ImageLabelRule,
    toolbox: &Toolbox,
    stack: &Array3<f64>,
) -> Result<u8> {
    let channel_of = |id: &str| {
        toolbox
            .index_of(id)
            .map(|i| toolbox.channel_range(i))
            .ok_or_else(|| Error::InvalidInput(format!("toolbox lacks '{id}'")))
    };
    match rule {
        ImageLabelRule::PlantedType { type_label } => {
            let range = channel_of("nuc_type")?;
            let ch = range.start + type_label;
            let present = stack.index_axis(Axis(0), ch).iter().any(|&v| v > 0.0);
            Ok(present as u8)
        }
        ImageLabelRule::CountThreshold { threshold } => {
            let range = channel_of("nuc_centroid")?;
            let plane = stack.index_axis(Axis(0), range.start);
            let mask = Array2::from_shape_fn(plane.dim(), |idx| plane[idx] > 0.0);
            let count = connected_components(&mask, true).len();
            Ok((count > *threshold) as u8)
        }
    }
}

/// Uniform class-balanced subsample of `n/2` items per class.
pub fn balanced_subsample(dataset: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("subsample size {n} must be even and positive")));
    }
    let half = n / 2;
    let mut picked = Vec::with_capacity(n);
    for class in [0u8, 1u8] {
        let pool: Vec<usize> = dataset
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == class)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < half {
            return Err(Error::InvalidInput(format!(
                "class {class} has {} items, need {half}",
                pool.len()
            )));
        }
        let mut rng = derive_rng(seed, &format!("balanced_subsample/{class}"));
        let chosen = rand::seq::index::sample(&mut rng, pool.len(), half);
        picked.extend(chosen.iter().map(|j| pool[j]));
    }
    picked.sort_unstable();
    Ok(LabeledDataset {
        items: picked.iter().map(|&i| dataset.items[i].clone()).collect(),
        split: dataset.split,
    })
}

#[derive(Serialize, Deserialize)]
struct ItemMeta {
    image_id: String,
    label: u8,
    selection: SelectionVector,
    instances: Vec<InstanceRecord>,
    source_size: (usize, usize),
    stack_shape: Option<(usize, usize, usize)>,
    raw_shape: Option<(usize, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    split: Split,
    n_items: usize,
}

fn write_blob(path: &Path, data: &Array3<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for &v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path)?;
    let expected = shape.0 * shape.1 * shape.2 * 8;
    if bytes.len() != expected {
        return Err(Error::ParseError(format!(
            "blob {} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec(shape, values)
        .map_err(|e| Error::ParseError(format!("blob shape mismatch: {e}")))
}

/// Persist a dataset as a directory of per-item JSON + binary blobs with a
/// manifest.
pub fn save_dataset(dir: &Path, dataset: &LabeledDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest { split: dataset.split, n_items: dataset.len() };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (i, item) in dataset.items.iter().enumerate() {
        let meta = ItemMeta {
            image_id: item.image_id.clone(),
            label: item.label,
            selection: item.selection.clone(),
            instances: item.instances.clone(),
            source_size: item.source_size,
            stack_shape: item.tool_stack.as_ref().map(|s| s.dim()),
            raw_shape: item.raw_image.as_ref().map(|s| s.dim()),
        };
        std::fs::write(dir.join(format!("item_{i:05}.json")), serde_json::to_string(&meta)?)?;
        if let Some(stack) = &item.tool_stack {
            write_blob(&dir.join(format!("item_{i:05}.stack.bin")), stack)?;
        }
        if let Some(raw) = &item.raw_image {
            write_blob(&dir.join(format!("item_{i:05}.raw.bin")), raw)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut items = Vec::with_capacity(manifest.n_items);
    for i in 0..manifest.n_items {
        let meta: ItemMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("item_{i:05}.json")))?)?;
        let tool_stack = match meta.stack_shape {
            Some(shape) => Some(read_blob(&dir.join(format!("item_{i:05}.stack.bin")), shape)?),
            None => None,
        };
        let raw_image = match meta.raw_shape {
            Some(shape) => Some(read_blob(&dir.join(format!("item_{i:05}.raw.bin")), shape)?),
            None => None,
        };
        items.push(DatasetItem {
            image_id: meta.image_id,
            tool_stack,
            raw_image,
            instances: meta.instances,
            source_size: meta.source_size,
            label: meta.label,
            selection: meta.selection,
        });
    }
    Ok(LabeledDataset { items, split: manifest.split })
}
