//! Post-hoc analyses over frozen checkpoints: leave-one-tool-out
//! importance, instance-dropout intervention sweeps, selection statistics,
//! and the data-efficiency experiment runner.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knockout::{KnockoutMask, PlaceholderSpec};
use crate::metrics::MetricKind;
use crate::nn::{FusionModel, FusionModelConfig};
use crate::seed::derive_rng;
use crate::selection::SelectionVector;
use crate::synth::balanced_subsample;
use crate::tbm::{
    evaluate, train, EvalMetrics, InputSpace, LabeledDataset, MaskPolicy, Split, TrainConfig,
};
use crate::toolbox::{compute_tool_stack, InstanceRecord, ToolInput, Toolbox};

fn metric_of(metrics: &EvalMetrics, kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => Ok(metrics.accuracy),
        MetricKind::Auc => metrics.auc.ok_or(Error::UndefinedAuc),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolImportanceRow {
    pub tool_id: String,
    pub importance: f64,
    pub baseline: f64,
    pub ablated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub rows: Vec<ToolImportanceRow>,
    pub metric: MetricKind,
    pub split: Split,
    pub n: usize,
}

/// Leave-one-tool-out importance: baseline metric with every tool live minus
/// the metric with exactly tool `i` knocked out. The metric is computed over
/// the whole validation set (for accuracy this equals the per-item average
/// of differences; AUC is inherently set-level).
pub fn tool_importance(
    model: &FusionModel,
    val_set: &LabeledDataset,
    toolbox: &Toolbox,
    placeholder: PlaceholderSpec,
    metric: MetricKind,
) -> Result<ImportanceReport> {
    let space = InputSpace::ToolStack { toolbox, placeholder };
    let baseline = metric_of(&evaluate(model, val_set, space, MaskPolicy::None)?, metric)?;
    let mut rows = Vec::with_capacity(toolbox.len());
    for (i, spec) in toolbox.tools().iter().enumerate() {
        let mut mask = KnockoutMask::none(toolbox.len());
        mask.bits[i] = true;
        let ablated = metric_of(
            &evaluate(model, val_set, space, MaskPolicy::Fixed(&mask))?,
            metric,
        )?;
        rows.push(ToolImportanceRow {
            tool_id: spec.tool_id.clone(),
            importance: baseline - ablated,
            baseline,
            ablated,
        });
    }
    Ok(ImportanceReport { rows, metric, split: val_set.split, n: val_set.len() })
}

/// Keep each instance independently with probability `1 - p_mask`. The
/// supplied rng stream decides the fates; callers re-rasterize from the
/// survivors.
pub fn instance_dropout<R: Rng>(
    instances: &[InstanceRecord],
    p_mask: f64,
    rng: &mut R,
) -> Result<Vec<InstanceRecord>> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::InvalidInput(format!("p_mask {p_mask} outside [0,1]")));
    }
    Ok(instances
        .iter()
        .filter(|_| rng.gen::<f64>() >= p_mask)
        .cloned()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_mask: f64,
    pub fraction_negative: f64,
    pub n: usize,
}

/// Drop instances at each `p_mask`, re-rasterize through the toolbox, and
/// report the fraction of items predicted negative (probability < 0.5).
///
/// One uniform draw per instance is shared across the whole grid, so the
/// survivor sets are nested as `p_mask` grows and the sweep is coupled
/// rather than independently resampled per grid point.
pub fn intervention_sweep(
    model: &FusionModel,
    dataset: &LabeledDataset,
    toolbox: &Toolbox,
    placeholder: PlaceholderSpec,
    p_mask_grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    for &p in p_mask_grid {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("p_mask {p} outside [0,1]")));
        }
    }
    let space = InputSpace::ToolStack { toolbox, placeholder };
    // Per-item instance fates, drawn once.
    let fates: Vec<Vec<f64>> = dataset
        .items
        .iter()
        .map(|item| {
            let mut rng = derive_rng(seed, &format!("instance_dropout/{}", item.image_id));
            item.instances.iter().map(|_| rng.gen::<f64>()).collect()
        })
        .collect();

    let mut points = Vec::with_capacity(p_mask_grid.len());
    for &p_mask in p_mask_grid {
        let mut negatives = 0usize;
        for (item, fate) in dataset.items.iter().zip(&fates) {
            let survivors: Vec<InstanceRecord> = item
                .instances
                .iter()
                .zip(fate)
                .filter(|(_, &u)| u >= p_mask)
                .map(|(inst, _)| inst.clone())
                .collect();
            let input = ToolInput {
                image: item.raw_image.as_ref(),
                instances: &survivors,
                source_size: item.source_size,
            };
            let stack = compute_tool_stack(&input, toolbox)?;
            let mask = KnockoutMask::from_inclusion(&item.selection.bits);
            let prob = crate::tbm::predict(model, &stack, &mask, toolbox, placeholder)?;
            negatives += (prob < 0.5) as usize;
        }
        points.push(SweepPoint {
            p_mask,
            fraction_negative: negatives as f64 / dataset.len() as f64,
            n: dataset.len(),
        });
    }
    // Consistency anchor: p_mask = 0 must reproduce the plain evaluation.
    if let Some(anchor) = points.iter().find(|pt| pt.p_mask == 0.0) {
        let scores = crate::tbm::predict_dataset(model, dataset, space, MaskPolicy::PerItemSelection)?;
        let plain = scores.iter().filter(|&&s| s < 0.5).count() as f64 / dataset.len() as f64;
        debug_assert_eq!(anchor.fraction_negative, plain);
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    /// Mean of each tool's selection bit.
    pub per_tool: Vec<f64>,
    /// Histogram keyed by the exact bit pattern, e.g. "1010".
    pub combinations: BTreeMap<String, usize>,
    pub n: usize,
}

/// Per-tool normalized selection frequency plus the histogram of unique
/// tool combinations.
pub fn selection_frequency(selections: &[SelectionVector]) -> Result<FrequencyReport> {
    let Some(first) = selections.first() else {
        return Err(Error::InvalidInput("no selections".into()));
    };
    let n_tools = first.len();
    let mut per_tool = vec![0.0; n_tools];
    let mut combinations: BTreeMap<String, usize> = BTreeMap::new();
    for sel in selections {
        if sel.len() != n_tools {
            return Err(Error::LayoutMismatch(format!(
                "selection length {} vs {}",
                sel.len(),
                n_tools
            )));
        }
        let pattern: String = sel.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        *combinations.entry(pattern).or_default() += 1;
        for (acc, &b) in per_tool.iter_mut().zip(&sel.bits) {
            *acc += b as u8 as f64;
        }
    }
    for acc in &mut per_tool {
        *acc /= selections.len() as f64;
    }
    Ok(FrequencyReport { per_tool, combinations, n: selections.len() })
}

/// 97.5th percentile of Student's t (two-sided 95% interval).
fn t_quantile_975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
        2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
        2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    if df == 0 {
        f64::NAN
    } else if df <= TABLE.len() {
        TABLE[df - 1]
    } else {
        1.96
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyPoint {
    pub n: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% t-interval; present only with >= 3 seeds.
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyCurve {
    pub trainer: String,
    pub points: Vec<DataEfficiencyPoint>,
}

/// One contestant in the data-efficiency comparison.
#[derive(Clone)]
pub struct TrainerSpec<'a> {
    pub name: String,
    pub model_config: FusionModelConfig,
    pub space: InputSpace<'a>,
    pub train_config: TrainConfig,
}

/// For each (size, seed): balanced subsample, train every contestant with
/// the same budget, and record the best-checkpoint metric on the full
/// validation split. Aggregates mean and 95% CI over seeds.
pub fn data_efficiency_run(
    train_pool: &LabeledDataset,
    val_set: &LabeledDataset,
    sizes: &[usize],
    seeds: &[u64],
    trainers: &[TrainerSpec<'_>],
) -> Result<Vec<DataEfficiencyCurve>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("sizes must be strictly increasing".into()));
    }
    if seeds.is_empty() || trainers.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed and one trainer".into()));
    }
    let mut curves = Vec::with_capacity(trainers.len());
    for spec in trainers {
        let mut points = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut values = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let run = (|| -> Result<f64> {
                    let subset = balanced_subsample(train_pool, size, seed)?;
                    let mut model = FusionModel::build(spec.model_config.clone(), seed)?;
                    let config = TrainConfig { seed, ..spec.train_config.clone() };
                    let (ckpt, _) = train(&mut model, &subset, val_set, spec.space, &config)?;
                    Ok(ckpt.val_metric)
                })();
                values.push(run.map_err(|e| {
                    Error::InvalidInput(format!(
                        "trainer '{}' failed at size {size}, seed {seed}: {e}",
                        spec.name
                    ))
                })?);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let ci_half_width = if values.len() >= 3 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (values.len() - 1) as f64;
                Some(t_quantile_975(values.len() - 1) * (var / values.len() as f64).sqrt())
            } else {
                None
            };
            points.push(DataEfficiencyPoint { n: size, values, mean, ci_half_width });
        }
        curves.push(DataEfficiencyCurve { trainer: spec.name.clone(), points });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionSource;
    use crate::synth::{
        generate_discrete_dataset, generate_image_dataset, image_toolbox, DiscreteLabelRule,
        DiscreteTaskSpec, ImageLabelRule, ImageTaskSpec,
    };
    use crate::tbm::Schedule;

    fn copy_task_setup() -> (DiscreteTaskSpec, Toolbox) {
        let spec = DiscreteTaskSpec::binary(3, DiscreteLabelRule::Copy { tool: 0 }, (8, 8), 21);
        let toolbox = crate::synth::discrete_toolbox(&spec).unwrap();
        (spec, toolbox)
    }

    fn quick_train(
        spec: &DiscreteTaskSpec,
        toolbox: &Toolbox,
        n_train: usize,
        seed: u64,
    ) -> (FusionModel, LabeledDataset) {
        let train_set = generate_discrete_dataset(spec, Split::Train, n_train).unwrap();
        let val_set = generate_discrete_dataset(spec, Split::ValId, 128).unwrap();
        let mut model = FusionModel::build(
            FusionModelConfig::new(toolbox.total_channels(), vec![4], (8, 8)),
            seed,
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 8,
            learning_rate: 1e-2,
            schedule: Schedule::Constant,
            batch_size: 16,
            alpha: 0.5,
            seed,
            ..TrainConfig::cosine_defaults(seed)
        };
        let space = InputSpace::ToolStack { toolbox, placeholder: PlaceholderSpec::default() };
        train(&mut model, &train_set, &val_set, space, &config).unwrap();
        (model, val_set)
    }

    #[test]
    fn importance_rows_are_internally_consistent() {
        let (spec, toolbox) = copy_task_setup();
        let (model, val_set) = quick_train(&spec, &toolbox, 128, 1);
        let report = tool_importance(
            &model,
            &val_set,
            &toolbox,
            PlaceholderSpec::default(),
            MetricKind::Accuracy,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!((row.importance - (row.baseline - row.ablated)).abs() < 1e-15);
        }
    }

    #[test]
    fn copy_task_importance_concentrates_on_tool_zero() {
        let (spec, toolbox) = copy_task_setup();
        let (model, val_set) = quick_train(&spec, &toolbox, 256, 2);
        let report = tool_importance(
            &model,
            &val_set,
            &toolbox,
            PlaceholderSpec::default(),
            MetricKind::Accuracy,
        )
        .unwrap();
        assert!(
            report.rows[0].importance > 0.3,
            "I(t0) = {}",
            report.rows[0].importance
        );
        for row in &report.rows[1..] {
            assert!(row.importance.abs() <= 0.1, "{}: {}", row.tool_id, row.importance);
        }
    }

    #[test]
    fn channel_invariant_model_has_zero_importance() {
        let (spec, toolbox) = copy_task_setup();
        let mut model = FusionModel::build(
            FusionModelConfig::new(3, vec![4], (8, 8)),
            9,
        )
        .unwrap();
        // Zero every first-layer weight that reads input channel 2: the model
        // becomes functionally constant in tool 2.
        let mut params = model.params_flat();
        let (out_ch, in_ch) = (4usize, 3usize);
        for o in 0..out_ch {
            for k in 0..9 {
                params[(o * in_ch + 2) * 9 + k] = 0.0;
            }
        }
        model.set_params_flat(&params).unwrap();
        let val_set = generate_discrete_dataset(&spec, Split::ValId, 64).unwrap();
        let report = tool_importance(
            &model,
            &val_set,
            &toolbox,
            PlaceholderSpec::default(),
            MetricKind::Accuracy,
        )
        .unwrap();
        assert_eq!(report.rows[2].importance, 0.0);
    }

    #[test]
    fn dropout_boundary_cases() {
        let spec = ImageTaskSpec {
            canvas_size: (64, 64),
            out_size: (32, 32),
            num_types: 3,
            instance_count_range: (3, 5),
            instance_radius_range: (3.0, 5.0),
            min_separation: 14.0,
            label_rule: ImageLabelRule::CountThreshold { threshold: 3 },
            raw_contrast: 0.3,
            raw_noise_std: 0.0,
            type_flip_prob: 0.0,
            marker: None,
            seed: 5,
        };
        let data = generate_image_dataset(&spec, Split::ValId, 4).unwrap();
        let instances = &data.items[0].instances;
        let mut rng = derive_rng(0, "dropout");
        assert_eq!(instance_dropout(instances, 0.0, &mut rng).unwrap(), *instances);
        assert!(instance_dropout(instances, 1.0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn dropout_survivor_count_is_binomial() {
        let inst = InstanceRecord {
            bbox: [1.0, 1.0, 2.0, 2.0],
            centroid: [2.0, 2.0],
            contour: vec![[1.0, 1.0], [3.0, 1.0], [2.0, 3.0]],
            type_label: 0,
            type_prob: 1.0,
        };
        let instances = vec![inst; 1000];
        let mut rng = derive_rng(3, "binomial");
        let kept = instance_dropout(&instances, 0.4, &mut rng).unwrap().len() as f64;
        let sigma = (1000.0 * 0.4 * 0.6_f64).sqrt();
        assert!((kept - 600.0).abs() <= 3.0 * sigma, "kept {kept}");
    }

    #[test]
    fn sweep_at_zero_matches_plain_evaluation() {
        let spec = ImageTaskSpec {
            canvas_size: (64, 64),
            out_size: (16, 16),
            num_types: 3,
            instance_count_range: (0, 5),
            instance_radius_range: (3.0, 5.0),
            min_separation: 14.0,
            label_rule: ImageLabelRule::CountThreshold { threshold: 2 },
            raw_contrast: 0.3,
            raw_noise_std: 0.0,
            type_flip_prob: 0.0,
            marker: None,
            seed: 17,
        };
        let toolbox = image_toolbox(&spec).unwrap();
        let data = generate_image_dataset(&spec, Split::ValId, 12).unwrap();
        let model = FusionModel::build(
            FusionModelConfig::new(toolbox.total_channels(), vec![4], (16, 16)),
            3,
        )
        .unwrap();
        let points = intervention_sweep(
            &model,
            &data,
            &toolbox,
            PlaceholderSpec::default(),
            &[0.0, 0.5],
            99,
        )
        .unwrap();
        let space = InputSpace::ToolStack { toolbox: &toolbox, placeholder: PlaceholderSpec::default() };
        let scores =
            crate::tbm::predict_dataset(&model, &data, space, MaskPolicy::PerItemSelection).unwrap();
        let plain = scores.iter().filter(|&&s| s < 0.5).count() as f64 / data.len() as f64;
        assert_eq!(points[0].fraction_negative, plain);
        // Same seed, same sweep.
        let again = intervention_sweep(
            &model,
            &data,
            &toolbox,
            PlaceholderSpec::default(),
            &[0.0, 0.5],
            99,
        )
        .unwrap();
        assert_eq!(points, again);
    }

    #[test]
    fn frequency_invariants() {
        let sel = |bits: Vec<bool>| SelectionVector { bits, source: SelectionSource::Scripted };
        let selections = vec![
            sel(vec![true, false, true]),
            sel(vec![true, false, true]),
            sel(vec![false, false, false]),
            sel(vec![true, true, false]),
        ];
        let report = selection_frequency(&selections).unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.combinations.values().sum::<usize>(), 4);
        assert_eq!(report.combinations["101"], 2);
        assert_eq!(report.combinations["000"], 1);
        assert_eq!(report.per_tool, vec![0.75, 0.25, 0.5]);
        // Per-tool frequency equals the bit-weighted combination counts.
        for t in 0..3 {
            let weighted: usize = report
                .combinations
                .iter()
                .filter(|(pattern, _)| pattern.as_bytes()[t] == b'1')
                .map(|(_, &c)| c)
                .sum();
            assert_eq!(report.per_tool[t], weighted as f64 / 4.0);
        }
    }

    #[test]
    fn frequency_rejects_mixed_lengths_and_empty() {
        assert!(selection_frequency(&[]).is_err());
        let a = SelectionVector { bits: vec![true], source: SelectionSource::All };
        let b = SelectionVector { bits: vec![true, false], source: SelectionSource::All };
        assert!(selection_frequency(&[a, b]).is_err());
    }

    #[test]
    fn data_efficiency_reports_every_size_and_reproduces() {
        let (spec, toolbox) = copy_task_setup();
        let pool = generate_discrete_dataset(&spec, Split::Train, 64).unwrap();
        let val = generate_discrete_dataset(&spec, Split::ValId, 32).unwrap();
        let space = InputSpace::ToolStack { toolbox: &toolbox, placeholder: PlaceholderSpec::default() };
        let trainer = TrainerSpec {
            name: "stack".into(),
            model_config: FusionModelConfig::new(3, vec![4], (8, 8)),
            space,
            train_config: TrainConfig {
                epochs: 3,
                batch_size: 8,
                alpha: 1.0,
                ..TrainConfig::cosine_defaults(0)
            },
        };
        let sizes = [4, 8];
        let seeds = [1, 2, 3];
        let curves = data_efficiency_run(&pool, &val, &sizes, &seeds, std::slice::from_ref(&trainer)).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].points.len(), sizes.len());
        for (point, &size) in curves[0].points.iter().zip(&sizes) {
            assert_eq!(point.n, size);
            assert_eq!(point.values.len(), seeds.len());
            assert!(point.ci_half_width.is_some());
        }
        let again = data_efficiency_run(&pool, &val, &sizes, &seeds, &[trainer]).unwrap();
        assert_eq!(curves, again);
    }

    #[test]
    fn single_seed_full_pool_matches_direct_training() {
        let (spec, toolbox) = copy_task_setup();
        let pool = generate_discrete_dataset(&spec, Split::Train, 32).unwrap();
        let val = generate_discrete_dataset(&spec, Split::ValId, 32).unwrap();
        let space = InputSpace::ToolStack { toolbox: &toolbox, placeholder: PlaceholderSpec::default() };
        let train_config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            alpha: 1.0,
            ..TrainConfig::cosine_defaults(0)
        };
        let trainer = TrainerSpec {
            name: "stack".into(),
            model_config: FusionModelConfig::new(3, vec![4], (8, 8)),
            space,
            train_config: train_config.clone(),
        };
        let seed = 7u64;
        // Largest balanced size the pool supports.
        let minority = pool
            .items
            .iter()
            .filter(|it| it.label == 1)
            .count()
            .min(pool.items.iter().filter(|it| it.label == 0).count());
        let full = 2 * minority;
        let curves = data_efficiency_run(&pool, &val, &[full], &[seed], &[trainer]).unwrap();
        assert!(curves[0].points[0].ci_half_width.is_none());

        let subset = balanced_subsample(&pool, full, seed).unwrap();
        let mut model =
            FusionModel::build(FusionModelConfig::new(3, vec![4], (8, 8)), seed).unwrap();
        let (ckpt, _) = train(
            &mut model,
            &subset,
            &val,
            space,
            &TrainConfig { seed, ..train_config },
        )
        .unwrap();
        assert_eq!(curves[0].points[0].values[0], ckpt.val_metric);
    }

    #[test]
    fn sizes_must_strictly_increase() {
        let (spec, toolbox) = copy_task_setup();
        let pool = generate_discrete_dataset(&spec, Split::Train, 16).unwrap();
        let val = generate_discrete_dataset(&spec, Split::ValId, 16).unwrap();
        let space = InputSpace::ToolStack { toolbox: &toolbox, placeholder: PlaceholderSpec::default() };
        let trainer = TrainerSpec {
            name: "stack".into(),
            model_config: FusionModelConfig::new(3, vec![4], (8, 8)),
            space,
            train_config: TrainConfig::cosine_defaults(0),
        };
        assert!(data_efficiency_run(&pool, &val, &[8, 8], &[1], &[trainer]).is_err());
    }
}
