//! Mask algebra and placeholder substitution for tool knockout, plus the
//! brute-force marginal-conditional oracle used to verify that knockout
//! training estimates the conditional given any observed tool subset.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toolbox::Toolbox;

/// Binary mask over tools; `true` = knocked out.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnockoutMask {
    pub bits: Vec<bool>,
}

impl KnockoutMask {
    pub fn none(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn all(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    /// Complement of sampled inclusion bits: `M_i = 1 - include_i`.
    pub fn from_inclusion(include: &[bool]) -> Self {
        Self { bits: include.iter().map(|&b| !b).collect() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// The constant substituted for knocked-out channels. Must lie outside the
/// live value range [0,1] so placeholder channels are unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderSpec {
    pub value: f64,
}

impl PlaceholderSpec {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "placeholder {value} must be a finite constant outside [0,1]"
            )));
        }
        Ok(Self { value })
    }
}

impl Default for PlaceholderSpec {
    fn default() -> Self {
        Self { value: -1.0 }
    }
}

/// Replace the channel blocks of knocked-out tools with the placeholder
/// constant; all other channels pass through bit-identically.
pub fn apply_knockout(
    stack: &Array3<f64>,
    mask: &KnockoutMask,
    toolbox: &Toolbox,
    placeholder: PlaceholderSpec,
) -> Result<Array3<f64>> {
    if mask.len() != toolbox.len() {
        return Err(Error::LayoutMismatch(format!(
            "mask length {} vs toolbox size {}",
            mask.len(),
            toolbox.len()
        )));
    }
    if stack.shape()[0] != toolbox.total_channels() {
        return Err(Error::LayoutMismatch(format!(
            "stack has {} channels, toolbox declares {}",
            stack.shape()[0],
            toolbox.total_channels()
        )));
    }
    let mut out = stack.clone();
    for (i, &knocked) in mask.bits.iter().enumerate() {
        if knocked {
            for c in toolbox.channel_range(i) {
                out.index_axis_mut(ndarray::Axis(0), c).fill(placeholder.value);
            }
        }
    }
    Ok(out)
}

/// All `2^n` masks in lexicographic bit order (tool 0 is the most
/// significant bit). Guarded at `n <= 20`.
pub fn enumerate_masks(n: usize) -> Result<Vec<KnockoutMask>> {
    if n > 20 {
        return Err(Error::InvalidInput(format!("mask enumeration guarded at n <= 20, got {n}")));
    }
    let mut masks = Vec::with_capacity(1 << n);
    for code in 0..(1usize << n) {
        let bits = (0..n).map(|i| (code >> (n - 1 - i)) & 1 == 1).collect();
        masks.push(KnockoutMask { bits });
    }
    Ok(masks)
}

/// One support row of a finite joint over (tool symbols, label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub z: Vec<f64>,
    pub y: u8,
    pub p: f64,
}

/// Finite joint distribution p(z_1..z_N, y) with explicit support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJointTable {
    rows: Vec<JointRow>,
}

impl DiscreteJointTable {
    pub fn new(rows: Vec<JointRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("joint table needs at least one row".into()));
        }
        if rows.len() > 1 << 20 {
            return Err(Error::InvalidInput("joint table support limited to 2^20 rows".into()));
        }
        let n = rows[0].z.len();
        if rows.iter().any(|r| r.z.len() != n) {
            return Err(Error::InvalidInput("inconsistent tool arity across rows".into()));
        }
        if rows.iter().any(|r| r.p < 0.0 || r.y > 1) {
            return Err(Error::InvalidInput("probabilities must be >= 0 and labels binary".into()));
        }
        let total: f64 = rows.iter().map(|r| r.p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { rows })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<JointRow> = serde_json::from_str(text)?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[JointRow] {
        &self.rows
    }

    pub fn n_tools(&self) -> usize {
        self.rows[0].z.len()
    }

    /// Draw one `(z, y)` support row index.
    pub fn sample_row<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            acc += row.p;
            if u < acc {
                return i;
            }
        }
        self.rows.len() - 1
    }
}

/// Exact conditional p(y | unmasked coordinates of `observed`), obtained by
/// summing the joint over masked coordinates. Returns `[p(y=0), p(y=1)]`.
pub fn marginal_conditional_oracle(
    joint: &DiscreteJointTable,
    mask: &KnockoutMask,
    observed: &[f64],
) -> Result<[f64; 2]> {
    if mask.len() != joint.n_tools() || observed.len() != joint.n_tools() {
        return Err(Error::LayoutMismatch(format!(
            "mask/observed arity must equal joint arity {}",
            joint.n_tools()
        )));
    }
    let mut totals = [0.0f64; 2];
    for row in joint.rows() {
        let matches = row
            .z
            .iter()
            .zip(mask.bits.iter().zip(observed.iter()))
            .all(|(zi, (&masked, oi))| masked || zi == oi);
        if matches {
            totals[row.y as usize] += row.p;
        }
    }
    let evidence = totals[0] + totals[1];
    if evidence <= 0.0 {
        return Err(Error::ZeroProbabilityEvent);
    }
    Ok([totals[0] / evidence, totals[1] / evidence])
}

/// Result of comparing the Monte Carlo knockout objective against the exact
/// mask-enumerated weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub mc_estimate: f64,
    pub exact_weighted_sum: f64,
    /// Standard error of the Monte Carlo estimate.
    pub std_error: f64,
}

/// Evaluate both sides of the expected-loss decomposition for a fixed
/// predictor: the Monte Carlo estimate of `E[l(Y, f(Z'))]` under `(Z, Y)`
/// from the joint and masks from `mask_distribution`, and the exact
/// `sum_m p(M=m) E[l]`. `loss` receives the label and the knockout-applied
/// symbol vector.
pub fn expected_loss_decomposition_check<R, L>(
    loss: L,
    joint: &DiscreteJointTable,
    mask_distribution: &[f64],
    n_monte_carlo: usize,
    rng: &mut R,
) -> Result<DecompositionCheck>
where
    R: Rng,
    L: Fn(u8, &[f64]) -> f64,
{
    let n = joint.n_tools();
    let masks = enumerate_masks(n)?;
    if mask_distribution.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "mask distribution length {} must be 2^{n}",
            mask_distribution.len()
        )));
    }
    let mass: f64 = mask_distribution.iter().sum();
    if mask_distribution.iter().any(|&p| p < 0.0) || (mass - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("mask distribution must be a probability vector".into()));
    }
    let placeholder = PlaceholderSpec::default().value;

    // The loss depends only on (support row, mask); precompute the table so
    // both routes share the same deterministic evaluations.
    let loss_table: Vec<Vec<f64>> = joint
        .rows()
        .iter()
        .map(|row| {
            masks
                .iter()
                .map(|mask| {
                    let z_prime: Vec<f64> = row
                        .z
                        .iter()
                        .zip(mask.bits.iter())
                        .map(|(&z, &m)| if m { placeholder } else { z })
                        .collect();
                    loss(row.y, &z_prime)
                })
                .collect()
        })
        .collect();

    let mut exact = 0.0;
    for (mi, mask_p) in mask_distribution.iter().enumerate() {
        let mut per_mask = 0.0;
        for (ri, row) in joint.rows().iter().enumerate() {
            per_mask += row.p * loss_table[ri][mi];
        }
        exact += mask_p * per_mask;
    }

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_monte_carlo {
        let ri = joint.sample_row(rng);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut mi = masks.len() - 1;
        for (i, &p) in mask_distribution.iter().enumerate() {
            acc += p;
            if u < acc {
                mi = i;
                break;
            }
        }
        let l = loss_table[ri][mi];
        sum += l;
        sum_sq += l * l;
    }
    let mc = sum / n_monte_carlo as f64;
    let variance = (sum_sq / n_monte_carlo as f64 - mc * mc).max(0.0);
    let std_error = (variance / n_monte_carlo as f64).sqrt();
    Ok(DecompositionCheck { mc_estimate: mc, exact_weighted_sum: exact, std_error })
}

/// Uniform joint over binary tool symbols with label `y = rule(z)`.
pub fn binary_joint_from_rule<F>(n_tools: usize, rule: F) -> Result<DiscreteJointTable>
where
    F: Fn(&[f64]) -> u8,
{
    let p = 1.0 / (1usize << n_tools) as f64;
    let rows = (0..(1usize << n_tools))
        .map(|code| {
            let z: Vec<f64> = (0..n_tools)
                .map(|i| ((code >> (n_tools - 1 - i)) & 1) as f64)
                .collect();
            let y = rule(&z);
            JointRow { z, y, p }
        })
        .collect();
    DiscreteJointTable::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use crate::toolbox::{FeatureMap, Modality, ToolInput, ToolSpec};
    use ndarray::Array3;
    use std::sync::Arc;

    fn toolbox(channels: &[usize]) -> Toolbox {
        let tools = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ToolSpec::new(
                    format!("t{i}"),
                    Modality::Synthetic,
                    c,
                    "",
                    Arc::new(move |_: &ToolInput<'_>| FeatureMap::new(Array3::zeros((c, 2, 2)))),
                )
                .unwrap()
            })
            .collect();
        Toolbox::new(tools).unwrap()
    }

    fn filled_stack(fills: &[f64]) -> Array3<f64> {
        let mut stack = Array3::zeros((fills.len(), 2, 2));
        for (i, &v) in fills.iter().enumerate() {
            stack.index_axis_mut(ndarray::Axis(0), i).fill(v);
        }
        stack
    }

    #[test]
    fn knockout_formula_cases() {
        let tb = toolbox(&[1, 1]);
        let stack = filled_stack(&[0.7, 0.3]);
        let ph = PlaceholderSpec::default();

        let all = apply_knockout(&stack, &KnockoutMask::all(2), &tb, ph).unwrap();
        assert!(all.iter().all(|&v| v == -1.0));

        let none = apply_knockout(&stack, &KnockoutMask::none(2), &tb, ph).unwrap();
        assert_eq!(none, stack);

        let first = apply_knockout(
            &stack,
            &KnockoutMask { bits: vec![true, false] },
            &tb,
            ph,
        )
        .unwrap();
        assert!(first.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == -1.0));
        assert!(first.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn knockout_is_idempotent() {
        let tb = toolbox(&[2, 1]);
        let stack = filled_stack(&[0.1, 0.2, 0.9]);
        let mask = KnockoutMask { bits: vec![false, true] };
        let ph = PlaceholderSpec::default();
        let once = apply_knockout(&stack, &mask, &tb, ph).unwrap();
        let twice = apply_knockout(&once, &mask, &tb, ph).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn placeholder_detectability() {
        // A channel equals the placeholder constant iff its tool was masked;
        // live maps never attain -1.
        let tb = toolbox(&[1, 1, 1]);
        let stack = filled_stack(&[0.0, 0.5, 1.0]);
        let ph = PlaceholderSpec::default();
        for mask in enumerate_masks(3).unwrap() {
            let out = apply_knockout(&stack, &mask, &tb, ph).unwrap();
            for (i, &masked) in mask.bits.iter().enumerate() {
                let is_placeholder =
                    out.index_axis(ndarray::Axis(0), i).iter().all(|&v| v == ph.value);
                assert_eq!(is_placeholder, masked);
            }
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let tb = toolbox(&[1, 1]);
        let stack = filled_stack(&[0.7, 0.3, 0.1]);
        assert!(matches!(
            apply_knockout(&stack, &KnockoutMask::none(2), &tb, PlaceholderSpec::default()),
            Err(Error::LayoutMismatch(_))
        ));
        let stack2 = filled_stack(&[0.7, 0.3]);
        assert!(matches!(
            apply_knockout(&stack2, &KnockoutMask::none(3), &tb, PlaceholderSpec::default()),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn placeholder_must_be_out_of_range() {
        assert!(PlaceholderSpec::new(0.5).is_err());
        assert!(PlaceholderSpec::new(1.0).is_err());
        assert!(PlaceholderSpec::new(-1.0).is_ok());
        assert!(PlaceholderSpec::new(2.0).is_ok());
    }

    #[test]
    fn mask_enumeration_is_complete_and_sorted() {
        assert_eq!(
            enumerate_masks(1).unwrap(),
            vec![KnockoutMask { bits: vec![false] }, KnockoutMask { bits: vec![true] }]
        );
        let masks = enumerate_masks(3).unwrap();
        assert_eq!(masks.len(), 8);
        let mut deduped = masks.clone();
        deduped.dedup();
        assert_eq!(deduped.len(), 8);
        // Lexicographic order.
        let mut sorted = masks.clone();
        sorted.sort_by_key(|m| m.bits.clone());
        assert_eq!(masks, sorted);
        assert!(enumerate_masks(21).is_err());
    }

    fn and_joint() -> DiscreteJointTable {
        binary_joint_from_rule(2, |z| if z[0] == 1.0 && z[1] == 1.0 { 1 } else { 0 }).unwrap()
    }

    #[test]
    fn oracle_on_and_rule() {
        let joint = and_joint();
        // Mask z2, observe z1 = 1 -> p(Y=1) = 0.5.
        let p = marginal_conditional_oracle(
            &joint,
            &KnockoutMask { bits: vec![false, true] },
            &[1.0, 0.0],
        )
        .unwrap();
        assert!((p[1] - 0.5).abs() < 1e-12);
        // Mask both -> full marginal, p(Y=1) = 0.25.
        let p = marginal_conditional_oracle(&joint, &KnockoutMask::all(2), &[0.0, 0.0]).unwrap();
        assert!((p[1] - 0.25).abs() < 1e-12);
        // Mask nothing, observe (1,1) -> deterministic label.
        let p = marginal_conditional_oracle(&joint, &KnockoutMask::none(2), &[1.0, 1.0]).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_zero_probability_event() {
        let joint = binary_joint_from_rule(1, |z| z[0] as u8).unwrap();
        let err = marginal_conditional_oracle(&joint, &KnockoutMask::none(1), &[0.5]);
        assert!(matches!(err, Err(Error::ZeroProbabilityEvent)));
    }

    #[test]
    fn joint_table_validation() {
        assert!(DiscreteJointTable::new(vec![
            JointRow { z: vec![0.0], y: 0, p: 0.6 },
            JointRow { z: vec![1.0], y: 1, p: 0.5 },
        ])
        .is_err());
        let ok = DiscreteJointTable::from_json(
            r#"[{"z":[0.0],"y":0,"p":0.5},{"z":[1.0],"y":1,"p":0.5}]"#,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn decomposition_single_mask_collapses() {
        let joint = and_joint();
        // Deterministic mask distribution concentrated on mask (0,1).
        let mut dist = vec![0.0; 4];
        dist[1] = 1.0;
        let mut rng = derive_rng(5, "decomp_single");
        let loss = |y: u8, z: &[f64]| {
            // Squared error against a fixed linear score.
            let s = 0.3 * z[0] + 0.2 * z[1];
            (y as f64 - s).powi(2)
        };
        let check =
            expected_loss_decomposition_check(loss, &joint, &dist, 20_000, &mut rng).unwrap();
        assert!(
            (check.mc_estimate - check.exact_weighted_sum).abs()
                <= 3.0 * check.std_error.max(1e-12),
            "mc {} vs exact {}",
            check.mc_estimate,
            check.exact_weighted_sum
        );
    }

    #[test]
    fn decomposition_zero_loss_model() {
        let joint = and_joint();
        let dist = vec![0.25; 4];
        let mut rng = derive_rng(6, "decomp_zero");
        let check =
            expected_loss_decomposition_check(|_, _| 0.0, &joint, &dist, 1000, &mut rng).unwrap();
        assert_eq!(check.mc_estimate, 0.0);
        assert_eq!(check.exact_weighted_sum, 0.0);
    }
}
