//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail summary line. Run with `cargo test --test acceptance`.

use toolfuse::verify::{self, CriterionResult};

fn check(result: toolfuse::Result<CriterionResult>) {
    let result = result.expect("criterion errored");
    println!("{}", result.summary_line());
    assert!(result.passed, "{}", result.summary_line());
}

#[test]
fn criterion_01_marginal_conditional() {
    check(verify::criterion_1());
}

#[test]
fn criterion_02_loss_decomposition() {
    check(verify::criterion_2());
}

#[test]
fn criterion_03_perturbation_law() {
    check(verify::criterion_3());
}

#[test]
fn criterion_04_rasterizer_oracles() {
    check(verify::criterion_4());
}

#[test]
fn criterion_05_tool_importance() {
    check(verify::criterion_5());
}

#[test]
fn criterion_06_intervention_monotonicity() {
    check(verify::criterion_6());
}

#[test]
fn criterion_07_data_efficiency() {
    check(verify::criterion_7());
}

#[test]
fn criterion_08_auc_oracle() {
    check(verify::criterion_8());
}

#[test]
fn criterion_09_dynamic_cutoff() {
    check(verify::criterion_9());
}

#[test]
fn criterion_10_gradient_check() {
    check(verify::criterion_10());
}

#[test]
fn criterion_11_selection_ablation() {
    check(verify::criterion_11());
}
