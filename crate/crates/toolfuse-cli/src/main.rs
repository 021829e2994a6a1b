//! Experiment orchestration CLI: config ingestion, data generation, training
//! runs, analysis dispatch, report emission, and the acceptance suite.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure, 3
//! acceptance-check failure in verify subcommands.

mod config;
mod plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use config::{ExperimentConfig, ResultRecord, ENV_SELECTOR_ENDPOINT, ENV_SELECTOR_TIMEOUT_MS};
use toolfuse::analysis;
use toolfuse::knockout::{enumerate_masks, marginal_conditional_oracle, PlaceholderSpec};
use toolfuse::metrics::MetricKind;
use toolfuse::nn::FusionModel;
use toolfuse::seed::derive_rng;
use toolfuse::selection::{
    build_selector_prompt, parse_selector_response, random_top_k, HttpSelectorClient, ImageRef,
    ParsedSelection, PromptMode, ScriptedClient, SelectionRecord, SelectionVector, SelectorClient,
    SelectorRequest,
};
use toolfuse::synth::{self, generate_discrete_dataset, generate_image_dataset};
use toolfuse::tbm::{self, Checkpoint, LabeledDataset, Split};
use toolfuse::toolbox::Toolbox;
use toolfuse::verify;

#[derive(Parser)]
#[command(name = "toolfuse", about = "tool-fusion experiment runner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task's datasets and per-image tool selections.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a fusion model and persist the run's artifacts.
    RunTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one analysis against an existing run.
    RunAnalysis {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        which: AnalysisKind,
    },
    /// Aggregate one or more runs into a single markdown report.
    EmitReport {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the acceptance suite (all criteria, or a subset by id).
    Verify {
        #[arg(long, value_delimiter = ',')]
        criteria: Option<Vec<usize>>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AnalysisKind {
    Importance,
    Intervention,
    Frequency,
    DataEfficiency,
    KnockoutVerify,
}

/// A terminal failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn acceptance(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<toolfuse::Error> for Failure {
    fn from(e: toolfuse::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenerateData { config } => cmd_generate_data(&load_config(&config)?),
        Command::RunTrain { config } => cmd_run_train(&load_config(&config)?),
        Command::RunAnalysis { config, which } => cmd_run_analysis(&load_config(&config)?, which),
        Command::EmitReport { out_dir, runs, output } => cmd_emit_report(&out_dir, &runs, output),
        Command::Verify { criteria } => cmd_verify(criteria),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let config = ExperimentConfig::load(path).map_err(Failure::validation)?;
    let violations = config.validate();
    if !violations.is_empty() {
        return Err(Failure::validation(format!(
            "config {} is invalid:\n  - {}",
            path.display(),
            violations.join("\n  - ")
        )));
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

fn selector_client(config: &ExperimentConfig) -> Result<Box<dyn SelectorClient>, Failure> {
    match config.selector.mode.as_str() {
        "scripted" => {
            let path = config.selector.responses_file.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::runtime(format!("cannot read {}: {e}", path.display()))
            })?;
            let responses: BTreeMap<String, String> = serde_json::from_str(&text)
                .map_err(|e| Failure::runtime(format!("bad responses file: {e}")))?;
            Ok(Box::new(ScriptedClient::new(responses, None)))
        }
        "http" => {
            let endpoint = std::env::var(ENV_SELECTOR_ENDPOINT).map_err(|_| {
                Failure::runtime(format!(
                    "selector mode 'http' needs {ENV_SELECTOR_ENDPOINT} set"
                ))
            })?;
            let mut client = HttpSelectorClient::new(endpoint, config.selector.max_retries);
            if let Ok(ms) = std::env::var(ENV_SELECTOR_TIMEOUT_MS) {
                let ms: u64 = ms.parse().map_err(|_| {
                    Failure::runtime(format!("{ENV_SELECTOR_TIMEOUT_MS} must be an integer"))
                })?;
                client = client.with_timeout(std::time::Duration::from_millis(ms));
            }
            Ok(Box::new(client))
        }
        other => Err(Failure::runtime(format!("mode '{other}' has no client"))),
    }
}

/// Produce one selection per item, honoring the configured selector mode.
fn assign_selections(
    config: &ExperimentConfig,
    toolbox: &Toolbox,
    dataset: &mut LabeledDataset,
) -> Result<Vec<SelectionRecord>, Failure> {
    let n = toolbox.len();
    let k = config.selector.k;
    let mode = config.selector.mode.as_str();
    let client = match mode {
        "scripted" | "http" => Some(selector_client(config)?),
        _ => None,
    };
    let prompt = build_selector_prompt(
        &config.selector.task_description,
        "synthetic",
        k,
        toolbox,
        PromptMode::Fixed,
    );
    let mut records = Vec::with_capacity(dataset.len());
    for item in &mut dataset.items {
        let selection = match mode {
            "all" => SelectionVector::all_selected(n),
            "random_top_k" => {
                let mut rng = derive_rng(config.seed, &format!("selector/{}", item.image_id));
                random_top_k(n, k.min(n), &mut rng)?
            }
            _ => {
                let client = client.as_ref().expect("client built for this mode");
                let request = SelectorRequest {
                    prompt: prompt.clone(),
                    image: ImageRef::Path(item.image_id.clone()),
                };
                let raw = client.request(&request).map_err(|e| {
                    Failure::runtime(format!("selector request for {}: {e}", item.image_id))
                })?;
                match parse_selector_response(&raw, toolbox, k)? {
                    ParsedSelection::Selected(s) => s,
                    ParsedSelection::Abstain => SelectionVector::all_selected(n),
                }
            }
        };
        item.selection = selection.clone();
        records.push(SelectionRecord {
            image_id: item.image_id.clone(),
            bits: selection.bits,
            source: selection.source,
            scores: None,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

fn generate_datasets(
    config: &ExperimentConfig,
) -> Result<(LabeledDataset, LabeledDataset, Vec<SelectionRecord>), Failure> {
    let toolbox = config.toolbox()?;
    let (mut train_set, mut val_set) = if let Some(spec) = config.discrete_spec() {
        let spec = spec?;
        (
            generate_discrete_dataset(&spec, Split::Train, config.data.n_train)?,
            generate_discrete_dataset(&spec, Split::ValId, config.data.n_val)?,
        )
    } else {
        let spec = config.image_spec().expect("validated task")?;
        (
            generate_image_dataset(&spec, Split::Train, config.data.n_train)?,
            generate_image_dataset(&spec, Split::ValId, config.data.n_val)?,
        )
    };
    let mut records = assign_selections(config, &toolbox, &mut train_set)?;
    records.extend(assign_selections(config, &toolbox, &mut val_set)?);
    Ok((train_set, val_set, records))
}

fn cmd_generate_data(config: &ExperimentConfig) -> Result<(), Failure> {
    let (train_set, val_set, records) = generate_datasets(config)?;
    synth::save_dataset(&config.data_dir.join("train"), &train_set)?;
    synth::save_dataset(&config.data_dir.join("val"), &val_set)?;
    toolfuse::selection::write_selection_jsonl(
        &config.data_dir.join("selections.jsonl"),
        &records,
    )?;
    println!(
        "wrote {} train / {} val items to {}",
        train_set.len(),
        val_set.len(),
        config.data_dir.display()
    );
    Ok(())
}

/// Load persisted datasets, generating (and persisting) them first if the
/// data directory is not populated yet.
fn load_or_generate(
    config: &ExperimentConfig,
) -> Result<(LabeledDataset, LabeledDataset), Failure> {
    if !config.data_dir.join("train").join("manifest.json").exists() {
        cmd_generate_data(config)?;
    }
    Ok((
        synth::load_dataset(&config.data_dir.join("train"))?,
        synth::load_dataset(&config.data_dir.join("val"))?,
    ))
}

// ---------------------------------------------------------------------------
// Artifact bookkeeping
// ---------------------------------------------------------------------------

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::runtime(format!("cannot hash {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_config_lock(config: &ExperimentConfig, run_dir: &Path) -> Result<(), Failure> {
    let lock = serde_json::json!({
        "fingerprint": config.fingerprint(),
        "config": config,
    });
    std::fs::write(
        run_dir.join("config.lock"),
        serde_json::to_string_pretty(&lock).expect("lock serialization"),
    )
    .map_err(|e| Failure::runtime(format!("cannot write config.lock: {e}")))
}

fn append_result(run_dir: &Path, record: ResultRecord) -> Result<(), Failure> {
    let path = run_dir.join("results.json");
    let mut records: Vec<ResultRecord> = if path.exists() {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::runtime(format!("cannot read results.json: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::runtime(format!("corrupt results.json: {e}")))?
    } else {
        Vec::new()
    };
    records.push(record);
    std::fs::write(&path, serde_json::to_string_pretty(&records).expect("record serialization"))
        .map_err(|e| Failure::runtime(format!("cannot write results.json: {e}")))
}

struct RecordBuilder {
    run_id: String,
    command: String,
    fingerprint: String,
    started: Instant,
    started_unix: u64,
    artifacts: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
}

impl RecordBuilder {
    fn new(config: &ExperimentConfig, command: &str) -> Self {
        Self {
            run_id: config.run_id.clone(),
            command: command.into(),
            fingerprint: config.fingerprint(),
            started: Instant::now(),
            started_unix: unix_now(),
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn artifact(&mut self, run_dir: &Path, relative: &str) -> Result<(), Failure> {
        let digest = sha256_file(&run_dir.join(relative))?;
        self.artifacts.insert(relative.into(), digest);
        Ok(())
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn finish(self) -> ResultRecord {
        ResultRecord {
            run_id: self.run_id,
            command: self.command,
            config_fingerprint: self.fingerprint,
            artifacts: self.artifacts,
            metrics: self.metrics,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
        }
    }
}

// ---------------------------------------------------------------------------
// run-train
// ---------------------------------------------------------------------------

fn cmd_run_train(config: &ExperimentConfig) -> Result<(), Failure> {
    let run_dir = config.run_dir();
    std::fs::create_dir_all(run_dir.join("plots"))
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", run_dir.display())))?;
    let mut record = RecordBuilder::new(config, "run-train");

    let (train_set, val_set) = load_or_generate(config)?;
    let toolbox = config.toolbox()?;
    let mut train_config = config.train_config();
    if train_config.loss == toolfuse::tbm::LossKind::ClassWeightedBce {
        train_config.pos_weight = train_set.pos_weight()?;
    }
    let mut model = FusionModel::build(config.model_config(&toolbox), config.seed)?;
    let space = config.input_space(&toolbox);
    let (checkpoint, history) = tbm::train(&mut model, &train_set, &val_set, space, &train_config)?;

    write_config_lock(config, &run_dir)?;
    checkpoint.save(&run_dir.join("checkpoint"))?;
    tbm::write_history_jsonl(&run_dir.join("history.jsonl"), &history)?;
    let selections: Vec<SelectionRecord> = train_set
        .items
        .iter()
        .chain(&val_set.items)
        .map(|item| SelectionRecord {
            image_id: item.image_id.clone(),
            bits: item.selection.bits.clone(),
            source: item.selection.source,
            scores: None,
        })
        .collect();
    toolfuse::selection::write_selection_jsonl(&run_dir.join("selections.jsonl"), &selections)?;

    record.metric("val_metric", checkpoint.val_metric);
    record.metric("best_epoch", checkpoint.epoch as f64);
    if let Some(last) = history.last() {
        record.metric("final_train_loss", last.train_loss);
    }
    for relative in ["config.lock", "checkpoint.bin", "checkpoint.json", "history.jsonl", "selections.jsonl"] {
        record.artifact(&run_dir, relative)?;
    }
    append_result(&run_dir, record.finish())?;
    println!(
        "run {}: best val metric {:.4} at epoch {}",
        config.run_id, checkpoint.val_metric, checkpoint.epoch
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run-analysis
// ---------------------------------------------------------------------------

fn load_checkpoint(run_dir: &Path) -> Result<Checkpoint, Failure> {
    let base = run_dir.join("checkpoint");
    if !base.with_extension("json").exists() {
        return Err(Failure::runtime(format!(
            "missing checkpoint: expected {} (run run-train first)",
            base.with_extension("json").display()
        )));
    }
    Ok(Checkpoint::load(&base)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json serialization"))
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_run_analysis(config: &ExperimentConfig, which: AnalysisKind) -> Result<(), Failure> {
    let run_dir = config.run_dir();
    std::fs::create_dir_all(run_dir.join("plots"))
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", run_dir.display())))?;
    let toolbox = config.toolbox()?;
    let placeholder = PlaceholderSpec::default();
    let mut record = RecordBuilder::new(config, &format!("run-analysis {which:?}"));

    match which {
        AnalysisKind::Importance => {
            let model = load_checkpoint(&run_dir)?.restore()?;
            let (_, val_set) = load_or_generate(config)?;
            let report = analysis::tool_importance(
                &model,
                &val_set,
                &toolbox,
                placeholder,
                MetricKind::Accuracy,
            )?;
            write_json(&run_dir.join("importance.json"), &report)?;
            let values: Vec<f64> = report.rows.iter().map(|r| r.importance).collect();
            plots::bar_chart(&run_dir.join("plots/importance.png"), &values)
                .map_err(Failure::runtime)?;
            for row in &report.rows {
                record.metric(&format!("importance_{}", row.tool_id), row.importance);
            }
            record.artifact(&run_dir, "importance.json")?;
            record.artifact(&run_dir, "plots/importance.png")?;
        }
        AnalysisKind::Intervention => {
            if config.task.image.is_none() {
                return Err(Failure::validation(
                    "intervention analysis needs an image task with instances",
                ));
            }
            let model = load_checkpoint(&run_dir)?.restore()?;
            let (_, val_set) = load_or_generate(config)?;
            let points = analysis::intervention_sweep(
                &model,
                &val_set,
                &toolbox,
                placeholder,
                &config.analysis.p_mask_grid,
                config.seed,
            )?;
            write_json(&run_dir.join("intervention.json"), &points)?;
            let series = plots::Series {
                xs: points.iter().map(|p| p.p_mask).collect(),
                ys: points.iter().map(|p| p.fraction_negative).collect(),
                ci_half_widths: None,
            };
            plots::line_plot(&run_dir.join("plots/intervention.png"), &[series])
                .map_err(Failure::runtime)?;
            for p in &points {
                record.metric(&format!("fraction_negative_at_{}", p.p_mask), p.fraction_negative);
            }
            record.artifact(&run_dir, "intervention.json")?;
            record.artifact(&run_dir, "plots/intervention.png")?;
        }
        AnalysisKind::Frequency => {
            let path = run_dir.join("selections.jsonl");
            let path = if path.exists() { path } else { config.data_dir.join("selections.jsonl") };
            let stored = toolfuse::selection::read_selection_jsonl(&path)?;
            let selections: Vec<SelectionVector> = stored
                .into_iter()
                .map(|r| SelectionVector { bits: r.bits, source: r.source })
                .collect();
            let report = analysis::selection_frequency(&selections)?;
            write_json(&run_dir.join("frequency.json"), &report)?;
            plots::bar_chart(&run_dir.join("plots/frequency.png"), &report.per_tool)
                .map_err(Failure::runtime)?;
            record.metric("n_selections", report.n as f64);
            record.artifact(&run_dir, "frequency.json")?;
            record.artifact(&run_dir, "plots/frequency.png")?;
        }
        AnalysisKind::DataEfficiency => {
            let (train_set, val_set) = load_or_generate(config)?;
            let base_config = config.train_config();
            let mut trainers = vec![analysis::TrainerSpec {
                name: "tool_stack".into(),
                model_config: config.model_config(&toolbox),
                space: toolfuse::tbm::InputSpace::ToolStack { toolbox: &toolbox, placeholder },
                train_config: base_config.clone(),
            }];
            if config.task.image.is_some() {
                trainers.push(analysis::TrainerSpec {
                    name: "raw_pixels".into(),
                    model_config: toolfuse::nn::FusionModelConfig::new(
                        3,
                        config.train.conv_widths.clone(),
                        config.map_resolution(),
                    ),
                    space: toolfuse::tbm::InputSpace::RawImage,
                    train_config: base_config,
                });
            }
            let curves = analysis::data_efficiency_run(
                &train_set,
                &val_set,
                &config.analysis.data_efficiency_sizes,
                &config.analysis.data_efficiency_seeds,
                &trainers,
            )?;
            write_json(&run_dir.join("data_efficiency.json"), &curves)?;
            let series: Vec<plots::Series> = curves
                .iter()
                .map(|curve| plots::Series {
                    xs: curve.points.iter().map(|p| p.n as f64).collect(),
                    ys: curve.points.iter().map(|p| p.mean).collect(),
                    ci_half_widths: curve
                        .points
                        .iter()
                        .map(|p| p.ci_half_width)
                        .collect::<Option<Vec<f64>>>(),
                })
                .collect();
            plots::line_plot(&run_dir.join("plots/data_efficiency.png"), &series)
                .map_err(Failure::runtime)?;
            for curve in &curves {
                for p in &curve.points {
                    record.metric(&format!("{}_mean_at_{}", curve.trainer, p.n), p.mean);
                }
            }
            record.artifact(&run_dir, "data_efficiency.json")?;
            record.artifact(&run_dir, "plots/data_efficiency.png")?;
        }
        AnalysisKind::KnockoutVerify => {
            let Some(spec) = config.discrete_spec() else {
                return Err(Failure::validation(
                    "knockout-verify needs a discrete task with a known joint",
                ));
            };
            let spec = spec?;
            let model = load_checkpoint(&run_dir)?.restore()?;
            let joint = synth::discrete_joint(&spec)?;
            let resolution = config.map_resolution();
            let mut table = Vec::new();
            let mut worst = 0.0f64;
            for mask in enumerate_masks(spec.n_tools)? {
                let mut linf = 0.0f64;
                for row in joint.rows() {
                    let stack = synth::render_symbol_stack(&row.z, resolution);
                    let estimate = tbm::predict(&model, &stack, &mask, &toolbox, placeholder)?;
                    let oracle = marginal_conditional_oracle(&joint, &mask, &row.z)?[1];
                    linf = linf.max((estimate - oracle).abs());
                }
                worst = worst.max(linf);
                table.push(serde_json::json!({
                    "mask": mask.bits,
                    "linf_error": linf,
                }));
            }
            write_json(&run_dir.join("knockout_verify.json"), &table)?;
            record.metric("worst_linf_error", worst);
            record.artifact(&run_dir, "knockout_verify.json")?;
            append_result(&run_dir, record.finish())?;
            println!("knockout-verify: worst per-mask L-inf error {worst:.4}");
            if worst > 0.05 {
                return Err(Failure::acceptance(format!(
                    "trained conditional deviates from the marginalization oracle: L-inf {worst:.4} > 0.05"
                )));
            }
            return Ok(());
        }
    }
    append_result(&run_dir, record.finish())?;
    println!("analysis {which:?} written to {}", run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// emit-report
// ---------------------------------------------------------------------------

fn cmd_emit_report(
    out_dir: &Path,
    runs: &[String],
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    if runs.is_empty() {
        return Err(Failure::validation("emit-report needs at least one run id"));
    }
    let mut report = String::from("# Experiment report\n");
    for run_id in runs {
        let run_dir = out_dir.join(run_id);
        let results_path = run_dir.join("results.json");
        if !results_path.exists() {
            return Err(Failure::runtime(format!(
                "unknown run id '{run_id}': no {}",
                results_path.display()
            )));
        }
        let records: Vec<ResultRecord> = serde_json::from_str(
            &std::fs::read_to_string(&results_path)
                .map_err(|e| Failure::runtime(format!("cannot read results: {e}")))?,
        )
        .map_err(|e| Failure::runtime(format!("corrupt results.json for '{run_id}': {e}")))?;
        report.push_str(&format!("\n## Run `{run_id}`\n"));
        if let Some(first) = records.first() {
            report.push_str(&format!("- config fingerprint: `{}`\n", first.config_fingerprint));
        }
        for record in &records {
            report.push_str(&format!(
                "\n### {} ({:.1}s wall clock)\n",
                record.command, record.wall_clock_secs
            ));
            for (name, value) in &record.metrics {
                report.push_str(&format!("- {name}: {value:.6}\n"));
            }
            for relative in record.artifacts.keys() {
                if relative.ends_with(".png") {
                    report.push_str(&format!("\n![{relative}]({run_id}/{relative})\n"));
                }
            }
        }
    }
    let output = output.unwrap_or_else(|| out_dir.join("report.md"));
    std::fs::write(&output, report)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", output.display())))?;
    println!("report written to {}", output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(criteria: Option<Vec<usize>>) -> Result<(), Failure> {
    type Check = fn() -> toolfuse::Result<verify::CriterionResult>;
    let all: [(usize, Check); 11] = [
        (1, verify::criterion_1),
        (2, verify::criterion_2),
        (3, verify::criterion_3),
        (4, verify::criterion_4),
        (5, verify::criterion_5),
        (6, verify::criterion_6),
        (7, verify::criterion_7),
        (8, verify::criterion_8),
        (9, verify::criterion_9),
        (10, verify::criterion_10),
        (11, verify::criterion_11),
    ];
    let wanted: Vec<usize> = match criteria {
        Some(ids) => {
            for &id in &ids {
                if !(1..=11).contains(&id) {
                    return Err(Failure::validation(format!("criterion {id} does not exist")));
                }
            }
            ids
        }
        None => (1..=11).collect(),
    };
    let mut failures = 0usize;
    for (id, check) in all.iter().filter(|(id, _)| wanted.contains(id)) {
        let line = match check() {
            Ok(result) => {
                if !result.passed {
                    failures += 1;
                }
                result.summary_line()
            }
            Err(e) => {
                failures += 1;
                format!("criterion {id:2} [FAIL] errored: {e}")
            }
        };
        println!("{line}");
    }
    if failures > 0 {
        return Err(Failure::acceptance(format!("{failures} criterion(s) failed")));
    }
    Ok(())
}
