//! Per-image tool selection: scripted and score-based selectors, the
//! selector-service protocol, and the alpha-perturbation sampling law that
//! blends a uniform prior with the selector's choice.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toolbox::Toolbox;

/// Default number of tools a selector picks per image.
pub const DEFAULT_K: usize = 3;

/// Default strength of the selector prior in the perturbation law.
pub const DEFAULT_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Scripted,
    Vlm,
    Topk,
    Dynamic,
    All,
}

/// Binary per-tool indicator aligned to toolbox order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionVector {
    pub bits: Vec<bool>,
    pub source: SelectionSource,
}

impl SelectionVector {
    pub fn all_selected(n: usize) -> Self {
        Self { bits: vec![true; n], source: SelectionSource::All }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_selected(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Per-image tool scores in [0,1], used by dynamic selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScoreSheet {
    pub image_id: String,
    pub scores: Vec<f64>,
}

impl ToolScoreSheet {
    pub fn new(image_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput("tool scores must lie in [0,1]".into()));
        }
        Ok(Self { image_id: image_id.into(), scores })
    }
}

/// Select exactly the `k` highest-scoring tools; ties break toward the lower
/// toolbox index.
pub fn select_top_k(sheet: &ToolScoreSheet, k: usize) -> Result<SelectionVector> {
    let n = sheet.scores.len();
    if k > n {
        return Err(Error::InvalidInput(format!("k={k} exceeds toolbox size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sheet.scores[b]
            .partial_cmp(&sheet.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &i in order.iter().take(k) {
        bits[i] = true;
    }
    Ok(SelectionVector { bits, source: SelectionSource::Topk })
}

/// Compute the score cutoff that yields `k` selected tools per image on
/// average over the calibration pool: the `(n*k)`-th largest pooled score.
/// The same cutoff is then reused for every split.
pub fn calibrate_dynamic_cutoff(training_scores: &[ToolScoreSheet], k: usize) -> Result<f64> {
    if training_scores.is_empty() {
        return Err(Error::InvalidInput("empty calibration pool".into()));
    }
    let mut pool: Vec<f64> = training_scores.iter().flat_map(|s| s.scores.iter().copied()).collect();
    let target = training_scores.len() * k;
    if target == 0 || target > pool.len() {
        return Err(Error::InvalidInput(format!(
            "n*k = {target} outside pool size {}",
            pool.len()
        )));
    }
    pool.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(pool[target - 1])
}

/// Dynamic selection: every tool scoring at or above the calibrated cutoff.
pub fn select_by_cutoff(sheet: &ToolScoreSheet, cutoff: f64) -> SelectionVector {
    SelectionVector {
        bits: sheet.scores.iter().map(|&s| s >= cutoff).collect(),
        source: SelectionSource::Dynamic,
    }
}

/// Sample per-tool inclusion bits: tool `i` is included with probability
/// `p_i = (1 - alpha) * 0.5 + alpha * s_i`. `alpha = 1` reproduces the
/// selection deterministically; `alpha = 0` ignores it entirely.
pub fn perturb_selection<R: Rng>(
    selection: &SelectionVector,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0,1]")));
    }
    Ok(selection
        .bits
        .iter()
        .map(|&s| {
            let p = (1.0 - alpha) * 0.5 + alpha * if s { 1.0 } else { 0.0 };
            rng.gen::<f64>() < p
        })
        .collect())
}

/// Uniformly random k-subset selection.
pub fn random_top_k<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<SelectionVector> {
    if k > n {
        return Err(Error::InvalidInput(format!("k={k} exceeds toolbox size {n}")));
    }
    let chosen = rand::seq::index::sample(rng, n, k);
    let mut bits = vec![false; n];
    for i in chosen {
        bits[i] = true;
    }
    Ok(SelectionVector { bits, source: SelectionSource::Topk })
}

/// Prompting mode for the selector service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Pick up to `k` tools, returned as a ranked JSON selection.
    Fixed,
    /// Score every tool in [0,1].
    Dynamic,
}

fn render_toolbox_set(toolbox: &Toolbox) -> String {
    let ids: Vec<String> = toolbox.tools().iter().map(|t| format!("\"{}\"", t.tool_id)).collect();
    format!("{{{}}}", ids.join(", "))
}

fn render_tool_descriptions(toolbox: &Toolbox) -> String {
    let entries: Vec<String> = toolbox
        .tools()
        .iter()
        .map(|t| format!("  \"{}\": \"{}\"", t.tool_id, t.description))
        .collect();
    format!("{{\n{}\n}}", entries.join(",\n"))
}

/// Render the selector prompt for the given task and mode.
pub fn build_selector_prompt(
    task_description: &str,
    modality: &str,
    k: usize,
    toolbox: &Toolbox,
    mode: PromptMode,
) -> String {
    let toolbox_set = render_toolbox_set(toolbox);
    let descriptions = render_tool_descriptions(toolbox);
    let body = match mode {
        PromptMode::Fixed => format!(
            "You are a medical expert in {modality}. Select tools for a single \
task from a fixed toolbox {toolbox_set} described by {descriptions}. \
Choices must depend on the task and image evidence.\n\
\n\
Choose max {k} tools from the toolbox {toolbox_set}\n\
that are most relevant for solving the task in each image; no \n\
duplicates.\n\
\n\
Return ONLY JSON with the following fields:\n\
- task_modality\n\
- task\n\
- selected_tools\n\
- abstain  (boolean)\n\
\n\
Each entry in selected_tools must include:\n\
- id           (tool name from TOOLBOX)\n\
- rank         (1..N, 1 = most important)\n\
- confidence   (float in [0, 1])\n\
- reason       (brief phrase tied to image cues)\n\
\n\
If you are unsure about the modality or task, set task_modality = \n\
\"unknown\" and abstain = true.\n\
\n\
Return ONLY JSON."
        ),
        PromptMode::Dynamic => format!(
            "You are a medical expert in {modality}. Score each tool in the \n\
provided toolbox {toolbox_set} described by {descriptions} between  \n\
[0,1]. Base scores strictly on the visible image evidence and task relevance.\n\
Return JSON ONLY with keys: task_modality, task, scores.\n\
- scores must be a list of objects with: id (string), score (integer \n\
0...1).\n\
- Provide exactly one score for each tool id you are given.\n\
Scores do not need to be rounded numbers. No omission of scores."
        ),
    };
    format!("{body}\n\nTask: {task_description}")
}

/// One ranked entry of a selector response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTool {
    pub id: String,
    pub rank: usize,
    pub confidence: f64,
    pub reason: String,
}

/// The JSON object the selector service is expected to return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorResponse {
    pub task_modality: String,
    pub task: String,
    pub selected_tools: Vec<SelectedTool>,
    pub abstain: bool,
}

/// Result of interpreting a selector response.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedSelection {
    Selected(SelectionVector),
    /// The selector declined; the caller falls back to all modality-specific
    /// tools.
    Abstain,
}

/// Interpret raw selector output. Malformed JSON, unknown or duplicate tool
/// ids, confidences outside [0,1], and rank gaps are structured errors; a
/// valid selection is capped at the `k` best-ranked entries.
pub fn parse_selector_response(
    raw_text: &str,
    toolbox: &Toolbox,
    k: usize,
) -> Result<ParsedSelection> {
    let response: SelectorResponse = serde_json::from_str(raw_text)
        .map_err(|e| Error::ParseError(format!("malformed JSON: {e}")))?;
    if response.abstain {
        return Ok(ParsedSelection::Abstain);
    }
    let n = response.selected_tools.len();
    let mut seen_ids: Vec<&str> = Vec::new();
    let mut seen_ranks = vec![false; n];
    for tool in &response.selected_tools {
        if toolbox.index_of(&tool.id).is_none() {
            return Err(Error::ParseError(format!("unknown tool id '{}'", tool.id)));
        }
        if seen_ids.contains(&tool.id.as_str()) {
            return Err(Error::ParseError(format!("duplicate tool id '{}'", tool.id)));
        }
        seen_ids.push(&tool.id);
        if tool.rank < 1 || tool.rank > n {
            return Err(Error::ParseError(format!(
                "rank {} outside 1..{n} (rank gap or overflow)",
                tool.rank
            )));
        }
        if seen_ranks[tool.rank - 1] {
            return Err(Error::ParseError(format!("duplicate rank {}", tool.rank)));
        }
        seen_ranks[tool.rank - 1] = true;
        if !(0.0..=1.0).contains(&tool.confidence) {
            return Err(Error::ParseError(format!(
                "confidence {} outside [0,1]",
                tool.confidence
            )));
        }
    }
    let mut ranked: Vec<&SelectedTool> = response.selected_tools.iter().collect();
    ranked.sort_by_key(|t| t.rank);
    let mut bits = vec![false; toolbox.len()];
    for tool in ranked.into_iter().take(k) {
        bits[toolbox.index_of(&tool.id).unwrap()] = true;
    }
    Ok(ParsedSelection::Selected(SelectionVector { bits, source: SelectionSource::Vlm }))
}

/// Serialize a selection as a well-formed selector response (ranks follow
/// toolbox order). `parse_selector_response` of this output round-trips.
pub fn selection_to_response_json(selection: &SelectionVector, toolbox: &Toolbox) -> Result<String> {
    if selection.len() != toolbox.len() {
        return Err(Error::LayoutMismatch(format!(
            "selection length {} vs toolbox size {}",
            selection.len(),
            toolbox.len()
        )));
    }
    let selected_tools: Vec<SelectedTool> = selection
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .enumerate()
        .map(|(rank0, (i, _))| SelectedTool {
            id: toolbox.tools()[i].tool_id.clone(),
            rank: rank0 + 1,
            confidence: 1.0,
            reason: "scripted".into(),
        })
        .collect();
    let response = SelectorResponse {
        task_modality: "synthetic".into(),
        task: "scripted selection".into(),
        selected_tools,
        abstain: false,
    };
    Ok(serde_json::to_string(&response)?)
}

/// Image reference carried alongside the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(String),
    Base64(String),
}

/// Selector service request: prompt text plus an image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRequest {
    pub prompt: String,
    pub image: ImageRef,
}

/// Transport-agnostic selector client: send a request, get raw text back.
/// Implementations must tolerate concurrent in-flight requests.
pub trait SelectorClient: Send + Sync {
    fn request(&self, request: &SelectorRequest) -> Result<String>;
}

/// Deterministic stub client replaying canned responses keyed by the image
/// reference, with an optional fallback response.
pub struct ScriptedClient {
    responses: BTreeMap<String, String>,
    fallback: Option<String>,
}

impl ScriptedClient {
    pub fn new(responses: BTreeMap<String, String>, fallback: Option<String>) -> Self {
        Self { responses, fallback }
    }

    fn key(image: &ImageRef) -> &str {
        match image {
            ImageRef::Path(p) => p,
            ImageRef::Base64(b) => b,
        }
    }
}

impl SelectorClient for ScriptedClient {
    fn request(&self, request: &SelectorRequest) -> Result<String> {
        self.responses
            .get(Self::key(&request.image))
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| {
                Error::ParseError(format!(
                    "no canned response for image '{}'",
                    Self::key(&request.image)
                ))
            })
    }
}

/// HTTP client for a selector endpoint: POSTs the request JSON and returns
/// the raw response body. Retries up to `max_retries` times on transport
/// errors; it never guesses semantics of malformed payloads.
pub struct HttpSelectorClient {
    endpoint: String,
    max_retries: usize,
    timeout: Option<std::time::Duration>,
}

impl HttpSelectorClient {
    /// `endpoint` is `host:port` (no scheme).
    pub fn new(endpoint: impl Into<String>, max_retries: usize) -> Self {
        Self { endpoint: endpoint.into(), max_retries, timeout: None }
    }

    /// Per-request socket read/write timeout.
    pub fn with_timeout(mut self, timeout: std::time::Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    fn post_once(&self, body: &str) -> Result<String> {
        let mut stream = TcpStream::connect(&self.endpoint)?;
        stream.set_read_timeout(self.timeout)?;
        stream.set_write_timeout(self.timeout)?;
        let request = format!(
            "POST /select HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.endpoint,
            body.len(),
            body
        );
        stream.write_all(request.as_bytes())?;
        let mut reader = BufReader::new(stream);
        let mut status = String::new();
        reader.read_line(&mut status)?;
        if !status.contains("200") {
            return Err(Error::ParseError(format!("selector endpoint returned {}", status.trim())));
        }
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                break;
            }
            if let Some(v) = trimmed.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        String::from_utf8(body).map_err(|e| Error::ParseError(e.to_string()))
    }
}

impl SelectorClient for HttpSelectorClient {
    fn request(&self, request: &SelectorRequest) -> Result<String> {
        let body = serde_json::to_string(request)?;
        let mut last_err = None;
        for _ in 0..=self.max_retries {
            match self.post_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap())
    }
}

/// Minimal bundled stub server speaking the selector protocol, for
/// integration tests. Each accepted connection is answered by the handler.
pub struct StubSelectorServer {
    addr: String,
    shutdown: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubSelectorServer {
    /// Bind on an ephemeral local port and serve until dropped.
    pub fn spawn<F>(handler: F) -> Result<Self>
    where
        F: Fn(&SelectorRequest) -> String + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let shutdown = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let shutdown_flag = Arc::clone(&shutdown);
        listener.set_nonblocking(true)?;
        let handle = std::thread::spawn(move || {
            while !shutdown_flag.load(std::sync::atomic::Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = Self::handle_connection(stream, &handler);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Self { addr, shutdown, handle: Some(handle) })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn handle_connection<F>(stream: TcpStream, handler: &F) -> Result<()>
    where
        F: Fn(&SelectorRequest) -> String,
    {
        stream.set_nonblocking(false)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut request_line = String::new();
        reader.read_line(&mut request_line)?;
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                break;
            }
            if let Some(v) = trimmed.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        let request: SelectorRequest = serde_json::from_slice(&body)?;
        let response_body = handler(&request);
        let response = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            response_body.len(),
            response_body
        );
        let mut stream = reader.into_inner();
        stream.write_all(response.as_bytes())?;
        Ok(())
    }
}

impl Drop for StubSelectorServer {
    fn drop(&mut self) {
        self.shutdown.store(true, std::sync::atomic::Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Per-split persisted selection line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub image_id: String,
    pub bits: Vec<bool>,
    pub source: SelectionSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Write selections as JSON lines.
pub fn write_selection_jsonl(path: &std::path::Path, records: &[SelectionRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read selections written by [`write_selection_jsonl`].
pub fn read_selection_jsonl(path: &std::path::Path) -> Result<Vec<SelectionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use crate::toolbox::{FeatureMap, Modality, ToolInput, ToolSpec};
    use ndarray::Array3;
    use std::sync::Arc;

    fn toolbox(n: usize) -> Toolbox {
        let tools = (0..n)
            .map(|i| {
                ToolSpec::new(
                    format!("tool_{i}"),
                    Modality::Synthetic,
                    1,
                    format!("synthetic tool {i}"),
                    Arc::new(|_: &ToolInput<'_>| FeatureMap::new(Array3::zeros((1, 4, 4)))),
                )
                .unwrap()
            })
            .collect();
        Toolbox::new(tools).unwrap()
    }

    #[test]
    fn top_k_order_statistic() {
        let sheet = ToolScoreSheet::new("img", vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let sel = select_top_k(&sheet, 2).unwrap();
        assert_eq!(sel.bits, vec![true, false, true, false]);
    }

    #[test]
    fn top_k_tie_breaks_by_index() {
        let sheet = ToolScoreSheet::new("img", vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let sel = select_top_k(&sheet, 3).unwrap();
        assert_eq!(sel.bits, vec![true, true, true, false]);
    }

    #[test]
    fn top_k_full_and_overflow() {
        let sheet = ToolScoreSheet::new("img", vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(select_top_k(&sheet, 3).unwrap().count_selected(), 3);
        assert!(select_top_k(&sheet, 4).is_err());
    }

    #[test]
    fn top_k_invariant_under_monotone_transform() {
        let sheet = ToolScoreSheet::new("img", vec![0.9, 0.15, 0.8, 0.2, 0.05]).unwrap();
        let squared = ToolScoreSheet::new(
            "img",
            sheet.scores.iter().map(|s| s * s).collect(),
        )
        .unwrap();
        for k in 1..=5 {
            assert_eq!(
                select_top_k(&sheet, k).unwrap().bits,
                select_top_k(&squared, k).unwrap().bits
            );
        }
    }

    #[test]
    fn dynamic_cutoff_matches_sorted_pool() {
        let sheets = vec![
            ToolScoreSheet::new("a", vec![0.9, 0.1, 0.8, 0.2]).unwrap(),
            ToolScoreSheet::new("b", vec![0.7, 0.3, 0.6, 0.4]).unwrap(),
        ];
        let cutoff = calibrate_dynamic_cutoff(&sheets, 2).unwrap();
        assert_eq!(cutoff, 0.6);
        let sel_a = select_by_cutoff(&sheets[0], cutoff);
        let sel_b = select_by_cutoff(&sheets[1], cutoff);
        assert_eq!(sel_a.bits, vec![true, false, true, false]);
        assert_eq!(sel_b.bits, vec![true, false, true, false]);
    }

    #[test]
    fn dynamic_cutoff_boundaries() {
        let sheets = vec![ToolScoreSheet::new("a", vec![0.4, 0.9, 0.2]).unwrap()];
        // k = N -> global minimum; single image k=1 -> its maximum.
        assert_eq!(calibrate_dynamic_cutoff(&sheets, 3).unwrap(), 0.2);
        assert_eq!(calibrate_dynamic_cutoff(&sheets, 1).unwrap(), 0.9);
        assert!(calibrate_dynamic_cutoff(&sheets, 4).is_err());
        assert!(calibrate_dynamic_cutoff(&[], 1).is_err());
    }

    #[test]
    fn alpha_one_is_deterministic() {
        let sel = SelectionVector {
            bits: vec![true, false, true],
            source: SelectionSource::Scripted,
        };
        let mut rng = derive_rng(1, "alpha1");
        for _ in 0..100 {
            assert_eq!(perturb_selection(&sel, 1.0, &mut rng).unwrap(), sel.bits);
        }
    }

    #[test]
    fn alpha_outside_range_rejected() {
        let sel = SelectionVector { bits: vec![true], source: SelectionSource::Scripted };
        let mut rng = derive_rng(1, "bad");
        assert!(perturb_selection(&sel, -0.1, &mut rng).is_err());
        assert!(perturb_selection(&sel, 1.1, &mut rng).is_err());
    }

    #[test]
    fn alpha_zero_is_fair_coin() {
        let sel = SelectionVector {
            bits: vec![true, false],
            source: SelectionSource::Scripted,
        };
        let mut rng = derive_rng(2, "alpha0");
        let mut counts = [0usize; 2];
        let n = 10_000;
        for _ in 0..n {
            let inc = perturb_selection(&sel, 0.0, &mut rng).unwrap();
            for (i, &b) in inc.iter().enumerate() {
                if b {
                    counts[i] += 1;
                }
            }
        }
        for count in counts {
            let freq = count as f64 / n as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn random_top_k_has_exact_cardinality() {
        let mut rng = derive_rng(3, "rtk");
        for _ in 0..200 {
            let sel = random_top_k(5, 2, &mut rng).unwrap();
            assert_eq!(sel.count_selected(), 2);
        }
        assert_eq!(random_top_k(4, 4, &mut rng).unwrap().bits, vec![true; 4]);
        assert!(random_top_k(3, 4, &mut rng).is_err());
    }

    #[test]
    fn random_top_k_marginals_uniform() {
        let mut rng = derive_rng(4, "rtk_marginal");
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let sel = random_top_k(4, 1, &mut rng).unwrap();
            for (i, &b) in sel.bits.iter().enumerate() {
                if b {
                    counts[i] += 1;
                }
            }
        }
        for count in counts {
            let freq = count as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn fixed_prompt_contains_field_list() {
        let tb = toolbox(2);
        let prompt = build_selector_prompt("classify the patch", "histopathology", 3, &tb, PromptMode::Fixed);
        for field in ["task_modality", "task", "selected_tools", "abstain"] {
            assert!(prompt.contains(field), "missing field {field}");
        }
        assert!(prompt.contains("Return ONLY JSON"));
    }

    #[test]
    fn dynamic_prompt_requests_scores() {
        let tb = toolbox(2);
        let prompt = build_selector_prompt("classify the patch", "dermatology", 3, &tb, PromptMode::Dynamic);
        assert!(prompt.contains("Provide exactly one score for each tool id"));
    }

    #[test]
    fn single_tool_prompt_lists_it() {
        let tb = toolbox(1);
        let prompt = build_selector_prompt("task", "synthetic", 1, &tb, PromptMode::Fixed);
        assert!(prompt.contains("tool_0"));
        assert!(prompt.contains("synthetic tool 0"));
        assert!(!prompt.contains("tool_1"));
    }

    #[test]
    fn parse_valid_response() {
        let tb = toolbox(4);
        let raw = r#"{"task_modality":"synthetic","task":"t","abstain":false,
            "selected_tools":[
              {"id":"tool_2","rank":1,"confidence":0.9,"reason":"a"},
              {"id":"tool_0","rank":2,"confidence":0.8,"reason":"b"},
              {"id":"tool_3","rank":3,"confidence":0.7,"reason":"c"}]}"#;
        match parse_selector_response(raw, &tb, 3).unwrap() {
            ParsedSelection::Selected(sel) => {
                assert_eq!(sel.bits, vec![true, false, true, true]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_abstain() {
        let tb = toolbox(2);
        let raw = r#"{"task_modality":"unknown","task":"t","abstain":true,"selected_tools":[]}"#;
        assert_eq!(parse_selector_response(raw, &tb, 3).unwrap(), ParsedSelection::Abstain);
    }

    #[test]
    fn parse_rejects_violations() {
        let tb = toolbox(3);
        let dup = r#"{"task_modality":"s","task":"t","abstain":false,
            "selected_tools":[
              {"id":"tool_0","rank":1,"confidence":0.9,"reason":""},
              {"id":"tool_0","rank":2,"confidence":0.8,"reason":""}]}"#;
        assert!(matches!(parse_selector_response(dup, &tb, 3), Err(Error::ParseError(_))));
        let unknown = r#"{"task_modality":"s","task":"t","abstain":false,
            "selected_tools":[{"id":"ghost","rank":1,"confidence":0.9,"reason":""}]}"#;
        assert!(matches!(parse_selector_response(unknown, &tb, 3), Err(Error::ParseError(_))));
        let rank_gap = r#"{"task_modality":"s","task":"t","abstain":false,
            "selected_tools":[
              {"id":"tool_0","rank":1,"confidence":0.9,"reason":""},
              {"id":"tool_1","rank":3,"confidence":0.8,"reason":""}]}"#;
        assert!(matches!(parse_selector_response(rank_gap, &tb, 3), Err(Error::ParseError(_))));
        assert!(matches!(parse_selector_response("not json", &tb, 3), Err(Error::ParseError(_))));
    }

    #[test]
    fn response_round_trip_is_identity() {
        let tb = toolbox(5);
        let sel = SelectionVector {
            bits: vec![true, false, true, false, true],
            source: SelectionSource::Vlm,
        };
        let raw = selection_to_response_json(&sel, &tb).unwrap();
        match parse_selector_response(&raw, &tb, 5).unwrap() {
            ParsedSelection::Selected(parsed) => assert_eq!(parsed.bits, sel.bits),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripted_client_replays() {
        let mut responses = BTreeMap::new();
        responses.insert("img_0".to_string(), "resp0".to_string());
        let client = ScriptedClient::new(responses, Some("fallback".to_string()));
        let req = |path: &str| SelectorRequest {
            prompt: "p".into(),
            image: ImageRef::Path(path.into()),
        };
        assert_eq!(client.request(&req("img_0")).unwrap(), "resp0");
        assert_eq!(client.request(&req("img_9")).unwrap(), "fallback");
    }

    #[test]
    fn selection_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selections.jsonl");
        let records = vec![
            SelectionRecord {
                image_id: "a".into(),
                bits: vec![true, false],
                source: SelectionSource::Vlm,
                scores: Some(vec![0.9, 0.2]),
            },
            SelectionRecord {
                image_id: "b".into(),
                bits: vec![false, true],
                source: SelectionSource::Scripted,
                scores: None,
            },
        ];
        write_selection_jsonl(&path, &records).unwrap();
        assert_eq!(read_selection_jsonl(&path).unwrap(), records);
    }
}
