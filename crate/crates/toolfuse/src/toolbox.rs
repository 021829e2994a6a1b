//! Tool registry and the core spatial data types.
//!
//! A tool is a frozen procedure that turns an image and/or its instance
//! annotations into an aligned multi-channel feature map with values in
//! [0,1]. The toolbox fixes the tool order, and therefore the channel layout
//! of the stacked input consumed by the fusion model.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Imaging modality a tool is designed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Histopathology,
    Dermatology,
    Synthetic,
}

/// One detected instance: bounding box, centroid, boundary polygon, type
/// label and type confidence, all in source-canvas pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// `[x_top_left, y_top_left, width, height]`
    pub bbox: [f64; 4],
    /// `[x_center, y_center]`
    pub centroid: [f64; 2],
    /// Ordered polygon vertices `[x, y]`.
    pub contour: Vec<[f64; 2]>,
    pub type_label: usize,
    pub type_prob: f64,
}

impl InstanceRecord {
    /// Check the record invariants against a source canvas of `h x w`.
    pub fn validate(&self, source_size: (usize, usize)) -> std::result::Result<(), String> {
        let (h, w) = (source_size.0 as f64, source_size.1 as f64);
        let [x, y, bw, bh] = self.bbox;
        if bw < 1.0 || bh < 1.0 {
            return Err(format!("box has non-positive extent {bw}x{bh}"));
        }
        if x < 0.0 || y < 0.0 || x + bw > w || y + bh > h {
            return Err(format!("box [{x}, {y}, {bw}, {bh}] outside {h}x{w} canvas"));
        }
        let [cx, cy] = self.centroid;
        if cx < 0.0 || cy < 0.0 || cx >= w || cy >= h {
            return Err(format!("centroid [{cx}, {cy}] outside {h}x{w} canvas"));
        }
        if self.contour.len() < 3 {
            return Err(format!("degenerate polygon with {} vertices", self.contour.len()));
        }
        for &[vx, vy] in &self.contour {
            if vx < 0.0 || vy < 0.0 || vx >= w || vy >= h {
                return Err(format!("contour vertex [{vx}, {vy}] outside {h}x{w} canvas"));
            }
        }
        if !(0.0..=1.0).contains(&self.type_prob) {
            return Err(format!("type_prob {} outside [0,1]", self.type_prob));
        }
        Ok(())
    }
}

/// Wire schema for one instance in the ingestion JSON (document keyed by
/// instance id, fields `box`, `centroid`, `contour`, `prob`, `type`).
#[derive(Debug, Serialize, Deserialize)]
struct InstanceWire {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    centroid: [f64; 2],
    contour: Vec<[f64; 2]>,
    prob: f64,
    #[serde(rename = "type")]
    type_label: usize,
}

/// Parse an instance dictionary keyed by instance id. Records are returned
/// in ascending numeric id order (falling back to string order) so ingestion
/// is deterministic regardless of JSON object ordering.
pub fn parse_instances_json(text: &str) -> Result<Vec<InstanceRecord>> {
    let doc: BTreeMap<String, InstanceWire> = serde_json::from_str(text)?;
    let mut keyed: Vec<(&String, &InstanceWire)> = doc.iter().collect();
    keyed.sort_by(|a, b| match (a.0.parse::<u64>(), b.0.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.0.cmp(b.0),
    });
    Ok(keyed
        .into_iter()
        .map(|(_, w)| InstanceRecord {
            bbox: w.bbox,
            centroid: w.centroid,
            contour: w.contour.clone(),
            type_label: w.type_label,
            type_prob: w.prob,
        })
        .collect())
}

/// Serialize instances back to the keyed-dictionary wire format.
pub fn instances_to_json(instances: &[InstanceRecord]) -> Result<String> {
    let doc: BTreeMap<String, InstanceWire> = instances
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                i.to_string(),
                InstanceWire {
                    bbox: r.bbox,
                    centroid: r.centroid,
                    contour: r.contour.clone(),
                    prob: r.type_prob,
                    type_label: r.type_label,
                },
            )
        })
        .collect();
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// A per-tool rasterized map of shape `C_i x H x W` with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    /// Wrap a tensor, enforcing the live value domain [0,1].
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "feature map value {v} outside [0,1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((channels, h, w)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// Input handed to every tool's compute procedure. Tools use whichever parts
/// they need; instance-based rasterizers ignore the pixels, color tools
/// ignore the annotations.
pub struct ToolInput<'a> {
    /// Raw image, `C x H0 x W0`, values in [0,1].
    pub image: Option<&'a Array3<f64>>,
    /// Instance annotations in source-canvas coordinates.
    pub instances: &'a [InstanceRecord],
    /// Source canvas size `(H0, W0)`.
    pub source_size: (usize, usize),
}

pub type ComputeFn = Arc<dyn Fn(&ToolInput<'_>) -> Result<FeatureMap> + Send + Sync>;

/// Identity, modality, channel count and compute procedure for one tool.
#[derive(Clone)]
pub struct ToolSpec {
    pub tool_id: String,
    pub modality: Modality,
    pub channels: usize,
    /// Free-text description, interpolated into selector prompts.
    pub description: String,
    pub compute: ComputeFn,
}

impl fmt::Debug for ToolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolSpec")
            .field("tool_id", &self.tool_id)
            .field("modality", &self.modality)
            .field("channels", &self.channels)
            .finish()
    }
}

impl ToolSpec {
    pub fn new(
        tool_id: impl Into<String>,
        modality: Modality,
        channels: usize,
        description: impl Into<String>,
        compute: ComputeFn,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig("tool channels must be >= 1".into()));
        }
        Ok(Self {
            tool_id: tool_id.into(),
            modality,
            channels,
            description: description.into(),
            compute,
        })
    }
}

/// Ordered, immutable registry of tools. The order fixes the channel layout
/// of every stack for the lifetime of an experiment.
#[derive(Debug, Clone)]
pub struct Toolbox {
    tools: Vec<ToolSpec>,
}

impl Toolbox {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self> {
        if tools.is_empty() {
            return Err(Error::InvalidConfig("toolbox must contain at least one tool".into()));
        }
        for (i, t) in tools.iter().enumerate() {
            if tools[..i].iter().any(|u| u.tool_id == t.tool_id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate tool_id '{}'",
                    t.tool_id
                )));
            }
        }
        Ok(Self { tools })
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn total_channels(&self) -> usize {
        self.tools.iter().map(|t| t.channels).sum()
    }

    pub fn index_of(&self, tool_id: &str) -> Option<usize> {
        self.tools.iter().position(|t| t.tool_id == tool_id)
    }

    /// Channel block of tool `i` within the stacked tensor.
    pub fn channel_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.tools[..i].iter().map(|t| t.channels).sum();
        start..start + self.tools[i].channels
    }

    pub fn tool_ids(&self) -> Vec<String> {
        self.tools.iter().map(|t| t.tool_id.clone()).collect()
    }
}

/// Run every tool and concatenate the outputs along the channel axis in
/// toolbox order. Pure: identical inputs give a bit-identical stack.
pub fn compute_tool_stack(input: &ToolInput<'_>, toolbox: &Toolbox) -> Result<Array3<f64>> {
    let mut maps: Vec<Array3<f64>> = Vec::with_capacity(toolbox.len());
    let mut hw: Option<(usize, usize)> = None;
    for spec in toolbox.tools() {
        let map = (spec.compute)(input).map_err(|e| Error::ToolFailed {
            tool_id: spec.tool_id.clone(),
            reason: e.to_string(),
        })?;
        if map.channels() != spec.channels {
            return Err(Error::ToolFailed {
                tool_id: spec.tool_id.clone(),
                reason: format!(
                    "declared {} channels but emitted {}",
                    spec.channels,
                    map.channels()
                ),
            });
        }
        let this_hw = (map.height(), map.width());
        if let Some(prev) = hw {
            if prev != this_hw {
                return Err(Error::ToolFailed {
                    tool_id: spec.tool_id.clone(),
                    reason: format!("resolution {this_hw:?} differs from {prev:?}"),
                });
            }
        }
        hw = Some(this_hw);
        maps.push(map.into_inner());
    }
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::InvalidInput(format!("channel concatenation failed: {e}")))
}

/// Sidecar header for persisted stacks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StackHeader {
    pub tool_ids: Vec<String>,
    pub channels_per_tool: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub dtype: String,
}

/// Persist a stack as a dense little-endian f64 file plus a JSON sidecar
/// header at `<base>.bin` / `<base>.json`.
pub fn save_stack(base: &Path, stack: &Array3<f64>, toolbox: &Toolbox) -> Result<()> {
    let (c, h, w) = stack.dim();
    if c != toolbox.total_channels() {
        return Err(Error::LayoutMismatch(format!(
            "stack has {c} channels, toolbox declares {}",
            toolbox.total_channels()
        )));
    }
    let header = StackHeader {
        tool_ids: toolbox.tool_ids(),
        channels_per_tool: toolbox.tools().iter().map(|t| t.channels).collect(),
        h,
        w,
        dtype: "f64".into(),
    };
    std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(c * h * w * 8);
    for v in stack.iter() {
        bytes.write_all(&v.to_le_bytes())?;
    }
    std::fs::write(base.with_extension("bin"), bytes)?;
    Ok(())
}

/// Load a stack persisted by [`save_stack`].
pub fn load_stack(base: &Path) -> Result<(Array3<f64>, StackHeader)> {
    let header: StackHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    if header.dtype != "f64" {
        return Err(Error::InvalidInput(format!("unsupported dtype {}", header.dtype)));
    }
    let c: usize = header.channels_per_tool.iter().sum();
    let mut file = std::fs::File::open(base.with_extension("bin"))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let expected = c * header.h * header.w * 8;
    if bytes.len() != expected {
        return Err(Error::InvalidInput(format!(
            "stack file holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    let arr = Array3::from_shape_vec((c, header.h, header.w), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((arr, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_tool(id: &str, value: f64, h: usize, w: usize) -> ToolSpec {
        ToolSpec::new(
            id,
            Modality::Synthetic,
            1,
            format!("constant {value}"),
            Arc::new(move |_input: &ToolInput<'_>| {
                FeatureMap::new(Array3::from_elem((1, h, w), value))
            }),
        )
        .unwrap()
    }

    #[test]
    fn rejects_duplicate_tool_ids() {
        let err = Toolbox::new(vec![constant_tool("a", 0.1, 4, 4), constant_tool("a", 0.2, 4, 4)]);
        assert!(err.is_err());
    }

    #[test]
    fn stack_follows_toolbox_order() {
        let tb = Toolbox::new(vec![constant_tool("a", 0.25, 4, 4), constant_tool("b", 0.75, 4, 4)])
            .unwrap();
        let input = ToolInput { image: None, instances: &[], source_size: (4, 4) };
        let stack = compute_tool_stack(&input, &tb).unwrap();
        assert_eq!(stack.dim(), (2, 4, 4));
        assert_eq!(stack[[0, 0, 0]], 0.25);
        assert_eq!(stack[[1, 0, 0]], 0.75);

        // Permuting the toolbox permutes the channel blocks identically.
        let tb2 = Toolbox::new(vec![constant_tool("b", 0.75, 4, 4), constant_tool("a", 0.25, 4, 4)])
            .unwrap();
        let stack2 = compute_tool_stack(&input, &tb2).unwrap();
        assert_eq!(stack2[[0, 0, 0]], 0.75);
        assert_eq!(stack2[[1, 0, 0]], 0.25);
    }

    #[test]
    fn failing_tool_aborts_with_id() {
        let bad = ToolSpec::new(
            "boom",
            Modality::Synthetic,
            1,
            "always fails",
            Arc::new(|_: &ToolInput<'_>| Err(Error::InvalidInput("nope".into()))),
        )
        .unwrap();
        let tb = Toolbox::new(vec![constant_tool("a", 0.5, 4, 4), bad]).unwrap();
        let input = ToolInput { image: None, instances: &[], source_size: (4, 4) };
        match compute_tool_stack(&input, &tb) {
            Err(Error::ToolFailed { tool_id, .. }) => assert_eq!(tool_id, "boom"),
            other => panic!("expected ToolFailed, got {other:?}"),
        }
    }

    #[test]
    fn feature_map_rejects_out_of_range() {
        assert!(FeatureMap::new(Array3::from_elem((1, 2, 2), -0.1)).is_err());
        assert!(FeatureMap::new(Array3::from_elem((1, 2, 2), 1.1)).is_err());
        assert!(FeatureMap::new(Array3::from_elem((1, 2, 2), 1.0)).is_ok());
    }

    #[test]
    fn instances_json_round_trip() {
        let text = r#"{
            "1": {"box": [2.0, 3.0, 4.0, 5.0], "centroid": [4.0, 5.0],
                   "contour": [[2.0,3.0],[6.0,3.0],[6.0,8.0]], "prob": 0.9, "type": 2},
            "0": {"box": [0.0, 0.0, 2.0, 2.0], "centroid": [1.0, 1.0],
                   "contour": [[0.0,0.0],[1.0,0.0],[1.0,1.0]], "prob": 0.5, "type": 0}
        }"#;
        let records = parse_instances_json(text).unwrap();
        assert_eq!(records.len(), 2);
        // Numeric id order, not JSON order.
        assert_eq!(records[0].type_label, 0);
        assert_eq!(records[1].type_label, 2);
        let back = instances_to_json(&records).unwrap();
        let again = parse_instances_json(&back).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn stack_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tb = Toolbox::new(vec![constant_tool("a", 0.3, 3, 5), constant_tool("b", 0.6, 3, 5)])
            .unwrap();
        let input = ToolInput { image: None, instances: &[], source_size: (3, 5) };
        let stack = compute_tool_stack(&input, &tb).unwrap();
        let base = dir.path().join("stack_000");
        save_stack(&base, &stack, &tb).unwrap();
        let (loaded, header) = load_stack(&base).unwrap();
        assert_eq!(loaded, stack);
        assert_eq!(header.tool_ids, vec!["a".to_string(), "b".to_string()]);
    }
}
