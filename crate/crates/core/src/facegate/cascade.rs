//! Stump-based Haar cascade model and its XML loader.
//!
//! The accepted dialect is the legacy `opencv-haar-classifier` layout:
//!
//! ```text
//! <opencv_storage>
//!   <name type_id="opencv-haar-classifier">
//!     <size>24 24</size>
//!     <stages>
//!       <_>
//!         <trees>
//!           <_>                      one tree per weak classifier
//!             <_>                    exactly one node (a stump)
//!               <feature><rects><_>x y w h weight</_>...</rects><tilted>0</tilted></feature>
//!               <threshold>..</threshold><left_val>..</left_val><right_val>..</right_val>
//!             </_>
//!           </_>
//!         </trees>
//!         <stage_threshold>..</stage_threshold>
//!       </_>
//!     </stages>
//!   </name>
//! </opencv_storage>
//! ```

use roxmltree::{Document, Node};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("xml error at line {line}, column {col}: {msg}")]
    Xml { line: u32, col: u32, msg: String },
    #[error("stage {stage}: {msg} (line {line})")]
    Stage { stage: usize, line: u32, msg: String },
    #[error("unsupported cascade format: {0}")]
    Unsupported(String),
    #[error("invalid cascade: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaarFeature {
    pub rects: Vec<WeightedRect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakClassifier {
    pub feature: HaarFeature,
    pub threshold: f64,
    pub left_value: f64,
    pub right_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub weak: Vec<WeakClassifier>,
    pub stage_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub base_width: u32,
    pub base_height: u32,
    pub stages: Vec<CascadeStage>,
}

impl Cascade {
    /// Checks the structural invariants: non-empty stages and stumps, 2–3 rects
    /// per feature, every rect inside the base window.
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.base_width == 0 || self.base_height == 0 {
            return Err(CascadeError::Invalid("base window must be non-empty".into()));
        }
        if self.stages.is_empty() {
            return Err(CascadeError::Invalid("no stages".into()));
        }
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.weak.is_empty() {
                return Err(CascadeError::Invalid(format!("stage {si} has no classifiers")));
            }
            for (wi, weak) in stage.weak.iter().enumerate() {
                let n = weak.feature.rects.len();
                if !(2..=3).contains(&n) {
                    return Err(CascadeError::Invalid(format!(
                        "stage {si} classifier {wi}: feature has {n} rects"
                    )));
                }
                for r in &weak.feature.rects {
                    if r.w == 0 || r.h == 0 || r.x + r.w > self.base_width || r.y + r.h > self.base_height {
                        return Err(CascadeError::Invalid(format!(
                            "stage {si} classifier {wi}: rect {r:?} outside {}x{} window",
                            self.base_width, self.base_height
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn weak_count(&self) -> usize {
        self.stages.iter().map(|s| s.weak.len()).sum()
    }
}

pub fn parse_cascade(xml: &str) -> Result<Cascade, CascadeError> {
    let doc = Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        CascadeError::Xml {
            line: pos.row,
            col: pos.col,
            msg: e.to_string(),
        }
    })?;
    let line_of = |n: Node| doc.text_pos_at(n.range().start).row;

    let storage = doc.root_element();
    let root = if storage.has_tag_name("opencv_storage") {
        storage
            .children()
            .find(Node::is_element)
            .ok_or_else(|| CascadeError::Invalid("empty <opencv_storage>".into()))?
    } else {
        storage
    };
    if child(root, "stageType").is_some() || child(root, "featureType").is_some() {
        return Err(CascadeError::Unsupported(
            "new-style cascade (stageType/featureType); only the legacy stump dialect is accepted".into(),
        ));
    }
    if let Some(t) = root.attribute("type_id") {
        if t != "opencv-haar-classifier" {
            return Err(CascadeError::Unsupported(format!("type_id {t:?}")));
        }
    }

    let size = child(root, "size").ok_or_else(|| CascadeError::Invalid("missing <size>".into()))?;
    let dims: Vec<u32> = text_of(size)
        .split_whitespace()
        .map(|t| t.parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|e| CascadeError::Invalid(format!("bad <size> (line {}): {e}", line_of(size))))?;
    if dims.len() != 2 {
        return Err(CascadeError::Invalid(format!("<size> needs 2 values, got {}", dims.len())));
    }

    let stages_node = child(root, "stages").ok_or_else(|| CascadeError::Invalid("missing <stages>".into()))?;
    let mut stages = Vec::new();
    for (si, stage_node) in elements(stages_node).enumerate() {
        let stage_err = |n: Node, msg: String| CascadeError::Stage {
            stage: si,
            line: line_of(n),
            msg,
        };
        let trees = child(stage_node, "trees")
            .ok_or_else(|| stage_err(stage_node, "missing <trees>".into()))?;
        let mut weak = Vec::new();
        for (ti, tree) in elements(trees).enumerate() {
            let nodes: Vec<Node> = elements(tree).collect();
            if nodes.len() != 1 {
                return Err(CascadeError::Unsupported(format!(
                    "stage {si} tree {ti} has {} nodes; only single-node stumps are supported",
                    nodes.len()
                )));
            }
            let node = nodes[0];
            if child(node, "left_node").is_some() || child(node, "right_node").is_some() {
                return Err(CascadeError::Unsupported(format!(
                    "stage {si} tree {ti} branches into child nodes; only stumps are supported"
                )));
            }
            let num = |name: &str| -> Result<f64, CascadeError> {
                let n = child(node, name)
                    .ok_or_else(|| stage_err(node, format!("tree {ti}: missing <{name}>")))?;
                text_of(n)
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| stage_err(n, format!("tree {ti}: bad <{name}>: {e}")))
            };
            let threshold = num("threshold")?;
            let left_value = num("left_val")?;
            let right_value = num("right_val")?;
            let feature = child(node, "feature")
                .ok_or_else(|| stage_err(node, format!("tree {ti}: missing <feature>")))?;
            if let Some(t) = child(feature, "tilted") {
                if text_of(t).trim() != "0" {
                    return Err(CascadeError::Unsupported(format!(
                        "stage {si} tree {ti}: tilted features"
                    )));
                }
            }
            let rects_node = child(feature, "rects")
                .ok_or_else(|| stage_err(feature, format!("tree {ti}: missing <rects>")))?;
            let mut rects = Vec::new();
            for r in elements(rects_node) {
                rects.push(parse_rect(&text_of(r)).map_err(|m| stage_err(r, format!("tree {ti}: {m}")))?);
            }
            weak.push(WeakClassifier {
                feature: HaarFeature { rects },
                threshold,
                left_value,
                right_value,
            });
        }
        let st = child(stage_node, "stage_threshold")
            .ok_or_else(|| stage_err(stage_node, "missing <stage_threshold>".into()))?;
        let stage_threshold = text_of(st)
            .trim()
            .parse::<f64>()
            .map_err(|e| stage_err(st, format!("bad <stage_threshold>: {e}")))?;
        stages.push(CascadeStage { weak, stage_threshold });
    }

    let cascade = Cascade {
        base_width: dims[0],
        base_height: dims[1],
        stages,
    };
    cascade.validate()?;
    Ok(cascade)
}

fn parse_rect(text: &str) -> Result<WeightedRect, String> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(format!("rect {text:?} needs 5 fields"));
    }
    let int = |i: usize| toks[i].trim_end_matches('.').parse::<u32>().map_err(|e| format!("rect field {i}: {e}"));
    Ok(WeightedRect {
        x: int(0)?,
        y: int(1)?,
        w: int(2)?,
        h: int(3)?,
        weight: toks[4].parse::<f64>().map_err(|e| format!("rect weight: {e}"))?,
    })
}

fn child<'a, 'i>(n: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    n.children().find(|c| c.has_tag_name(name))
}

fn elements<'a, 'i>(n: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    n.children().filter(Node::is_element)
}

fn text_of(n: Node) -> String {
    n.descendants().filter(Node::is_text).filter_map(|t| t.text()).collect()
}
