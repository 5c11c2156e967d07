//! Computation-graph intermediate representation.
//!
//! A [`Graph`] is a DAG of single-output operator [`Node`]s wired together by
//! tensor names. Every tensor has a declared [`TensorSpec`]; weights live in
//! `constants` and are consumed directly, while `Constant` nodes expose a
//! constant value under their output name. The reference interpreter in
//! [`interp`] defines the semantics every pass is checked against.

mod format;
pub mod interp;
pub(crate) mod ops;
pub mod shape;
pub mod tensor;
pub(crate) mod topo;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{parse_graph, parse_optimized_graph, serialize_graph, GraphDocument};
pub use interp::{evaluate_all, interpret};
pub use tensor::Tensor;
pub use topo::topo_sort;
pub use validate::ParseMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("validation error at `{subject}`: {message}")]
    Validation { subject: String, message: String },
    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("node `{node}`: expected shape {expected:?}, got {actual:?}")]
    NodeShape {
        node: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node `{node}`: unsupported attribute `{attr}`: {reason}")]
    UnsupportedAttr {
        node: String,
        attr: String,
        reason: String,
    },
    #[error("node `{node}`: {message}")]
    Eval { node: String, message: String },
    #[error("missing binding for graph input `{0}`")]
    MissingInput(String),
}

impl IrError {
    pub(crate) fn validation(subject: impl Into<String>, message: impl Into<String>) -> Self {
        IrError::Validation {
            subject: subject.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub const fn byte_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            dtype,
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.dtype.byte_size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Constant,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Relu,
    Softmax,
    Scale,
    LayerNorm,
    Transpose,
    Reshape,
    GridSample,
    Rotate,
    Inverse,
    ModulatedDeformConv2d,
    FusedMHA,
    FusedMSDA,
    FusedConvAdd,
    FusedMatMulAdd,
    Quantize,
    Dequantize,
}

impl NodeKind {
    pub const ALL: [NodeKind; 21] = [
        NodeKind::Constant,
        NodeKind::MatMul,
        NodeKind::Conv2d,
        NodeKind::Add,
        NodeKind::Mul,
        NodeKind::Relu,
        NodeKind::Softmax,
        NodeKind::Scale,
        NodeKind::LayerNorm,
        NodeKind::Transpose,
        NodeKind::Reshape,
        NodeKind::GridSample,
        NodeKind::Rotate,
        NodeKind::Inverse,
        NodeKind::ModulatedDeformConv2d,
        NodeKind::FusedMHA,
        NodeKind::FusedMSDA,
        NodeKind::FusedConvAdd,
        NodeKind::FusedMatMulAdd,
        NodeKind::Quantize,
        NodeKind::Dequantize,
    ];

    /// Kinds that only optimization and quantization passes may introduce.
    pub const fn is_pass_only(self) -> bool {
        matches!(
            self,
            NodeKind::FusedMHA
                | NodeKind::FusedMSDA
                | NodeKind::FusedConvAdd
                | NodeKind::FusedMatMulAdd
                | NodeKind::Quantize
                | NodeKind::Dequantize
        )
    }

    pub const fn is_fused(self) -> bool {
        matches!(
            self,
            NodeKind::FusedMHA
                | NodeKind::FusedMSDA
                | NodeKind::FusedConvAdd
                | NodeKind::FusedMatMulAdd
        )
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which part of the driving stack a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleTag {
    Backbone,
    BevEncoder,
    Track,
    Map,
    Motion,
    Occ,
    Seg,
    Planner,
    Other,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 9] = [
        ModuleTag::Backbone,
        ModuleTag::BevEncoder,
        ModuleTag::Track,
        ModuleTag::Map,
        ModuleTag::Motion,
        ModuleTag::Occ,
        ModuleTag::Seg,
        ModuleTag::Planner,
        ModuleTag::Other,
    ];

    /// Feature-extraction tags: the image backbone and the BEV encoder.
    pub const fn is_feature_extraction(self) -> bool {
        matches!(self, ModuleTag::Backbone | ModuleTag::BevEncoder)
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for ModuleTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModuleTag::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown module tag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

/// Attribute keys understood by the interpreter and the passes.
pub mod attr {
    pub const AXIS: &str = "axis";
    pub const FACTOR: &str = "factor";
    pub const EPS: &str = "eps";
    pub const PERM: &str = "perm";
    pub const SHAPE: &str = "shape";
    pub const ANGLE: &str = "angle";
    pub const STRIDE: &str = "stride";
    pub const PADDING: &str = "padding";
    pub const SCALE: &str = "scale";
    pub const ZERO_POINT: &str = "zero_point";
    pub const Q_MIN: &str = "q_min";
    pub const Q_MAX: &str = "q_max";
    pub const PROJECTED: &str = "projected";
    pub const TRANSPOSE_K: &str = "transpose_k";
    pub const BRANCHES: &str = "branches";
    /// Marks a node rewritten to consume int8 operands.
    pub const INT8: &str = "int8";
    pub const QUANT_SCALE: &str = "quant_scale";
    pub const QUANT_ZERO_POINT: &str = "quant_zero_point";
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attrs,
    pub tag: ModuleTag,
}

impl Node {
    pub fn new(
        id: impl Into<String>,
        kind: NodeKind,
        inputs: &[&str],
        output: impl Into<String>,
        tag: ModuleTag,
    ) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![output.into()],
            attrs: Attrs::new(),
            tag,
        }
    }

    pub fn with_attr(mut self, key: &str, value: AttrValue) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_float(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key)? {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key)? {
            AttrValue::Ints(v) => Some(v),
            _ => None,
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        self.attr_int(key).unwrap_or(0) != 0
    }

    pub fn is_int8(&self) -> bool {
        self.flag(attr::INT8)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, TensorSpec>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub constants: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Map from tensor name to the index of the node producing it.
    pub fn producers(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                out.insert(o.as_str(), i);
            }
        }
        out
    }

    /// Map from tensor name to the indices of nodes consuming it (one entry
    /// per distinct consumer node).
    pub fn consumers(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.inputs {
                let list = out.entry(t.as_str()).or_default();
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }
        out
    }

    pub fn is_output(&self, tensor: &str) -> bool {
        self.outputs.iter().any(|o| o == tensor)
    }

    pub fn spec(&self, tensor: &str) -> Result<&TensorSpec, IrError> {
        self.tensors
            .get(tensor)
            .ok_or_else(|| IrError::validation(tensor, "tensor has no declaration"))
    }

    pub fn count_by_tag(&self, tag: ModuleTag) -> usize {
        self.nodes.iter().filter(|n| n.tag == tag).count()
    }

    /// Validate all structural and shape invariants.
    pub fn validate(&self, mode: ParseMode) -> Result<(), IrError> {
        validate::validate(self, mode)
    }

    /// Drop tensor declarations and constants no longer referenced by any
    /// node or graph interface.
    pub(crate) fn prune_unreferenced_tensors(&mut self) {
        let mut live: std::collections::BTreeSet<String> = self.inputs.iter().cloned().collect();
        live.extend(self.outputs.iter().cloned());
        for n in &self.nodes {
            live.extend(n.inputs.iter().cloned());
            live.extend(n.outputs.iter().cloned());
        }
        self.tensors.retain(|k, _| live.contains(k));
        self.constants.retain(|k, _| live.contains(k));
    }
}

/// Inputs for Max-Min calibration: a list of bindings for every graph input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub frames: Vec<BTreeMap<String, Tensor>>,
    pub count: usize,
}

impl CalibrationSet {
    pub const DEFAULT_FRAMES: usize = 256;

    pub fn new(frames: Vec<BTreeMap<String, Tensor>>) -> Self {
        let count = frames.len();
        Self { frames, count }
    }

    /// Uniform random frames in `[-1, 1]` for every graph input.
    pub fn random(g: &Graph, count: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..count)
            .map(|_| {
                g.inputs
                    .iter()
                    .map(|name| {
                        let shape = g.tensors[name].shape.clone();
                        let n: usize = shape.iter().product();
                        let data = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                        (name.clone(), Tensor { shape, data })
                    })
                    .collect()
            })
            .collect();
        Self::new(frames)
    }

    pub fn check(&self, g: &Graph) -> Result<(), IrError> {
        if self.count != self.frames.len() {
            return Err(IrError::validation(
                "calibration",
                format!(
                    "count {} does not match {} frames",
                    self.count,
                    self.frames.len()
                ),
            ));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            for name in &g.inputs {
                let t = frame
                    .get(name)
                    .ok_or_else(|| IrError::MissingInput(name.clone()))?;
                let spec = g.spec(name)?;
                if t.shape != spec.shape {
                    return Err(IrError::validation(
                        format!("calibration frame {i}"),
                        format!(
                            "input `{name}` has shape {:?}, expected {:?}",
                            t.shape, spec.shape
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}
