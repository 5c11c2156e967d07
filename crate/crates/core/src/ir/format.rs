//! JSON graph documents. See `docs/graph-format.md` for the schema.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DType, Graph, IrError, Node, ParseMode, Tensor, TensorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, TensorDecl>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub constants: BTreeMap<String, Tensor>,
}

impl From<&Graph> for GraphDocument {
    fn from(g: &Graph) -> Self {
        Self {
            nodes: g.nodes.clone(),
            tensors: g
                .tensors
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        TensorDecl {
                            dtype: s.dtype,
                            shape: s.shape.clone(),
                        },
                    )
                })
                .collect(),
            inputs: g.inputs.clone(),
            outputs: g.outputs.clone(),
            constants: g.constants.clone(),
        }
    }
}

impl From<GraphDocument> for Graph {
    fn from(doc: GraphDocument) -> Self {
        Graph {
            nodes: doc.nodes,
            tensors: doc
                .tensors
                .into_iter()
                .map(|(k, d)| {
                    let spec = TensorSpec::new(k.clone(), d.dtype, d.shape);
                    (k, spec)
                })
                .collect(),
            inputs: doc.inputs,
            outputs: doc.outputs,
            constants: doc.constants,
        }
    }
}

fn parse_with(text: &str, mode: ParseMode) -> Result<Graph, IrError> {
    let doc: GraphDocument =
        serde_json::from_str(text).map_err(|e| IrError::Syntax(e.to_string()))?;
    for (name, t) in &doc.constants {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(IrError::validation(
                name,
                "constant data length does not match its shape",
            ));
        }
    }
    let g = Graph::from(doc);
    g.validate(mode)?;
    Ok(g)
}

/// Parse a source model. Fused and quantize/dequantize kinds are rejected.
pub fn parse_graph(text: &str) -> Result<Graph, IrError> {
    parse_with(text, ParseMode::Source)
}

/// Parse a graph emitted by the optimizer or quantizer.
pub fn parse_optimized_graph(text: &str) -> Result<Graph, IrError> {
    parse_with(text, ParseMode::Optimized)
}

/// Canonical pretty-printed JSON with sorted maps.
pub fn serialize_graph(g: &Graph) -> String {
    let doc = GraphDocument::from(g);
    let mut s = serde_json::to_string_pretty(&doc).expect("graph documents always serialize");
    s.push('\n');
    s
}
