//! Graph export as JSON (`nodes`, `gate`) and Graphviz DOT.

use std::fmt::Write;

use candle_core::DType;
use serde_json::json;

use super::graph::CognitionGraph;
use crate::Result;

pub fn to_json(graph: &CognitionGraph) -> Result<serde_json::Value> {
    let nodes = graph.nodes.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(json!({ "nodes": nodes, "gate": graph.gate_rows()? }))
}

/// One edge per positive gate, labelled with the gate to 3 decimals.
pub fn to_dot(graph: &CognitionGraph) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "digraph {} {{", graph.kind).unwrap();
    for i in 0..graph.num_nodes() {
        writeln!(out, "  n{i};").unwrap();
    }
    for (i, row) in graph.gate_rows()?.iter().enumerate() {
        for (j, g) in row.iter().enumerate() {
            if *g > 0.0 {
                writeln!(out, "  n{i} -> n{j} [label=\"{g:.3}\"];").unwrap();
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}
