//! JSON view of a residue graph for debugging.

use std::collections::BTreeMap;

use evostruct_core::geometry::Point;
use evostruct_core::graph::{EdgeType, HeteroGraph, NodeKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub index: usize,
    pub kind: NodeKind,
    /// Row of the node-embedding table.
    pub token: usize,
    pub ca: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeArrays {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub id: String,
    pub nodes: Vec<NodeRow>,
    /// Keyed by edge-type name.
    pub edges: BTreeMap<String, EdgeArrays>,
}

impl GraphDump {
    pub fn new(id: &str, g: &HeteroGraph) -> Self {
        let nodes = (0..g.node_kind.len())
            .map(|i| NodeRow {
                index: i,
                kind: g.node_kind[i],
                token: g.node_token[i],
                ca: g.coords[i][1],
            })
            .collect();
        let edges = EdgeType::ALL
            .iter()
            .map(|t| {
                let es = &g.edges[t.index()];
                (
                    t.name().to_string(),
                    EdgeArrays {
                        src: es.src.clone(),
                        dst: es.dst.clone(),
                    },
                )
            })
            .collect();
        GraphDump {
            id: id.into(),
            nodes,
            edges,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evostruct_core::graph::{build_graph, GraphConfig};
    use evostruct_core::synth::{synth_complex, SynthConfig};
    use evostruct_core::RngStream;

    #[test]
    fn dump_mirrors_graph() {
        let c = synth_complex(&mut RngStream::new(2), "g", &SynthConfig::default());
        let g = build_graph(&c, &GraphConfig::default()).unwrap();
        let d = GraphDump::new("g", &g);
        assert_eq!(d.nodes.len(), c.residue_count() + 3);
        assert_eq!(d.edges.len(), 8);
        assert_eq!(
            d.edges["intra_sequential"].src,
            g.edges[EdgeType::IntraSequential.index()].src
        );
        let back: GraphDump = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
