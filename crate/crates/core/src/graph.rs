//! Heterogeneous residue graph with eight typed edge sets.
//!
//! Node order is heavy residues, light residues, antigen residues, then the
//! three global tokens BOH, BOL, BOA. An edge `(src, dst)` carries the message
//! from `dst` to `src`: node `src` aggregates over its outgoing edges, so every
//! node has exactly `min(K, available)` KNN neighbours to listen to.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::aa::NUM_AA;
use crate::geometry::{
    build_local_frame, centroid, distance, relative_quaternion, vec3, GeometryError, LocalFrame,
    Point, RbfBank,
};
use crate::structure::{ChainKind, Complex, CA};
use crate::tensor::Mat;

pub const NUM_EDGE_TYPES: usize = 8;
pub const RBF_COUNT: usize = 16;
/// `8 + 3 + 4·16 + 4 + 6`.
pub const EDGE_FEATURE_DIM: usize = NUM_EDGE_TYPES + 3 + 4 * RBF_COUNT + 4 + 6;

/// Rows of the node-embedding table: 20 amino acids, UNK, BOH, BOL, BOA.
pub const NODE_VOCAB: usize = NUM_AA + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeType {
    IntraRadial = 0,
    IntraSequential = 1,
    IntraKnn = 2,
    InterRadialAbAg = 3,
    InterRadialAgAb = 4,
    InterKnn = 5,
    GlobalToChain = 6,
    ChainToGlobal = 7,
}

impl EdgeType {
    pub const ALL: [EdgeType; NUM_EDGE_TYPES] = [
        EdgeType::IntraRadial,
        EdgeType::IntraSequential,
        EdgeType::IntraKnn,
        EdgeType::InterRadialAbAg,
        EdgeType::InterRadialAgAb,
        EdgeType::InterKnn,
        EdgeType::GlobalToChain,
        EdgeType::ChainToGlobal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::IntraRadial => "intra_radial",
            EdgeType::IntraSequential => "intra_sequential",
            EdgeType::IntraKnn => "intra_knn",
            EdgeType::InterRadialAbAg => "inter_radial_ab_ag",
            EdgeType::InterRadialAgAb => "inter_radial_ag_ab",
            EdgeType::InterKnn => "inter_knn",
            EdgeType::GlobalToChain => "global_to_chain",
            EdgeType::ChainToGlobal => "chain_to_global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Heavy,
    Light,
    Antigen,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Cα distance threshold for radial edges, Å.
    pub radial_cutoff: f64,
    pub k_intra: usize,
    pub k_inter: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            radial_cutoff: 8.0,
            k_intra: 9,
            k_inter: 9,
            rbf_min: 0.0,
            rbf_max: 20.0,
        }
    }
}

impl GraphConfig {
    pub fn rbf(&self) -> RbfBank {
        RbfBank::evenly_spaced(self.rbf_min, self.rbf_max, RBF_COUNT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// One row of width [`EDGE_FEATURE_DIM`] per edge.
    pub features: Mat,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub node_kind: Vec<NodeKind>,
    /// Row of the node-embedding table for each node.
    pub node_token: Vec<usize>,
    /// `[N, CA, C, O]` per node; global tokens carry their chain's Cα centroid
    /// in all four channels.
    pub coords: Vec<[Point; 4]>,
    /// Node index of the first residue of the heavy, light and antigen chains.
    pub chain_offset: [usize; 3],
    pub chain_len: [usize; 3],
    /// Node indices of BOH, BOL, BOA.
    pub globals: [usize; 3],
    pub edges: Vec<EdgeSet>,
}

impl HeteroGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_kind.len()
    }

    pub fn node_of(&self, chain: ChainKind, index: usize) -> usize {
        let k = chain_slot(chain);
        debug_assert!(index < self.chain_len[k]);
        self.chain_offset[k] + index
    }

    pub fn edge_set(&self, t: EdgeType) -> &EdgeSet {
        &self.edges[t.index()]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(EdgeSet::len).sum()
    }

    /// Cα coordinates of every node.
    pub fn ca(&self) -> Vec<Point> {
        self.coords.iter().map(|x| x[CA]).collect()
    }
}

fn chain_slot(chain: ChainKind) -> usize {
    match chain {
        ChainKind::Heavy => 0,
        ChainKind::Light => 1,
        ChainKind::Antigen => 2,
    }
}

const CHAINS: [ChainKind; 3] = [ChainKind::Heavy, ChainKind::Light, ChainKind::Antigen];

/// Edge feature for a residue pair:
/// `[one-hot(type) ‖ Cα_j in frame_i ‖ RBF(d_NN, d_CαCα, d_CC, d_OO) ‖ q(frame_i→frame_j) ‖ û in frame_i ‖ û in frame_j]`,
/// where `û` is the unit Cα displacement from `i` to `j`. When either frame is
/// absent (global tokens) or `i == j`, the geometric part is the self feature:
/// zero offset, identity quaternion, RBFs at distance 0 and zero directions.
pub fn build_edge_feature(
    t: EdgeType,
    xi: &[Point; 4],
    xj: &[Point; 4],
    fi: Option<&LocalFrame>,
    fj: Option<&LocalFrame>,
    rbf: &RbfBank,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(EDGE_FEATURE_DIM);
    f.extend((0..NUM_EDGE_TYPES).map(|k| if k == t.index() { 1.0 } else { 0.0 }));
    match (fi, fj) {
        (Some(fi), Some(fj)) if xi != xj => {
            let delta = vec3(&xj[CA]) - vec3(&xi[CA]);
            f.extend(fi.to_local(&delta).iter());
            for a in 0..4 {
                rbf.encode_into(distance(&xi[a], &xj[a]), &mut f);
            }
            f.extend(relative_quaternion(fi, fj));
            let n = delta.norm();
            let u = if n > 0.0 { delta / n } else { delta };
            f.extend(fi.to_local(&u).iter());
            f.extend(fj.to_local(&u).iter());
        }
        _ => {
            f.extend([0.0; 3]);
            for _ in 0..4 {
                rbf.encode_into(0.0, &mut f);
            }
            f.extend([1.0, 0.0, 0.0, 0.0]);
            f.extend([0.0; 6]);
        }
    }
    debug_assert_eq!(f.len(), EDGE_FEATURE_DIM);
    f
}

/// `min(k, |candidates|)` candidates nearest to `i` by Cα distance, ties by index.
/// Distances are ranked at this resolution (Å) so that exact ties, common in
/// idealized geometry, stay ties under rigid motion and fall back to index order.
pub const RANK_RESOLUTION: f64 = 1e-6;

/// Sort key for ranking neighbours by distance.
pub fn rank_key(d: f64) -> i64 {
    (d / RANK_RESOLUTION).round() as i64
}

fn knn(ca: &[Point], i: usize, candidates: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut c: Vec<(i64, usize)> = candidates
        .filter(|&j| j != i)
        .map(|j| (rank_key(distance(&ca[i], &ca[j])), j))
        .collect();
    c.sort_unstable();
    c.truncate(k);
    c.into_iter().map(|(_, j)| j).collect()
}

/// Builds all eight edge sets from the complex's current coordinates.
/// Edges within a set are sorted by `(src, dst)`.
pub fn build_graph(c: &Complex, cfg: &GraphConfig) -> Result<HeteroGraph, GeometryError> {
    let mut node_kind = Vec::new();
    let mut node_token = Vec::new();
    let mut coords = Vec::new();
    let mut chain_offset = [0; 3];
    let mut chain_len = [0; 3];
    for (k, &chain) in CHAINS.iter().enumerate() {
        chain_offset[k] = coords.len();
        let residues = c.chain(chain);
        chain_len[k] = residues.len();
        for r in residues {
            node_kind.push(match chain {
                ChainKind::Heavy => NodeKind::Heavy,
                ChainKind::Light => NodeKind::Light,
                ChainKind::Antigen => NodeKind::Antigen,
            });
            node_token.push(r.aa.index());
            coords.push(r.backbone);
        }
    }
    let n_res = coords.len();
    let all_ca: Vec<Point> = coords.iter().map(|x| x[CA]).collect();
    let mut globals = [0; 3];
    for k in 0..3 {
        let range = chain_offset[k]..chain_offset[k] + chain_len[k];
        let g = centroid(&all_ca[range])
            .or_else(|| centroid(&all_ca))
            .unwrap_or([0.0; 3]);
        globals[k] = coords.len();
        node_kind.push(NodeKind::Global);
        node_token.push(NUM_AA + 1 + k);
        coords.push([g; 4]);
    }

    let frames: Vec<Option<LocalFrame>> = coords
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if i < n_res {
                build_local_frame(&x[0], &x[1], &x[2]).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_, _>>()?;
    let ca: Vec<Point> = coords.iter().map(|x| x[CA]).collect();
    let chain_of =
        |i: usize| (0..3).find(|&k| i >= chain_offset[k] && i < chain_offset[k] + chain_len[k]);

    let mut pairs: [Vec<(usize, usize)>; NUM_EDGE_TYPES] = Default::default();
    for i in 0..n_res {
        let ki = chain_of(i).expect("residue node");
        let same = chain_offset[ki]..chain_offset[ki] + chain_len[ki];
        for j in same.clone() {
            if j == i {
                continue;
            }
            if distance(&ca[i], &ca[j]) < cfg.radial_cutoff {
                pairs[EdgeType::IntraRadial.index()].push((i, j));
            }
            if i.abs_diff(j) <= 2 {
                pairs[EdgeType::IntraSequential.index()].push((i, j));
            }
        }
        for j in knn(&ca, i, same, cfg.k_intra) {
            pairs[EdgeType::IntraKnn.index()].push((i, j));
        }
        let ag = chain_offset[2]..chain_offset[2] + chain_len[2];
        let (other, radial_type) = if ki == 2 {
            (0..chain_offset[2], EdgeType::InterRadialAgAb)
        } else {
            (ag, EdgeType::InterRadialAbAg)
        };
        for j in other.clone() {
            if distance(&ca[i], &ca[j]) < cfg.radial_cutoff {
                pairs[radial_type.index()].push((i, j));
            }
        }
        for j in knn(&ca, i, other, cfg.k_inter) {
            pairs[EdgeType::InterKnn.index()].push((i, j));
        }
        pairs[EdgeType::ChainToGlobal.index()].push((i, globals[ki]));
        pairs[EdgeType::GlobalToChain.index()].push((globals[ki], i));
    }

    let rbf = cfg.rbf();
    let edges = EdgeType::ALL
        .iter()
        .map(|&t| {
            let p = &mut pairs[t.index()];
            p.sort_unstable();
            let mut data = Vec::with_capacity(p.len() * EDGE_FEATURE_DIM);
            for &(i, j) in p.iter() {
                data.extend(build_edge_feature(
                    t,
                    &coords[i],
                    &coords[j],
                    frames[i].as_ref(),
                    frames[j].as_ref(),
                    &rbf,
                ));
            }
            EdgeSet {
                src: p.iter().map(|e| e.0).collect(),
                dst: p.iter().map(|e| e.1).collect(),
                features: Mat::from_vec(p.len(), EDGE_FEATURE_DIM, data),
            }
        })
        .collect();

    Ok(HeteroGraph {
        node_kind,
        node_token,
        coords,
        chain_offset,
        chain_len,
        globals,
        edges,
    })
}

/// Antigen node indices ordered by their minimum Cα distance to `cdr_nodes`,
/// nearest first at `RANK_RESOLUTION`, ties by index, truncated to `k_ag`.
pub fn nearest_antigen_nodes(g: &HeteroGraph, cdr_nodes: &[usize], k_ag: usize) -> Vec<usize> {
    let ca = g.ca();
    let mut scored: Vec<(i64, usize)> = (g.chain_offset[2]..g.chain_offset[2] + g.chain_len[2])
        .map(|j| {
            let d = cdr_nodes
                .iter()
                .map(|&k| distance(&ca[k], &ca[j]))
                .fold(f64::INFINITY, f64::min);
            (rank_key(d), j)
        })
        .collect();
    scored.sort_unstable();
    scored.truncate(k_ag);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Node indices of the adapter context: the CDR nodes, then the `k_ag` nearest
/// antigen nodes.
pub fn context_nodes(g: &HeteroGraph, cdr_nodes: &[usize], k_ag: usize) -> Vec<usize> {
    let mut idx = cdr_nodes.to_vec();
    idx.extend(nearest_antigen_nodes(g, cdr_nodes, k_ag));
    idx
}

/// `H_ctx`: rows of `h` for the CDR followed by the cropped antigen.
pub fn crop_antigen_context(h: &Mat, g: &HeteroGraph, cdr_nodes: &[usize], k_ag: usize) -> Mat {
    h.select_rows(&context_nodes(g, cdr_nodes, k_ag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidMotion;
    use crate::rng::RngStream;
    use crate::synth::{synth_complex, SynthConfig};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn residue(ca: Point) -> crate::structure::Residue {
        crate::structure::tests::residue_at('A', 'H', 0, ca)
    }

    fn single_chain(n: usize, spacing: f64) -> Complex {
        let heavy = (0..n)
            .map(|i| residue([spacing * i as f64, 0.0, 0.0]))
            .collect();
        Complex::new(
            "t",
            heavy,
            vec![],
            vec![],
            BTreeMap::new(),
            Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn two_residue_chain_with_infinite_radius() {
        let cfg = GraphConfig {
            radial_cutoff: f64::INFINITY,
            ..Default::default()
        };
        let g = build_graph(&single_chain(2, 3.8), &cfg).unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(
            g.edge_set(EdgeType::IntraRadial)
                .pairs()
                .collect::<Vec<_>>(),
            vec![(0, 1), (1, 0)]
        );
        assert_eq!(g.edge_set(EdgeType::IntraSequential).len(), 2);
        assert_eq!(
            g.edge_set(EdgeType::GlobalToChain)
                .pairs()
                .collect::<Vec<_>>(),
            vec![(2, 0), (2, 1)]
        );
        assert!(g.edge_set(EdgeType::InterKnn).is_empty());
    }

    #[test]
    fn sequential_count_formula() {
        for n in 3..9 {
            let g = build_graph(&single_chain(n, 3.8), &GraphConfig::default()).unwrap();
            assert_eq!(
                g.edge_set(EdgeType::IntraSequential).len(),
                2 * ((n - 1) + (n - 2))
            );
        }
    }

    #[test]
    fn knn_with_large_k_is_complete_digraph() {
        let cfg = GraphConfig {
            k_intra: 50,
            ..Default::default()
        };
        let n = 7;
        let g = build_graph(&single_chain(n, 3.8), &cfg).unwrap();
        let knn: Vec<_> = g.edge_set(EdgeType::IntraKnn).pairs().collect();
        let full: Vec<_> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        assert_eq!(knn, full);
    }

    #[test]
    fn self_feature_for_global_edges() {
        let rbf = RbfBank::default();
        let x = [[0.0; 3]; 4];
        let f = build_edge_feature(EdgeType::GlobalToChain, &x, &x, None, None, &rbf);
        assert_eq!(f.len(), EDGE_FEATURE_DIM);
        assert_eq!(&f[8..11], &[0.0; 3]);
        assert_eq!(f[11], 1.0);
        assert_eq!(&f[75..79], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f[6], 1.0);
    }

    #[test]
    fn edge_features_are_rigid_invariant() {
        let mut rng = RngStream::new(11);
        let c = synth_complex(&mut rng, "x", &SynthConfig::default());
        let g = build_graph(&c, &GraphConfig::default()).unwrap();
        for _ in 0..5 {
            let m = RigidMotion::random(&mut rng, 50.0);
            let gm = build_graph(&c.transformed(&m), &GraphConfig::default()).unwrap();
            for t in 0..NUM_EDGE_TYPES {
                assert_eq!(g.edges[t].src, gm.edges[t].src);
                assert_eq!(g.edges[t].dst, gm.edges[t].dst);
                assert!(g.edges[t].features.max_abs_diff(&gm.edges[t].features) < 1e-10);
            }
        }
    }

    #[test]
    fn crop_sizes() {
        let mut rng = RngStream::new(5);
        let c = synth_complex(&mut rng, "x", &SynthConfig::default());
        let g = build_graph(&c, &GraphConfig::default()).unwrap();
        let cdr: Vec<usize> = (3..6).collect();
        assert_eq!(context_nodes(&g, &cdr, 0), cdr);
        let all = nearest_antigen_nodes(&g, &cdr, 10_000);
        assert_eq!(all.len(), c.antigen.len());
        let h = Mat::from_fn(g.num_nodes(), 2, |r, c| (r * 2 + c) as f64);
        assert_eq!(crop_antigen_context(&h, &g, &cdr, 4).rows(), 7);
    }
}
