//! Relation-aware E(3)-equivariant message passing over a [`HeteroGraph`].
//!
//! Coordinates travel through the layers as an `N x 12` matrix, one row per
//! node holding its N, Cα, C and O positions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, TensorError, Var};
use crate::graph::{HeteroGraph, EDGE_FEATURE_DIM, NODE_VOCAB, NUM_EDGE_TYPES};
use crate::nn::{Linear, SiluMlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementForm {
    /// 4x4 channel Gram matrix `ΔX·ΔXᵀ` (16 values); rotation invariant.
    Gram4,
    /// 3x3 outer product of the Cα displacement (9 values); not rotation
    /// invariant, kept for comparison.
    Outer3,
}

impl DisplacementForm {
    pub fn width(self) -> usize {
        match self {
            DisplacementForm::Gram4 => 16,
            DisplacementForm::Outer3 => 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_gnn: usize,
    pub aa_embed_dim: usize,
    pub n_edge_types: usize,
    pub displacement: DisplacementForm,
    /// Displacements are divided by this length (Å) before forming the
    /// displacement products, keeping message inputs of order one.
    pub length_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 5,
            d_gnn: 256,
            aa_embed_dim: 32,
            n_edge_types: NUM_EDGE_TYPES,
            displacement: DisplacementForm::Gram4,
            length_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("non-finite activation after encoder layer {0}")]
    NonFiniteActivation(usize),
    #[error("encoder expects {expected} edge types, graph has {found}")]
    EdgeTypeCount { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub message: SiluMlp,
    /// Type-specific projections `W_t`, `d_gnn x d_gnn`.
    pub w_type: Vec<ParamId>,
    pub node_in: Linear,
    pub node_out: Linear,
    /// Per-type scalar MLP for coordinate updates; the last layer starts at zero.
    pub coord_hidden: Vec<Linear>,
    pub coord_out: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub aa_embed: ParamId,
    pub epitope_embed: ParamId,
    pub in_proj: Linear,
    pub layers: Vec<EncoderLayer>,
}

/// Which nodes are masked CDR positions and which are epitope residues.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub graph: &'a HeteroGraph,
    pub cdr_nodes: &'a [usize],
    pub epitope_nodes: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `N x d_gnn`.
    pub h: Var,
    /// `N x 12` updated backbone coordinates.
    pub coords: Var,
}

/// Graph coordinates as an `N x 12` matrix.
pub fn coords_matrix(g: &HeteroGraph) -> Mat {
    Mat::from_fn(g.num_nodes(), 12, |i, c| g.coords[i][c / 3][c % 3])
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.d_gnn;
        let a = cfg.aa_embed_dim;
        let aa_embed = store.add(
            "encoder.aa_embed",
            Mat::from_fn(NODE_VOCAB, a, |_, _| rng.normal()),
        );
        let epitope_embed = store.add(
            "encoder.epitope_embed",
            Mat::from_fn(1, a, |_, _| rng.normal()),
        );
        let in_proj = Linear::new(store, "encoder.in_proj", a, d, true, rng);
        let msg_in = 2 * d + cfg.displacement.width() + EDGE_FEATURE_DIM;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    message: SiluMlp::new(store, &format!("{p}.message"), (msg_in, d, d), rng),
                    w_type: (0..cfg.n_edge_types)
                        .map(|t| {
                            store.add(
                                &format!("{p}.w_type{t}"),
                                crate::nn::uniform_init(rng, d, d),
                            )
                        })
                        .collect(),
                    node_in: Linear::new(store, &format!("{p}.node.0"), 2 * d, d, true, rng),
                    node_out: Linear::new(store, &format!("{p}.node.1"), d, d, true, rng),
                    coord_hidden: (0..cfg.n_edge_types)
                        .map(|t| Linear::new(store, &format!("{p}.coord{t}.0"), d, d, true, rng))
                        .collect(),
                    coord_out: (0..cfg.n_edge_types)
                        .map(|t| Linear::zeros(store, &format!("{p}.coord{t}.1"), d, 1, true))
                        .collect(),
                }
            })
            .collect();
        Encoder {
            cfg: cfg.clone(),
            aa_embed,
            epitope_embed,
            in_proj,
            layers,
        }
    }

    /// Amino-acid embedding with CDR rows zeroed and the epitope vector added,
    /// projected to `d_gnn`.
    pub fn init_node_embeddings(
        &self,
        t: &mut Tape,
        input: &EncoderInput,
    ) -> Result<Var, EncoderError> {
        let g = input.graph;
        let n = g.num_nodes();
        let table = t.param(self.aa_embed);
        let emb = t.gather_rows(table, &g.node_token)?;
        let mut keep = Mat::filled(n, 1, 1.0);
        for &i in input.cdr_nodes {
            keep[(i, 0)] = 0.0;
        }
        let keep = t.constant(keep);
        let mut emb = t.mul_col(emb, keep)?;
        if !input.epitope_nodes.is_empty() {
            let mut ind = Mat::zeros(n, 1);
            for &i in input.epitope_nodes {
                ind[(i, 0)] = 1.0;
            }
            let ind = t.constant(ind);
            let ep = t.param(self.epitope_embed);
            let add = t.matmul(ind, ep)?;
            emb = t.add(emb, add)?;
        }
        Ok(self.in_proj.forward(t, emb)?)
    }

    fn displacement_features(&self, t: &mut Tape, d: Var) -> Result<Var, TensorError> {
        let s = 1.0 / self.cfg.length_scale;
        let scaled = t.scale(d, s);
        match self.cfg.displacement {
            DisplacementForm::Gram4 => t.gram4(scaled),
            DisplacementForm::Outer3 => t.outer3(scaled),
        }
    }

    /// One layer: typed messages, node update with skip connection, and the
    /// equivariant per-channel coordinate update.
    pub fn layer_forward(
        &self,
        t: &mut Tape,
        l: usize,
        g: &HeteroGraph,
        h: Var,
        x: Var,
    ) -> Result<(Var, Var), EncoderError> {
        let layer = &self.layers[l];
        let n = g.num_nodes();
        let mut typed_sum: Option<Var> = None;
        let mut coord_delta: Option<Var> = None;
        for (ti, es) in g.edges.iter().enumerate() {
            if es.is_empty() {
                continue;
            }
            let hi = t.gather_rows(h, &es.src)?;
            let hj = t.gather_rows(h, &es.dst)?;
            let xi = t.gather_rows(x, &es.src)?;
            let xj = t.gather_rows(x, &es.dst)?;
            let dx = t.sub(xi, xj)?;
            let geo = self.displacement_features(t, dx)?;
            let e = t.constant(es.features.clone());
            let cat = t.concat_cols(&[hi, hj, geo, e])?;
            let m = layer.message.forward(t, cat)?;

            let agg = t.scatter_add_rows(m, &es.src, n)?;
            let w = t.param(layer.w_type[ti]);
            let proj = t.matmul(agg, w)?;
            typed_sum = Some(match typed_sum {
                Some(s) => t.add(s, proj)?,
                None => proj,
            });

            let sh = layer.coord_hidden[ti].forward(t, m)?;
            let sh = t.silu(sh);
            let s = layer.coord_out[ti].forward(t, sh)?;
            let upd = t.mul_col(dx, s)?;
            let summed = t.scatter_add_rows(upd, &es.src, n)?;
            let mut deg = vec![0usize; n];
            for &i in &es.src {
                deg[i] += 1;
            }
            let inv = t.constant(Mat::from_fn(n, 1, |i, _| {
                if deg[i] > 0 {
                    1.0 / deg[i] as f64
                } else {
                    0.0
                }
            }));
            let mean = t.mul_col(summed, inv)?;
            coord_delta = Some(match coord_delta {
                Some(c) => t.add(c, mean)?,
                None => mean,
            });
        }
        let d = self.cfg.d_gnn;
        let typed_sum = match typed_sum {
            Some(s) => s,
            None => t.constant(Mat::zeros(n, d)),
        };
        let cat = t.concat_cols(&[h, typed_sum])?;
        let u = layer.node_in.forward(t, cat)?;
        let u = t.silu(u);
        let u = layer.node_out.forward(t, u)?;
        let h_new = t.add(h, u)?;
        let x_new = match coord_delta {
            Some(c) => t.add(x, c)?,
            None => x,
        };
        Ok((h_new, x_new))
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        input: &EncoderInput,
    ) -> Result<EncoderOutput, EncoderError> {
        let g = input.graph;
        if g.edges.len() != self.cfg.n_edge_types {
            return Err(EncoderError::EdgeTypeCount {
                expected: self.cfg.n_edge_types,
                found: g.edges.len(),
            });
        }
        let mut h = self.init_node_embeddings(t, input)?;
        let mut x = t.constant(coords_matrix(g));
        for l in 0..self.layers.len() {
            (h, x) = self.layer_forward(t, l, g, h, x)?;
            if !t.value(h).all_finite() || !t.value(x).all_finite() {
                return Err(EncoderError::NonFiniteActivation(l));
            }
        }
        Ok(EncoderOutput { h, coords: x })
    }
}
