//! The assembled model: graph encoder, PLM queries, adapter and sequence head.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aa::{AminoAcid, Token};
use crate::adapter::{greedy_decode, Adapter, AdapterConfig, SequenceHead};
use crate::autograd::{Tape, TensorError, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, EncoderInput};
use crate::geometry::{build_local_frame, GeometryError, Point};
use crate::graph::{build_graph, context_nodes, GraphConfig, HeteroGraph};
use crate::params::ParamStore;
use crate::plm::{PlmBackend, PlmError, PlmInput};
use crate::rng::RngStream;
use crate::structure::{mask_cdr, CdrName, ChainKind, Complex, StructureError};
use crate::tensor::Mat;

/// Starting coordinates for the CDR being designed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdrInit {
    /// Straight line between the flanking framework residues.
    #[default]
    Interpolate,
    /// Native coordinates (structure given, sequence designed).
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cdr: CdrName,
    /// Antigen residues kept in the adapter context.
    pub k_ag: usize,
    /// Contact distance on Cα, Å.
    pub contact_cutoff: f64,
    pub cdr_init: CdrInit,
    pub graph: GraphConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cdr: CdrName::H3,
            k_ag: 32,
            contact_cutoff: 6.6,
            cdr_init: CdrInit::Interpolate,
            graph: GraphConfig::default(),
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{id}: {source}")]
    Structure { id: String, source: StructureError },
    #[error("{id}: {source}")]
    Geometry { id: String, source: GeometryError },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Plm(#[from] PlmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backend width {backend} does not match the model's {model}")]
    WidthMismatch { backend: usize, model: usize },
}

pub type Result<T> = core::result::Result<T, ModelError>;

/// Everything the model needs for one complex, computed once.
#[derive(Clone, Debug)]
pub struct PreparedComplex {
    pub id: String,
    pub cdr: CdrName,
    /// The complex as given, used for supervision and metrics.
    pub native: Complex,
    /// Graph built from the input coordinates.
    pub graph: HeteroGraph,
    pub cdr_nodes: Vec<usize>,
    pub epitope_nodes: Vec<usize>,
    pub antigen_nodes: Vec<usize>,
    /// CDR nodes followed by the nearest `k_ag` antigen nodes.
    pub context_nodes: Vec<usize>,
    /// Masked chain tokens for the PLM.
    pub tokens: Vec<Token>,
    pub cdr_range: Range<usize>,
    pub targets: Vec<usize>,
    /// `L x 3` native CDR Cα.
    pub true_cdr_ca: Mat,
    /// `|E| x 3` epitope Cα.
    pub epitope_ca: Mat,
}

impl PreparedComplex {
    pub fn plm_input(&self) -> PlmInput<'_> {
        PlmInput {
            id: &self.id,
            cdr: self.cdr,
            tokens: &self.tokens,
            cdr_range: self.cdr_range.clone(),
        }
    }

    pub fn encoder_input(&self) -> EncoderInput<'_> {
        EncoderInput {
            graph: &self.graph,
            cdr_nodes: &self.cdr_nodes,
            epitope_nodes: &self.epitope_nodes,
        }
    }

    pub fn cdr_len(&self) -> usize {
        self.cdr_range.len()
    }
}

fn points_matrix(p: &[Point]) -> Mat {
    Mat::from_fn(p.len(), 3, |r, c| p[r][c])
}

/// Copy of `c` with the CDR backbone replaced according to `mode`.
///
/// Interpolation places every CDR atom on the segment between the matching
/// atoms of the two flanking residues, evenly by chain index. Without both
/// anchors, or if the result has a collinear backbone, native coordinates are
/// kept.
pub fn initial_cdr_coords(
    c: &Complex,
    cdr: CdrName,
    mode: CdrInit,
) -> core::result::Result<Complex, StructureError> {
    let range = c.cdr_range(cdr)?;
    let mut out = c.clone();
    if mode == CdrInit::Native || range.start == 0 || range.end >= c.chain(cdr.chain()).len() {
        return Ok(out);
    }
    let chain = out.chain_mut(cdr.chain());
    let (a, b) = (range.start - 1, range.end);
    let (pa, pb) = (chain[a].backbone, chain[b].backbone);
    let span = (b - a) as f64;
    let mut guess = Vec::with_capacity(range.len());
    for i in range.clone() {
        let f = (i - a) as f64 / span;
        let atoms: [Point; 4] =
            core::array::from_fn(|k| core::array::from_fn(|x| (1.0 - f) * pa[k][x] + f * pb[k][x]));
        if build_local_frame(&atoms[0], &atoms[1], &atoms[2]).is_err() {
            return Ok(c.clone());
        }
        guess.push(atoms);
    }
    for (i, atoms) in range.zip(guess) {
        chain[i].backbone = atoms;
    }
    Ok(out)
}

/// Masks the CDR, sets up its starting coordinates, builds the graph and the
/// adapter context.
pub fn prepare(c: &Complex, cfg: &ModelConfig) -> Result<PreparedComplex> {
    let serr = |source| ModelError::Structure {
        id: c.id.clone(),
        source,
    };
    let cdr = cfg.cdr;
    let range = c.cdr_range(cdr).map_err(serr)?;
    let (tokens, labels) = mask_cdr(c, cdr).map_err(serr)?;
    let input = initial_cdr_coords(c, cdr, cfg.cdr_init).map_err(serr)?;
    let graph = build_graph(&input, &cfg.graph).map_err(|source| ModelError::Geometry {
        id: c.id.clone(),
        source,
    })?;
    let chain = cdr.chain();
    let cdr_nodes: Vec<usize> = range.clone().map(|i| graph.node_of(chain, i)).collect();
    let epitope_nodes = c
        .epitope
        .iter()
        .map(|&j| graph.node_of(ChainKind::Antigen, j))
        .collect();
    let antigen_nodes = (0..c.antigen.len())
        .map(|j| graph.node_of(ChainKind::Antigen, j))
        .collect();
    let ctx = context_nodes(&graph, &cdr_nodes, cfg.k_ag);
    Ok(PreparedComplex {
        id: c.id.clone(),
        cdr,
        true_cdr_ca: points_matrix(&c.cdr_ca(cdr).map_err(serr)?),
        epitope_ca: points_matrix(&c.epitope_ca()),
        native: c.clone(),
        graph,
        cdr_nodes,
        epitope_nodes,
        antigen_nodes,
        context_nodes: ctx,
        tokens,
        cdr_range: range,
        targets: labels.iter().map(|a| a.index()).collect(),
    })
}

/// Encoder outputs for one complex, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h: Var,
    pub coords: Var,
    /// `(L + K) x d_gnn` adapter context.
    pub h_ctx: Var,
    /// `L x 3` predicted CDR Cα.
    pub cdr_ca: Var,
    /// `1 x d_gnn` mean over CDR nodes.
    pub cdr_pool: Var,
    /// `1 x d_gnn` mean over antigen nodes; zero without an antigen.
    pub ag_pool: Var,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// `L x 25`.
    pub logits: Var,
    pub attention: Vec<Var>,
}

/// Greedy prediction for one complex.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub cdr: CdrName,
    pub sequence: Vec<AminoAcid>,
    /// `L x 25` logits.
    pub logits: Mat,
    pub cdr_ca: Vec<Point>,
}

#[derive(Clone, Debug)]
pub struct EvoStruct {
    pub cfg: ModelConfig,
    pub d_esm: usize,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub head: SequenceHead,
}

impl EvoStruct {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        d_esm: usize,
        rng: &mut RngStream,
    ) -> Self {
        let encoder = Encoder::new(store, &cfg.encoder, rng);
        let adapter = Adapter::new(store, &cfg.adapter, d_esm, cfg.encoder.d_gnn, rng);
        let head = SequenceHead::new(
            store,
            d_esm,
            cfg.adapter.head_hidden,
            cfg.adapter.dropout,
            rng,
        );
        EvoStruct {
            cfg: cfg.clone(),
            d_esm,
            encoder,
            adapter,
            head,
        }
    }

    pub fn check_backend(&self, backend: &dyn PlmBackend) -> Result<()> {
        if backend.d_esm() != self.d_esm {
            return Err(ModelError::WidthMismatch {
                backend: backend.d_esm(),
                model: self.d_esm,
            });
        }
        Ok(())
    }

    /// Structural pathway; has no dropout, so one pass serves both R-Drop branches.
    pub fn encode(&self, t: &mut Tape, p: &PreparedComplex) -> Result<Encoded> {
        let out = self.encoder.forward(t, &p.encoder_input())?;
        let h_ctx = t.gather_rows(out.h, &p.context_nodes)?;
        let cdr_rows = t.gather_rows(out.coords, &p.cdr_nodes)?;
        let cdr_ca = t.slice_cols(cdr_rows, 3, 6)?;
        let cdr_h = t.gather_rows(out.h, &p.cdr_nodes)?;
        let cdr_pool = t.mean_rows(cdr_h);
        let ag_pool = if p.antigen_nodes.is_empty() {
            t.constant(Mat::zeros(1, self.cfg.encoder.d_gnn))
        } else {
            let ag = t.gather_rows(out.h, &p.antigen_nodes)?;
            t.mean_rows(ag)
        };
        Ok(Encoded {
            h: out.h,
            coords: out.coords,
            h_ctx,
            cdr_ca,
            cdr_pool,
            ag_pool,
        })
    }

    pub fn embed(
        &self,
        t: &mut Tape,
        backend: &dyn PlmBackend,
        p: &PreparedComplex,
    ) -> Result<Var> {
        Ok(backend.embed_masked(t, &p.plm_input())?)
    }

    /// Adapter and head. Dropout is active exactly when `rng` is given.
    pub fn decode(
        &self,
        t: &mut Tape,
        h_esm: Var,
        h_ctx: Var,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Decoded> {
        let a = self.adapter.forward(t, h_esm, h_ctx, rng.as_deref_mut())?;
        let logits = self.head.forward(t, a.refined, rng)?;
        Ok(Decoded {
            logits,
            attention: a.attention,
        })
    }

    /// Evaluation-mode forward pass and greedy decoding.
    pub fn predict(
        &self,
        store: &ParamStore,
        backend: &dyn PlmBackend,
        p: &PreparedComplex,
    ) -> Result<Prediction> {
        self.check_backend(backend)?;
        let mut t = Tape::skipping_frozen(store);
        let enc = self.encode(&mut t, p)?;
        let h_esm = self.embed(&mut t, backend, p)?;
        let dec = self.decode(&mut t, h_esm, enc.h_ctx, None)?;
        let logits = t.value(dec.logits).clone();
        let ca = t.value(enc.cdr_ca);
        Ok(Prediction {
            id: p.id.clone(),
            cdr: p.cdr,
            sequence: greedy_decode(&logits),
            cdr_ca: (0..ca.rows())
                .map(|r| [ca[(r, 0)], ca[(r, 1)], ca[(r, 2)]])
                .collect(),
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance, RigidMotion};
    use crate::plm::{ToyPlm, ToyPlmConfig};
    use crate::synth::{synth_complex, synth_dataset, SynthConfig};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            k_ag: 6,
            encoder: EncoderConfig {
                n_layers: 2,
                d_gnn: 8,
                aa_embed_dim: 4,
                ..Default::default()
            },
            adapter: AdapterConfig {
                d_a: 8,
                n_heads: 2,
                ffn_ratio: 2,
                dropout: 0.2,
                head_hidden: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn interpolated_cdr_lies_between_anchors() {
        let c = &synth_dataset(4, 1, &SynthConfig::default())[0];
        let r = c.cdr_range(CdrName::H3).unwrap();
        let g = initial_cdr_coords(c, CdrName::H3, CdrInit::Interpolate).unwrap();
        let (a, b) = (c.heavy[r.start - 1].ca(), c.heavy[r.end].ca());
        let step = distance(a, b) / (r.len() + 1) as f64;
        for (k, i) in r.clone().enumerate() {
            let x = g.heavy[i].ca();
            assert!((distance(a, x) - step * (k + 1) as f64).abs() < 1e-9);
        }
        assert_eq!(g.heavy[..r.start], c.heavy[..r.start]);
        assert_eq!(g.heavy[r.end..], c.heavy[r.end..]);
        assert_eq!(g.antigen, c.antigen);
        assert_eq!(
            &initial_cdr_coords(c, CdrName::H3, CdrInit::Native).unwrap(),
            c
        );
    }

    #[test]
    fn cdr_at_chain_end_keeps_native_coordinates() {
        let mut c = synth_dataset(4, 1, &SynthConfig::default()).remove(0);
        let n = c.heavy.len();
        c.cdr_ranges.insert(CdrName::H3, n - 3..n);
        assert_eq!(
            initial_cdr_coords(&c, CdrName::H3, CdrInit::Interpolate).unwrap(),
            c
        );
    }

    #[test]
    fn prepare_indexes_consistently() {
        let cfg = tiny_cfg();
        let c = &synth_dataset(5, 1, &SynthConfig::default())[0];
        let p = prepare(c, &cfg).unwrap();
        assert_eq!(p.cdr_nodes.len(), p.targets.len());
        assert_eq!(
            p.context_nodes.len(),
            p.cdr_len() + cfg.k_ag.min(c.antigen.len())
        );
        assert_eq!(p.context_nodes[..p.cdr_len()], p.cdr_nodes[..]);
        assert_eq!(p.epitope_ca.rows(), c.epitope.len());
        assert_eq!(
            p.targets,
            c.cdr_sequence(CdrName::H3)
                .unwrap()
                .iter()
                .map(|a| a.index())
                .collect::<Vec<_>>()
        );
        p.plm_input().check().unwrap();
    }

    #[test]
    fn prediction_is_rigid_motion_consistent() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let plm = ToyPlm::new(
            &mut store,
            &ToyPlmConfig {
                d_esm: 8,
                n_layers: 1,
                context_radius: 2,
            },
            1,
        );
        let model = EvoStruct::new(&mut store, &cfg, 8, &mut RngStream::new(2));
        for lin in model.encoder.layers.iter().flat_map(|l| &l.coord_out) {
            let w = store.get_mut(lin.w);
            w.value = Mat::filled(w.value.rows(), 1, 0.05);
        }
        let mut rng = RngStream::new(3);
        let c = synth_complex(&mut rng, "x", &SynthConfig::default());
        let m = RigidMotion::random(&mut rng, 20.0);
        let a = model
            .predict(&store, &plm, &prepare(&c, &cfg).unwrap())
            .unwrap();
        let b = model
            .predict(&store, &plm, &prepare(&c.transformed(&m), &cfg).unwrap())
            .unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) < 1e-10);
        assert_eq!(a.sequence, b.sequence);
        for (x, y) in a.cdr_ca.iter().zip(&b.cdr_ca) {
            assert!(distance(&m.apply(x), y) < 1e-9);
        }
        assert!(a
            .cdr_ca
            .iter()
            .zip(c.cdr_ca(CdrName::H3).unwrap())
            .any(|(x, y)| distance(x, &y) > 1e-3));
    }

    #[test]
    fn backend_width_is_checked() {
        let mut store = ParamStore::new();
        let plm = ToyPlm::new(
            &mut store,
            &ToyPlmConfig {
                d_esm: 6,
                n_layers: 0,
                context_radius: 2,
            },
            1,
        );
        let model = EvoStruct::new(&mut store, &tiny_cfg(), 8, &mut RngStream::new(2));
        let c = &synth_dataset(5, 1, &SynthConfig::default())[0];
        let err = model
            .predict(&store, &plm, &prepare(c, &tiny_cfg()).unwrap())
            .unwrap_err();
        assert_eq!(
            err,
            ModelError::WidthMismatch {
                backend: 6,
                model: 8
            }
        );
    }
}
