//! Evaluation metrics and failure-mode diagnostics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aa::{AminoAcid, NUM_AA};
use crate::autograd::log_sum_exp;
use crate::geometry::{distance, superposed_rmsd, Point};
use crate::structure::{split_contact_positions, CdrName, Complex, StructureError};
use crate::tensor::Mat;

/// Default number of relative-position bins along a CDR.
pub const POSITION_BINS: usize = 11;
/// Interface radius for DockQ's iRMSD, Å.
pub const DOCKQ_INTERFACE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("no CDR-antigen contacts in the corpus")]
    NoContacts,
    #[error("{id}: predicted length {pred} differs from native {native}")]
    LengthMismatch {
        id: String,
        pred: usize,
        native: usize,
    },
    #[error("{id}: {source}")]
    Structure { id: String, source: StructureError },
}

/// Mean and population standard deviation over complexes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(xs: &[f64]) -> Option<Summary> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(Summary {
        mean,
        std: var.sqrt(),
        n: xs.len(),
    })
}

fn matches(
    pred: &[AminoAcid],
    truth: &[AminoAcid],
    at: impl Iterator<Item = usize>,
) -> (usize, usize) {
    at.fold((0, 0), |(m, n), i| {
        (m + usize::from(pred[i] == truth[i]), n + 1)
    })
}

/// Fraction of positions where `pred` equals `truth`.
pub fn aar(pred: &[AminoAcid], truth: &[AminoAcid]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let (m, n) = matches(pred, truth, 0..pred.len());
    m as f64 / n.max(1) as f64
}

/// Recovery restricted to `contacts`; `None` when there are none.
pub fn caar(pred: &[AminoAcid], truth: &[AminoAcid], contacts: &[usize]) -> Option<f64> {
    if contacts.is_empty() {
        return None;
    }
    let (m, n) = matches(pred, truth, contacts.iter().copied());
    Some(m as f64 / n as f64)
}

/// Mean cross-entropy over the 20 amino-acid columns.
pub fn mean_cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    assert_eq!(logits.rows(), targets.len());
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.row(i)[..NUM_AA];
            log_sum_exp(row) - row[y]
        })
        .sum();
    total / targets.len() as f64
}

pub fn perplexity(logits: &Mat, targets: &[usize]) -> f64 {
    mean_cross_entropy(logits, targets).exp()
}

/// Pooled amino-acid distribution over all positions.
pub fn aa_frequency<S: AsRef<[AminoAcid]>>(seqs: &[S]) -> [f64; NUM_AA] {
    let mut f = [0.0; NUM_AA];
    let mut n = 0usize;
    for a in seqs.iter().flat_map(|s| s.as_ref()) {
        f[a.index()] += 1.0;
        n += 1;
    }
    if n > 0 {
        f.iter_mut().for_each(|v| *v /= n as f64);
    }
    f
}

/// `exp(-Σ p ln p)`.
pub fn entropy_exp(p: &[f64]) -> f64 {
    (-p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>())
    .exp()
}

/// Exponentiated Shannon entropy of the pooled amino-acid distribution.
pub fn effective_vocabulary<S: AsRef<[AminoAcid]>>(seqs: &[S]) -> f64 {
    entropy_exp(&aa_frequency(seqs))
}

/// Bin of 0-based position `k` in a CDR of length `len`: positions are
/// placed at `(k + 1)/(len + 1)` between the two anchors.
pub fn position_bin(k: usize, len: usize, bins: usize) -> usize {
    let u = (k + 1) as f64 / (len + 1) as f64;
    ((u * bins as f64) as usize).min(bins - 1)
}

/// Per-bin recovery along the CDR; `None` for bins no position fell into.
pub fn positional_aar<S: AsRef<[AminoAcid]>>(pairs: &[(S, S)], bins: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; bins];
    let mut tot = vec![0usize; bins];
    for (p, t) in pairs {
        let (p, t) = (p.as_ref(), t.as_ref());
        for k in 0..t.len() {
            let b = position_bin(k, t.len(), bins);
            tot[b] += 1;
            hit[b] += usize::from(p[k] == t[k]);
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// `bins x 20` amino-acid frequencies per relative-position bin.
pub fn per_position_frequency<S: AsRef<[AminoAcid]>>(
    seqs: &[S],
    bins: usize,
) -> Vec<[f64; NUM_AA]> {
    let mut out = vec![[0.0; NUM_AA]; bins];
    for s in seqs {
        let s = s.as_ref();
        for (k, a) in s.iter().enumerate() {
            out[position_bin(k, s.len(), bins)][a.index()] += 1.0;
        }
    }
    for row in &mut out {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Root-mean-square deviation with no superposition.
pub fn rmsd(pred: &[Point], truth: &[Point]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| distance(a, b).powi(2))
        .sum();
    (s / pred.len().max(1) as f64).sqrt()
}

/// `(k, j)` pairs with CDR Cα `k` strictly within `cutoff` of antigen Cα `j`.
pub fn contact_pairs(cdr: &[Point], antigen: &[Point], cutoff: f64) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for (k, x) in cdr.iter().enumerate() {
        for (j, y) in antigen.iter().enumerate() {
            if distance(x, y) < cutoff {
                out.insert((k, j));
            }
        }
    }
    out
}

fn antigen_ca(c: &Complex) -> Vec<Point> {
    c.antigen.iter().map(|r| *r.ca()).collect()
}

fn cdr_ca(c: &Complex, cdr: CdrName) -> Result<Vec<Point>, MetricError> {
    c.cdr_ca(cdr).map_err(|source| MetricError::Structure {
        id: c.id.clone(),
        source,
    })
}

/// Fraction of native CDR-antigen contacts kept by the predicted CDR; `None`
/// when the native complex has no contacts.
pub fn fnat(
    pred_cdr: &[Point],
    native: &Complex,
    cdr: CdrName,
    cutoff: f64,
) -> Result<Option<f64>, MetricError> {
    let ag = antigen_ca(native);
    let nat = contact_pairs(&cdr_ca(native, cdr)?, &ag, cutoff);
    if nat.is_empty() {
        return Ok(None);
    }
    let pred = contact_pairs(pred_cdr, &ag, cutoff);
    Ok(Some(
        nat.intersection(&pred).count() as f64 / nat.len() as f64,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DockQ {
    pub fnat: f64,
    pub irmsd: f64,
    pub lrmsd: f64,
    pub score: f64,
}

/// DockQ of a complex whose only predicted part is the CDR.
///
/// The antibody framework is native, so superposing on it is the identity and
/// LRMSD is the plain CDR RMSD. iRMSD superposes the interface residues: those
/// within 10 Å (Cα) of the other side in the native complex.
pub fn dockq(
    pred_cdr: &[Point],
    native: &Complex,
    cdr: CdrName,
    cutoff: f64,
) -> Result<DockQ, MetricError> {
    let range = native
        .cdr_range(cdr)
        .map_err(|source| MetricError::Structure {
            id: native.id.clone(),
            source,
        })?;
    let true_cdr = cdr_ca(native, cdr)?;
    if pred_cdr.len() != true_cdr.len() {
        return Err(MetricError::LengthMismatch {
            id: native.id.clone(),
            pred: pred_cdr.len(),
            native: true_cdr.len(),
        });
    }
    let ag = antigen_ca(native);
    let chain = cdr.chain();
    let mut ab_native = Vec::new();
    let mut ab_pred = Vec::new();
    for kind in [
        crate::structure::ChainKind::Heavy,
        crate::structure::ChainKind::Light,
    ] {
        for (i, r) in native.chain(kind).iter().enumerate() {
            let x = *r.ca();
            let y = if kind == chain && range.contains(&i) {
                pred_cdr[i - range.start]
            } else {
                x
            };
            ab_native.push(x);
            ab_pred.push(y);
        }
    }
    let near =
        |p: &Point, others: &[Point]| others.iter().any(|q| distance(p, q) < DOCKQ_INTERFACE);
    let mut if_native = Vec::new();
    let mut if_pred = Vec::new();
    for (x, y) in ab_native.iter().zip(&ab_pred) {
        if near(x, &ag) {
            if_native.push(*x);
            if_pred.push(*y);
        }
    }
    for a in &ag {
        if near(a, &ab_native) {
            if_native.push(*a);
            if_pred.push(*a);
        }
    }
    let irmsd = if if_native.len() >= 3 {
        superposed_rmsd(&if_pred, &if_native)
    } else {
        rmsd(&if_pred, &if_native)
    };
    let lrmsd = rmsd(pred_cdr, &true_cdr);
    let f = fnat(pred_cdr, native, cdr, cutoff)?.unwrap_or(0.0);
    let score =
        (f + 1.0 / (1.0 + (irmsd / 1.5).powi(2)) + 1.0 / (1.0 + (lrmsd / 8.5).powi(2))) / 3.0;
    Ok(DockQ {
        fnat: f,
        irmsd,
        lrmsd,
        score,
    })
}

/// F1 of the antigen residues within `cutoff` of the predicted CDR against the
/// native epitope. Two empty sets score 1.
pub fn epitope_f1(pred_cdr: &[Point], native: &Complex, cutoff: f64) -> f64 {
    let pred: BTreeSet<usize> = contact_pairs(pred_cdr, &antigen_ca(native), cutoff)
        .into_iter()
        .map(|(_, j)| j)
        .collect();
    set_f1(&pred, &native.epitope)
}

pub fn set_f1(pred: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let tp = pred.intersection(truth).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred.len() as f64;
    let r = tp / truth.len() as f64;
    2.0 * p * r / (p + r)
}

/// Sequence motifs counted as developability liabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiabilityMotifs {
    pub motifs: Vec<String>,
    /// Count one extra liability when the number of cysteines is odd.
    pub unpaired_cys: bool,
}

impl Default for LiabilityMotifs {
    fn default() -> Self {
        LiabilityMotifs {
            motifs: ["NG", "NS", "NT", "DG", "DP", "M"]
                .iter()
                .map(|s| String::from(*s))
                .collect(),
            unpaired_cys: true,
        }
    }
}

/// Occurrences of every motif, overlaps included.
pub fn count_liabilities(seq: &[AminoAcid], motifs: &LiabilityMotifs) -> usize {
    let s: Vec<u8> = seq.iter().map(|a| a.letter() as u8).collect();
    let mut n = 0;
    for m in &motifs.motifs {
        let m = m.as_bytes();
        if !m.is_empty() && m.len() <= s.len() {
            n += s.windows(m.len()).filter(|w| *w == m).count();
        }
    }
    if motifs.unpaired_cys && s.iter().filter(|&&c| c == b'C').count() % 2 == 1 {
        n += 1;
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramCoverage {
    pub n: usize,
    pub unique_pred: usize,
    pub unique_true: usize,
    /// Fraction of the most frequent native n-grams that occur in the predictions.
    pub top_k_overlap: f64,
    pub top_k: Vec<String>,
}

fn ngram_counts<S: AsRef<[AminoAcid]>>(seqs: &[S], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in seqs {
        let s: String = s.as_ref().iter().map(|a| a.letter()).collect();
        let b = s.as_bytes();
        if b.len() >= n {
            for w in b.windows(n) {
                *out.entry(String::from_utf8_lossy(w).into_owned())
                    .or_insert(0) += 1;
            }
        }
    }
    out
}

/// Distinct n-gram counts and how many of the `k` most common native n-grams
/// (ties broken alphabetically) the predictions contain.
pub fn ngram_coverage<S: AsRef<[AminoAcid]>>(
    pred: &[S],
    truth: &[S],
    n: usize,
    k: usize,
) -> NgramCoverage {
    let p = ngram_counts(pred, n);
    let t = ngram_counts(truth, n);
    let mut ranked: Vec<(&String, &usize)> = t.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let top: Vec<String> = ranked.into_iter().take(k).map(|(g, _)| g.clone()).collect();
    let hit = top.iter().filter(|g| p.contains_key(*g)).count();
    NgramCoverage {
        n,
        unique_pred: p.len(),
        unique_true: t.len(),
        top_k_overlap: if top.is_empty() {
            0.0
        } else {
            hit as f64 / top.len() as f64
        },
        top_k: top,
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// A native complex with a predicted sequence (and optionally CDR Cα) for its CDR.
#[derive(Clone, Debug)]
pub struct Scored<'a> {
    pub native: &'a Complex,
    pub cdr: CdrName,
    pub sequence: Vec<AminoAcid>,
    pub cdr_ca: Option<Vec<Point>>,
    /// `L x 25` logits, when the predictor exposes them.
    pub logits: Option<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    /// `20 x 20` normalised (CDR aa, antigen aa) contact frequencies.
    pub pred: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// `None` when either matrix is constant.
    pub r: Option<f64>,
}

fn normalised(m: [[f64; NUM_AA]; NUM_AA]) -> Vec<Vec<f64>> {
    let s: f64 = m.iter().flatten().sum();
    m.iter()
        .map(|row| row.iter().map(|v| v / s).collect())
        .collect()
}

/// Paratope-epitope pair frequencies over native contacts, with the predicted
/// and the native CDR residue, and their Pearson correlation over all 400
/// entries.
pub fn binding_pair_correlation(
    items: &[Scored],
    cutoff: f64,
) -> Result<PairCorrelation, MetricError> {
    let mut pred = [[0.0; NUM_AA]; NUM_AA];
    let mut truth = [[0.0; NUM_AA]; NUM_AA];
    let mut any = false;
    for it in items {
        let native_cdr =
            it.native
                .cdr_residues(it.cdr)
                .map_err(|source| MetricError::Structure {
                    id: it.native.id.clone(),
                    source,
                })?;
        check_len(it, native_cdr.len())?;
        let ca: Vec<Point> = native_cdr.iter().map(|r| *r.ca()).collect();
        for (k, j) in contact_pairs(&ca, &antigen_ca(it.native), cutoff) {
            let ag = it.native.antigen[j].aa;
            if !ag.is_standard() {
                continue;
            }
            pred[it.sequence[k].index()][ag.index()] += 1.0;
            truth[native_cdr[k].aa.index()][ag.index()] += 1.0;
            any = true;
        }
    }
    if !any {
        return Err(MetricError::NoContacts);
    }
    let (pred, truth) = (normalised(pred), normalised(truth));
    let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().copied().collect::<Vec<f64>>();
    let r = pearson(&flat(&pred), &flat(&truth));
    Ok(PairCorrelation { pred, truth, r })
}

/// Correlation of predicted and native amino-acid frequencies at the CDR
/// positions that contact the antigen.
pub fn interface_enrichment(items: &[Scored], cutoff: f64) -> Result<Option<f64>, MetricError> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for it in items {
        let native = it
            .native
            .cdr_sequence(it.cdr)
            .map_err(|source| MetricError::Structure {
                id: it.native.id.clone(),
                source,
            })?;
        check_len(it, native.len())?;
        let (contacts, _) =
            split_contact_positions(it.native, it.cdr, cutoff).map_err(|source| {
                MetricError::Structure {
                    id: it.native.id.clone(),
                    source,
                }
            })?;
        for k in contacts {
            pred.push(it.sequence[k]);
            truth.push(native[k]);
        }
    }
    if truth.is_empty() {
        return Err(MetricError::NoContacts);
    }
    Ok(pearson(&aa_frequency(&[pred]), &aa_frequency(&[truth])))
}

fn check_len(it: &Scored, native: usize) -> Result<(), MetricError> {
    if it.sequence.len() != native {
        return Err(MetricError::LengthMismatch {
            id: it.native.id.clone(),
            pred: it.sequence.len(),
            native,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_complexes: usize,
    pub aar: Option<Summary>,
    /// Complexes without contact positions are left out.
    pub caar: Option<Summary>,
    pub caar_excluded: usize,
    pub ppl: Option<Summary>,
    pub rmsd: Option<Summary>,
    pub fnat: Option<Summary>,
    pub dockq: Option<Summary>,
    pub epitope_f1: Option<Summary>,
    pub n_liab: Option<Summary>,
    pub v_eff: f64,
    pub v_eff_native: f64,
    pub aa_frequency: Vec<f64>,
    pub aa_frequency_native: Vec<f64>,
    /// `bins x 20`.
    pub per_position_freq: Vec<Vec<f64>>,
    pub per_position_freq_native: Vec<Vec<f64>>,
    pub pair: Option<PairCorrelation>,
    pub interface_enrichment: Option<f64>,
    pub positional_aar: Vec<Option<f64>>,
    pub bigram: NgramCoverage,
    pub trigram: NgramCoverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub contact_cutoff: f64,
    pub position_bins: usize,
    pub top_k_ngrams: usize,
    pub liabilities: LiabilityMotifs,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            contact_cutoff: 6.6,
            position_bins: POSITION_BINS,
            top_k_ngrams: 20,
            liabilities: LiabilityMotifs::default(),
        }
    }
}

/// Every metric over a set of predictions. Structural metrics use the items
/// with coordinates and PPL the items with logits.
pub fn diagnose(
    items: &[Scored],
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport, MetricError> {
    let d_c = cfg.contact_cutoff;
    let mut natives = Vec::with_capacity(items.len());
    let (mut aars, mut caars, mut ppls, mut liab) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut rmsds, mut fnats, mut dockqs, mut f1s) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut caar_excluded = 0;
    for it in items {
        let sm = |source| MetricError::Structure {
            id: it.native.id.clone(),
            source,
        };
        let native = it.native.cdr_sequence(it.cdr).map_err(sm)?;
        check_len(it, native.len())?;
        aars.push(aar(&it.sequence, &native));
        let (contacts, _) = split_contact_positions(it.native, it.cdr, d_c).map_err(sm)?;
        match caar(&it.sequence, &native, &contacts) {
            Some(v) => caars.push(v),
            None => caar_excluded += 1,
        }
        liab.push(count_liabilities(&it.sequence, &cfg.liabilities) as f64);
        if let Some(l) = &it.logits {
            let targets: Vec<usize> = native.iter().map(|a| a.index()).collect();
            ppls.push(perplexity(l, &targets));
        }
        if let Some(ca) = &it.cdr_ca {
            let true_ca = cdr_ca(it.native, it.cdr)?;
            if ca.len() != true_ca.len() {
                return Err(MetricError::LengthMismatch {
                    id: it.native.id.clone(),
                    pred: ca.len(),
                    native: true_ca.len(),
                });
            }
            rmsds.push(rmsd(ca, &true_ca));
            if let Some(f) = fnat(ca, it.native, it.cdr, d_c)? {
                fnats.push(f);
            }
            dockqs.push(dockq(ca, it.native, it.cdr, d_c)?.score);
            f1s.push(epitope_f1(ca, it.native, d_c));
        }
        natives.push(native);
    }
    let preds: Vec<&[AminoAcid]> = items.iter().map(|i| i.sequence.as_slice()).collect();
    let nats: Vec<&[AminoAcid]> = natives.iter().map(|v| v.as_slice()).collect();
    let pairs: Vec<(&[AminoAcid], &[AminoAcid])> =
        preds.iter().copied().zip(nats.iter().copied()).collect();
    let pair = match binding_pair_correlation(items, d_c) {
        Ok(p) => Some(p),
        Err(MetricError::NoContacts) => None,
        Err(e) => return Err(e),
    };
    let interface = match interface_enrichment(items, d_c) {
        Ok(r) => r,
        Err(MetricError::NoContacts) => None,
        Err(e) => return Err(e),
    };
    let rows = |m: Vec<[f64; NUM_AA]>| m.into_iter().map(|r| r.to_vec()).collect();
    Ok(DiagnosticsReport {
        n_complexes: items.len(),
        aar: summarize(&aars),
        caar: summarize(&caars),
        caar_excluded,
        ppl: summarize(&ppls),
        rmsd: summarize(&rmsds),
        fnat: summarize(&fnats),
        dockq: summarize(&dockqs),
        epitope_f1: summarize(&f1s),
        n_liab: summarize(&liab),
        v_eff: effective_vocabulary(&preds),
        v_eff_native: effective_vocabulary(&nats),
        aa_frequency: aa_frequency(&preds).to_vec(),
        aa_frequency_native: aa_frequency(&nats).to_vec(),
        per_position_freq: rows(per_position_frequency(&preds, cfg.position_bins)),
        per_position_freq_native: rows(per_position_frequency(&nats, cfg.position_bins)),
        pair,
        interface_enrichment: interface,
        positional_aar: positional_aar(&pairs, cfg.position_bins),
        bigram: ngram_coverage(&preds, &nats, 2, cfg.top_k_ngrams),
        trigram: ngram_coverage(&preds, &nats, 3, cfg.top_k_ngrams),
    })
}
