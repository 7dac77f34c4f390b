//! Evaluation reports (JSON and CSV) and the diagnostics CSV bundle.

use std::path::{Path, PathBuf};

use evostruct_core::aa::{sequence_string, AA_LETTERS};
use evostruct_core::metrics::{
    diagnose, DiagnosticsConfig, DiagnosticsReport, MetricError, Scored, Summary,
};
use evostruct_core::structure::CdrName;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Table columns for one complex. Metrics that need logits or coordinates
/// are empty when the prediction lacks them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexRow {
    pub id: String,
    pub cdr: CdrName,
    pub length: usize,
    pub predicted_seq: String,
    pub native_seq: String,
    pub aar: f64,
    pub caar: Option<f64>,
    pub ppl: Option<f64>,
    pub rmsd: Option<f64>,
    pub fnat: Option<f64>,
    pub dockq: Option<f64>,
    pub epitope_f1: Option<f64>,
    pub n_liab: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub summary: DiagnosticsReport,
    pub per_complex: Vec<ComplexRow>,
}

fn mean(s: &Option<Summary>) -> Option<f64> {
    s.map(|s| s.mean)
}

pub fn build_report(items: &[Scored], cfg: &DiagnosticsConfig) -> Result<FullReport, ReportError> {
    let summary = diagnose(items, cfg)?;
    let per_complex = items
        .iter()
        .map(|it| {
            let one = diagnose(std::slice::from_ref(it), cfg)?;
            let native =
                it.native
                    .cdr_sequence(it.cdr)
                    .map_err(|source| MetricError::Structure {
                        id: it.native.id.clone(),
                        source,
                    })?;
            Ok(ComplexRow {
                id: it.native.id.clone(),
                cdr: it.cdr,
                length: it.sequence.len(),
                predicted_seq: sequence_string(&it.sequence),
                native_seq: sequence_string(&native),
                aar: one.aar.map_or(0.0, |s| s.mean),
                caar: mean(&one.caar),
                ppl: mean(&one.ppl),
                rmsd: mean(&one.rmsd),
                fnat: mean(&one.fnat),
                dockq: mean(&one.dockq),
                epitope_f1: mean(&one.epitope_f1),
                n_liab: one.n_liab.map_or(0.0, |s| s.mean),
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(FullReport {
        summary,
        per_complex,
    })
}

struct Csv {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Csv {
    fn create(dir: &Path, name: &str) -> Result<Self, ReportError> {
        let path = dir.join(name);
        let w = csv::Writer::from_path(&path).map_err(|source| ReportError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(Csv { path, w })
    }

    fn row<I, T>(&mut self, fields: I) -> Result<(), ReportError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.w
            .write_record(fields)
            .map_err(|source| ReportError::Csv {
                path: self.path.clone(),
                source,
            })
    }

    fn finish(mut self) -> Result<(), ReportError> {
        self.w.flush().map_err(|source| ReportError::Io {
            path: self.path,
            source,
        })
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn aa_header(first: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain(AA_LETTERS.iter().map(|&c| (c as char).to_string()))
        .collect()
}

/// `report.json` and `report.csv` (one row per table metric: mean, std, n).
pub fn write_report(dir: &Path, r: &FullReport) -> Result<(), ReportError> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(r).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|source| ReportError::Io { path, source })?;

    let s = &r.summary;
    let mut csv = Csv::create(dir, "report.csv")?;
    csv.row(["metric", "mean", "std", "n"])?;
    for (name, m) in [
        ("AAR", &s.aar),
        ("CAAR", &s.caar),
        ("PPL", &s.ppl),
        ("RMSD", &s.rmsd),
        ("fnat", &s.fnat),
        ("DockQ", &s.dockq),
        ("EpiF1", &s.epitope_f1),
        ("n_liab", &s.n_liab),
    ] {
        csv.row([
            name.to_string(),
            num(m.map(|x| x.mean)),
            num(m.map(|x| x.std)),
            m.map_or(0, |x| x.n).to_string(),
        ])?;
    }
    csv.row([
        "V_eff".to_string(),
        s.v_eff.to_string(),
        String::new(),
        s.n_complexes.to_string(),
    ])?;
    csv.finish()?;
    write_per_complex(dir, r)
}

fn write_per_complex(dir: &Path, r: &FullReport) -> Result<(), ReportError> {
    let mut csv = Csv::create(dir, "per_complex.csv")?;
    csv.row([
        "id",
        "cdr",
        "length",
        "predicted_seq",
        "native_seq",
        "aar",
        "caar",
        "ppl",
        "rmsd",
        "fnat",
        "dockq",
        "epitope_f1",
        "n_liab",
    ])?;
    for c in &r.per_complex {
        csv.row([
            c.id.clone(),
            c.cdr.to_string(),
            c.length.to_string(),
            c.predicted_seq.clone(),
            c.native_seq.clone(),
            c.aar.to_string(),
            num(c.caar),
            num(c.ppl),
            num(c.rmsd),
            num(c.fnat),
            num(c.dockq),
            num(c.epitope_f1),
            c.n_liab.to_string(),
        ])?;
    }
    csv.finish()
}

/// The failure-mode bundle: vocabulary, composition, positional profiles,
/// pair matrices and n-gram coverage.
pub fn write_diagnostics(dir: &Path, r: &FullReport) -> Result<(), ReportError> {
    write_report(dir, r)?;
    let s = &r.summary;

    let mut csv = Csv::create(dir, "vocabulary.csv")?;
    csv.row(["source", "v_eff"])?;
    csv.row(["predicted".to_string(), s.v_eff.to_string()])?;
    csv.row(["native".to_string(), s.v_eff_native.to_string()])?;
    csv.finish()?;

    let mut csv = Csv::create(dir, "aa_frequency.csv")?;
    csv.row(["aa", "predicted", "native"])?;
    for (k, &c) in AA_LETTERS.iter().enumerate() {
        csv.row([
            (c as char).to_string(),
            s.aa_frequency[k].to_string(),
            s.aa_frequency_native[k].to_string(),
        ])?;
    }
    csv.finish()?;

    let mut csv = Csv::create(dir, "position_frequency.csv")?;
    csv.row(aa_header(&["source", "bin"]))?;
    for (source, m) in [
        ("predicted", &s.per_position_freq),
        ("native", &s.per_position_freq_native),
    ] {
        for (b, row) in m.iter().enumerate() {
            csv.row(
                [source.to_string(), b.to_string()]
                    .into_iter()
                    .chain(row.iter().map(|v| v.to_string())),
            )?;
        }
    }
    csv.finish()?;

    let mut csv = Csv::create(dir, "positional_aar.csv")?;
    csv.row(["bin", "aar"])?;
    for (b, v) in s.positional_aar.iter().enumerate() {
        csv.row([b.to_string(), num(*v)])?;
    }
    csv.finish()?;

    for (name, pick) in [
        ("pair_matrix_predicted.csv", true),
        ("pair_matrix_native.csv", false),
    ] {
        let mut csv = Csv::create(dir, name)?;
        csv.row(aa_header(&["cdr_aa"]))?;
        if let Some(p) = &s.pair {
            let m = if pick { &p.pred } else { &p.truth };
            for (k, row) in m.iter().enumerate() {
                csv.row(
                    std::iter::once((AA_LETTERS[k] as char).to_string())
                        .chain(row.iter().map(|v| v.to_string())),
                )?;
            }
        }
        csv.finish()?;
    }

    let mut csv = Csv::create(dir, "correlations.csv")?;
    csv.row(["measure", "r"])?;
    csv.row([
        "binding_pair".to_string(),
        num(s.pair.as_ref().and_then(|p| p.r)),
    ])?;
    csv.row([
        "interface_enrichment".to_string(),
        num(s.interface_enrichment),
    ])?;
    csv.finish()?;

    let mut csv = Csv::create(dir, "ngram_coverage.csv")?;
    csv.row([
        "n",
        "unique_predicted",
        "unique_native",
        "top_k",
        "top_k_overlap",
    ])?;
    for g in [&s.bigram, &s.trigram] {
        csv.row([
            g.n.to_string(),
            g.unique_pred.to_string(),
            g.unique_true.to_string(),
            g.top_k.len().to_string(),
            g.top_k_overlap.to_string(),
        ])?;
    }
    csv.finish()
}
