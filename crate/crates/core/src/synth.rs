//! Synthetic antibody-antigen complexes with planted epitope contacts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::aa::{AminoAcid, NUM_AA};
use crate::geometry::{distance, point, vec3, Point};
use crate::rng::RngStream;
use crate::structure::{CdrName, Complex, Residue};

const BOND: f64 = 3.8;
const CLASH: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub heavy_len: usize,
    pub light_len: usize,
    pub antigen_len: usize,
    pub h3_len_min: usize,
    pub h3_len_max: usize,
    /// Antigen residues placed in contact with CDR-H3.
    pub planted_contacts: usize,
    pub contact_cutoff: f64,
    /// Sharpness of the position-dependent CDR residue preferences; 0 is uniform.
    pub cdr_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            heavy_len: 30,
            light_len: 16,
            antigen_len: 24,
            h3_len_min: 7,
            h3_len_max: 10,
            planted_contacts: 4,
            contact_cutoff: 6.6,
            cdr_bias: 2.0,
        }
    }
}

fn random_unit(rng: &mut RngStream) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Appends `n` self-avoiding Cα positions starting one bond from `start`,
/// keeping `CLASH` Å from `obstacles`. `away` biases the walk direction.
fn walk(
    rng: &mut RngStream,
    first: Point,
    n: usize,
    obstacles: &[Point],
    mut keep_clear: impl FnMut(&Point) -> bool,
    away: Vector3<f64>,
) -> Option<Vec<Point>> {
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    let mut dir = away;
    let mut cur = first;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..60 {
            let d = (dir * 1.5 + away * 0.4 + random_unit(rng)).normalize();
            let cand = point(&(vec3(&cur) + d * BOND));
            let clash = obstacles
                .iter()
                .chain(pts.iter().rev().skip(1))
                .any(|p| distance(p, &cand) < CLASH)
                || pts.len() >= 2 && distance(&pts[pts.len() - 2], &cand) < 5.0;
            if !clash && keep_clear(&cand) {
                pts.push(cand);
                dir = d;
                cur = cand;
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(pts)
}

/// Backbone N, Cα, C, O built around each Cα from its chain neighbours.
fn backbone(ca: &[Point]) -> Vec<[Point; 4]> {
    (0..ca.len())
        .map(|i| {
            let x = vec3(&ca[i]);
            let (prev, next) = match (i > 0, i + 1 < ca.len()) {
                (true, true) => (vec3(&ca[i - 1]), vec3(&ca[i + 1])),
                (false, true) => (x * 2.0 - vec3(&ca[i + 1]), vec3(&ca[i + 1])),
                (true, false) => (vec3(&ca[i - 1]), x * 2.0 - vec3(&ca[i - 1])),
                // A lone residue gets an arbitrary chain direction.
                (false, false) => (x - Vector3::x() * 3.8, x + Vector3::x() * 3.8),
            };
            let t = (next - prev).normalize();
            let mut b = x * 2.0 - prev - next;
            b -= t * t.dot(&b);
            if b.norm() < 1e-3 {
                let helper = if t.x.abs() < 0.9 {
                    Vector3::x()
                } else {
                    Vector3::y()
                };
                b = t.cross(&helper);
            }
            let b = b.normalize();
            let n_atom = x - t * 0.9 + b * 1.05;
            let c_atom = x + t * 1.0 + b * 1.1;
            let o_atom = c_atom + t.cross(&b) * 1.23;
            [point(&n_atom), ca[i], point(&c_atom), point(&o_atom)]
        })
        .collect()
}

fn residues(
    rng: &mut RngStream,
    chain: char,
    ca: &[Point],
    mut aa: impl FnMut(&mut RngStream, usize) -> AminoAcid,
) -> Vec<Residue> {
    backbone(ca)
        .into_iter()
        .enumerate()
        .map(|(i, bb)| Residue {
            aa: aa(rng, i),
            backbone: bb,
            chain_id: chain,
            seq_index: i as i32 + 1,
            icode: ' ',
        })
        .collect()
}

/// Position-dependent CDR residue distribution: each relative position favours
/// a fixed small set of residues, with strength `bias`.
fn cdr_residue(rng: &mut RngStream, pos: usize, len: usize, bias: f64) -> AminoAcid {
    let bin = if len > 1 { pos * 4 / len } else { 2 };
    const FAVOURED: [&[u8]; 5] = [b"ARC", b"GSY", b"YDW", b"FDY", b"DYV"];
    let fav = FAVOURED[bin.min(4)];
    let weights: Vec<f64> = (0..NUM_AA)
        .map(|a| {
            let letter = crate::aa::AA_LETTERS[a];
            if fav.contains(&letter) {
                bias.exp()
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.unit() * total;
    for (a, w) in weights.iter().enumerate() {
        if u < *w {
            return AminoAcid::from_index(a).expect("index below 20");
        }
        u -= w;
    }
    AminoAcid::from_index(NUM_AA - 1).expect("index below 20")
}

fn uniform_residue(rng: &mut RngStream, _: usize) -> AminoAcid {
    AminoAcid::from_index(rng.below(NUM_AA)).expect("index below 20")
}

/// One complex with a CDR-H3 mid-way along the heavy chain and exactly
/// `planted_contacts` antigen residues within the contact cutoff of it.
///
/// Planted antigen Cα lie in `[4, d_c − 0.5]` Å of the CDR; all other antigen
/// Cα stay at least `d_c + 0.5` Å from the CDR and 4 Å from the antibody, so
/// the derived epitope equals the planted set.
pub fn synth_complex(rng: &mut RngStream, id: &str, cfg: &SynthConfig) -> Complex {
    assert!(cfg.h3_len_min >= cfg.planted_contacts.max(1) && cfg.h3_len_max >= cfg.h3_len_min);
    assert!(cfg.heavy_len >= cfg.h3_len_max + 2 && cfg.antigen_len >= cfg.planted_contacts);
    loop {
        if let Some(c) = try_synth(rng, id, cfg) {
            return c;
        }
    }
}

fn try_synth(rng: &mut RngStream, id: &str, cfg: &SynthConfig) -> Option<Complex> {
    let h3_len = cfg.h3_len_min + rng.below(cfg.h3_len_max - cfg.h3_len_min + 1);
    let h3_start = (cfg.heavy_len - h3_len) / 2;
    let h3 = h3_start..h3_start + h3_len;

    let dir = random_unit(rng);
    let heavy_ca = walk(rng, [0.0; 3], cfg.heavy_len, &[], |_| true, dir)?;
    let light_ca = if cfg.light_len > 0 {
        let start = point(&(vec3(&heavy_ca[0]) + random_unit(rng) * 8.0));
        let dir = random_unit(rng);
        walk(rng, start, cfg.light_len, &heavy_ca, |_| true, dir)?
    } else {
        Vec::new()
    };
    let antibody: Vec<Point> = heavy_ca.iter().chain(&light_ca).copied().collect();
    let cdr_ca = &heavy_ca[h3.clone()];

    let near = cfg.contact_cutoff - 0.5;
    let far = cfg.contact_cutoff + 0.5;
    let mut antigen_ca = None;
    'dirs: for _ in 0..200 {
        let n = random_unit(rng);
        let offset = rng.uniform(4.5, near.max(4.5));
        let k0 = rng.below(h3_len - cfg.planted_contacts + 1);
        let planted: Vec<Point> = (0..cfg.planted_contacts)
            .map(|k| point(&(vec3(&cdr_ca[k0 + k]) + n * offset)))
            .collect();
        for p in &planted {
            let dmin = cdr_ca
                .iter()
                .map(|x| distance(x, p))
                .fold(f64::INFINITY, f64::min);
            if !(CLASH..=near).contains(&dmin) || antibody.iter().any(|x| distance(x, p) < CLASH) {
                continue 'dirs;
            }
        }
        let first = *planted
            .last()
            .unwrap_or(&point(&(vec3(&cdr_ca[h3_len / 2]) + n * far)));
        let rest_len = cfg.antigen_len - cfg.planted_contacts;
        let clear = |p: &Point| cdr_ca.iter().all(|x| distance(x, p) >= far);
        let mut obstacles = antibody.clone();
        obstacles.extend(planted.iter().take(planted.len().saturating_sub(1)));
        if cfg.planted_contacts == 0 && !clear(&first) {
            continue;
        }
        let mut rest = match walk(rng, first, rest_len, &obstacles, clear, n) {
            Some(r) => r,
            None => continue,
        };
        let mut all = planted;
        if cfg.planted_contacts == 0 {
            all.push(first);
            rest.truncate(rest_len.saturating_sub(1));
        }
        all.extend(rest);
        antigen_ca = Some(all);
        break;
    }
    let antigen_ca = antigen_ca?;

    let heavy = {
        let h3c = h3.clone();
        let bias = cfg.cdr_bias;
        residues(rng, 'H', &heavy_ca, move |rng, i| {
            if h3c.contains(&i) {
                cdr_residue(rng, i - h3c.start, h3c.len(), bias)
            } else {
                uniform_residue(rng, i)
            }
        })
    };
    let light = residues(rng, 'L', &light_ca, uniform_residue);
    let antigen = residues(rng, 'A', &antigen_ca, uniform_residue);
    let epitope: BTreeSet<usize> = (0..cfg.planted_contacts).collect();
    let mut ranges = BTreeMap::new();
    ranges.insert(CdrName::H3, h3);
    Complex::new(id, heavy, light, antigen, ranges, epitope).ok()
}

/// `n` complexes named `synth_000`, `synth_001`, ..., each drawn from its own
/// named stream so any one can be regenerated alone.
pub fn synth_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Vec<Complex> {
    (0..n)
        .map(|i| {
            let id = format!("synth_{i:03}");
            let mut rng = RngStream::named(seed, &format!("synth/{i}"));
            synth_complex(&mut rng, &id, cfg)
        })
        .collect()
}
