//! Modality fusion operators.
//!
//! Every operator takes the present modalities' feature vectors (all of
//! length `d`) in canonical modality order V, W, S and yields one fused
//! vector. Gating and attention carry learnable per-modality parameters;
//! when a modality is absent its parameters are simply not used.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid_scalar, softmax, Matrix, RngStream};
use crate::scenario::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusorKind {
    Addition,
    Average,
    Concatenation,
    Multiplication,
    Maximum,
    Minimum,
    Gating,
    Attention,
}

impl FusorKind {
    pub const ALL: [FusorKind; 8] = [
        FusorKind::Addition,
        FusorKind::Average,
        FusorKind::Concatenation,
        FusorKind::Multiplication,
        FusorKind::Maximum,
        FusorKind::Minimum,
        FusorKind::Gating,
        FusorKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusorKind::Addition => "addition",
            FusorKind::Average => "average",
            FusorKind::Concatenation => "concatenation",
            FusorKind::Multiplication => "multiplication",
            FusorKind::Maximum => "maximum",
            FusorKind::Minimum => "minimum",
            FusorKind::Gating => "gating",
            FusorKind::Attention => "attention",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, FusorKind::Gating | FusorKind::Attention)
    }
}

impl fmt::Display for FusorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusor kind {s:?}")))
    }
}

pub fn fused_dim(kind: FusorKind, modalities: usize, d: usize) -> usize {
    match kind {
        FusorKind::Concatenation => modalities * d,
        _ => d,
    }
}

/// Learnable fusion parameters.
///
/// Gating holds one `d × d` matrix per modality and emits
/// `σ(Σ_m W_m f_m)`. Attention holds one scoring vector per modality,
/// `e_m = s_m · f_m`, and emits `Σ_m softmax(e)_m f_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusorParams {
    Gating(BTreeMap<Modality, Matrix>),
    Attention(BTreeMap<Modality, Vec<f64>>),
}

impl FusorParams {
    pub fn init(kind: FusorKind, modalities: &[Modality], d: usize, rng: &mut RngStream) -> Option<Self> {
        match kind {
            FusorKind::Gating => {
                let fan_in = d * modalities.len().max(1);
                Some(FusorParams::Gating(
                    modalities
                        .iter()
                        .map(|&m| (m, Matrix::glorot(d, d, fan_in, d, rng)))
                        .collect(),
                ))
            }
            FusorKind::Attention => Some(FusorParams::Attention(
                modalities
                    .iter()
                    .map(|&m| (m, Matrix::glorot(1, d, d, 1, rng).values().to_vec()))
                    .collect(),
            )),
            _ => None,
        }
    }

    /// Same structure with every entry zero.
    pub fn zeros_like(&self) -> Self {
        match self {
            FusorParams::Gating(w) => FusorParams::Gating(
                w.iter().map(|(&m, mat)| (m, Matrix::zeros(mat.rows(), mat.cols()))).collect(),
            ),
            FusorParams::Attention(s) => {
                FusorParams::Attention(s.iter().map(|(&m, v)| (m, vec![0.0; v.len()])).collect())
            }
        }
    }

    pub fn kind(&self) -> FusorKind {
        match self {
            FusorParams::Gating(_) => FusorKind::Gating,
            FusorParams::Attention(_) => FusorKind::Attention,
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            FusorParams::Gating(w) => w.keys().copied().collect(),
            FusorParams::Attention(s) => s.keys().copied().collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FusorParams::Gating(w) => w.values().map(|m| m.values().len()).sum(),
            FusorParams::Attention(s) => s.values().map(Vec::len).sum(),
        }
    }

    /// Modalities in canonical order, each matrix row-major.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            FusorParams::Gating(w) => w.values().for_each(|m| out.extend_from_slice(m.values())),
            FusorParams::Attention(s) => s.values().for_each(|v| out.extend_from_slice(v)),
        }
    }

    pub fn load_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape("fusor parameters", self.param_count(), p.len()));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        match self {
            FusorParams::Gating(w) => w.values_mut().for_each(|m| take(m.values_mut())),
            FusorParams::Attention(s) => s.values_mut().for_each(|v| take(v)),
        }
        Ok(())
    }
}

/// A feature vector tagged with its modality.
pub type Feature<'a> = (Modality, &'a [f64]);

fn check_features(features: &[Feature<'_>]) -> Result<usize> {
    let Some(&(_, first)) = features.first() else {
        return Err(Error::InvalidInput("fusion needs at least one feature vector".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::InvalidInput("feature vectors must be non-empty".into()));
    }
    for (i, &(m, f)) in features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::shape("fusion feature length", d, f.len()));
        }
        if features[..i].iter().any(|&(o, _)| o == m) {
            return Err(Error::InvalidInput(format!("modality {m} supplied twice")));
        }
    }
    Ok(d)
}

fn gating_weights<'p>(
    params: Option<&'p FusorParams>,
    features: &[Feature<'_>],
    d: usize,
) -> Result<Vec<&'p Matrix>> {
    let Some(FusorParams::Gating(w)) = params else {
        return Err(Error::Config("gating fusion requires gating parameters".into()));
    };
    features
        .iter()
        .map(|&(m, _)| {
            let mat = w
                .get(&m)
                .ok_or_else(|| Error::Config(format!("gating parameters missing modality {m}")))?;
            if mat.rows() != d || mat.cols() != d {
                return Err(Error::shape("gating matrix side", d, mat.rows().max(mat.cols())));
            }
            Ok(mat)
        })
        .collect()
}

fn attention_scorers<'p>(
    params: Option<&'p FusorParams>,
    features: &[Feature<'_>],
    d: usize,
) -> Result<Vec<&'p [f64]>> {
    let Some(FusorParams::Attention(s)) = params else {
        return Err(Error::Config("attention fusion requires attention parameters".into()));
    };
    features
        .iter()
        .map(|&(m, _)| {
            let v = s
                .get(&m)
                .ok_or_else(|| Error::Config(format!("attention parameters missing modality {m}")))?;
            if v.len() != d {
                return Err(Error::shape("attention scorer", d, v.len()));
            }
            Ok(v.as_slice())
        })
        .collect()
}

fn gating_preactivation(weights: &[&Matrix], features: &[Feature<'_>], d: usize) -> Vec<f64> {
    let mut z = vec![0.0; d];
    for (w, &(_, f)) in weights.iter().zip(features) {
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += dot(w.row(r), f);
        }
    }
    z
}

fn attention_weights(scorers: &[&[f64]], features: &[Feature<'_>]) -> Result<Vec<f64>> {
    let scores: Vec<f64> = scorers.iter().zip(features).map(|(s, &(_, f))| dot(s, f)).collect();
    softmax(&scores)
}

/// Index of the attaining feature per coordinate; ties go to the lowest index.
fn extreme_index(features: &[Feature<'_>], j: usize, max: bool) -> usize {
    let mut best = 0;
    for i in 1..features.len() {
        let (v, b) = (features[i].1[j], features[best].1[j]);
        if (max && v > b) || (!max && v < b) {
            best = i;
        }
    }
    best
}

pub fn fuse(kind: FusorKind, features: &[Feature<'_>], params: Option<&FusorParams>) -> Result<Vec<f64>> {
    let d = check_features(features)?;
    let elementwise = |op: fn(f64, f64) -> f64| {
        let mut out = features[0].1.to_vec();
        for &(_, f) in &features[1..] {
            for (o, &v) in out.iter_mut().zip(f) {
                *o = op(*o, v);
            }
        }
        out
    };
    Ok(match kind {
        FusorKind::Addition => elementwise(|a, b| a + b),
        FusorKind::Average => {
            // running mean: exact when all inputs coincide
            let mut out = features[0].1.to_vec();
            for (k, &(_, f)) in features.iter().enumerate().skip(1) {
                for (o, &v) in out.iter_mut().zip(f) {
                    *o += (v - *o) / (k + 1) as f64;
                }
            }
            out
        }
        FusorKind::Concatenation => features.iter().flat_map(|&(_, f)| f.iter().copied()).collect(),
        FusorKind::Multiplication => elementwise(|a, b| a * b),
        FusorKind::Maximum => (0..d).map(|j| features[extreme_index(features, j, true)].1[j]).collect(),
        FusorKind::Minimum => (0..d).map(|j| features[extreme_index(features, j, false)].1[j]).collect(),
        FusorKind::Gating => {
            let w = gating_weights(params, features, d)?;
            gating_preactivation(&w, features, d).into_iter().map(sigmoid_scalar).collect()
        }
        FusorKind::Attention => {
            let s = attention_scorers(params, features, d)?;
            let a = attention_weights(&s, features)?;
            let mut out = vec![0.0; d];
            for (&ai, &(_, f)) in a.iter().zip(features) {
                for (o, &v) in out.iter_mut().zip(f) {
                    *o += ai * v;
                }
            }
            out
        }
    })
}

/// Gradients of a fused output with respect to its inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseGrads {
    /// One gradient per input feature, in input order.
    pub features: Vec<Vec<f64>>,
    /// Same structure as the fusor's parameters; absent modalities get zeros.
    pub params: Option<FusorParams>,
}

pub fn fuse_backward(
    kind: FusorKind,
    features: &[Feature<'_>],
    params: Option<&FusorParams>,
    d_out: &[f64],
) -> Result<FuseGrads> {
    let d = check_features(features)?;
    let m = features.len();
    let expected = fused_dim(kind, m, d);
    if d_out.len() != expected {
        return Err(Error::shape("fusion output gradient", expected, d_out.len()));
    }
    let mut grads = vec![vec![0.0; d]; m];
    let mut param_grads = None;
    match kind {
        FusorKind::Addition => grads.iter_mut().for_each(|g| g.copy_from_slice(d_out)),
        FusorKind::Average => {
            for g in &mut grads {
                for (gi, &o) in g.iter_mut().zip(d_out) {
                    *gi = o / m as f64;
                }
            }
        }
        FusorKind::Concatenation => {
            for (i, g) in grads.iter_mut().enumerate() {
                g.copy_from_slice(&d_out[i * d..(i + 1) * d]);
            }
        }
        FusorKind::Multiplication => {
            for (i, g) in grads.iter_mut().enumerate() {
                for j in 0..d {
                    let others: f64 = features
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != i)
                        .map(|(_, &(_, f))| f[j])
                        .product();
                    g[j] = d_out[j] * others;
                }
            }
        }
        FusorKind::Maximum | FusorKind::Minimum => {
            let max = kind == FusorKind::Maximum;
            for j in 0..d {
                grads[extreme_index(features, j, max)][j] = d_out[j];
            }
        }
        FusorKind::Gating => {
            let w = gating_weights(params, features, d)?;
            let z = gating_preactivation(&w, features, d);
            let dz: Vec<f64> = z
                .iter()
                .zip(d_out)
                .map(|(&zi, &g)| {
                    let s = sigmoid_scalar(zi);
                    g * s * (1.0 - s)
                })
                .collect();
            let mut pg = params.expect("checked above").zeros_like();
            let FusorParams::Gating(gw) = &mut pg else { unreachable!() };
            for (i, (&(mod_i, f), wm)) in features.iter().zip(&w).enumerate() {
                grads[i] = wm.matvec_t(&dz)?;
                let gm = gw.get_mut(&mod_i).expect("present modality");
                let vals = gm.values_mut();
                for (r, &dzr) in dz.iter().enumerate() {
                    for (c, &fc) in f.iter().enumerate() {
                        vals[r * d + c] = dzr * fc;
                    }
                }
            }
            param_grads = Some(pg);
        }
        FusorKind::Attention => {
            let s = attention_scorers(params, features, d)?;
            let a = attention_weights(&s, features)?;
            // dL/da_i = d_out · f_i; softmax Jacobian gives de_i = a_i (da_i − Σ a_k da_k)
            let da: Vec<f64> = features.iter().map(|&(_, f)| dot(d_out, f)).collect();
            let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let de: Vec<f64> = a.iter().zip(&da).map(|(&ai, &g)| ai * (g - mean_da)).collect();
            let mut pg = params.expect("checked above").zeros_like();
            let FusorParams::Attention(gs) = &mut pg else { unreachable!() };
            for (i, &(mod_i, f)) in features.iter().enumerate() {
                for j in 0..d {
                    grads[i][j] = a[i] * d_out[j] + de[i] * s[i][j];
                }
                let gsi = gs.get_mut(&mod_i).expect("present modality");
                for (g, &fj) in gsi.iter_mut().zip(f) {
                    *g = de[i] * fj;
                }
            }
            param_grads = Some(pg);
        }
    }
    Ok(FuseGrads {
        features: grads,
        params: param_grads,
    })
}
