//! Twin models: per-modality encoders, a fusor and per-modality decoders,
//! plus transfer, merge and split between twins.
//!
//! Parameter layout (the federated unit of exchange): encoders in modality
//! order, fusor parameters, concatenation projection, decoders in modality
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{
    check_step_size, estimate_constants, run_mapping, Aggregation, EstimateConfig, FedConfig, MappingOutcome, Objective,
    StepSizeBound,
};
use crate::fusion::{fuse, fuse_backward, Feature, FusorKind, FusorParams};
use crate::metrics::{nmse, NmseResult};
use crate::nn::{Activation, LayerSpec, Network, NetworkCheckpoint, ParamVector, Tape};
use crate::numerics::{Matrix, RngStream};
use crate::scenario::{Example, Modality, PreparedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconTarget {
    /// Decoders emit raw (standardized) windows.
    Raw,
    /// Decoders emit the target modality's encoder features.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Encoder: conv stages, dense hidden layers, linear map to `d`.
/// Decoder: dense hidden layers (reversed), linear map to the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoderConfig {
    pub conv: Vec<ConvStage>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for CoderConfig {
    fn default() -> Self {
        Self {
            conv: vec![
                ConvStage {
                    channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvStage {
                    channels: 8,
                    kernel: 2,
                    stride: 2,
                },
            ],
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

impl CoderConfig {
    /// No conv, no hidden layers, identity activation.
    pub fn linear() -> Self {
        Self {
            conv: Vec::new(),
            hidden: Vec::new(),
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinConfig {
    pub latent_dim: usize,
    pub window: usize,
    pub fusor: FusorKind,
    pub layers: CoderConfig,
    pub recon: ReconTarget,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            window: 8,
            fusor: FusorKind::Gating,
            layers: CoderConfig::default(),
            recon: ReconTarget::Raw,
        }
    }
}

impl TwinConfig {
    pub fn encoder_specs(&self, m: Modality) -> Result<Vec<LayerSpec>> {
        let act = self.layers.activation;
        let mut specs = Vec::new();
        let (mut channels, mut len) = (m.raw_dim(), self.window);
        for stage in &self.layers.conv {
            if stage.kernel > len {
                return Err(Error::Config(format!(
                    "conv kernel {} exceeds remaining length {len} in the {m} encoder",
                    stage.kernel
                )));
            }
            let spec = LayerSpec::Conv1d {
                in_channels: channels,
                in_len: len,
                out_channels: stage.channels,
                kernel_width: stage.kernel,
                stride: stage.stride,
                activation: act,
            };
            len = crate::nn::conv_out_len(len, stage.kernel, stage.stride);
            channels = stage.channels;
            specs.push(spec);
        }
        let mut width = channels * len;
        for &h in &self.layers.hidden {
            specs.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                activation: act,
            });
            width = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs: self.latent_dim,
            activation: Activation::Identity,
        });
        Ok(specs)
    }

    pub fn decoder_output(&self, m: Modality) -> usize {
        match self.recon {
            ReconTarget::Raw => m.raw_dim() * self.window,
            ReconTarget::Feature => self.latent_dim,
        }
    }

    pub fn decoder_specs(&self, m: Modality) -> Vec<LayerSpec> {
        let act = self.layers.activation;
        let mut specs = Vec::new();
        let mut width = self.latent_dim;
        for &h in self.layers.hidden.iter().rev() {
            specs.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                activation: act,
            });
            width = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs: self.decoder_output(m),
            activation: Activation::Identity,
        });
        specs
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.latent_dim == 0 {
            out.push("twin.latent_dim must be at least 1".to_string());
        }
        if self.window == 0 {
            out.push("twin.window must be at least 1".to_string());
        }
        if self.layers.hidden.contains(&0) {
            out.push("twin.layers.hidden sizes must be positive".to_string());
        }
        for (i, s) in self.layers.conv.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                out.push(format!("twin.layers.conv[{i}] fields must be positive"));
            }
        }
        if out.is_empty() {
            for m in Modality::ALL {
                if let Err(e) = self.encoder_specs(m) {
                    out.push(e.to_string());
                    break;
                }
            }
        }
        out
    }
}

/// Concatenation projection `d × (E·d)` plus bias, one column block per
/// encoder modality. Absent modalities contribute nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Projection {
    fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Transfer,
    Merge,
    Split,
}

/// Twin-to-twin operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TwinOp {
    Transfer { source: Modality, target: Modality },
    Merge { sources: Vec<Modality>, target: Modality },
    Split { source: Modality, targets: Vec<Modality> },
}

fn distinct(ms: &[Modality]) -> bool {
    ms.iter().collect::<BTreeSet<_>>().len() == ms.len()
}

impl TwinOp {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            TwinOp::Transfer { source, target } if source == target => {
                bad(format!("transfer source and target are both {source}"))
            }
            TwinOp::Merge { sources, target } => {
                if sources.len() < 2 || !distinct(sources) {
                    bad("merge needs at least two distinct sources".into())
                } else if sources.contains(target) {
                    bad(format!("merge target {target} is also a source"))
                } else {
                    Ok(())
                }
            }
            TwinOp::Split { targets, .. } if targets.len() < 2 || !distinct(targets) => {
                bad("split needs at least two distinct targets".into())
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            TwinOp::Transfer { .. } => OpKind::Transfer,
            TwinOp::Merge { .. } => OpKind::Merge,
            TwinOp::Split { .. } => OpKind::Split,
        }
    }

    pub fn sources(&self) -> Vec<Modality> {
        match self {
            TwinOp::Transfer { source, .. } | TwinOp::Split { source, .. } => vec![*source],
            TwinOp::Merge { sources, .. } => sources.clone(),
        }
    }

    pub fn targets(&self) -> Vec<Modality> {
        match self {
            TwinOp::Transfer { target, .. } | TwinOp::Merge { target, .. } => vec![*target],
            TwinOp::Split { targets, .. } => targets.clone(),
        }
    }

    pub fn route(&self) -> Route {
        Route::new(&self.sources(), &self.targets())
    }
}

impl fmt::Display for TwinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |ms: &[Modality], sep: &str| ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(sep);
        write!(f, "{}->{}", join(&self.sources(), "+"), join(&self.targets(), ","))
    }
}

impl FromStr for TwinOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("op {s:?} must look like SRC->DST")))?;
        let parse = |part: &str, sep: char| -> Result<Vec<Modality>> {
            part.split(sep).map(|p| p.trim().parse()).collect()
        };
        let sources = parse(lhs, '+')?;
        let targets = parse(rhs, ',')?;
        let op = match (sources.as_slice(), targets.as_slice()) {
            ([source], [target]) => TwinOp::Transfer {
                source: *source,
                target: *target,
            },
            (_, [target]) => TwinOp::Merge {
                sources: sources.clone(),
                target: *target,
            },
            ([source], _) => TwinOp::Split {
                source: *source,
                targets: targets.clone(),
            },
            _ => return Err(Error::Config(format!("op {s:?} has several sources and several targets"))),
        };
        op.validate()?;
        Ok(op)
    }
}

impl TryFrom<String> for TwinOp {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TwinOp> for String {
    fn from(op: TwinOp) -> Self {
        op.to_string()
    }
}

/// Which encoders feed the fusor and which decoders read the fused vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub sources: Vec<Modality>,
    pub targets: Vec<Modality>,
}

impl Route {
    /// Sorted, de-duplicated.
    pub fn new(sources: &[Modality], targets: &[Modality]) -> Self {
        let sort = |ms: &[Modality]| ms.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Self {
            sources: sort(sources),
            targets: sort(targets),
        }
    }

    /// Joint reconstruction over several sources counts as a merge term.
    pub fn kind(&self) -> OpKind {
        match (self.sources.len(), self.targets.len()) {
            (1, 1) => OpKind::Transfer,
            (1, _) => OpKind::Split,
            _ => OpKind::Merge,
        }
    }
}

/// Every transfer, merge and split over `modalities`, grouped by kind.
/// Splits target all modalities.
pub fn routes_by_kind(modalities: &[Modality]) -> BTreeMap<OpKind, Vec<Route>> {
    let ms: Vec<Modality> = modalities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut out: BTreeMap<OpKind, Vec<Route>> = BTreeMap::new();
    for &s in &ms {
        for &t in &ms {
            if s != t {
                out.entry(OpKind::Transfer).or_default().push(Route::new(&[s], &[t]));
            }
        }
    }
    for &t in &ms {
        let rest: Vec<Modality> = ms.iter().copied().filter(|&m| m != t).collect();
        if rest.len() >= 2 {
            out.entry(OpKind::Merge).or_default().push(Route::new(&rest, &[t]));
        }
    }
    if ms.len() >= 2 {
        for &s in &ms {
            out.entry(OpKind::Split).or_default().push(Route::new(&[s], &ms));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    pub latent_dim: usize,
    pub window: usize,
    pub fusor: FusorKind,
    pub recon: ReconTarget,
    pub encoders: BTreeMap<Modality, Network>,
    pub fusor_params: Option<FusorParams>,
    pub projection: Option<Projection>,
    pub decoders: BTreeMap<Modality, Network>,
    /// Ops that produced this twin, oldest first.
    pub provenance: Vec<String>,
}

/// Offsets of each component inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub encoders: BTreeMap<Modality, Range<usize>>,
    pub fusor: Range<usize>,
    pub projection: Range<usize>,
    pub decoders: BTreeMap<Modality, Range<usize>>,
    pub total: usize,
}

/// Decoded outputs plus call accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub outputs: BTreeMap<Modality, Vec<f64>>,
    pub encoder_passes: usize,
    pub decoder_passes: usize,
}

struct Pass {
    sources: Vec<Modality>,
    enc_tapes: Vec<Tape>,
    features: Vec<Vec<f64>>,
    outputs: Vec<(Modality, Vec<f64>, Tape)>,
}

pub fn build_twin(modalities: &[Modality], cfg: &TwinConfig, rng: &mut RngStream) -> Result<TwinModel> {
    build_twin_with(modalities, modalities, cfg, rng)
}

/// Fresh twin with the given encoder and decoder sets. Initialization order:
/// encoders, fusor, projection, decoders.
pub fn build_twin_with(
    encoders: &[Modality],
    decoders: &[Modality],
    cfg: &TwinConfig,
    rng: &mut RngStream,
) -> Result<TwinModel> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    let enc_set: BTreeSet<Modality> = encoders.iter().copied().collect();
    let dec_set: BTreeSet<Modality> = decoders.iter().copied().collect();
    if enc_set.is_empty() || dec_set.is_empty() {
        return Err(Error::Config("a twin needs at least one encoder and one decoder".into()));
    }
    if cfg.recon == ReconTarget::Feature {
        if let Some(m) = dec_set.iter().find(|m| !enc_set.contains(m)) {
            return Err(Error::Config(format!(
                "feature reconstruction of {m} needs an encoder for {m}"
            )));
        }
    }
    let mut enc = BTreeMap::new();
    for &m in &enc_set {
        enc.insert(m, Network::init(&cfg.encoder_specs(m)?, rng)?);
    }
    let enc_list: Vec<Modality> = enc_set.iter().copied().collect();
    let fusor_params = FusorParams::init(cfg.fusor, &enc_list, cfg.latent_dim, rng);
    let projection = (cfg.fusor == FusorKind::Concatenation).then(|| {
        let cols = enc_list.len() * cfg.latent_dim;
        Projection {
            weight: Matrix::glorot(cfg.latent_dim, cols, cols, cfg.latent_dim, rng),
            bias: vec![0.0; cfg.latent_dim],
        }
    });
    let mut dec = BTreeMap::new();
    for &m in &dec_set {
        dec.insert(m, Network::init(&cfg.decoder_specs(m), rng)?);
    }
    TwinModel::from_parts(cfg, enc, fusor_params, projection, dec, Vec::new())
}

impl TwinModel {
    /// Assembles a twin and checks every dimension contract.
    pub fn from_parts(
        cfg: &TwinConfig,
        encoders: BTreeMap<Modality, Network>,
        fusor_params: Option<FusorParams>,
        projection: Option<Projection>,
        decoders: BTreeMap<Modality, Network>,
        provenance: Vec<String>,
    ) -> Result<Self> {
        let d = cfg.latent_dim;
        for (m, e) in &encoders {
            if e.input_dim() != m.raw_dim() * cfg.window {
                return Err(Error::Config(format!(
                    "{m} encoder reads {} values, windows carry {}",
                    e.input_dim(),
                    m.raw_dim() * cfg.window
                )));
            }
            if e.output_dim() != d {
                return Err(Error::Config(format!("{m} encoder emits {}, latent dim is {d}", e.output_dim())));
            }
        }
        for (m, dnet) in &decoders {
            if dnet.input_dim() != d {
                return Err(Error::Config(format!("{m} decoder reads {}, latent dim is {d}", dnet.input_dim())));
            }
            if dnet.output_dim() != cfg.decoder_output(*m) {
                return Err(Error::Config(format!(
                    "{m} decoder emits {}, expected {}",
                    dnet.output_dim(),
                    cfg.decoder_output(*m)
                )));
            }
        }
        let enc_list: Vec<Modality> = encoders.keys().copied().collect();
        match (&fusor_params, cfg.fusor.has_params()) {
            (None, false) => {}
            (Some(p), true) if p.kind() == cfg.fusor && p.modalities() == enc_list => {
                let expected = match p {
                    FusorParams::Gating(_) => d * d,
                    FusorParams::Attention(_) => d,
                } * enc_list.len();
                if p.param_count() != expected {
                    return Err(Error::Config("fusor parameters do not match the latent dim".into()));
                }
            }
            _ => return Err(Error::Config(format!("fusor parameters do not fit a {} fusor", cfg.fusor))),
        }
        match (&projection, cfg.fusor == FusorKind::Concatenation) {
            (None, false) => {}
            (Some(p), true) if p.weight.rows() == d && p.weight.cols() == d * enc_list.len() && p.bias.len() == d => {}
            _ => return Err(Error::Config("concatenation projection missing or misshapen".into())),
        }
        Ok(Self {
            latent_dim: d,
            window: cfg.window,
            fusor: cfg.fusor,
            recon: cfg.recon,
            encoders,
            fusor_params,
            projection,
            decoders,
            provenance,
        })
    }

    pub fn encoder_modalities(&self) -> Vec<Modality> {
        self.encoders.keys().copied().collect()
    }

    pub fn decoder_modalities(&self) -> Vec<Modality> {
        self.decoders.keys().copied().collect()
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let encoders = self.encoders.iter().map(|(&m, e)| (m, take(e.param_count()))).collect();
        let fusor = take(self.fusor_params.as_ref().map_or(0, FusorParams::param_count));
        let projection = take(self.projection.as_ref().map_or(0, Projection::param_count));
        let decoders = self.decoders.iter().map(|(&m, d)| (m, take(d.param_count()))).collect();
        Layout {
            encoders,
            fusor,
            projection,
            decoders,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        for e in self.encoders.values() {
            e.write_params(&mut out);
        }
        if let Some(p) = &self.fusor_params {
            p.write_params(&mut out);
        }
        if let Some(p) = &self.projection {
            out.extend_from_slice(p.weight.values());
            out.extend_from_slice(&p.bias);
        }
        for d in self.decoders.values() {
            d.write_params(&mut out);
        }
        ParamVector::new(out)
    }

    pub fn load_params(&mut self, p: &[f64]) -> Result<()> {
        let layout = self.layout();
        if p.len() != layout.total {
            return Err(Error::shape("twin parameters", layout.total, p.len()));
        }
        for (m, e) in self.encoders.iter_mut() {
            e.load_params(&p[layout.encoders[m].clone()])?;
        }
        if let Some(fp) = &mut self.fusor_params {
            fp.load_params(&p[layout.fusor.clone()])?;
        }
        if let Some(proj) = &mut self.projection {
            let r = layout.projection.clone();
            let nw = proj.weight.values().len();
            proj.weight.values_mut().copy_from_slice(&p[r.start..r.start + nw]);
            proj.bias.copy_from_slice(&p[r.start + nw..r.end]);
        }
        for (m, d) in self.decoders.iter_mut() {
            d.load_params(&p[layout.decoders[m].clone()])?;
        }
        Ok(())
    }

    fn check_route(&self, route: &Route) -> Result<()> {
        if route.sources.is_empty() || route.targets.is_empty() {
            return Err(Error::InvalidInput("route needs sources and targets".into()));
        }
        if let Some(m) = route.sources.iter().find(|m| !self.encoders.contains_key(m)) {
            return Err(Error::Config(format!("twin has no {m} encoder")));
        }
        if let Some(m) = route.targets.iter().find(|m| !self.decoders.contains_key(m)) {
            return Err(Error::Config(format!("twin has no {m} decoder")));
        }
        Ok(())
    }

    fn forward(&self, ex: &Example, route: &Route) -> Result<Pass> {
        self.check_route(route)?;
        let mut enc_tapes = Vec::with_capacity(route.sources.len());
        let mut features = Vec::with_capacity(route.sources.len());
        for &m in &route.sources {
            let (f, tape) = self.encoders[&m].forward(ex.get(m)?)?;
            features.push(f);
            enc_tapes.push(tape);
        }
        let latent = self.fuse_features(&route.sources, &features)?;
        let mut outputs = Vec::with_capacity(route.targets.len());
        for &m in &route.targets {
            let (y, tape) = self.decoders[&m].forward(&latent)?;
            outputs.push((m, y, tape));
        }
        Ok(Pass {
            sources: route.sources.clone(),
            enc_tapes,
            features,
            outputs,
        })
    }

    fn block(&self, m: Modality) -> usize {
        self.encoders.keys().position(|&k| k == m).expect("encoder present")
    }

    fn fuse_features(&self, sources: &[Modality], features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(p) = &self.projection {
            let d = self.latent_dim;
            let mut z = p.bias.clone();
            for (&m, f) in sources.iter().zip(features) {
                let col0 = self.block(m) * d;
                for (r, zr) in z.iter_mut().enumerate() {
                    let row = &p.weight.row(r)[col0..col0 + d];
                    *zr += row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            return Ok(z);
        }
        let tagged: Vec<Feature<'_>> = sources.iter().copied().zip(features.iter().map(Vec::as_slice)).collect();
        fuse(self.fusor, &tagged, self.fusor_params.as_ref())
    }

    /// Ground truth the decoder of `m` is trained against.
    fn target(&self, ex: &Example, m: Modality) -> Result<Vec<f64>> {
        match self.recon {
            ReconTarget::Raw => Ok(ex.get(m)?.to_vec()),
            ReconTarget::Feature => self.encoders[&m].predict(ex.get(m)?),
        }
    }

    pub fn reconstruct(&self, ex: &Example, route: &Route) -> Result<Reconstruction> {
        let pass = self.forward(ex, route)?;
        Ok(Reconstruction {
            encoder_passes: pass.enc_tapes.len(),
            decoder_passes: pass.outputs.len(),
            outputs: pass.outputs.into_iter().map(|(m, y, _)| (m, y)).collect(),
        })
    }

    /// Decodes `targets` from an already fused latent vector.
    pub fn decode(&self, latent: &[f64], target: Modality) -> Result<Vec<f64>> {
        let dec = self
            .decoders
            .get(&target)
            .ok_or_else(|| Error::Config(format!("twin has no {target} decoder")))?;
        dec.predict(latent)
    }

    /// Backpropagates `dys` (one per listed target) into `grads`.
    fn backward(&self, pass: &Pass, dys: &[(Modality, Vec<f64>)], layout: &Layout, grads: &mut [f64]) -> Result<()> {
        let d = self.latent_dim;
        let mut dz = vec![0.0; d];
        for (m, dy) in dys {
            let (_, _, tape) = pass
                .outputs
                .iter()
                .find(|(o, _, _)| o == m)
                .ok_or_else(|| Error::Contract(format!("no decoded {m} output in pass")))?;
            let dl = self.decoders[m].backward_accumulate(tape, dy, &mut grads[layout.decoders[m].clone()])?;
            dz.iter_mut().zip(dl).for_each(|(a, b)| *a += b);
        }
        let dfeatures: Vec<Vec<f64>> = if let Some(p) = &self.projection {
            let r = layout.projection.clone();
            let cols = p.weight.cols();
            let (gw, gb) = grads[r].split_at_mut(cols * d);
            gb.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
            pass.sources
                .iter()
                .zip(&pass.features)
                .map(|(&m, f)| {
                    let col0 = self.block(m) * d;
                    let mut df = vec![0.0; d];
                    for (row, &dzr) in dz.iter().enumerate() {
                        let wrow = &p.weight.row(row)[col0..col0 + d];
                        let grow = &mut gw[row * cols + col0..row * cols + col0 + d];
                        for j in 0..d {
                            grow[j] += dzr * f[j];
                            df[j] += wrow[j] * dzr;
                        }
                    }
                    df
                })
                .collect()
        } else {
            let tagged: Vec<Feature<'_>> = pass
                .sources
                .iter()
                .copied()
                .zip(pass.features.iter().map(Vec::as_slice))
                .collect();
            let fg = fuse_backward(self.fusor, &tagged, self.fusor_params.as_ref(), &dz)?;
            if let Some(pg) = fg.params {
                let mut flat = Vec::with_capacity(layout.fusor.len());
                pg.write_params(&mut flat);
                grads[layout.fusor.clone()].iter_mut().zip(flat).for_each(|(a, b)| *a += b);
            }
            fg.features
        };
        for ((m, tape), df) in pass.sources.iter().zip(&pass.enc_tapes).zip(&dfeatures) {
            self.encoders[m].backward_accumulate(tape, df, &mut grads[layout.encoders[m].clone()])?;
        }
        Ok(())
    }
}

/// Reconstruction losses, each a batch mean of per-target MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_modality: BTreeMap<Modality, f64>,
    pub transfer: f64,
    pub merge: f64,
    pub split: f64,
    pub total: f64,
}

impl LossReport {
    fn zero() -> Self {
        Self {
            per_modality: BTreeMap::new(),
            transfer: 0.0,
            merge: 0.0,
            split: 0.0,
            total: 0.0,
        }
    }

    fn finish(mut self) -> Self {
        self.total = self.transfer + self.merge + self.split;
        self
    }

    fn add(&mut self, kind: OpKind, m: Modality, loss: f64) {
        *self.per_modality.entry(m).or_insert(0.0) += loss;
        match kind {
            OpKind::Transfer => self.transfer += loss,
            OpKind::Merge => self.merge += loss,
            OpKind::Split => self.split += loss,
        }
    }
}

/// Routes with their weights in a loss.
type WeightedRoutes = Vec<(Route, f64)>;

/// Gradient accumulation requested from [`evaluate_terms`].
enum GradSink<'g> {
    None,
    Total(&'g Layout, &'g mut Vec<f64>),
    PerTarget(&'g Layout, &'g mut BTreeMap<Modality, Vec<f64>>),
}

/// Loss report and optional gradients over `batch`.
fn evaluate_terms(twin: &TwinModel, batch: &[&Example], routes: &WeightedRoutes, mut grads: GradSink<'_>) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Data("loss needs a non-empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::zero();
    for ex in batch {
        for (route, weight) in routes {
            let pass = twin.forward(ex, route)?;
            let kind = route.kind();
            let mut dys = Vec::with_capacity(pass.outputs.len());
            for (m, y, _) in &pass.outputs {
                let truth = twin.target(ex, *m)?;
                let n = y.len() as f64;
                let mut sq = 0.0;
                let dy: Vec<f64> = y
                    .iter()
                    .zip(&truth)
                    .map(|(a, b)| {
                        sq += (a - b) * (a - b);
                        2.0 * (a - b) / n * weight * scale
                    })
                    .collect();
                report.add(kind, *m, sq / n * weight * scale);
                dys.push((*m, dy));
            }
            match &mut grads {
                GradSink::None => {}
                GradSink::Total(layout, g) => twin.backward(&pass, &dys, layout, g)?,
                GradSink::PerTarget(layout, acc) => {
                    for (m, dy) in dys {
                        let g = acc.get_mut(&m).expect("term buffer per decoder");
                        twin.backward(&pass, &[(m, dy)], layout, g)?;
                    }
                }
            }
        }
    }
    Ok(report.finish())
}

pub fn op_loss(twin: &TwinModel, batch: &[&Example], route: &Route) -> Result<LossReport> {
    evaluate_terms(twin, batch, &vec![(route.clone(), 1.0)], GradSink::None)
}

/// `L_UTT = L_T + L_M + L_S` with one route of each kind.
pub fn unified_loss(twin: &TwinModel, batch: &[&Example], routes: &[Route]) -> Result<LossReport> {
    let weighted = routes.iter().map(|r| (r.clone(), 1.0)).collect();
    evaluate_terms(twin, batch, &weighted, GradSink::None)
}

/// Loss and gradient of `op_loss`, one gradient per decoder modality.
pub fn term_gradients(twin: &TwinModel, batch: &[&Example], route: &Route) -> Result<(LossReport, BTreeMap<Modality, Vec<f64>>)> {
    let layout = twin.layout();
    let mut acc: BTreeMap<Modality, Vec<f64>> =
        twin.decoders.keys().map(|&m| (m, vec![0.0; layout.total])).collect();
    let report = evaluate_terms(twin, batch, &vec![(route.clone(), 1.0)], GradSink::PerTarget(&layout, &mut acc))?;
    Ok((report, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Only the requested op's loss.
    Specific,
    /// `L_UTT` over sampled transfer, merge and split routes.
    Unified,
}

/// What a [`TwinObjective`] optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Route(Route),
    /// One sampled route per kind per batch; full-batch evaluations take the
    /// mean over all routes of each kind.
    Unified(BTreeMap<OpKind, Vec<Route>>),
}

pub struct TwinObjective<'a> {
    template: TwinModel,
    data: &'a PreparedData,
    task: Task,
    batch_size: usize,
    scale: Vec<f64>,
    terms: Vec<Modality>,
}

impl<'a> TwinObjective<'a> {
    pub fn new(template: &TwinModel, data: &'a PreparedData, task: Task, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if data.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(area) = data.train.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("area {area} has no training windows")));
        }
        if data.window != template.window {
            return Err(Error::Config(format!(
                "data windows have length {}, twin expects {}",
                data.window, template.window
            )));
        }
        let check = |r: &Route| template.check_route(r);
        match &task {
            Task::Route(r) => check(r)?,
            Task::Unified(map) => {
                if map.is_empty() {
                    return Err(Error::Config("unified training needs at least two modalities".into()));
                }
                map.values().flatten().try_for_each(check)?;
            }
        }
        Ok(Self {
            terms: template.decoder_modalities(),
            scale: vec![1.0; template.param_count()],
            template: template.clone(),
            data,
            task,
            batch_size,
        })
    }

    /// Per-parameter gradient multipliers (0 freezes a coordinate exactly).
    pub fn with_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.scale.len() {
            return Err(Error::shape("learning-rate scale", self.scale.len(), scale.len()));
        }
        self.scale = scale;
        Ok(self)
    }

    fn model(&self, params: &[f64]) -> Result<TwinModel> {
        let mut m = self.template.clone();
        m.load_params(params)?;
        Ok(m)
    }

    fn full_routes(&self) -> WeightedRoutes {
        match &self.task {
            Task::Route(r) => vec![(r.clone(), 1.0)],
            Task::Unified(map) => map
                .values()
                .flat_map(|rs| rs.iter().map(move |r| (r.clone(), 1.0 / rs.len() as f64)))
                .collect(),
        }
    }

    fn sample(&self, area: usize, rng: &mut RngStream) -> (Vec<&'a Example>, WeightedRoutes) {
        let shard = &self.data.train[area];
        let batch = (0..self.batch_size).map(|_| &shard[rng.index(shard.len())]).collect();
        let routes = match &self.task {
            Task::Route(r) => vec![(r.clone(), 1.0)],
            Task::Unified(map) => map.values().map(|rs| (rs[rng.index(rs.len())].clone(), 1.0)).collect(),
        };
        (batch, routes)
    }

    fn terms_on(&self, params: &[f64], batch: &[&Example], routes: &WeightedRoutes) -> Result<(LossReport, Vec<Vec<f64>>)> {
        let model = self.model(params)?;
        let layout = model.layout();
        let mut acc: BTreeMap<Modality, Vec<f64>> =
            self.terms.iter().map(|&m| (m, vec![0.0; layout.total])).collect();
        let report = evaluate_terms(&model, batch, routes, GradSink::PerTarget(&layout, &mut acc))?;
        let grads = acc
            .into_values()
            .map(|mut g| {
                g.iter_mut().zip(&self.scale).for_each(|(a, s)| *a *= s);
                g
            })
            .collect();
        Ok((report, grads))
    }

    fn summed(&self, params: &[f64], batch: &[&Example], routes: &WeightedRoutes) -> Result<(f64, Vec<f64>)> {
        let model = self.model(params)?;
        let layout = model.layout();
        let mut total = vec![0.0; layout.total];
        let report = evaluate_terms(&model, batch, routes, GradSink::Total(&layout, &mut total))?;
        total.iter_mut().zip(&self.scale).for_each(|(a, s)| *a *= s);
        Ok((report.total, total))
    }

    pub fn probe_examples(&self) -> Vec<&'a Example> {
        let test = self.data.test_flat();
        if test.len() >= 2 {
            test
        } else {
            self.data.train_flat()
        }
    }

    pub fn full_report(&self, params: &[f64], examples: &[&Example]) -> Result<LossReport> {
        evaluate_terms(&self.model(params)?, examples, &self.full_routes(), GradSink::None)
    }
}

impl Objective for TwinObjective<'_> {
    fn dim(&self) -> usize {
        self.scale.len()
    }

    fn areas(&self) -> usize {
        self.data.train.len()
    }

    fn terms(&self) -> usize {
        self.terms.len()
    }

    fn local_grad(&self, area: usize, params: &[f64], rng: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let (batch, routes) = self.sample(area, rng);
        self.summed(params, &batch, &routes)
    }

    fn local_term_grads(&self, area: usize, params: &[f64], rng: &mut RngStream) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (batch, routes) = self.sample(area, rng);
        let (report, grads) = self.terms_on(params, &batch, &routes)?;
        let losses = self.terms.iter().map(|m| report.per_modality.get(m).copied().unwrap_or(0.0)).collect();
        Ok((losses, grads))
    }

    fn area_grad(&self, area: usize, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<&Example> = self.data.train[area].iter().collect();
        self.summed(params, &batch, &self.full_routes())
    }

    fn probe_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let probe = self.probe_examples();
        self.summed(params, &probe, &self.full_routes())
    }
}

/// Settings shared by base mapping and transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub fed: FedConfig,
    pub batch_size: usize,
    /// Gated mode only: set `local_lr` to this fraction of the estimated
    /// step-size bound instead of using the configured value.
    pub local_lr_bound_fraction: Option<f64>,
    pub estimate: EstimateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fed: FedConfig::default(),
            batch_size: 16,
            local_lr_bound_fraction: None,
            estimate: EstimateConfig::default(),
        }
    }
}

/// Step-size check performed before a gated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub g_hat: f64,
    pub l_hat: f64,
    pub bound: StepSizeBound,
    pub local_lr: f64,
    pub admitted: bool,
}

/// Estimates constants at `init` and checks (or sets) the local rate.
pub fn gated_bound(
    obj: &dyn Objective,
    init: &ParamVector,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(FedConfig, BoundCheck)> {
    let c = estimate_constants(obj, init, cfg.estimate, rng)?;
    let fed = &cfg.fed;
    let bound = check_step_size(c.g_hat, c.l_hat, fed.mu, fed.local_steps.max(1) as f64, fed.global_lr)?;
    let local_lr = match cfg.local_lr_bound_fraction {
        Some(f) => f * bound.bound,
        None => fed.local_lr,
    };
    let check = BoundCheck {
        g_hat: c.g_hat,
        l_hat: c.l_hat,
        bound,
        local_lr,
        admitted: bound.admits(local_lr),
    };
    Ok((FedConfig { local_lr, ..fed.clone() }, check))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub train: TrainConfig,
    pub mode: TrainMode,
    /// Learning-rate multiplier for reused encoders; 0 freezes them.
    pub fine_tune: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            mode: TrainMode::Specific,
            fine_tune: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub twin: TwinModel,
    pub mapping: MappingOutcome,
    pub bound: Option<BoundCheck>,
    /// Loss on the probe windows after training.
    pub report: LossReport,
}

/// Federated training of `twin` on `task`; gated runs check the step-size
/// bound first.
pub fn train_twin(
    twin: TwinModel,
    data: &PreparedData,
    task: Task,
    scale: Option<Vec<f64>>,
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<Trained> {
    let mut obj = TwinObjective::new(&twin, data, task, cfg.batch_size)?;
    if let Some(s) = scale {
        obj = obj.with_scale(s)?;
    }
    let init = twin.flatten();
    let (fed, bound) = match cfg.fed.aggregation {
        Aggregation::Mean => (cfg.fed.clone(), None),
        Aggregation::Gated => {
            let mut rng = RngStream::new(seed).fork(u64::MAX);
            let (fed, check) = gated_bound(&obj, &init, cfg, &mut rng)?;
            log::info!(
                "step-size bound {:.3e} (G-hat {:.3e}, L-hat {:.3e}); local rate {:.3e}",
                check.bound.bound,
                check.g_hat,
                check.l_hat,
                check.local_lr
            );
            if !check.admitted {
                log::warn!("local rate {:.3e} violates the bound {:.3e}", check.local_lr, check.bound.bound);
                return Err(Error::BoundViolation {
                    local_lr: check.local_lr,
                    bound: check.bound.bound,
                });
            }
            (fed, Some(check))
        }
    };
    let mapping = run_mapping(&fed, &obj, &init, seed, exec)?;
    let mut twin = twin;
    twin.load_params(mapping.params.as_slice())?;
    let report = obj.full_report(mapping.params.as_slice(), &obj.probe_examples())?;
    Ok(Trained {
        twin,
        mapping,
        bound,
        report,
    })
}

/// Federated joint training of a twin over every modality in `data`:
/// all encoders fused, all decoders reconstructed.
pub fn map_base(data: &PreparedData, twin_cfg: &TwinConfig, cfg: &TrainConfig, seed: u64, exec: Execution) -> Result<Trained> {
    map_modalities(data, &data.modalities(), twin_cfg, cfg, seed, exec)
}

/// Autoencoding twin over `modalities` only, e.g. a single-modality
/// task-oriented donor.
pub fn map_modalities(
    data: &PreparedData,
    modalities: &[Modality],
    twin_cfg: &TwinConfig,
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<Trained> {
    let available = data.modalities();
    if let Some(m) = modalities.iter().find(|m| !available.contains(m)) {
        return Err(Error::Data(format!("training data lacks modality {m}")));
    }
    let modalities: Vec<Modality> = modalities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let root = RngStream::new(seed);
    let mut init_rng = root.fork(0);
    let mut twin = build_twin(&modalities, twin_cfg, &mut init_rng)?;
    twin.provenance.push(format!("base[{}]", modalities.iter().map(|m| m.to_string()).collect::<String>()));
    let route = Route::new(&modalities, &modalities);
    train_twin(twin, data, Task::Route(route), None, cfg, root.fork(1).seed(), exec)
}

/// New twin for `op` reusing encoders (and fusor parameters) from `donors`.
/// The first donor that has an encoder supplies it; modalities no donor
/// covers start fresh. Decoders always start fresh.
pub fn transform(
    donors: &[&TwinModel],
    op: &TwinOp,
    data: &PreparedData,
    twin_cfg: &TwinConfig,
    cfg: &TransformConfig,
    seed: u64,
    exec: Execution,
) -> Result<Trained> {
    op.validate()?;
    if let Some(d) = donors.iter().find(|d| d.latent_dim != twin_cfg.latent_dim) {
        return Err(Error::Config(format!(
            "donor latent dim {} differs from {}",
            d.latent_dim, twin_cfg.latent_dim
        )));
    }
    if !(cfg.fine_tune >= 0.0) {
        return Err(Error::Config("fine_tune must be non-negative".into()));
    }
    let available: BTreeSet<Modality> = data.modalities().into_iter().collect();
    let needed: BTreeSet<Modality> = op.sources().into_iter().chain(op.targets()).collect();
    if let Some(m) = needed.iter().find(|m| !available.contains(m)) {
        return Err(Error::Data(format!("training data lacks modality {m}")));
    }
    let (encoders, decoders, task) = match cfg.mode {
        TrainMode::Specific => (op.sources(), op.targets(), Task::Route(op.route())),
        TrainMode::Unified => {
            let all: Vec<Modality> = available.iter().copied().collect();
            (all.clone(), all.clone(), Task::Unified(routes_by_kind(&all)))
        }
    };
    let root = RngStream::new(seed);
    let mut init_rng = root.fork(0);
    let mut twin = build_twin_with(&encoders, &decoders, twin_cfg, &mut init_rng)?;

    let mut reused = BTreeSet::new();
    for (m, enc) in twin.encoders.iter_mut() {
        if let Some(donor) = donors.iter().find_map(|d| d.encoders.get(m)) {
            if donor.spec() != enc.spec() {
                return Err(Error::Config(format!("donor {m} encoder has a different layer template")));
            }
            *enc = donor.clone();
            reused.insert(*m);
        }
    }
    if let Some(fp) = twin.fusor_params.as_mut() {
        copy_fusor_params(fp, donors);
    }
    let mut provenance: Vec<String> = Vec::new();
    for d in donors {
        for p in &d.provenance {
            if !provenance.contains(p) {
                provenance.push(p.clone());
            }
        }
    }
    provenance.push(op.to_string());
    twin.provenance = provenance;

    let layout = twin.layout();
    let mut scale = vec![1.0; layout.total];
    for m in &reused {
        scale[layout.encoders[m].clone()].iter_mut().for_each(|s| *s = cfg.fine_tune);
    }
    let mut trained = train_twin(twin, data, task, Some(scale), &cfg.train, root.fork(1).seed(), exec)?;
    if cfg.mode == TrainMode::Unified {
        let obj = TwinObjective::new(&trained.twin, data, Task::Route(op.route()), cfg.train.batch_size)?;
        trained.report = obj.full_report(trained.mapping.params.as_slice(), &obj.probe_examples())?;
    }
    Ok(trained)
}

fn copy_fusor_params(fp: &mut FusorParams, donors: &[&TwinModel]) {
    match fp {
        FusorParams::Gating(ws) => {
            for (m, w) in ws.iter_mut() {
                let found = donors.iter().find_map(|d| match &d.fusor_params {
                    Some(FusorParams::Gating(dw)) => dw.get(m).filter(|dm| dm.rows() == w.rows()),
                    _ => None,
                });
                if let Some(src) = found {
                    *w = src.clone();
                }
            }
        }
        FusorParams::Attention(ss) => {
            for (m, s) in ss.iter_mut() {
                let found = donors.iter().find_map(|d| match &d.fusor_params {
                    Some(FusorParams::Attention(ds)) => ds.get(m).filter(|v| v.len() == s.len()),
                    _ => None,
                });
                if let Some(src) = found {
                    *s = src.clone();
                }
            }
        }
    }
}

/// Per-target NMSE of `route` over `examples`.
pub fn evaluate(twin: &TwinModel, route: &Route, examples: &[&Example]) -> Result<BTreeMap<Modality, NmseResult>> {
    let mut preds: BTreeMap<Modality, Vec<Vec<f64>>> = BTreeMap::new();
    let mut truths: BTreeMap<Modality, Vec<Vec<f64>>> = BTreeMap::new();
    for ex in examples {
        let rec = twin.reconstruct(ex, route)?;
        for (m, y) in rec.outputs {
            truths.entry(m).or_default().push(twin.target(ex, m)?);
            preds.entry(m).or_default().push(y);
        }
    }
    let mut out = BTreeMap::new();
    for (m, p) in preds {
        let mut r = nmse(&p, &truths[&m])?;
        r.modality = Some(m);
        out.insert(m, r);
    }
    Ok(out)
}

pub const TWIN_FORMAT: &str = "twin-model-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinManifest {
    pub encoders: Vec<Modality>,
    pub decoders: Vec<Modality>,
    pub latent_dim: usize,
    pub window: usize,
    pub fusor: FusorKind,
    pub recon: ReconTarget,
    pub provenance: Vec<String>,
}

/// JSON checkpoint: manifest plus one network checkpoint per coder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinCheckpoint {
    pub format: String,
    pub manifest: TwinManifest,
    pub encoders: BTreeMap<Modality, NetworkCheckpoint>,
    pub fusor_params: Option<FusorParams>,
    pub projection: Option<Projection>,
    pub decoders: BTreeMap<Modality, NetworkCheckpoint>,
}

impl TwinCheckpoint {
    pub fn from_twin(t: &TwinModel) -> Self {
        Self {
            format: TWIN_FORMAT.to_string(),
            manifest: TwinManifest {
                encoders: t.encoder_modalities(),
                decoders: t.decoder_modalities(),
                latent_dim: t.latent_dim,
                window: t.window,
                fusor: t.fusor,
                recon: t.recon,
                provenance: t.provenance.clone(),
            },
            encoders: t.encoders.iter().map(|(&m, n)| (m, NetworkCheckpoint::from_network(n))).collect(),
            fusor_params: t.fusor_params.clone(),
            projection: t.projection.clone(),
            decoders: t.decoders.iter().map(|(&m, n)| (m, NetworkCheckpoint::from_network(n))).collect(),
        }
    }

    pub fn to_twin(&self) -> Result<TwinModel> {
        if self.format != TWIN_FORMAT {
            return Err(Error::Config(format!("unsupported twin checkpoint format {:?}", self.format)));
        }
        let m = &self.manifest;
        let keys = |map: &BTreeMap<Modality, NetworkCheckpoint>| map.keys().copied().collect::<Vec<_>>();
        if keys(&self.encoders) != m.encoders || keys(&self.decoders) != m.decoders {
            return Err(Error::Config("checkpoint coders disagree with the manifest".into()));
        }
        let convert = |map: &BTreeMap<Modality, NetworkCheckpoint>| -> Result<BTreeMap<Modality, Network>> {
            map.iter().map(|(&k, c)| Ok((k, c.to_network()?))).collect()
        };
        let cfg = TwinConfig {
            latent_dim: m.latent_dim,
            window: m.window,
            fusor: m.fusor,
            recon: m.recon,
            layers: CoderConfig::default(),
        };
        TwinModel::from_parts(
            &cfg,
            convert(&self.encoders)?,
            self.fusor_params.clone(),
            self.projection.clone(),
            convert(&self.decoders)?,
            m.provenance.clone(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::scenario::{generate_world, prepare, WorldConfig};

    fn small_world(seed: u64, noiseless: bool) -> PreparedData {
        let mut w = WorldConfig {
            seed,
            areas: 2,
            steps: 80,
            ..WorldConfig::default()
        };
        if noiseless {
            w = w.noiseless();
        }
        let ds = generate_world(&w).unwrap();
        prepare(&ds, w.window, w.train_fraction).unwrap()
    }

    fn small_cfg(fusor: FusorKind) -> TwinConfig {
        TwinConfig {
            latent_dim: 4,
            window: 8,
            fusor,
            layers: CoderConfig {
                conv: vec![ConvStage {
                    channels: 3,
                    kernel: 3,
                    stride: 2,
                }],
                hidden: vec![6],
                activation: Activation::Tanh,
            },
            recon: ReconTarget::Raw,
        }
    }

    #[test]
    fn op_parsing_and_validation() {
        let t: TwinOp = "V->W".parse().unwrap();
        assert_eq!(t.kind(), OpKind::Transfer);
        let m: TwinOp = "V+W->S".parse().unwrap();
        assert_eq!(m.sources(), vec![Modality::V, Modality::W]);
        let s: TwinOp = "S->V,W,S".parse().unwrap();
        assert_eq!(s.targets().len(), 3);
        for op in [&t, &m, &s] {
            assert_eq!(op.to_string().parse::<TwinOp>().unwrap(), *op);
        }
        for bad in ["V->V", "V+V->S", "V+W->W", "S->V,V", "V+W->S,V", "X->V", "VW"] {
            assert!(bad.parse::<TwinOp>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "\"V+W->S\"");
        assert_eq!(serde_json::from_str::<TwinOp>(&json).unwrap(), m);
    }

    #[test]
    fn unified_route_catalogue() {
        let map = routes_by_kind(&Modality::ALL);
        assert_eq!(map[&OpKind::Transfer].len(), 6);
        assert_eq!(map[&OpKind::Merge].len(), 3);
        assert_eq!(map[&OpKind::Split].len(), 3);
        assert!(!routes_by_kind(&[Modality::V, Modality::W]).contains_key(&OpKind::Merge));
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = TwinConfig {
            latent_dim: 3,
            window: 2,
            fusor: FusorKind::Addition,
            layers: CoderConfig::linear(),
            recon: ReconTarget::Raw,
        };
        let twin = build_twin(&[Modality::V], &cfg, &mut RngStream::new(1)).unwrap();
        // encoder 4 -> 3, decoder 3 -> 4
        assert_eq!(twin.param_count(), (4 * 3 + 3) + (3 * 4 + 4));

        let twin = build_twin(&Modality::ALL, &small_cfg(FusorKind::Concatenation), &mut RngStream::new(1)).unwrap();
        let enc = |c: usize| (3 * c * 3 + 3) + (9 * 6 + 6) + (6 * 4 + 4);
        let dec = |c: usize| (4 * 6 + 6) + (6 * c * 8 + c * 8);
        let expected = enc(2) + enc(2) + enc(3) + (4 * 12 + 4) + dec(2) + dec(2) + dec(3);
        assert_eq!(twin.param_count(), expected);
        assert_eq!(twin.flatten().len(), expected);
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        let cfg = small_cfg(FusorKind::Gating);
        let a = build_twin(&Modality::ALL, &cfg, &mut RngStream::new(9)).unwrap();
        let b = build_twin(&Modality::ALL, &cfg, &mut RngStream::new(9)).unwrap();
        let bits = |t: &TwinModel| t.flatten().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let mut other = cfg.clone();
        other.latent_dim = 5;
        let wrong = build_twin(&[Modality::V], &other, &mut RngStream::new(1)).unwrap();
        let err = TwinModel::from_parts(&cfg, a.encoders.clone(), a.fusor_params.clone(), None, wrong.decoders, vec![]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(build_twin(&[], &cfg, &mut RngStream::new(1)).is_err());
        let zero = TwinConfig { latent_dim: 0, ..cfg };
        assert!(build_twin(&[Modality::V], &zero, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn params_round_trip() {
        for kind in FusorKind::ALL {
            let twin = build_twin(&Modality::ALL, &small_cfg(kind), &mut RngStream::new(2)).unwrap();
            let mut copy = build_twin(&Modality::ALL, &small_cfg(kind), &mut RngStream::new(3)).unwrap();
            copy.load_params(twin.flatten().as_slice()).unwrap();
            assert_eq!(copy, twin);
        }
    }

    #[test]
    fn shapes_and_call_accounting() {
        let data = small_world(1, false);
        let twin = build_twin(&Modality::ALL, &small_cfg(FusorKind::Gating), &mut RngStream::new(2)).unwrap();
        let ex = data.train[0][0].clone();
        let split = "S->V,W,S".parse::<TwinOp>().unwrap().route();
        let rec = twin.reconstruct(&ex, &split).unwrap();
        for (m, y) in &rec.outputs {
            assert_eq!(y.len(), m.raw_dim() * 8);
        }
        let merge = "V+W->S".parse::<TwinOp>().unwrap().route();
        let rec = twin.reconstruct(&ex, &merge).unwrap();
        assert_eq!((rec.encoder_passes, rec.decoder_passes), (2, 1));

        let mut partial = ex.clone();
        partial.windows.remove(&Modality::W);
        assert!(matches!(twin.reconstruct(&partial, &merge), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let cfg = TwinConfig {
            latent_dim: 2,
            window: 1,
            fusor: FusorKind::Addition,
            layers: CoderConfig::linear(),
            recon: ReconTarget::Raw,
        };
        let mut twin = build_twin(&[Modality::V], &cfg, &mut RngStream::new(1)).unwrap();
        let id = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let p: Vec<f64> = id.iter().chain(id.iter()).copied().collect();
        twin.load_params(&p).unwrap();
        let ex = Example {
            area: 0,
            start: 0,
            windows: BTreeMap::from([(Modality::V, vec![0.3, -1.2])]),
        };
        let r = op_loss(&twin, &[&ex], &Route::new(&[Modality::V], &[Modality::V])).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(Modality::ALL.iter().all(|m| r.per_modality.get(m).copied().unwrap_or(0.0) == 0.0));
    }

    #[test]
    fn hand_computed_batch_loss() {
        // encoder V: f = A x + a, A = [[1, 2], [0, 1]], a = [0, 1]
        // decoder V: y = B f + b, B = [[1, 0], [1, -1]], b = [0.5, 0]
        let cfg = TwinConfig {
            latent_dim: 2,
            window: 1,
            fusor: FusorKind::Average,
            layers: CoderConfig::linear(),
            recon: ReconTarget::Raw,
        };
        let mut twin = build_twin(&[Modality::V], &cfg, &mut RngStream::new(1)).unwrap();
        twin.load_params(&[1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, -1.0, 0.5, 0.0]).unwrap();
        let ex = |x: [f64; 2]| Example {
            area: 0,
            start: 0,
            windows: BTreeMap::from([(Modality::V, x.to_vec())]),
        };
        // x1 = [1, 0]: f = [1, 1], y = [1.5, 0], err = [0.5, 0]     -> mse 0.125
        // x2 = [0, 1]: f = [2, 2], y = [2.5, 0], err = [2.5, -1]    -> mse 3.625
        let (e1, e2) = (ex([1.0, 0.0]), ex([0.0, 1.0]));
        let r = op_loss(&twin, &[&e1, &e2], &Route::new(&[Modality::V], &[Modality::V])).unwrap();
        assert!((r.transfer - 1.875).abs() < 1e-15);
        assert_eq!(r.total, r.transfer + r.merge + r.split);
        assert!(matches!(op_loss(&twin, &[], &Route::new(&[Modality::V], &[Modality::V])), Err(Error::Data(_))));
    }

    #[test]
    fn unified_total_is_sum_of_parts() {
        let data = small_world(2, false);
        let twin = build_twin(&Modality::ALL, &small_cfg(FusorKind::Attention), &mut RngStream::new(2)).unwrap();
        let batch: Vec<&Example> = data.train[0].iter().take(5).collect();
        let routes = ["V->W", "V+W->S", "S->V,W,S"].map(|s| s.parse::<TwinOp>().unwrap().route());
        let r = unified_loss(&twin, &batch, &routes).unwrap();
        assert_eq!(r.total, r.transfer + r.merge + r.split);
        assert!(r.transfer > 0.0 && r.merge > 0.0 && r.split > 0.0);
    }

    #[test]
    fn twin_gradients_match_finite_differences() {
        let data = small_world(3, false);
        let batch: Vec<&Example> = data.train[0].iter().step_by(7).take(3).collect();
        for kind in FusorKind::ALL {
            let twin = build_twin(&Modality::ALL, &small_cfg(kind), &mut RngStream::new(7)).unwrap();
            for op in ["V->W", "V+W->S", "S->V,W,S"] {
                let route = op.parse::<TwinOp>().unwrap().route();
                let (_, terms) = term_gradients(&twin, &batch, &route).unwrap();
                let mut total = vec![0.0; twin.param_count()];
                for g in terms.values() {
                    total.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let p = twin.flatten();
                let fd = finite_diff_grad(
                    |x| {
                        let mut t = twin.clone();
                        t.load_params(x).unwrap();
                        op_loss(&t, &batch, &route).unwrap().total
                    },
                    p.as_slice(),
                    1e-5,
                )
                .unwrap();
                let err = relative_error(&total, &fd, 1e-6);
                assert!(err <= 1e-5, "{kind} {op}: {err}");
            }
        }
    }

    #[test]
    fn wide_linear_autoencoder_converges() {
        let data = small_world(4, true);
        let cfg = TwinConfig {
            latent_dim: 24,
            window: 8,
            fusor: FusorKind::Addition,
            layers: CoderConfig::linear(),
            recon: ReconTarget::Raw,
        };
        let twin = build_twin(&[Modality::V], &cfg, &mut RngStream::new(5)).unwrap();
        let train = TrainConfig {
            fed: FedConfig {
                rounds: 900,
                local_steps: 10,
                local_lr: 0.3,
                aggregation: Aggregation::Mean,
                ..FedConfig::default()
            },
            batch_size: 16,
            ..TrainConfig::default()
        };
        let route = Route::new(&[Modality::V], &[Modality::V]);
        let out = train_twin(twin, &data, Task::Route(route), None, &train, 1, Execution::Sequential).unwrap();
        assert!(out.report.total < 1e-3, "{:?}", out.report);
    }

    #[test]
    fn frozen_encoder_is_bit_identical_after_transform() {
        let data = small_world(5, false);
        let cfg = small_cfg(FusorKind::Gating);
        let train = TrainConfig {
            fed: FedConfig {
                rounds: 3,
                local_steps: 2,
                ..FedConfig::default()
            },
            batch_size: 4,
            ..TrainConfig::default()
        };
        let base = map_base(&data, &cfg, &train, 1, Execution::Sequential).unwrap();
        let tcfg = TransformConfig {
            train: train.clone(),
            mode: TrainMode::Specific,
            fine_tune: 0.0,
        };
        let op: TwinOp = "V->W".parse().unwrap();
        let out = transform(&[&base.twin], &op, &data, &cfg, &tcfg, 2, Execution::Sequential).unwrap();
        assert_eq!(out.twin.encoders[&Modality::V], base.twin.encoders[&Modality::V]);
        assert_eq!(out.twin.provenance, vec!["base[VWS]".to_string(), "V->W".to_string()]);

        let tuned = transform(&[&base.twin], &op, &data, &cfg, &TransformConfig { fine_tune: 0.1, ..tcfg.clone() }, 2, Execution::Sequential).unwrap();
        assert_ne!(tuned.twin.encoders[&Modality::V], base.twin.encoders[&Modality::V]);

        // composability: the output twin donates to a further op
        let again = transform(&[&out.twin], &"W->S".parse().unwrap(), &data, &cfg, &tcfg, 3, Execution::Sequential).unwrap();
        assert_eq!(again.twin.provenance.len(), 3);

        let mut wide = cfg.clone();
        wide.latent_dim = 5;
        assert!(matches!(
            transform(&[&base.twin], &op, &data, &wide, &tcfg, 2, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gated_training_checks_the_bound() {
        let data = small_world(6, true);
        let cfg = small_cfg(FusorKind::Gating);
        let mut train = TrainConfig {
            fed: FedConfig {
                rounds: 2,
                local_steps: 2,
                local_lr: 1e3,
                aggregation: Aggregation::Gated,
                ..FedConfig::default()
            },
            batch_size: 4,
            ..TrainConfig::default()
        };
        match map_base(&data, &cfg, &train, 1, Execution::Sequential) {
            Err(Error::BoundViolation { local_lr, bound }) => assert!(local_lr > bound),
            other => panic!("expected a bound violation, got {:?}", other.map(|t| t.report)),
        }
        train.local_lr_bound_fraction = Some(0.5);
        let ok = map_base(&data, &cfg, &train, 1, Execution::Sequential).unwrap();
        let check = ok.bound.unwrap();
        assert!(check.admitted);
        assert_eq!(check.local_lr, 0.5 * check.bound.bound);
    }

    #[test]
    fn checkpoint_round_trip() {
        let twin = build_twin(&Modality::ALL, &small_cfg(FusorKind::Concatenation), &mut RngStream::new(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("twin.json");
        TwinCheckpoint::from_twin(&twin).write(&path).unwrap();
        let back = TwinCheckpoint::read(&path).unwrap().to_twin().unwrap();
        assert_eq!(back, twin);
    }
}
