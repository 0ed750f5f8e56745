//! Action-chunking behaviour cloning with an auxiliary flow-prediction head
//! sharing the image encoder's bottleneck.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use flowguide_numkit::{
    grad_check, AdamConfig, GradCheckConfig, GradCheckReport, Init, Layer, LayerParams, Optimizer, ParamBlock, Parameterized,
    Rng, Scalar, Sequential, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::datastore::{CoTrainSampler, SegmentRef, Source, Trajectory};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::modelio::{read_file, Reader, Writer};
use crate::retrieval::RetrievalResult;
use crate::synthbench::{ActionVec, Policy, WorldState};

pub const POLICY_MAGIC: &[u8; 4] = b"POL1";

const ENC_C1: usize = 16;
const ENC_C2: usize = 32;
const AUX_C: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Target data only, no flow term.
    Bc,
    /// Target co-trained with every prior frame, no flow term.
    BcCo,
    /// Target data only, with the flow term.
    FlowBc,
    /// Target co-trained with retrieved segments, with the flow term.
    FlowRetrieval,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Bc, TrainMode::BcCo, TrainMode::FlowBc, TrainMode::FlowRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Bc => "bc",
            TrainMode::BcCo => "bc-co",
            TrainMode::FlowBc => "flow-bc",
            TrainMode::FlowRetrieval => "flow-retrieval",
        }
    }

    pub fn uses_flow(self) -> bool {
        matches!(self, TrainMode::FlowBc | TrainMode::FlowRetrieval)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || format!("{m:?}").eq_ignore_ascii_case(&s.replace(['-', '_'], "")))
            .ok_or_else(|| Error::Config(format!("unknown training mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: TrainMode,
    /// Chunk length; must match the flow horizon.
    pub k: usize,
    pub lambda: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Average-pooling factor applied to observations.
    pub pool: usize,
    pub bottleneck: usize,
    /// Flow targets are resampled to this square resolution.
    pub flow_resolution: usize,
    /// Drop the action term for retrieved items and keep only their flow term.
    #[serde(default)]
    pub mask_retrieved_actions: bool,
    /// Apply the flow term to retrieved items only.
    #[serde(default)]
    pub flow_on_retrieved_only: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::FlowRetrieval,
            k: 16,
            lambda: 0.01,
            batch_size: 32,
            epochs: 48,
            steps_per_epoch: 50,
            lr: 1e-3,
            pool: 2,
            bottleneck: 64,
            flow_resolution: 32,
            mask_retrieved_actions: false,
            flow_on_retrieved_only: false,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("policy k, batch_size, epochs and steps_per_epoch must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.pool == 0 || self.bottleneck == 0 {
            return Err(Error::Config("policy pool and bottleneck must be positive".into()));
        }
        if self.flow_resolution < 8 || self.flow_resolution % 4 != 0 {
            return Err(Error::Config("flow_resolution must be a multiple of 4 and at least 8".into()));
        }
        Ok(())
    }

    /// λ actually applied: modes without a flow term train with zero.
    pub fn effective_lambda(&self) -> f32 {
        if self.mode.uses_flow() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Shapes the model was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub k: usize,
    pub action_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pool: usize,
    pub bottleneck: usize,
    pub flow_resolution: usize,
    /// Per-dimension divisors applied to actions before regression.
    pub action_scale: Vec<f32>,
    /// Flow targets are divided by this before regression.
    pub flow_norm: f32,
}

impl PolicyShape {
    fn input_hw(&self) -> (usize, usize) {
        (self.height / self.pool, self.width / self.pool)
    }

    pub fn input_dim(&self) -> usize {
        let (h, w) = self.input_hw();
        self.channels * h * w
    }

    pub fn chunk_dim(&self) -> usize {
        self.k * self.action_dim
    }

    pub fn flow_dim(&self) -> usize {
        2 * self.flow_resolution * self.flow_resolution
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw();
        if self.pool == 0 || self.height % self.pool != 0 || self.width % self.pool != 0 || h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "a {}x{} image pooled by {} must give sides that are multiples of 4 and at least 8",
                self.height, self.width, self.pool
            )));
        }
        if self.k == 0 || self.action_dim == 0 || self.bottleneck == 0 {
            return Err(Error::Config("policy k, action_dim and bottleneck must be positive".into()));
        }
        if self.action_scale.len() != self.action_dim || self.action_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("action scale needs one positive entry per action dimension".into()));
        }
        if self.flow_resolution < 8 || self.flow_resolution % 4 != 0 {
            return Err(Error::Config("flow_resolution must be a multiple of 4 and at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel<T: Scalar = f32> {
    pub shape: PolicyShape,
    pub lambda: f32,
    enc: Sequential<T>,
    bc: Sequential<T>,
    aux: Sequential<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub action: f64,
    pub flow: f64,
}

/// One training batch in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBatch<T: Scalar = f32> {
    /// `[B, input_dim]`
    pub images: Tensor<T>,
    /// `[B, k·action_dim]`
    pub actions: Tensor<T>,
    /// `[B, flow_dim]`; required whenever λ > 0.
    pub flows: Option<Tensor<T>>,
    /// Items whose action term counts.
    pub action_mask: Vec<bool>,
    /// Items whose flow term counts.
    pub flow_mask: Vec<bool>,
}

impl<T: Scalar> PolicyBatch<T> {
    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> PolicyBatch<U> {
        PolicyBatch {
            images: self.images.cast(),
            actions: self.actions.cast(),
            flows: self.flows.as_ref().map(|f| f.cast()),
            action_mask: self.action_mask.clone(),
            flow_mask: self.flow_mask.clone(),
        }
    }
}

impl<T: Scalar> PolicyModel<T> {
    pub fn new(shape: PolicyShape, lambda: f32, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let (h, w) = shape.input_hw();
        let flat = ENC_C2 * (h / 4) * (w / 4);
        let enc = Sequential::new("enc")
            .push(Layer::Reshape(vec![shape.channels, h, w]))
            .push(Layer::conv(shape.channels, ENC_C1, 4, 2, 1, Init::HeNormal, rng))
            .push(Layer::Tanh)
            .push(Layer::conv(ENC_C1, ENC_C2, 4, 2, 1, Init::HeNormal, rng))
            .push(Layer::Tanh)
            .push(Layer::Reshape(vec![flat]))
            .push(Layer::linear(flat, shape.bottleneck, Init::LecunNormal, rng))
            .push(Layer::Tanh);
        let bc = Sequential::new("bc")
            .push(Layer::linear(shape.bottleneck, 128, Init::LecunNormal, rng))
            .push(Layer::Tanh)
            .push(Layer::linear(128, shape.chunk_dim(), Init::LecunNormal, rng));
        let q = shape.flow_resolution / 4;
        let aux = Sequential::new("aux")
            .push(Layer::linear(shape.bottleneck, AUX_C * q * q, Init::LecunNormal, rng))
            .push(Layer::Tanh)
            .push(Layer::Reshape(vec![AUX_C, q, q]))
            .push(Layer::deconv(AUX_C, AUX_C / 2, 4, 2, 1, Init::HeNormal, rng))
            .push(Layer::Tanh)
            .push(Layer::deconv(AUX_C / 2, 2, 4, 2, 1, Init::LecunNormal, rng))
            .push(Layer::Reshape(vec![shape.flow_dim()]));
        Ok(Self { shape, lambda, enc, bc, aux })
    }

    pub fn cast<U: Scalar>(&self) -> PolicyModel<U> {
        PolicyModel {
            shape: self.shape.clone(),
            lambda: self.lambda,
            enc: self.enc.cast(),
            bc: self.bc.cast(),
            aux: self.aux.cast(),
        }
    }

    fn check_batch(&self, b: &PolicyBatch<T>) -> Result<()> {
        let n = b.len();
        let s = &self.shape;
        if b.images.shape() != [n, s.input_dim()] || b.actions.shape() != [n, s.chunk_dim()] {
            return Err(Error::Dimension(format!(
                "batch images {:?} / actions {:?} do not match [B, {}] / [B, {}]",
                b.images.shape(),
                b.actions.shape(),
                s.input_dim(),
                s.chunk_dim()
            )));
        }
        if b.action_mask.len() != n || b.flow_mask.len() != n {
            return Err(Error::Dimension("batch masks must have one entry per item".into()));
        }
        if self.lambda > 0.0 {
            match &b.flows {
                None => return Err(Error::Data("flow term is active but the batch has no flow targets; compute flows first".into())),
                Some(f) if f.shape() != [n, s.flow_dim()] => {
                    return Err(Error::Dimension(format!(
                        "flow targets {:?} do not match [B, {}]",
                        f.shape(),
                        s.flow_dim()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Bottleneck features `[B, bottleneck]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.enc.infer(images)?)
    }

    /// Predicted chunks in model units `[B, k·action_dim]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.bc.infer(&self.enc.infer(images)?)?)
    }

    /// Predicted flow in model units `[B, flow_dim]`.
    pub fn predict_flow(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.aux.infer(&self.enc.infer(images)?)?)
    }

    /// `total = action + λ·flow` without touching gradients. With λ = 0 the
    /// flow head is not evaluated and `flow` is reported as zero.
    pub fn loss(&self, b: &PolicyBatch<T>) -> Result<LossParts> {
        self.check_batch(b)?;
        let h = self.enc.infer(&b.images)?;
        let pa = self.bc.infer(&h)?;
        let (action, _) = action_term(&pa, &b.actions, &b.action_mask);
        let flow = if self.lambda > 0.0 {
            let pf = self.aux.infer(&h)?;
            flow_term(&pf, b.flows.as_ref().expect("checked"), &b.flow_mask).0
        } else {
            0.0
        };
        Ok(combine(action, flow, self.lambda))
    }

    /// Same as [`PolicyModel::loss`]; also accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, b: &PolicyBatch<T>) -> Result<LossParts> {
        self.check_batch(b)?;
        let h = self.enc.forward(&b.images)?;
        let pa = self.bc.forward(&h)?;
        let (action, ga) = action_term(&pa, &b.actions, &b.action_mask);
        let mut gh = self.bc.backward(&ga)?;
        let mut flow = 0.0;
        if self.lambda > 0.0 {
            let pf = self.aux.forward(&h)?;
            let (f, mut gf) = flow_term(&pf, b.flows.as_ref().expect("checked"), &b.flow_mask);
            flow = f;
            let lam = T::of(self.lambda as f64);
            for g in gf.data_mut() {
                *g = *g * lam;
            }
            gh.add_assign(&self.aux.backward(&gf)?)?;
        }
        self.enc.backward(&gh)?;
        Ok(combine(action, flow, self.lambda))
    }
}

fn combine(action: f64, flow: f64, lambda: f32) -> LossParts {
    LossParts {
        total: action + lambda as f64 * flow,
        action,
        flow,
    }
}

// Mean over the batch of each unmasked item's mean squared error.
fn action_term<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> (f64, Tensor<T>) {
    let n = pred.dim(0);
    let d = pred.dim(1);
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    let scale = T::of(2.0 / (n * d) as f64);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in i * d..(i + 1) * d {
            let r = pred.data()[j] - target.data()[j];
            loss += r.to_f64_lossless().powi(2);
            grad.data_mut()[j] = r * scale;
        }
    }
    (loss / (n * d) as f64, grad)
}

// Mean over the batch of each unmasked item's Euclidean error norm.
fn flow_term<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> (f64, Tensor<T>) {
    let n = pred.dim(0);
    let d = pred.dim(1);
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let p = &pred.data()[i * d..(i + 1) * d];
        let t = &target.data()[i * d..(i + 1) * d];
        let norm = p.iter().zip(t).map(|(a, b)| (*a - *b).to_f64_lossless().powi(2)).sum::<f64>().sqrt();
        loss += norm;
        if norm > 0.0 {
            let s = T::of(1.0 / (norm * n as f64));
            let g = &mut grad.data_mut()[i * d..(i + 1) * d];
            for j in 0..d {
                g[j] = (p[j] - t[j]) * s;
            }
        }
    }
    (loss / n as f64, grad)
}

impl<T: Scalar> Parameterized<T> for PolicyModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &LayerParams<T>)) {
        self.enc.visit_params(f);
        self.bc.visit_params(f);
        self.aux.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut LayerParams<T>)) {
        self.enc.visit_params_mut(f);
        self.bc.visit_params_mut(f);
        self.aux.visit_params_mut(f);
    }
}

impl PolicyModel<f32> {
    /// Observation in model units.
    pub fn encode_image(&self, img: &Image) -> Result<Vec<f32>> {
        let s = &self.shape;
        if img.height() != s.height || img.width() != s.width || img.channels() != s.channels {
            return Err(Error::Dimension(format!(
                "policy expects {}x{}x{} images, got {}x{}x{}",
                s.height,
                s.width,
                s.channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(img.pooled_chw(s.pool))
    }

    /// Deterministic action chunk for one observation.
    pub fn act(&self, img: &Image) -> Result<Vec<ActionVec>> {
        let x = self.encode_image(img)?;
        let out = self.predict(&Tensor::new(vec![1, x.len()], x)?)?;
        let a = self.shape.action_dim;
        Ok(out
            .data()
            .chunks_exact(a)
            .map(|c| {
                let v: Vec<f32> = c.iter().zip(&self.shape.action_scale).map(|(x, s)| x * s).collect();
                ActionVec::from_slice(&v)
            })
            .collect())
    }
}

/// Header `{POL1, k, λ, action dim, H, W, C, pool, bottleneck, flow resolution,
/// action scales (one per dim), flow norm}` then parameter blobs.
pub fn write_policy(path: &Path, m: &PolicyModel<f32>) -> Result<()> {
    policy_bytes(m).save(path)
}

fn policy_bytes(m: &PolicyModel<f32>) -> Writer {
    let s = &m.shape;
    let mut w = Writer::new(POLICY_MAGIC);
    w.u32(s.k)
        .f32(m.lambda)
        .u32(s.action_dim)
        .u32(s.height)
        .u32(s.width)
        .u32(s.channels)
        .u32(s.pool)
        .u32(s.bottleneck)
        .u32(s.flow_resolution)
        .f32s(&s.action_scale)
        .f32(s.flow_norm)
        .params(m);
    w
}

pub fn policy_hash(m: &PolicyModel<f32>) -> String {
    crate::hashing::sha256_hex(policy_bytes(m).bytes())
}

pub fn read_policy(path: &Path) -> Result<PolicyModel<f32>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, POLICY_MAGIC)?;
    let k = r.u32()?;
    let lambda = r.f32()?;
    let action_dim = r.u32()?;
    if action_dim > 1024 {
        return Err(Error::format(path, format!("implausible action dim {action_dim}")));
    }
    let shape = PolicyShape {
        k,
        action_dim,
        height: r.u32()?,
        width: r.u32()?,
        channels: r.u32()?,
        pool: r.u32()?,
        bottleneck: r.u32()?,
        flow_resolution: r.u32()?,
        action_scale: r.f32s(action_dim)?,
        flow_norm: r.f32()?,
    };
    let mut m = PolicyModel::new(shape, lambda, &mut Rng::new(0)).map_err(|e| Error::format(path, e.to_string()))?;
    r.params(&mut m)?;
    r.finish()?;
    Ok(m)
}

/// Prepared flow targets (model units), keyed by `(trajectory, frame)`.
pub type FlowTargets = HashMap<(String, usize), Vec<f32>>;

/// Everything `train` reads: the target demos, the prior set (for BC_CO and for
/// resolving retrieved segments), and flow targets for frames the flow term
/// may touch.
pub struct TrainData<'a> {
    pub target: &'a [Trajectory],
    pub prior: &'a [Trajectory],
    pub retrieved: Option<&'a RetrievalResult>,
    pub flows: &'a FlowTargets,
    /// Per-dimension action divisors (the step bound for moves, 1 for grip).
    pub action_scale: Vec<f32>,
    pub flow_norm: f32,
    /// Content hashes recorded in the report.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub action: f64,
    pub flow: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub lambda: f32,
    pub target_items: usize,
    pub retrieved_items: usize,
    /// Action loss over every target item before the first update.
    pub initial_action_loss: f64,
    /// Action loss over every target item after the last update.
    pub final_action_loss: f64,
    pub epochs: Vec<EpochLoss>,
    pub data_hashes: BTreeMap<String, String>,
}

impl TrainReport {
    /// `epoch,action,flow,total` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,action,flow,total\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.action, e.flow, e.total));
        }
        s
    }
}

struct Lookup<'a> {
    trajs: HashMap<&'a str, &'a Trajectory>,
}

impl<'a> Lookup<'a> {
    fn new(sets: &[&'a [Trajectory]]) -> Self {
        let mut trajs = HashMap::new();
        for set in sets {
            for t in set.iter() {
                trajs.insert(t.id.as_str(), t);
            }
        }
        Self { trajs }
    }

    fn get(&self, id: &str) -> Result<&'a Trajectory> {
        self.trajs
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("segment refers to unknown trajectory {id}")))
    }
}

/// `a_{t:t+k}` divided per dimension by `scale`, padded with the final action
/// past the tail.
pub fn action_chunk(t: &Trajectory, start: usize, k: usize, scale: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(k * scale.len());
    for i in 0..k {
        let f = &t.frames[(start + i).min(t.len() - 1)];
        out.extend(f.action.iter().zip(scale).map(|(a, s)| a / s));
    }
    out
}

fn all_segments(ts: &[Trajectory], k: usize) -> Vec<SegmentRef> {
    ts.iter()
        .flat_map(|t| (0..t.len()).map(move |i| SegmentRef::clamped(t.id.clone(), i, k, t.len())))
        .collect()
}

fn shape_for(cfg: &PolicyConfig, data: &TrainData) -> Result<PolicyShape> {
    let first = data
        .target
        .first()
        .ok_or_else(|| Error::Data("policy training needs at least one target trajectory".into()))?;
    let f = &first.frames[0];
    Ok(PolicyShape {
        k: cfg.k,
        action_dim: f.action.len(),
        height: f.image.height(),
        width: f.image.width(),
        channels: f.image.channels(),
        pool: cfg.pool,
        bottleneck: cfg.bottleneck,
        flow_resolution: cfg.flow_resolution,
        action_scale: data.action_scale.clone(),
        flow_norm: data.flow_norm,
    })
}

fn assemble(
    m: &PolicyModel<f32>,
    items: &[(Source, SegmentRef)],
    lookup: &Lookup,
    flows: &FlowTargets,
    cfg: &PolicyConfig,
    lambda: f32,
) -> Result<PolicyBatch<f32>> {
    let s = &m.shape;
    let n = items.len();
    let mut images = Vec::with_capacity(n * s.input_dim());
    let mut actions = Vec::with_capacity(n * s.chunk_dim());
    let mut flow_data = Vec::new();
    let mut action_mask = Vec::with_capacity(n);
    let mut flow_mask = Vec::with_capacity(n);
    for (src, seg) in items {
        let t = lookup.get(&seg.trajectory)?;
        let f = t
            .frames
            .get(seg.start)
            .ok_or_else(|| Error::Data(format!("segment start {} beyond {}", seg.start, t.id)))?;
        images.extend(m.encode_image(&f.image)?);
        actions.extend(action_chunk(t, seg.start, s.k, &s.action_scale));
        let retrieved = *src == Source::Retrieved;
        action_mask.push(!(retrieved && cfg.mask_retrieved_actions));
        let use_flow = lambda > 0.0 && (retrieved || !cfg.flow_on_retrieved_only);
        flow_mask.push(use_flow);
        if lambda > 0.0 {
            if use_flow {
                let ft = flows.get(&(seg.trajectory.clone(), seg.start)).ok_or_else(|| {
                    Error::Missing {
                        what: format!("flow target for {}:{}", seg.trajectory, seg.start),
                        command: "compute-flow",
                    }
                })?;
                if ft.len() != s.flow_dim() {
                    return Err(Error::Dimension(format!(
                        "flow target of length {} for a {}-wide flow head",
                        ft.len(),
                        s.flow_dim()
                    )));
                }
                flow_data.extend_from_slice(ft);
            } else {
                flow_data.extend(std::iter::repeat(0.0).take(s.flow_dim()));
            }
        }
    }
    Ok(PolicyBatch {
        images: Tensor::new(vec![n, s.input_dim()], images)?,
        actions: Tensor::new(vec![n, s.chunk_dim()], actions)?,
        flows: if lambda > 0.0 {
            Some(Tensor::new(vec![n, s.flow_dim()], flow_data)?)
        } else {
            None
        },
        action_mask,
        flow_mask,
    })
}

fn eval_action_loss(
    m: &PolicyModel<f32>,
    segs: &[SegmentRef],
    lookup: &Lookup,
    flows: &FlowTargets,
    cfg: &PolicyConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in segs.chunks(128) {
        let items: Vec<(Source, SegmentRef)> = chunk.iter().map(|s| (Source::Target, s.clone())).collect();
        let b = assemble(m, &items, lookup, flows, cfg, 0.0)?;
        let h = m.enc.infer(&b.images)?;
        let pa = m.bc.infer(&h)?;
        total += action_term(&pa, &b.actions, &b.action_mask).0 * chunk.len() as f64;
    }
    Ok(total / segs.len() as f64)
}

/// Trains a policy in the given mode with the 50/50 co-training sampler.
pub fn train(data: &TrainData, cfg: &PolicyConfig) -> Result<(PolicyModel<f32>, TrainReport)> {
    cfg.validate()?;
    let lambda = cfg.effective_lambda();
    let shape = shape_for(cfg, data)?;
    let target = all_segments(data.target, cfg.k);
    let retrieved = match cfg.mode {
        TrainMode::Bc | TrainMode::FlowBc => Vec::new(),
        TrainMode::BcCo => all_segments(data.prior, cfg.k),
        TrainMode::FlowRetrieval => {
            let r = data.retrieved.ok_or_else(|| Error::Missing {
                what: "retrieval result for flow-retrieval training".into(),
                command: "retrieve",
            })?;
            if r.k != cfg.k {
                return Err(Error::Config(format!(
                    "retrieved segments use k={} but the policy uses k={}",
                    r.k, cfg.k
                )));
            }
            r.segment_refs()
        }
    };
    let lookup = Lookup::new(&[data.target, data.prior]);
    let mut rng = Rng::with_stream(cfg.seed, 0x706f_6c69);
    let mut model = PolicyModel::<f32>::new(shape, lambda, &mut rng)?;
    let sampler_rng = Rng::with_stream(cfg.seed, 0x5a4d);
    let mut sampler = CoTrainSampler::new(target.clone(), retrieved.clone(), sampler_rng)?;
    let mut opt = Optimizer::new(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let initial_action_loss = eval_action_loss(&model, &target, &lookup, data.flows, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = LossParts::default();
        for step in 0..cfg.steps_per_epoch {
            let items: Vec<(Source, SegmentRef)> = sampler
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|b| (b.source, b.segment))
                .collect();
            let batch = assemble(&model, &items, &lookup, data.flows, cfg, lambda)?;
            model.zero_grads();
            let l = model.loss_and_backward(&batch)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "policy loss non-finite at epoch {epoch}, batch {step}"
                )));
            }
            opt.step(&mut model).map_err(|e| {
                Error::Divergence(format!("{e} at epoch {epoch}, batch {step}"))
            })?;
            acc.total += l.total;
            acc.action += l.action;
            acc.flow += l.flow;
        }
        let n = cfg.steps_per_epoch as f64;
        let e = EpochLoss {
            epoch: epoch + 1,
            action: acc.action / n,
            flow: acc.flow / n,
            total: acc.total / n,
        };
        log::info!(
            "{} epoch {}: action {:.5} flow {:.5} total {:.5}",
            cfg.mode.name(),
            e.epoch,
            e.action,
            e.flow,
            e.total
        );
        epochs.push(e);
    }
    let final_action_loss = eval_action_loss(&model, &target, &lookup, data.flows, cfg)?;
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        lambda,
        target_items: target.len(),
        retrieved_items: retrieved.len(),
        initial_action_loss,
        final_action_loss,
        epochs,
        data_hashes: data.hashes.clone(),
    };
    Ok((model, report))
}

/// Finite-difference check of `policy_loss` through encoder, action head and
/// flow head, evaluated in `f64`.
pub fn policy_grad_check(m: &PolicyModel<f32>, batch: &PolicyBatch<f32>, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = m.cast::<f64>();
    let b = batch.cast::<f64>();
    model.zero_grads();
    model.loss_and_backward(&b)?;
    let params = ParamBlock::params_of(&model);
    let analytic = ParamBlock::grads_of(&model);
    let mut probe = model.clone();
    Ok(grad_check(
        |blocks| {
            ParamBlock::load_into(blocks, &mut probe);
            probe.loss(&b).expect("shapes validated above").total
        },
        &params,
        &analytic,
        cfg,
    ))
}

/// A trained model wrapped for benchmark rollouts.
pub struct LearnedPolicy {
    pub model: PolicyModel<f32>,
}

impl Policy for LearnedPolicy {
    fn act(&mut self, obs: &Image, _state: &WorldState) -> Vec<ActionVec> {
        match self.model.act(obs) {
            Ok(chunk) => chunk,
            Err(e) => {
                log::error!("policy query failed: {e}");
                Vec::new()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> PolicyShape {
        PolicyShape {
            k: 2,
            action_dim: 3,
            height: 16,
            width: 16,
            channels: 3,
            pool: 2,
            bottleneck: 4,
            flow_resolution: 8,
            action_scale: vec![0.1, 0.1, 1.0],
            flow_norm: 1.0,
        }
    }

    fn batch(m: &PolicyModel<f32>, n: usize, rng: &mut Rng) -> PolicyBatch<f32> {
        let s = &m.shape;
        PolicyBatch {
            images: Tensor::from_fn(&[n, s.input_dim()], |_| rng.normal_f32() * 0.3),
            actions: Tensor::from_fn(&[n, s.chunk_dim()], |_| rng.normal_f32()),
            flows: Some(Tensor::from_fn(&[n, s.flow_dim()], |_| rng.normal_f32() * 0.1)),
            action_mask: vec![true; n],
            flow_mask: vec![true; n],
        }
    }

    #[test]
    fn lambda_zero_is_pure_bc() {
        let mut rng = Rng::new(3);
        let m = PolicyModel::<f32>::new(shape(), 0.0, &mut rng).unwrap();
        let b = batch(&m, 3, &mut rng);
        let l = m.loss(&b).unwrap();
        assert_eq!(l.total, l.action);
        assert_eq!(l.flow, 0.0);
    }

    #[test]
    fn perfect_prediction_is_zero_loss() {
        let mut rng = Rng::new(4);
        let m = PolicyModel::<f32>::new(shape(), 0.01, &mut rng).unwrap();
        let mut b = batch(&m, 2, &mut rng);
        b.actions = m.predict(&b.images).unwrap();
        b.flows = Some(m.predict_flow(&b.images).unwrap());
        assert_eq!(m.loss(&b).unwrap().total, 0.0);
    }

    #[test]
    fn masked_items_do_not_count() {
        let mut rng = Rng::new(5);
        let m = PolicyModel::<f32>::new(shape(), 0.01, &mut rng).unwrap();
        let mut b = batch(&m, 2, &mut rng);
        b.action_mask = vec![false, false];
        b.flow_mask = vec![false, false];
        assert_eq!(m.loss(&b).unwrap().total, 0.0);
    }

    #[test]
    fn missing_flow_targets_rejected() {
        let mut rng = Rng::new(6);
        let m = PolicyModel::<f32>::new(shape(), 0.01, &mut rng).unwrap();
        let mut b = batch(&m, 2, &mut rng);
        b.flows = None;
        assert!(matches!(m.loss(&b), Err(Error::Data(_))));
    }

    #[test]
    fn mode_names_parse() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert_eq!("FLOW_RETRIEVAL".parse::<TrainMode>().unwrap(), TrainMode::FlowRetrieval);
        assert!("diffusion".parse::<TrainMode>().is_err());
    }

    #[test]
    fn act_rejects_wrong_resolution_and_is_finite() {
        let mut rng = Rng::new(7);
        let m = PolicyModel::<f32>::new(shape(), 0.01, &mut rng).unwrap();
        assert!(m.act(&Image::filled(8, 8, [0, 0, 0])).is_err());
        let img = Image::new(16, 16, 3, (0..768).map(|_| rng.below(256) as u8).collect()).unwrap();
        let a = m.act(&img).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, m.act(&img).unwrap());
    }
}
