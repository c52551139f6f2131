//! The coordinate-conditioned interpolation network.
//!
//! A shared convolutional encoder maps each bounding slice to per-pixel
//! features. A per-pixel decoder sees both feature vectors, both raw
//! intensities and a sinusoidal encoding of the through-plane offset `t`,
//! and predicts a residual on top of the linear blend
//! `(1 - t) * left + t * right`. The decoder's output layer starts at zero,
//! so a fresh model is exactly linear interpolation.

pub mod archive;
pub(crate) mod nn;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Frame, InterpolationSample, TargetCoordinate};
use archive::Tensor;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each 3x3 encoder convolution.
    pub encoder_channels: Vec<usize>,
    /// Width of the per-pixel feature vector (1x1 projection after the convs).
    pub feature_dim: usize,
    /// Number of sinusoidal bands used to encode `t`.
    pub coord_frequencies: usize,
    /// Decoder layer widths; the last one must be 1.
    pub decoder_widths: Vec<usize>,
    /// Parameter budget the configuration is meant to land near.
    #[serde(default = "default_target_params")]
    pub target_params: usize,
}

fn default_target_params() -> usize {
    2_100_000
}

pub const KERNEL: usize = 3;

/// Relative slack allowed around [`ModelConfig::target_params`].
pub const PARAM_BUDGET_TOLERANCE: f64 = 0.15;

impl Default for ModelConfig {
    /// About 2.0M parameters.
    fn default() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256, 256],
            feature_dim: 256,
            coord_frequencies: 6,
            decoder_widths: vec![768, 768, 1],
            target_params: default_target_params(),
        }
    }
}

impl ModelConfig {
    /// A small network for desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            encoder_channels: vec![8, 8],
            feature_dim: 8,
            coord_frequencies: 3,
            decoder_widths: vec![32, 32, 1],
            target_params: 2_500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad(format!("encoder_channels must be non-empty and positive: {:?}", self.encoder_channels));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        match self.decoder_widths.split_last() {
            Some((1, hidden)) if !hidden.is_empty() && !hidden.contains(&0) => Ok(()),
            _ => bad(format!(
                "decoder_widths must have at least one hidden layer and end in 1: {:?}",
                self.decoder_widths
            )),
        }
    }

    pub fn coord_dim(&self) -> usize {
        1 + 2 * self.coord_frequencies
    }

    /// Decoder input: both feature vectors, both raw intensities, encoded `t`.
    pub fn decoder_input_dim(&self) -> usize {
        2 * self.feature_dim + 2 + self.coord_dim()
    }

    /// Pixels of context each side that influence one output pixel.
    pub fn receptive_radius(&self) -> usize {
        self.encoder_channels.len() * (KERNEL / 2)
    }

    /// `(name, shape)` of every trainable tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), vec![c, cin * KERNEL * KERNEL]));
            out.push((format!("encoder.conv{i}.bias"), vec![c]));
            cin = c;
        }
        out.push(("encoder.proj.weight".into(), vec![self.feature_dim, cin]));
        out.push(("encoder.proj.bias".into(), vec![self.feature_dim]));
        let mut din = self.decoder_input_dim();
        let last = self.decoder_widths.len() - 1;
        for (j, &w) in self.decoder_widths.iter().enumerate() {
            let name = if j == last { "decoder.out".to_string() } else { format!("decoder.fc{j}") };
            out.push((format!("{name}.weight"), vec![w, din]));
            out.push((format!("{name}.bias"), vec![w]));
            din = w;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn within_budget(&self) -> bool {
        let target = self.target_params as f64;
        (self.param_count() as f64 - target).abs() <= PARAM_BUDGET_TOLERANCE * target
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        archive::sha256_hex(&json)[..16].to_string()
    }
}

/// Which training stage produced a set of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "video-pretrain", alias = "video_pretrain")]
    VideoPretrain,
    #[serde(rename = "mr-finetune", alias = "mr_finetune")]
    MrFinetune,
    #[serde(rename = "selfsup", alias = "selfsup_finetune")]
    Selfsup,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::VideoPretrain => "video-pretrain",
            Stage::MrFinetune => "mr-finetune",
            Stage::Selfsup => "selfsup",
        }
    }

    /// The stage whose output this stage expects to start from.
    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::VideoPretrain => None,
            Stage::MrFinetune => Some(Stage::VideoPretrain),
            Stage::Selfsup => Some(Stage::MrFinetune),
        }
    }

    /// Ablation shorthand: VP, SF, SSF.
    pub fn short(self) -> &'static str {
        match self {
            Stage::VideoPretrain => "VP",
            Stage::MrFinetune => "SF",
            Stage::Selfsup => "SSF",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "video-pretrain" | "video_pretrain" | "vp" => Ok(Stage::VideoPretrain),
            "mr-finetune" | "mr_finetune" | "sf" => Ok(Stage::MrFinetune),
            "selfsup" | "selfsup_finetune" | "ssf" => Ok(Stage::Selfsup),
            other => Err(Error::InvalidArgument(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    /// Stage that last updated these weights.
    pub stage: Option<Stage>,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    /// Stages applied so far, oldest first.
    pub lineage: Vec<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    format: String,
    fingerprint: String,
    config: ModelConfig,
    stage: Option<Stage>,
    step: u64,
    lineage: Vec<Stage>,
}

const PARAMS_FORMAT: &str = "slicesr-params/1";

/// Training objective on the predicted frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossKind {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean of `sqrt(d^2 + eps^2)`, a differentiable L1.
    Charbonnier { eps: f64 },
}

impl LossKind {
    fn value_and_slope(self, d: f64) -> (f64, f64) {
        match self {
            LossKind::L1 => (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }),
            LossKind::Charbonnier { eps } => {
                let r = (d * d + eps * eps).sqrt();
                (r, d / r)
            }
        }
    }
}

/// Per-pixel features of one slice plus its raw intensities.
#[derive(Debug, Clone)]
pub struct Features {
    feat: Array2<f64>,
    pixels: Array1<f64>,
    h: usize,
    w: usize,
}

impl Features {
    pub fn dim(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

struct EncoderCache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    last_act: Array2<f64>,
}

struct DecoderCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Gradients aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Weights of the network together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    pub meta: ParamsMeta,
}

fn blend(l: f64, r: f64, t: f64) -> f64 {
    (1.0 - t) * l + t * r
}

/// `[t, sin(2^j pi t), cos(2^j pi t)]` for `j < frequencies`.
pub fn encode_coordinate(t: f64, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + 2 * frequencies);
    out.push(t);
    for j in 0..frequencies {
        let a = (1u64 << j) as f64 * std::f64::consts::PI * t;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

fn frame_to_row(frame: &Frame) -> Array1<f64> {
    frame.pixels().iter().map(|&v| v as f64).collect()
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases, zero output layer.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let n = layout.len();
        let tensors = layout
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut t = Tensor::zeros(name, shape);
                let is_weight = t.shape.len() == 2;
                let is_output = i >= n - 2;
                if is_weight && !is_output {
                    let bound = (6.0 / t.shape[1] as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            meta: ParamsMeta::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[idx];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("weight shape")
    }

    fn vec(&self, idx: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[idx].data)
    }

    fn n_enc(&self) -> usize {
        self.config.encoder_channels.len()
    }

    fn proj_idx(&self) -> usize {
        2 * self.n_enc()
    }

    fn dec_idx(&self, j: usize) -> usize {
        2 * self.n_enc() + 2 + 2 * j
    }

    fn encode_impl(&self, frame: &Frame, keep: bool) -> (Features, Option<EncoderCache>) {
        let (h, w) = frame.dim();
        let pixels = frame_to_row(frame);
        let mut act = pixels.clone().insert_axis(Axis(0));
        let mut cols_cache = Vec::new();
        let mut pre_cache = Vec::new();
        for i in 0..self.n_enc() {
            let cols = nn::im2col(act.view(), h, w, KERNEL);
            let pre = nn::affine(self.mat(2 * i), self.vec(2 * i + 1), cols.view());
            act = pre.clone();
            nn::silu_inplace(&mut act);
            if keep {
                cols_cache.push(cols);
                pre_cache.push(pre);
            }
        }
        let p = self.proj_idx();
        let feat = nn::affine(self.mat(p), self.vec(p + 1), act.view());
        let cache = keep.then(|| EncoderCache {
            cols: cols_cache,
            pre: pre_cache,
            last_act: act,
        });
        (Features { feat, pixels, h, w }, cache)
    }

    /// Encodes one slice; reuse the result for every `t` between a pair.
    pub fn encode(&self, frame: &Frame) -> Features {
        self.encode_impl(frame, false).0
    }

    fn decoder_first_pre(&self, left: &Features, right: &Features, t: f64) -> Array2<f64> {
        let f = self.config.feature_dim;
        let w1 = self.mat(self.dec_idx(0));
        let mut pre = nn::affine(w1.slice(s![.., 0..f]), self.vec(self.dec_idx(0) + 1), left.feat.view());
        ndarray::linalg::general_mat_mul(1.0, &w1.slice(s![.., f..2 * f]), &right.feat, 1.0, &mut pre);
        let raw = ndarray::stack(Axis(0), &[left.pixels.view(), right.pixels.view()]).expect("equal lengths");
        ndarray::linalg::general_mat_mul(1.0, &w1.slice(s![.., 2 * f..2 * f + 2]), &raw, 1.0, &mut pre);
        let gamma = Array1::from(encode_coordinate(t, self.config.coord_frequencies));
        let shift = w1.slice(s![.., 2 * f + 2..]).dot(&gamma);
        for (mut row, &b) in pre.outer_iter_mut().zip(shift.iter()) {
            row += b;
        }
        pre
    }

    /// Returns the prediction as f64 along with the cache for backprop.
    fn decode_impl(&self, left: &Features, right: &Features, t: f64, keep: bool) -> (Array1<f64>, Option<DecoderCache>) {
        let layers = self.config.decoder_widths.len();
        let mut pre = self.decoder_first_pre(left, right, t);
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        for j in 1..layers {
            let mut act = pre.clone();
            nn::silu_inplace(&mut act);
            if keep {
                pres.push(pre);
            }
            let idx = self.dec_idx(j);
            pre = nn::affine(self.mat(idx), self.vec(idx + 1), act.view());
            if keep {
                inputs.push(act);
            }
        }
        let residual = pre.row(0);
        let out = ndarray::Zip::from(&left.pixels)
            .and(&right.pixels)
            .and(&residual)
            .map_collect(|&l, &r, &res| blend(l, r, t) + res);
        (out, keep.then_some(DecoderCache { inputs, pre: pres }))
    }

    fn check_pair(left: &Features, right: &Features) -> Result<()> {
        if left.dim() != right.dim() {
            return Err(Error::Shape(format!(
                "bounding slices differ: {:?} vs {:?}",
                left.dim(),
                right.dim()
            )));
        }
        Ok(())
    }

    /// Predicts the slice at fraction `t` from encoded bounding slices.
    pub fn decode(&self, left: &Features, right: &Features, t: f64) -> Result<Frame> {
        Self::check_pair(left, right)?;
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidArgument(format!("t={t} outside [0, 1]")));
        }
        let (out, _) = self.decode_impl(left, right, t, false);
        let arr = out
            .mapv(|v| v as f32)
            .into_shape_with_order((left.h, left.w))
            .expect("pixel count");
        Frame::new(arr)
    }

    /// `F(left, right, t)`.
    pub fn forward(&self, left: &Frame, right: &Frame, coord: &TargetCoordinate) -> Result<Frame> {
        left.ensure_same_dim(right, "bounding frames differ")?;
        let (fl, fr) = (self.encode(left), self.encode(right));
        self.decode(&fl, &fr, coord.t())
    }

    pub fn forward_batch(&self, samples: &[InterpolationSample]) -> Result<Vec<Frame>> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.dim() != first.dim()) {
                return Err(Error::Shape(format!(
                    "heterogeneous batch: {:?} vs {:?}",
                    bad.dim(),
                    first.dim()
                )));
            }
        }
        samples
            .par_iter()
            .map(|s| self.forward(&s.left, &s.right, &s.coord))
            .collect()
    }

    fn encoder_backward(&self, cache: EncoderCache, grad_feat: Array2<f64>, grads: &mut Gradients, h: usize, w: usize) {
        let p = self.proj_idx();
        let (gw, gb) = split_grads(grads, p);
        let mut grad = nn::affine_backward(self.mat(p), cache.last_act.view(), grad_feat.view(), gw, gb, true)
            .expect("requested");
        for i in (0..self.n_enc()).rev() {
            nn::silu_backward_inplace(&mut grad, &cache.pre[i]);
            let (gw, gb) = split_grads(grads, 2 * i);
            let dcols = nn::affine_backward(self.mat(2 * i), cache.cols[i].view(), grad.view(), gw, gb, i > 0);
            if let Some(dcols) = dcols {
                let cin = self.tensors[2 * i].shape[1] / (KERNEL * KERNEL);
                grad = nn::col2im(dcols.view(), cin, h, w, KERNEL);
            }
        }
    }

    /// Loss on one sample and the gradient of that loss w.r.t. every tensor.
    pub fn loss_and_grad(&self, sample: &InterpolationSample, loss: LossKind) -> Result<(f64, Gradients)> {
        let target = sample
            .target
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("training sample has no target".into()))?;
        let (h, w) = sample.dim();
        let (fl, cl) = self.encode_impl(&sample.left, true);
        let (fr, cr) = self.encode_impl(&sample.right, true);
        let t = sample.coord.t();
        let (pred, dcache) = self.decode_impl(&fl, &fr, t, true);
        let dcache = dcache.expect("requested");

        let npx = (h * w) as f64;
        let mut value = 0.0;
        let mut dpred = Array2::<f64>::zeros((1, h * w));
        for ((d, &p), &y) in dpred.iter_mut().zip(pred.iter()).zip(target.pixels().iter()) {
            let (v, slope) = loss.value_and_slope(p - y as f64);
            value += v;
            *d = slope / npx;
        }
        value /= npx;

        let mut grads = Gradients::zeros_like(self);
        let layers = self.config.decoder_widths.len();
        let mut grad = dpred;
        for j in (1..layers).rev() {
            let idx = self.dec_idx(j);
            let (gw, gb) = split_grads(&mut grads, idx);
            grad = nn::affine_backward(self.mat(idx), dcache.inputs[j - 1].view(), grad.view(), gw, gb, true)
                .expect("requested");
            nn::silu_backward_inplace(&mut grad, &dcache.pre[j - 1]);
        }
        // First decoder layer, split by input block.
        let f = self.config.feature_dim;
        let idx0 = self.dec_idx(0);
        let din = self.config.decoder_input_dim();
        {
            let gamma = Array1::from(encode_coordinate(t, self.config.coord_frequencies));
            let raw = ndarray::stack(Axis(0), &[fl.pixels.view(), fr.pixels.view()]).expect("equal lengths");
            let (gw_all, mut gb) = split_grads(&mut grads, idx0);
            let mut gw_all = gw_all;
            ndarray::linalg::general_mat_mul(1.0, &grad, &fl.feat.t(), 1.0, &mut gw_all.slice_mut(s![.., 0..f]));
            ndarray::linalg::general_mat_mul(1.0, &grad, &fr.feat.t(), 1.0, &mut gw_all.slice_mut(s![.., f..2 * f]));
            ndarray::linalg::general_mat_mul(1.0, &grad, &raw.t(), 1.0, &mut gw_all.slice_mut(s![.., 2 * f..2 * f + 2]));
            let row_sums = grad.sum_axis(Axis(1));
            let mut gg = gw_all.slice_mut(s![.., 2 * f + 2..din]);
            for (mut row, &g) in gg.outer_iter_mut().zip(row_sums.iter()) {
                row.scaled_add(g, &gamma);
            }
            gb += &row_sums;
        }
        let w1 = self.mat(idx0);
        let dfl = w1.slice(s![.., 0..f]).t().dot(&grad);
        let dfr = w1.slice(s![.., f..2 * f]).t().dot(&grad);
        self.encoder_backward(cl.expect("requested"), dfl, &mut grads, h, w);
        self.encoder_backward(cr.expect("requested"), dfr, &mut grads, h, w);
        Ok((value, grads))
    }

    /// Mean loss and mean gradient over a batch. Per-sample work may run in
    /// parallel; the reduction order is fixed.
    pub fn batch_loss_and_grad(&self, batch: &[InterpolationSample], loss: LossKind) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let parts: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|s| self.loss_and_grad(s, loss))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = Gradients::zeros_like(self);
        let mut value = 0.0;
        for (v, g) in &parts {
            value += v;
            total.add_scaled(g, scale);
        }
        Ok((value * scale, total))
    }

    /// Loss only (no gradient), f64 throughout.
    pub fn loss(&self, sample: &InterpolationSample, loss: LossKind) -> Result<f64> {
        let target = sample
            .target
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("sample has no target".into()))?;
        let (fl, fr) = (self.encode(&sample.left), self.encode(&sample.right));
        let (pred, _) = self.decode_impl(&fl, &fr, sample.coord.t(), false);
        let n = pred.len() as f64;
        Ok(pred
            .iter()
            .zip(target.pixels().iter())
            .map(|(&p, &y)| loss.value_and_slope(p - y as f64).0)
            .sum::<f64>()
            / n)
    }

    pub(crate) fn archive_meta(&self) -> serde_json::Value {
        serde_json::to_value(ArchiveMeta {
            format: PARAMS_FORMAT.into(),
            fingerprint: self.fingerprint(),
            config: self.config.clone(),
            stage: self.meta.stage,
            step: self.meta.step,
            lineage: self.meta.lineage.clone(),
        })
        .expect("meta serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write_archive(path, &self.archive_meta(), &self.tensors)
    }

    pub(crate) fn from_archive(meta: serde_json::Value, tensors: Vec<Tensor>) -> Result<Self> {
        let meta: ArchiveMeta = serde_json::from_value(meta)
            .map_err(|e| Error::format("parameter archive", format!("metadata: {e}")))?;
        if meta.format != PARAMS_FORMAT {
            return Err(Error::format("parameter archive", format!("format tag {}", meta.format)));
        }
        if meta.config.fingerprint() != meta.fingerprint {
            return Err(Error::format("parameter archive", "fingerprint does not match stored config"));
        }
        meta.config.validate()?;
        let layout = meta.config.layout();
        if layout.len() != tensors.len()
            || layout
                .iter()
                .zip(&tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.shape)
        {
            return Err(Error::format("parameter archive", "tensor layout does not match config"));
        }
        let params = Self {
            config: meta.config,
            tensors,
            meta: ParamsMeta {
                stage: meta.stage,
                step: meta.step,
                lineage: meta.lineage,
            },
        };
        if !params.all_finite() {
            return Err(Error::NonFinite("parameter archive contains non-finite weights".into()));
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = archive::read_archive(path)?;
        Self::from_archive(meta, tensors)
    }

    /// Loads and checks the archive was built for `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let p = Self::load(path)?;
        if p.fingerprint() != expected.fingerprint() {
            return Err(Error::Compatibility(format!(
                "archive fingerprint {} does not match config fingerprint {}",
                p.fingerprint(),
                expected.fingerprint()
            )));
        }
        Ok(p)
    }
}

fn split_grads(grads: &mut Gradients, weight_idx: usize) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (a, b) = grads.tensors.split_at_mut(weight_idx + 1);
    let wdata = &mut a[weight_idx];
    let bias = &mut b[0];
    let rows = bias.len();
    let cols = wdata.len() / rows;
    (
        ArrayViewMut2::from_shape((rows, cols), wdata).expect("weight shape"),
        ArrayViewMut1::from(bias),
    )
}

pub fn param_count(params: &ModelParams) -> usize {
    params.param_count()
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    params.save(path)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path)
}

/// Model with a non-zero output layer so every path carries signal.
#[cfg(test)]
pub(crate) fn perturbed(config: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let n = p.tensors.len();
    for t in &mut p.tensors[n - 2..] {
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(Array2::from_shape_fn((h, w), |_| rng.random::<f32>())).unwrap()
    }

    #[test]
    fn default_config_is_near_two_million() {
        let c = ModelConfig::default();
        assert_eq!(c.param_count(), 2_022_401);
        assert!(c.within_budget());
        let toy = ModelConfig::toy();
        assert!(toy.param_count() < c.param_count());
    }

    #[test]
    fn fresh_model_is_linear_blend() {
        let p = ModelParams::init(ModelConfig::toy(), 1).unwrap();
        let (l, r) = (frame(9, 7, 1), frame(9, 7, 2));
        for k in 0..=4 {
            let c = TargetCoordinate::new(k as f64, 4).unwrap();
            let out = p.forward(&l, &r, &c).unwrap();
            let want = crate::degrade::lerp_planes(&l, &r, c.t()).unwrap();
            assert_eq!(out, want);
        }
        let same = p.forward(&l, &l, &TargetCoordinate::new(1.0, 3).unwrap()).unwrap();
        assert_eq!(same, l);
    }

    #[test]
    fn forward_shape_and_errors() {
        let p = perturbed(ModelConfig::toy(), 3);
        let out = p
            .forward(&frame(16, 16, 1), &frame(16, 16, 2), &TargetCoordinate::new(2.0, 4).unwrap())
            .unwrap();
        assert_eq!(out.dim(), (16, 16));
        assert!(matches!(
            p.forward(&frame(16, 16, 1), &frame(16, 8, 2), &TargetCoordinate::new(2.0, 4).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::toy();
        c.decoder_widths = vec![32, 2];
        assert!(c.validate().is_err());
        c.decoder_widths = vec![1];
        assert!(c.validate().is_err());
        c = ModelConfig::toy();
        c.encoder_channels.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn halving_widths_shrinks_count() {
        let c = ModelConfig::default();
        let half = ModelConfig {
            encoder_channels: c.encoder_channels.iter().map(|x| x / 2).collect(),
            feature_dim: c.feature_dim / 2,
            coord_frequencies: c.coord_frequencies,
            decoder_widths: c.decoder_widths.iter().map(|&x| (x / 2).max(1)).collect(),
            target_params: c.target_params,
        };
        assert!(half.param_count() < c.param_count());
    }

    #[test]
    fn loss_and_grad_matches_loss() {
        let p = perturbed(ModelConfig::toy(), 5);
        let s = InterpolationSample::new(
            frame(8, 8, 1),
            frame(8, 8, 2),
            TargetCoordinate::new(1.0, 4).unwrap(),
            Some(frame(8, 8, 3)),
        )
        .unwrap();
        let (v, g) = p.loss_and_grad(&s, LossKind::L1).unwrap();
        assert!((v - p.loss(&s, LossKind::L1).unwrap()).abs() < 1e-12);
        assert!(g.is_finite());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut p = perturbed(ModelConfig::toy(), 11);
        let s = InterpolationSample::new(
            frame(8, 8, 21),
            frame(8, 8, 22),
            TargetCoordinate::new(1.0, 4).unwrap(),
            Some(frame(8, 8, 23)),
        )
        .unwrap();
        let loss = LossKind::Charbonnier { eps: 1e-2 };
        let (_, g) = p.loss_and_grad(&s, loss).unwrap();
        let n = p.tensors().len();
        // one entry from each kind of layer
        let probe = [(0, 4), (3, 2), (4, 5), (n - 4, 17), (n - 2, 9)];
        let h = 1e-4;
        for (ti, ei) in probe {
            let orig = p.tensors()[ti].data[ei];
            p.tensors_mut()[ti].data[ei] = orig + h;
            let up = p.loss(&s, loss).unwrap();
            p.tensors_mut()[ti].data[ei] = orig - h;
            let down = p.loss(&s, loss).unwrap();
            p.tensors_mut()[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.tensors[ti][ei];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
            assert!(rel < 1e-3, "{}[{ei}]: analytic {analytic} numeric {numeric}", p.tensors()[ti].name);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let p = perturbed(ModelConfig::toy(), 4);
        let mk = |seed| {
            InterpolationSample::new(
                frame(6, 6, seed),
                frame(6, 6, seed + 1),
                TargetCoordinate::new(2.0, 4).unwrap(),
                Some(frame(6, 6, seed + 2)),
            )
            .unwrap()
        };
        let batch = vec![mk(1), mk(10)];
        let (v, g) = p.batch_loss_and_grad(&batch, LossKind::L1).unwrap();
        let (v0, g0) = p.loss_and_grad(&batch[0], LossKind::L1).unwrap();
        let (v1, g1) = p.loss_and_grad(&batch[1], LossKind::L1).unwrap();
        assert!((v - 0.5 * (v0 + v1)).abs() < 1e-12);
        for ((a, b), c) in g.tensors.iter().flatten().zip(g0.tensors.iter().flatten()).zip(g1.tensors.iter().flatten()) {
            assert!((a - 0.5 * (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn archive_round_trip_and_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.slsr");
        let mut p = perturbed(ModelConfig::toy(), 9);
        p.meta.stage = Some(Stage::MrFinetune);
        p.meta.step = 42;
        p.meta.lineage = vec![Stage::VideoPretrain, Stage::MrFinetune];
        p.save(&path).unwrap();
        let back = ModelParams::load_for(&path, &ModelConfig::toy()).unwrap();
        assert_eq!(back, p);
        let (l, r) = (frame(10, 10, 1), frame(10, 10, 2));
        let c = TargetCoordinate::new(1.0, 3).unwrap();
        assert_eq!(back.forward(&l, &r, &c).unwrap(), p.forward(&l, &r, &c).unwrap());

        let mut other = ModelConfig::toy();
        other.feature_dim = 4;
        assert!(matches!(ModelParams::load_for(&path, &other), Err(Error::Compatibility(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let p = perturbed(ModelConfig::toy(), 2);
        let (l, r) = (frame(12, 10, 4), frame(12, 10, 5));
        let c = TargetCoordinate::new(0.7, 2).unwrap();
        assert_eq!(p.forward(&l, &r, &c).unwrap(), p.forward(&l, &r, &c).unwrap());
    }

    #[test]
    fn stage_tags() {
        assert_eq!(serde_json::to_string(&Stage::VideoPretrain).unwrap(), "\"video-pretrain\"");
        assert_eq!("ssf".parse::<Stage>().unwrap(), Stage::Selfsup);
    }
}
