//! The four-module pose network: feature extractor, domain adaptation
//! network (DAN), keypoint head and domain discriminator.
//!
//! ```text
//! image -> extractor -+-> DAN -> keypoint head -> heatmaps
//!                     |
//!                     +-> discriminator -> (y_hat, z_hat)
//! ```
//!
//! The discriminator taps the extractor output by default; `DiscTap::Dan`
//! moves the branch point after the adapter.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::{sigmoid, HeatmapStack};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, SeCache, SqueezeExcite, Tensor};
use crate::types::Image;

/// Clamp applied to discriminator probabilities.
pub const DOMAIN_EPS: f64 = 1e-7;
/// Initial bias of the heatmap logits, so untrained maps start near zero.
const HEAD_BIAS_INIT: f64 = -4.0;
const SE_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscTap {
    Extractor,
    Dan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of each stride-2 extractor stage.
    pub stage_channels: Vec<usize>,
    pub dan_width: usize,
    pub use_dan: bool,
    pub head_width: usize,
    pub keypoints: usize,
    pub disc_hidden: usize,
    /// Input pixels per heatmap cell.
    pub stride: usize,
    pub use_se: bool,
    pub disc_tap: DiscTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            stage_channels: vec![8, 16, 32, 32],
            dan_width: 32,
            use_dan: true,
            head_width: 24,
            keypoints: 19,
            disc_hidden: 32,
            stride: 4,
            use_se: false,
            disc_tap: DiscTap::Extractor,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.keypoints == 0 {
            return bad("model needs at least one keypoint".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("extractor needs at least one stage with positive width".into());
        }
        if self.input_channels == 0 || self.head_width == 0 || self.disc_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.use_dan && self.dan_width == 0 {
            return bad("DAN width must be positive".into());
        }
        if self.stride == 0 || self.input_height % self.stride != 0 || self.input_width % self.stride != 0 {
            return bad(format!(
                "stride {} must divide the input size {}x{}",
                self.stride, self.input_height, self.input_width
            ));
        }
        if !self.stride.is_power_of_two() {
            return bad(format!("stride {} must be a power of two", self.stride));
        }
        let down = 1usize << self.stage_channels.len();
        if self.input_height % down != 0 || self.input_width % down != 0 {
            return bad(format!(
                "{} stride-2 stages need the input size to be a multiple of {down}",
                self.stage_channels.len()
            ));
        }
        if self.stride > down {
            return bad(format!("stride {} exceeds the extractor downsampling {down}", self.stride));
        }
        Ok(())
    }

    pub fn upsample_blocks(&self) -> usize {
        let down = 1usize << self.stage_channels.len();
        (down / self.stride).trailing_zeros() as usize
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_height / self.stride, self.input_width / self.stride)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// Parameter groups, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Extractor = 0,
    Dan = 1,
    Head = 2,
    Discriminator = 3,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Extractor, Group::Dan, Group::Head, Group::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Group::Extractor => "extractor",
            Group::Dan => "dan",
            Group::Head => "head",
            Group::Discriminator => "discriminator",
        }
    }
}

/// Domain discriminator output, both probabilities clamped into `(eps, 1 - eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainPrediction {
    /// Probability that the input is an animal.
    pub y_hat: f64,
    /// Probability that the input is a pose-unlabeled target sample.
    pub z_hat: f64,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<(Conv2d, Option<SqueezeExcite>)>,
    dan: Option<(Conv2d, Conv2d)>,
    ups: Vec<ConvTranspose2d>,
    head_out: Conv2d,
    disc: (Linear, Linear),
    sizes: [usize; 4],
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut off = 0;
        let mut stages = Vec::new();
        let mut in_c = c.input_channels;
        for &out_c in &c.stage_channels {
            let conv = Conv2d { in_c, out_c, k: 3, stride: 2, pad: 1, offset: off };
            off += conv.param_count();
            let se = if c.use_se {
                let se = SqueezeExcite::new(out_c, SE_REDUCTION, off);
                off += se.param_count();
                Some(se)
            } else {
                None
            };
            stages.push((conv, se));
            in_c = out_c;
        }
        let extractor = off;
        let feat = c.feature_channels();

        let dan = if c.use_dan {
            let a = Conv2d { in_c: feat, out_c: c.dan_width, k: 1, stride: 1, pad: 0, offset: 0 };
            let b = Conv2d { in_c: c.dan_width, out_c: feat, k: 1, stride: 1, pad: 0, offset: a.param_count() };
            Some((a, b))
        } else {
            None
        };
        let dan_size = dan.map_or(0, |(a, b)| a.param_count() + b.param_count());

        let mut off = 0;
        let mut ups = Vec::new();
        let mut in_c = feat;
        for _ in 0..c.upsample_blocks() {
            let up = ConvTranspose2d { in_c, out_c: c.head_width, k: 4, stride: 2, pad: 1, offset: off };
            off += up.param_count();
            ups.push(up);
            in_c = c.head_width;
        }
        let head_out = Conv2d { in_c, out_c: c.keypoints, k: 1, stride: 1, pad: 0, offset: off };
        off += head_out.param_count();
        let head = off;

        let d1 = Linear { in_f: feat, out_f: c.disc_hidden, offset: 0 };
        let d2 = Linear { in_f: c.disc_hidden, out_f: 2, offset: d1.param_count() };
        let disc_size = d1.param_count() + d2.param_count();

        Layout {
            stages,
            dan,
            ups,
            head_out,
            disc: (d1, d2),
            sizes: [extractor, dan_size, head, disc_size],
        }
    }
}

/// Per-group gradient (or update) vectors with the model's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrads(pub [Vec<f64>; 4]);

impl GroupGrads {
    pub fn zeros_like(model: &Model) -> Self {
        GroupGrads(model.params.clone().map(|g| vec![0.0; g.len()]))
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.0[g as usize]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<f64> {
        &mut self.0[g as usize]
    }

    pub fn add_assign(&mut self, other: &GroupGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for x in g {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self, g: Group) -> f64 {
        self.group(g).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// How upstream gradients are routed through the two branches.
///
/// `pose` multiplies the heatmap-branch gradient everywhere. `discriminator`
/// multiplies the domain-loss gradient on discriminator parameters, and
/// `reversal` multiplies the same gradient where it enters the shared
/// features. Plain backpropagation is `{1, 1, 1}`; gradient reversal uses a
/// negative `reversal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchScales {
    pub pose: f64,
    pub discriminator: f64,
    pub reversal: f64,
}

impl BranchScales {
    pub const PLAIN: BranchScales = BranchScales {
        pose: 1.0,
        discriminator: 1.0,
        reversal: 1.0,
    };
}

/// One forward result.
#[derive(Debug, Clone)]
pub struct Output {
    pub heatmaps: HeatmapStack,
    pub domain: DomainPrediction,
}

/// Saved activations needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    // post-ReLU conv outputs, and the SE output when enabled
    stage_act: Vec<Tensor>,
    stage_se: Vec<Option<(Tensor, SeCache)>>,
    dan_hidden: Option<Tensor>,
    pose_feat: Tensor,
    up_act: Vec<Tensor>,
    disc_in: Vec<f64>,
    disc_hidden: Vec<f64>,
    disc_sig: [f64; 2],
    heat_prob: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: [Vec<f64>; 4],
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.seed == other.seed && self.params == other.params
    }
}

impl Model {
    /// Builds a model with deterministic initialisation from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = layout.sizes.map(|n| vec![0.0; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (conv, se) in &layout.stages {
            conv.init(&mut params[0], &mut rng, 1.0);
            if let Some(se) = se {
                se.init(&mut params[0], &mut rng);
            }
        }
        if let Some((a, b)) = &layout.dan {
            a.init(&mut params[1], &mut rng, 1.0);
            // near-identity residual adapter at start
            b.init(&mut params[1], &mut rng, 0.1);
        }
        for up in &layout.ups {
            up.init(&mut params[2], &mut rng, 1.0);
        }
        layout.head_out.init(&mut params[2], &mut rng, 1.0);
        let nw = layout.head_out.in_c * layout.head_out.out_c;
        for b in &mut params[2][layout.head_out.offset + nw..] {
            *b = HEAD_BIAS_INIT;
        }
        layout.disc.0.init(&mut params[3], &mut rng, 1.0);
        layout.disc.1.init(&mut params[3], &mut rng, 0.5);
        Ok(Model {
            config: config.clone(),
            seed,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: ModelConfig, seed: u64, params: [Vec<f64>; 4]) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        for (g, (have, want)) in params.iter().map(Vec::len).zip(layout.sizes).enumerate() {
            if have != want {
                return Err(Error::Shape(format!(
                    "group {} has {have} parameters, config implies {want}",
                    Group::ALL[g].name()
                )));
            }
        }
        Ok(Model {
            config,
            seed,
            params,
            layout,
        })
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.params[g as usize]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.params[g as usize]
    }

    /// Biases of the heatmap output layer, one per keypoint. With every other
    /// head parameter zeroed the maps are flat and each decoded confidence is
    /// `sigmoid(bias)`, which makes confidence easy to pin in tests.
    pub fn heatmap_bias_mut(&mut self) -> &mut [f64] {
        let h = &self.layout.head_out;
        let start = h.offset + h.in_c * h.out_c;
        &mut self.params[Group::Head as usize][start..start + h.out_c]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter, in group order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for g in &self.params {
            for v in g {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.config;
        if img.height != c.input_height || img.width != c.input_width || img.channels != c.input_channels {
            return Err(Error::Shape(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                img.channels, img.height, img.width, c.input_channels, c.input_height, c.input_width
            )));
        }
        Ok(())
    }

    pub fn forward_one(&self, img: &Image) -> Result<(Output, Trace)> {
        self.check_image(img)?;
        let [pe, pd, ph, pdisc] = &self.params;
        let input = Tensor::from_vec(img.channels, img.height, img.width, img.data.clone());

        let mut x = input.clone();
        let mut stage_act = Vec::with_capacity(self.layout.stages.len());
        let mut stage_se = Vec::with_capacity(self.layout.stages.len());
        for (conv, se) in &self.layout.stages {
            let a = conv.forward(pe, &x).relu();
            match se {
                Some(se) => {
                    let (out, cache) = se.forward(pe, &a);
                    stage_act.push(a);
                    stage_se.push(Some((out.clone(), cache)));
                    x = out;
                }
                None => {
                    stage_act.push(a.clone());
                    stage_se.push(None);
                    x = a;
                }
            }
        }
        let feat = x;

        let (pose_feat, dan_hidden) = match &self.layout.dan {
            Some((a, b)) => {
                let hid = a.forward(pd, &feat).relu();
                let mut out = b.forward(pd, &hid);
                out.add_assign(&feat);
                (out.relu(), Some(hid))
            }
            None => (feat.clone(), None),
        };

        let mut h = pose_feat.clone();
        let mut up_act = Vec::with_capacity(self.layout.ups.len());
        for up in &self.layout.ups {
            h = up.forward(ph, &h).relu();
            up_act.push(h.clone());
        }
        let logits = self.layout.head_out.forward(ph, &h);
        let heat_prob: Vec<f64> = logits.data.iter().map(|&l| sigmoid(l)).collect();
        let heatmaps = HeatmapStack::from_probabilities(logits.c, logits.h, logits.w, heat_prob.clone())?;

        let tap = match self.config.disc_tap {
            DiscTap::Extractor => &feat,
            DiscTap::Dan => &pose_feat,
        };
        let disc_in = tap.global_avg_pool();
        let disc_hidden: Vec<f64> = self.layout.disc.0.forward(pdisc, &disc_in).into_iter().map(|v| v.max(0.0)).collect();
        let dl = self.layout.disc.1.forward(pdisc, &disc_hidden);
        let disc_sig = [sigmoid(dl[0]), sigmoid(dl[1])];
        let domain = DomainPrediction {
            y_hat: disc_sig[0].clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS),
            z_hat: disc_sig[1].clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS),
        };

        let trace = Trace {
            input,
            stage_act,
            stage_se,
            dan_hidden,
            pose_feat,
            up_act,
            disc_in,
            disc_hidden,
            disc_sig,
            heat_prob,
        };
        Ok((Output { heatmaps, domain }, trace))
    }

    /// Batch forward; each item is independent.
    pub fn forward(&self, images: &[&Image]) -> Result<Vec<Output>> {
        images.iter().map(|img| self.forward_one(img).map(|(o, _)| o)).collect()
    }

    pub fn forward_traced(&self, images: &[&Image]) -> Result<Vec<(Output, Trace)>> {
        images.iter().map(|img| self.forward_one(img)).collect()
    }

    /// Accumulates into `grads` the gradient of a loss whose derivatives with
    /// respect to this item's outputs are `d_heat` (per heatmap probability)
    /// and `d_domain` (w.r.t. the clamped `y_hat`, `z_hat`).
    pub fn backward(
        &self,
        trace: &Trace,
        d_heat: Option<&[f64]>,
        d_domain: Option<[f64; 2]>,
        scales: BranchScales,
        grads: &mut GroupGrads,
    ) {
        let [pe, pd, ph, pdisc] = &self.params;
        let feat_c = self.config.feature_channels();
        let (fh, fw) = (trace.pose_feat.h, trace.pose_feat.w);

        // discriminator branch, unscaled into a scratch buffer
        let mut d_tap: Option<Tensor> = None;
        if let Some(dd) = d_domain {
            let mut dlogit = [0.0; 2];
            for j in 0..2 {
                let s = trace.disc_sig[j];
                if s > DOMAIN_EPS && s < 1.0 - DOMAIN_EPS {
                    dlogit[j] = dd[j] * s * (1.0 - s);
                }
            }
            let mut scratch = vec![0.0; pdisc.len()];
            let (d1, d2) = &self.layout.disc;
            let dh = d2.backward(pdisc, &trace.disc_hidden, &dlogit, &mut scratch);
            let dh: Vec<f64> = dh
                .iter()
                .zip(&trace.disc_hidden)
                .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
                .collect();
            let dpool = d1.backward(pdisc, &trace.disc_in, &dh, &mut scratch);
            for (g, s) in grads.0[3].iter_mut().zip(&scratch) {
                *g += scales.discriminator * s;
            }
            if scales.reversal != 0.0 {
                let mut t = Tensor::zeros(feat_c, fh, fw);
                let p = (fh * fw) as f64;
                for c in 0..feat_c {
                    let v = scales.reversal * dpool[c] / p;
                    t.data[c * fh * fw..(c + 1) * fh * fw].fill(v);
                }
                d_tap = Some(t);
            }
        }

        // pose branch down to the DAN output
        let mut d_pose_feat: Option<Tensor> = None;
        if let Some(dh) = d_heat {
            let (lc, lh, lw) = (self.config.keypoints, self.config.heatmap_size().0, self.config.heatmap_size().1);
            let dlogit = Tensor::from_vec(
                lc,
                lh,
                lw,
                dh.iter()
                    .zip(&trace.heat_prob)
                    .map(|(g, p)| scales.pose * g * p * (1.0 - p))
                    .collect(),
            );
            let head_in = trace.up_act.last().unwrap_or(&trace.pose_feat);
            let mut g = self.layout.head_out.backward(ph, head_in, &dlogit, &mut grads.0[2]);
            for (i, up) in self.layout.ups.iter().enumerate().rev() {
                g = Tensor::relu_backward(&trace.up_act[i], &g);
                let x = if i == 0 { &trace.pose_feat } else { &trace.up_act[i - 1] };
                g = up.backward(ph, x, &g, &mut grads.0[2]);
            }
            d_pose_feat = Some(g);
        }

        if self.config.disc_tap == DiscTap::Dan {
            d_pose_feat = sum_opt(d_pose_feat, d_tap.take());
        }

        // through the adapter to the extractor output
        let feat = trace.stage_se.last().and_then(|s| s.as_ref().map(|(t, _)| t)).unwrap_or_else(|| trace.stage_act.last().expect("one stage"));
        let mut d_feat: Option<Tensor> = None;
        if let Some(g) = d_pose_feat {
            match (&self.layout.dan, &trace.dan_hidden) {
                (Some((a, b)), Some(hid)) => {
                    let g = Tensor::relu_backward(&trace.pose_feat, &g);
                    let dh = b.backward(pd, hid, &g, &mut grads.0[1]);
                    let dh = Tensor::relu_backward(hid, &dh);
                    let mut dx = a.backward(pd, feat, &dh, &mut grads.0[1]);
                    dx.add_assign(&g);
                    d_feat = Some(dx);
                }
                _ => d_feat = Some(g),
            }
        }
        d_feat = sum_opt(d_feat, d_tap);

        let Some(mut g) = d_feat else { return };
        for (i, (conv, se)) in self.layout.stages.iter().enumerate().rev() {
            if let (Some(se), Some((_, cache))) = (se, &trace.stage_se[i]) {
                g = se.backward(pe, &trace.stage_act[i], cache, &g, &mut grads.0[0]);
            }
            g = Tensor::relu_backward(&trace.stage_act[i], &g);
            let x = if i == 0 {
                &trace.input
            } else {
                trace.stage_se[i - 1].as_ref().map(|(t, _)| t).unwrap_or(&trace.stage_act[i - 1])
            };
            g = conv.backward(pe, x, &g, &mut grads.0[0]);
        }
    }
}

fn sum_opt(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    }
}

/// Training-stage bookkeeping stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    /// `"wscda"`, `"pplo"` or `"init"`.
    pub phase: String,
    pub stage: usize,
    pub epoch: usize,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Groups {
    extractor: Vec<f64>,
    dan: Vec<f64>,
    head: Vec<f64>,
    discriminator: Vec<f64>,
}

/// Self-describing checkpoint archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub checksum: String,
    pub meta: StageMeta,
    groups: Groups,
}

pub const CHECKPOINT_FORMAT: &str = "cdapose-checkpoint";

impl Checkpoint {
    pub fn new(model: &Model, meta: StageMeta) -> Self {
        let [e, d, h, c] = model.params.clone();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: model.config.clone(),
            seed: model.seed,
            checksum: model.checksum(),
            meta,
            groups: Groups {
                extractor: e,
                dan: d,
                head: h,
                discriminator: c,
            },
        }
    }

    pub fn model(&self) -> Result<Model> {
        let g = self.groups.clone();
        let m = Model::from_parts(self.config.clone(), self.seed, [g.extractor, g.dan, g.head, g.discriminator])?;
        if m.checksum() != self.checksum {
            return Err(Error::Contract("checkpoint checksum does not match its parameters".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&s)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("{} is not a checkpoint", path.display())));
        }
        Ok(c)
    }
}
