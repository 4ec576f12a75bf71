//! Encoder, capsule stream, latent fusion, decoder, physics estimator and
//! enhancer, wired into one forward pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::capsule::{self, CapsuleConfig, CapsuleTrace, CapsuleVars};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, AttentionVars};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::physics;

/// How the capsule features `C` are merged into the latent `X`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `X + C`
    #[default]
    Residual,
    /// `Conv1x1([X; C])`
    Concat,
    /// `C`
    Direct,
}

/// What turns the decoder output into the enhanced image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancerMode {
    /// Parameter-free inversion of the formation model.
    #[default]
    Physics,
    /// Decoder output used as is.
    None,
    /// Learned 3x3 convolution over `[tilde; T; B]`.
    Conv,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Residual, FusionMode::Concat, FusionMode::Direct];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Residual => "residual",
            FusionMode::Concat => "concat",
            FusionMode::Direct => "direct",
        }
    }
}

impl EnhancerMode {
    pub const ALL: [EnhancerMode; 3] = [EnhancerMode::Physics, EnhancerMode::None, EnhancerMode::Conv];

    pub fn name(self) -> &'static str {
        match self {
            EnhancerMode::Physics => "physics",
            EnhancerMode::None => "none",
            EnhancerMode::Conv => "conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square training input.
    pub image_size: usize,
    /// Output channels of each encoder stage; the last is the latent width
    /// `C_X`. The decoder mirrors it.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub norm_eps: f64,
    pub fusion: FusionMode,
    pub enhancer: EnhancerMode,
    pub capsule: CapsuleConfig,
    pub estimator_channels: Vec<usize>,
    pub t_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            channels: vec![64, 128, 128, 256],
            groups: 32,
            norm_eps: 1e-6,
            fusion: FusionMode::Residual,
            enhancer: EnhancerMode::Physics,
            capsule: CapsuleConfig::default(),
            estimator_channels: vec![32, 64, 64, 32],
            t_min: physics::T_MIN,
        }
    }
}

impl ModelConfig {
    /// Small shapes with every structural relation of the default kept.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            channels: vec![16, 32],
            groups: 8,
            capsule: CapsuleConfig { beta: 8, gamma: 8, c_u: 8, c_u_hat: 8, kernel: 4, routing_iters: 3 },
            estimator_channels: vec![16, 16],
            ..ModelConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn latent_size(&self, image: usize) -> Option<usize> {
        let f = 1usize << self.stages();
        (image % f == 0 && image >= f).then_some(image / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("encoder channels must be non-empty and positive: {:?}", self.channels)));
        }
        if self.groups == 0 || self.channels.iter().any(|c| c % self.groups != 0) {
            return Err(Error::Config(format!("{} groups do not divide channels {:?}", self.groups, self.channels)));
        }
        if self.estimator_channels.contains(&0) {
            return Err(Error::Config("estimator channels must be positive".into()));
        }
        if !(self.t_min > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("t_min and norm_eps must be positive".into()));
        }
        self.capsule.validate()?;
        let latent = self
            .latent_size(self.image_size)
            .ok_or_else(|| Error::Config(format!("image size {} not divisible by 2^{}", self.image_size, self.stages())))?;
        if self.capsule.grid(latent).is_none() {
            return Err(Error::Config(format!("capsule kernel {} exceeds latent {latent}", self.capsule.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kaiming(usize),
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.push(format!("{prefix}.w"), vec![c_out, c_in, k, k], Init::Kaiming(c_in * k * k));
        self.push(format!("{prefix}.b"), vec![c_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.g"), vec![c], Init::Ones);
        self.push(format!("{prefix}.b"), vec![c], Init::Zeros);
    }

    fn resnet(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.norm(&format!("{prefix}.norm1"), c_in);
        self.conv(&format!("{prefix}.conv1"), c_out, c_in, 3);
        self.norm(&format!("{prefix}.norm2"), c_out);
        self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
        if c_in != c_out {
            self.conv(&format!("{prefix}.skip"), c_out, c_in, 1);
        }
    }
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout::default();
    let ch = &cfg.channels;
    let cx = cfg.latent_channels();
    l.conv("enc.stem", ch[0], 3, 3);
    let mut prev = ch[0];
    for (i, &c) in ch.iter().enumerate() {
        l.resnet(&format!("enc.down{i}.res"), prev, c);
        l.conv(&format!("enc.down{i}.down"), c, c, 3);
        prev = c;
    }
    for p in ["q", "k", "v"] {
        l.conv(&format!("enc.attn.{p}"), cx, cx, 1);
    }
    l.norm("enc.out.norm", cx);
    l.conv("enc.out.conv", cx, cx, 3);

    let cap = &cfg.capsule;
    let k = cap.kernel;
    l.conv("caps.primary", cap.beta * cap.c_u, cx, k);
    l.push("caps.w".into(), vec![cap.beta, cap.gamma, cap.c_u_hat, cap.c_u], Init::Kaiming(cap.c_u));
    l.push("caps.proj.w".into(), vec![cap.beta, cx, k, k], Init::Kaiming(cap.beta * k * k));
    l.push("caps.proj.b".into(), vec![cx], Init::Zeros);
    if cfg.fusion == FusionMode::Concat {
        l.conv("fuse", cx, 2 * cx, 1);
    }

    let mut prev = cx;
    for (i, &c) in ch.iter().rev().enumerate() {
        l.resnet(&format!("dec.up{i}.res"), prev, c);
        l.conv(&format!("dec.up{i}.conv"), c, c, 3);
        prev = c;
    }
    l.norm("dec.out.norm", prev);
    l.conv("dec.out.conv", 3, prev, 3);

    let mut prev = 3;
    for (i, &c) in cfg.estimator_channels.iter().chain([2].iter()).enumerate() {
        l.conv(&format!("est.conv{i}"), c, prev, 3);
        prev = c;
    }
    if cfg.enhancer == EnhancerMode::Conv {
        l.conv("enh.conv", 3, 5, 3);
    }
    l
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S: Real = f32> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Real> Default for ModelParams<S> {
    fn default() -> Self {
        ModelParams { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Real> ModelParams<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that names and shapes match what `cfg` expects.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg).0;
        if want.len() != self.entries.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, found {}", want.len(), self.entries.len())));
        }
        for spec in want {
            match self.get(&spec.name) {
                None => return Err(Error::Config(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape`, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        ParamVars { vars }
    }
}

/// Number of scalar parameters `cfg` allocates.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg).0.iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Deterministic initialization: Kaiming-uniform weights, zero biases, unit
/// norm gains.
pub fn init_params<S: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(seed, INIT_STREAM);
    let mut params = ModelParams::new();
    for spec in layout(cfg).0 {
        let t = match spec.init {
            Init::Kaiming(fan_in) => nn::kaiming_uniform(&spec.shape, fan_in, &mut rng),
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::ones(spec.shape),
        };
        params.insert(spec.name, t)?;
    }
    Ok(params)
}

const INIT_STREAM: u64 = 1;

/// Parameters bound to a tape, looked up by name.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { vars: iter.into_iter().collect() }
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// `(name, var)` pairs in no particular order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

struct Net<'a, S: Real> {
    tape: &'a mut Tape<S>,
    p: &'a ParamVars,
    cfg: &'a ModelConfig,
}

impl<S: Real> Net<'_, S> {
    fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p.get(&format!("{prefix}.w"))?;
        let b = self.p.get(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn norm_act(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p.get(&format!("{prefix}.g"))?;
        let b = self.p.get(&format!("{prefix}.b"))?;
        let y = self.tape.group_norm(x, self.cfg.groups, g, b, self.cfg.norm_eps)?;
        self.tape.silu(y)
    }

    fn resnet(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.norm_act(&format!("{prefix}.norm1"), x)?;
        let h = self.conv(&format!("{prefix}.conv1"), h, 1, 1)?;
        let h = self.norm_act(&format!("{prefix}.norm2"), h)?;
        let h = self.conv(&format!("{prefix}.conv2"), h, 1, 1)?;
        let skip_name = format!("{prefix}.skip");
        let skip = if self.p.vars.contains_key(&format!("{skip_name}.w")) { self.conv(&skip_name, x, 1, 0)? } else { x };
        self.tape.add(skip, h)
    }
}

fn check_input<S: Real>(tape: &Tape<S>, cfg: &ModelConfig, img: Var) -> Result<()> {
    let s = tape.shape(img);
    match s {
        [3, h, w] if h == w && cfg.latent_size(*h).is_some() => Ok(()),
        [3, h, w] if h != w => Err(Error::shape("forward", format!("input must be square, got {h}x{w}"))),
        _ => Err(Error::shape(
            "forward",
            format!("input {s:?} must be [3,S,S] with S divisible by 2^{}", cfg.stages()),
        )),
    }
}

/// Degraded image `[3,S,S]` to latent `X` of shape `[C_X, S/2^N, S/2^N]`.
pub fn encode<S: Real>(tape: &mut Tape<S>, p: &ParamVars, cfg: &ModelConfig, img: Var) -> Result<Var> {
    check_input(tape, cfg, img)?;
    let mut n = Net { tape, p, cfg };
    let mut h = n.conv("enc.stem", img, 1, 1)?;
    for i in 0..cfg.stages() {
        h = n.resnet(&format!("enc.down{i}.res"), h)?;
        h = n.conv(&format!("enc.down{i}.down"), h, 2, 1)?;
    }
    let attn = AttentionVars {
        q_w: p.get("enc.attn.q.w")?,
        q_b: p.get("enc.attn.q.b")?,
        k_w: p.get("enc.attn.k.w")?,
        k_b: p.get("enc.attn.k.b")?,
        v_w: p.get("enc.attn.v.w")?,
        v_b: p.get("enc.attn.v.b")?,
    };
    let (a, _) = nn::self_attention(n.tape, h, &attn)?;
    let h = n.tape.add(h, a)?;
    let h = n.norm_act("enc.out.norm", h)?;
    n.conv("enc.out.conv", h, 1, 1)
}

pub fn capsule_vars(p: &ParamVars) -> Result<CapsuleVars> {
    Ok(CapsuleVars {
        primary_w: p.get("caps.primary.w")?,
        primary_b: p.get("caps.primary.b")?,
        w: p.get("caps.w")?,
        proj_w: p.get("caps.proj.w")?,
        proj_b: p.get("caps.proj.b")?,
    })
}

pub fn fuse_latent<S: Real>(tape: &mut Tape<S>, p: &ParamVars, mode: FusionMode, x: Var, c: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(c) {
        return Err(Error::shape("fuse_latent", format!("X {:?} vs C {:?}", tape.shape(x), tape.shape(c))));
    }
    match mode {
        FusionMode::Residual => tape.add(x, c),
        FusionMode::Direct => Ok(c),
        FusionMode::Concat => {
            let both = tape.concat(&[x, c], 0)?;
            let (w, b) = (p.get("fuse.w")?, p.get("fuse.b")?);
            tape.conv2d(both, w, Some(b), 1, 0)
        }
    }
}

/// Fused latent to the decoded image `Ĩ` (unbounded).
pub fn decode<S: Real>(tape: &mut Tape<S>, p: &ParamVars, cfg: &ModelConfig, latent: Var) -> Result<Var> {
    let s = tape.shape(latent);
    if s.len() != 3 || s[0] != cfg.latent_channels() {
        return Err(Error::shape("decode", format!("latent {s:?} must have {} channels", cfg.latent_channels())));
    }
    let mut n = Net { tape, p, cfg };
    let mut h = latent;
    for i in 0..cfg.stages() {
        h = n.resnet(&format!("dec.up{i}.res"), h)?;
        h = n.tape.upsample_nearest2(h)?;
        h = n.conv(&format!("dec.up{i}.conv"), h, 1, 1)?;
    }
    let h = n.norm_act("dec.out.norm", h)?;
    n.conv("dec.out.conv", h, 1, 1)
}

/// `(T̂, B̂)`, each `[H,W]` in (0,1).
pub fn physics_estimate<S: Real>(tape: &mut Tape<S>, p: &ParamVars, cfg: &ModelConfig, img: Var) -> Result<(Var, Var)> {
    let s = tape.shape(img).to_vec();
    let [3, h, w] = s[..] else {
        return Err(Error::shape("physics_estimate", format!("expected [3,H,W], got {s:?}")));
    };
    let mut n = Net { tape, p, cfg };
    let layers = cfg.estimator_channels.len() + 1;
    let mut x = img;
    for i in 0..layers {
        x = n.conv(&format!("est.conv{i}"), x, 1, 1)?;
        if i + 1 < layers {
            x = n.tape.silu(x)?;
        }
    }
    let x = tape.sigmoid(x)?;
    let t = tape.slice(x, 0, 0, 1)?;
    let b = tape.slice(x, 0, 1, 1)?;
    Ok((tape.reshape(t, &[h, w])?, tape.reshape(b, &[h, w])?))
}

/// Test and ablation hooks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace `T̂` by this constant map.
    pub force_transmission: Option<f64>,
}

/// Every intermediate the losses and diagnostics need.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub enhanced: Var,
    pub tilde: Var,
    pub t_hat: Var,
    pub b_hat: Var,
    /// Latent after fusion, `X̂`.
    pub latent: Var,
    /// Encoder output `X`.
    pub x: Var,
    pub capsule: CapsuleTrace,
}

pub fn forward_on<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamVars,
    cfg: &ModelConfig,
    deg: Var,
    opts: &ForwardOptions,
) -> Result<ForwardVars> {
    let x = encode(tape, p, cfg, deg)?;
    let (mut t_hat, b_hat) = physics_estimate(tape, p, cfg, deg)?;
    if let Some(t) = opts.force_transmission {
        t_hat = tape.constant(Tensor::full(tape.shape(t_hat).to_vec(), S::from_f64(t)));
    }
    let caps = capsule::capsule_stream(tape, x, &capsule_vars(p)?, &cfg.capsule)?;
    let latent = fuse_latent(tape, p, cfg.fusion, x, caps.features)?;
    let tilde = decode(tape, p, cfg, latent)?;
    let enhanced = match cfg.enhancer {
        EnhancerMode::Physics => physics::enhance_on(tape, tilde, t_hat, b_hat, cfg.t_min)?,
        EnhancerMode::None => tilde,
        EnhancerMode::Conv => {
            let s = tape.shape(t_hat).to_vec();
            let t3 = tape.reshape(t_hat, &[1, s[0], s[1]])?;
            let b3 = tape.reshape(b_hat, &[1, s[0], s[1]])?;
            let stacked = tape.concat(&[tilde, t3, b3], 0)?;
            let (w, b) = (p.get("enh.conv.w")?, p.get("enh.conv.b")?);
            tape.conv2d(stacked, w, Some(b), 1, 1)?
        }
    };
    Ok(ForwardVars { enhanced, tilde, t_hat, b_hat, latent, x, capsule: caps })
}

/// Plain outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<S: Real = f32> {
    pub enhanced: Tensor<S>,
    pub tilde: Tensor<S>,
    pub t_hat: Tensor<S>,
    pub b_hat: Tensor<S>,
    pub latent: Tensor<S>,
}

impl<S: Real> ModelOutput<S> {
    pub fn from_vars(tape: &Tape<S>, v: &ForwardVars) -> Self {
        ModelOutput {
            enhanced: tape.value(v.enhanced).clone(),
            tilde: tape.value(v.tilde).clone(),
            t_hat: tape.value(v.t_hat).clone(),
            b_hat: tape.value(v.b_hat).clone(),
            latent: tape.value(v.latent).clone(),
        }
    }
}

/// Inference on one degraded image.
pub fn forward<S: Real>(params: &ModelParams<S>, cfg: &ModelConfig, deg: &Tensor<S>, opts: &ForwardOptions) -> Result<ModelOutput<S>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let d = tape.constant(deg.clone());
    let v = forward_on(&mut tape, &p, cfg, d, opts)?;
    Ok(ModelOutput::from_vars(&tape, &v))
}
