//! AdamW training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adamw_step, AdamW, OptimState};

use crate::data::{pnm, Batcher, CropFlip, Dataset, PairedSample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossInputs, LossReport};
use crate::metrics::MetricReport;
use crate::model::{self, ForwardOptions, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{grad_check_screened, GradCheckReport, Rng, RngState, Tape, Tensor, Var};
use crate::physics;

const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Optimizer steps; when absent, `epochs` full passes are run.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Square random crop applied to training pairs.
    pub crop: Option<usize>,
    pub flip: bool,
    /// Size of the held-out synthetic set used by evaluation.
    pub eval_count: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: SyntheticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Published schedule: AdamW at 4.5e-6, batch 32, 500 epochs, 256x256.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 4.5e-6,
            batch: 32,
            steps: None,
            epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            crop: Some(256),
            flip: true,
            eval_count: 64,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: SyntheticConfig { height: 256, width: 256, sigma_field: 64.0, count: 1024, ..SyntheticConfig::default() },
        }
    }

    /// Desk-scale preset: 3x32x32 synthetic pairs, 200 steps at lr 1e-3.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 4,
            steps: Some(200),
            epochs: 0,
            crop: None,
            eval_count: 32,
            model: ModelConfig::toy(),
            data: SyntheticConfig::default(),
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if let Some(c) = self.crop {
            if self.model.latent_size(c).is_none() {
                return Err(Error::Config(format!("crop {c} is not divisible by 2^{}", self.model.stages())));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.steps.unwrap_or(self.epochs * (samples / self.batch.max(1)))
    }

    /// Training set described by `data`.
    pub fn train_set(&self) -> Result<Dataset> {
        Dataset::synthetic(&self.data)
    }

    /// Held-out synthetic set: same recipe, disjoint seed.
    pub fn eval_set(&self) -> Result<Dataset> {
        let cfg = SyntheticConfig { seed: self.data.seed ^ 0x9e37_79b9_7f4a_7c15, count: self.eval_count, ..self.data.clone() };
        Dataset::synthetic(&cfg)
    }
}

/// Loss value and parameter gradients for one pair.
pub fn sample_gradients(
    params: &ModelParams,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    sample: &PairedSample,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, true);
    let deg = tape.constant(sample.degraded.clone());
    let clear = tape.constant(sample.clear.clone());
    let out = model::forward_on(&mut tape, &pv, mcfg, deg, &ForwardOptions::default())?;
    let inputs = LossInputs { enhanced: out.enhanced, t_hat: out.t_hat, b_hat: out.b_hat, clear, deg };
    let loss = losses::total_loss_on(&mut tape, &inputs, lcfg, None)?;
    let report = loss.report(&tape);
    if !report.is_finite() {
        return Ok((report, Vec::new()));
    }
    let mut grads = tape.backward(loss.total)?;
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    let g = names
        .iter()
        .zip(params.iter())
        .map(|(n, (_, t))| {
            let var = pv.get(n).expect("bound above");
            grads.take(var).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((report, g))
}

/// Training state that can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub optim: OptimState,
    /// Number of completed steps.
    pub step: usize,
    pub history: Vec<LossReport>,
    augment: Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model::init_params(&cfg.model, cfg.seed)?;
        let optim = OptimState::new(&params);
        let augment = Rng::with_stream(cfg.seed, AUGMENT_STREAM);
        Ok(Trainer { cfg, params, optim, step: 0, history: Vec::new(), augment })
    }

    pub fn augment_state(&self) -> RngState {
        self.augment.state()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            optim: Some(self.optim.clone()),
            step: self.step as u64,
            rng: Some(self.augment.state()),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        ck.params.check(&ck.config.model)?;
        let optim = ck.optim.unwrap_or_else(|| OptimState::new(&ck.params));
        let augment = match &ck.rng {
            Some(s) => Rng::from_state(s).ok_or_else(|| Error::Config("unreadable augmentation state".into()))?,
            None => Rng::with_stream(ck.config.seed, AUGMENT_STREAM),
        };
        Ok(Trainer { cfg: ck.config, params: ck.params, optim, step: ck.step as usize, history: ck.history, augment })
    }

    fn augment(&mut self, s: &PairedSample) -> Result<PairedSample> {
        let (h, w) = s.size();
        let size = self.cfg.crop.unwrap_or(h.min(w));
        let mut cf = CropFlip::sample(h, w, size, &mut self.augment)?;
        cf.flip &= self.cfg.flip;
        cf.apply_sample(s)
    }

    /// Runs one optimizer step on the next batch of `data`.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossReport> {
        let batcher = Batcher::new(self.cfg.seed, data.len(), self.cfg.batch)?;
        let batch = batcher.at_step(self.step);
        let samples = batch.iter().map(|&i| self.augment(&data.samples[i])).collect::<Result<Vec<_>>>()?;
        let (params, mcfg, lcfg) = (&self.params, &self.cfg.model, &self.cfg.loss);
        let results = samples
            .par_iter()
            .map(|s| sample_gradients(params, mcfg, lcfg, s))
            .collect::<Result<Vec<_>>>()?;
        let reports: Vec<LossReport> = results.iter().map(|(r, _)| *r).collect();
        let report = LossReport::mean(&reports);
        let step_no = self.step + 1;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss { step: step_no, report });
        }
        // fixed-order reduction keeps the sum independent of scheduling
        let scale = 1.0 / results.len() as f32;
        let mut grads: Vec<Tensor> = results[0].1.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        for (_, g) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += *b * scale);
            }
        }
        adamw_step(&mut self.params, &grads, &mut self.optim, &self.cfg.optimizer())?;
        self.step = step_no;
        self.history.push(report);
        Ok(report)
    }

    /// Trains until `total_steps` have completed, calling `on_step` after each.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let total = self.cfg.total_steps(data.len());
        while self.step < total {
            self.train_step(data)?;
            on_step(self)?;
        }
        Ok(())
    }
}

/// Trains from scratch; returns the final parameters and per-step losses.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(ModelParams, Vec<LossReport>)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run(data, |_| Ok(()))?;
    Ok((t.params, t.history))
}

/// Mean of `history` totals over trailing windows of `window` steps.
pub fn smoothed_totals(history: &[LossReport], window: usize) -> Vec<f64> {
    let w = window.max(1);
    history
        .chunks(w)
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Enhanced versus clear.
    pub enhanced: MetricReport,
    /// Degraded versus clear: the do-nothing baseline.
    pub degraded: MetricReport,
    pub loss: LossReport,
    pub count: usize,
}

/// Scores `predict(sample)` against the clear images. Predictions are
/// clamped and rounded to 8 bits, as a saved output would be.
pub fn evaluate_with<F>(data: &Dataset, predict: F) -> Result<(MetricReport, MetricReport)>
where
    F: Fn(&PairedSample) -> Result<Tensor> + Sync,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let rows = data
        .samples
        .par_iter()
        .map(|s| {
            let out = pnm::quantize_image(&predict(s)?);
            Ok((MetricReport::compute(&out, &s.clear)?, MetricReport::compute(&s.degraded, &s.clear)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (enh, deg): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((MetricReport::mean(&enh), MetricReport::mean(&deg)))
}

/// Mean metrics and losses of the model over `data`.
pub fn evaluate(params: &ModelParams, mcfg: &ModelConfig, lcfg: &LossConfig, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let rows = data
        .samples
        .par_iter()
        .map(|s| {
            let out = model::forward(params, mcfg, &s.degraded, &ForwardOptions::default())?;
            let loss = losses::total_loss(&out.enhanced, &out.t_hat, &out.b_hat, &s.clear, &s.degraded, lcfg)?;
            let enhanced = pnm::quantize_image(&physics::finalize(&out.enhanced));
            Ok((
                MetricReport::compute(&enhanced, &s.clear)?,
                MetricReport::compute(&s.degraded, &s.clear)?,
                loss,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let enh: Vec<_> = rows.iter().map(|r| r.0).collect();
    let deg: Vec<_> = rows.iter().map(|r| r.1).collect();
    let loss: Vec<_> = rows.iter().map(|r| r.2).collect();
    Ok(EvalReport {
        enhanced: MetricReport::mean(&enh),
        degraded: MetricReport::mean(&deg),
        loss: LossReport::mean(&loss),
        count: data.len(),
    })
}

/// Central-difference check of the full training loss with respect to `n`
/// sampled parameter coordinates, in double precision, on the first pair of
/// `cfg.data`. The transmission target is pinned at the initial point since
/// the loss treats it as a constant.
pub fn gradcheck_total_loss(cfg: &TrainConfig, h: f64, n: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let data = SyntheticConfig { count: 1, ..cfg.data.clone() };
    let sample = Dataset::synthetic(&data)?.samples.remove(0);
    let params = model::init_params::<f64>(&cfg.model, cfg.seed)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let deg: Tensor<f64> = sample.degraded.cast();
    let clear: Tensor<f64> = sample.clear.cast();
    let base = model::forward(&params, &cfg.model, &deg, &ForwardOptions::default())?;
    let target = physics::expected_transmission(&deg, &clear, &base.b_hat, cfg.loss.eps)?;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let pv: ParamVars = names.iter().cloned().zip(vars.iter().copied()).collect();
        let d = tape.constant(deg.clone());
        let c = tape.constant(clear.clone());
        let out = model::forward_on(tape, &pv, &cfg.model, d, &ForwardOptions::default())?;
        let inputs = LossInputs { enhanced: out.enhanced, t_hat: out.t_hat, b_hat: out.b_hat, clear: c, deg: d };
        Ok(losses::total_loss_on(tape, &inputs, &cfg.loss, Some(&target))?.total)
    };
    grad_check_screened(f, &tensors, h, n, &mut Rng::new(seed))
}
