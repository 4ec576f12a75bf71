//! Ablation matrix: fusion modes, loss configurations and enhancer variants,
//! each trained from the same base configuration and scored on the same
//! held-out set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossTerms, WeightScheme};
use crate::model::{self, EnhancerMode, FusionMode};
use crate::trainer::{self, smoothed_totals, TrainConfig};

/// Window used for the reported final loss.
pub const FINAL_LOSS_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Fusion,
    Loss,
    Enhancer,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Fusion, Axis::Loss, Axis::Enhancer];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Fusion => "fusion",
            Axis::Loss => "loss",
            Axis::Enhancer => "enhancer",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub axis: Axis,
    pub name: String,
    pub config: TrainConfig,
}

fn loss_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let only = |rec, lap, cycle, transmission| LossTerms { rec, lap, cycle, transmission };
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("lap-only".into(), with(&|c| c.loss.terms = only(false, true, false, false))),
        ("rec-only".into(), with(&|c| c.loss.terms = only(true, false, false, false))),
        ("rec+lap".into(), with(&|c| c.loss.terms = only(true, true, false, false))),
        ("no-cycle".into(), with(&|c| c.loss.terms.cycle = false)),
        ("no-transmission".into(), with(&|c| c.loss.terms.transmission = false)),
        ("levels-2".into(), with(&|c| c.loss.levels = 2)),
        ("levels-4".into(), with(&|c| c.loss.levels = 4)),
        ("uniform-weights".into(), with(&|c| c.loss.weights = WeightScheme::Uniform)),
        ("full".into(), base.clone()),
    ]
}

/// The configurations one axis sweeps, derived from `base`.
pub fn variants(axis: Axis, base: &TrainConfig) -> Vec<Variant> {
    let named: Vec<(String, TrainConfig)> = match axis {
        Axis::Fusion => FusionMode::ALL
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.model.fusion = m;
                (m.name().to_string(), c)
            })
            .collect(),
        Axis::Enhancer => EnhancerMode::ALL
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.model.enhancer = m;
                (m.name().to_string(), c)
            })
            .collect(),
        Axis::Loss => loss_variants(base),
    };
    named.into_iter().map(|(name, config)| Variant { axis, name, config }).collect()
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub axis: Axis,
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub degraded_psnr: f64,
    pub final_loss: f64,
    pub trainable_params: usize,
}

pub const CSV_HEADER: &str = "axis,variant,psnr,ssim,degraded_psnr,final_loss,trainable_params";

/// Trains `v` on `train` and scores it on `eval`.
pub fn run_variant(v: &Variant, train: &Dataset, eval: &Dataset) -> Result<Row> {
    let (params, history) = trainer::train(&v.config, train)?;
    let report = trainer::evaluate(&params, &v.config.model, &v.config.loss, eval)?;
    let final_loss = smoothed_totals(&history, FINAL_LOSS_WINDOW).last().copied().unwrap_or(f64::NAN);
    Ok(Row {
        axis: v.axis,
        variant: v.name.clone(),
        psnr: report.enhanced.psnr,
        ssim: report.enhanced.ssim,
        degraded_psnr: report.degraded.psnr,
        final_loss,
        trainable_params: params.num_scalars(),
    })
}

/// Runs every variant of `axes` in order. Variants whose configuration
/// matches an earlier one (the full loss is the base run, for instance)
/// reuse its result instead of retraining.
pub fn run(axes: &[Axis], base: &TrainConfig, mut on_row: impl FnMut(&Row)) -> Result<Vec<Row>> {
    base.validate()?;
    let train = base.train_set()?;
    let eval = base.eval_set()?;
    let mut done: Vec<(TrainConfig, Row)> = Vec::new();
    let mut rows = Vec::new();
    for &axis in axes {
        for v in variants(axis, base) {
            let row = match done.iter().find(|(c, _)| *c == v.config) {
                Some((_, r)) => Row { axis, variant: v.name.clone(), ..r.clone() },
                None => {
                    let r = run_variant(&v, &train, &eval)?;
                    done.push((v.config.clone(), r.clone()));
                    r
                }
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Ψ adds no parameters: the physics and identity enhancers must allocate
/// the same number of trainable scalars.
pub fn check_enhancer_parameter_free(base: &TrainConfig) -> Result<(usize, usize)> {
    let count = |m| {
        let mut c = base.model.clone();
        c.enhancer = m;
        model::parameter_count(&c)
    };
    let (on, off) = (count(EnhancerMode::Physics), count(EnhancerMode::None));
    if on != off {
        return Err(Error::Config(format!("physics enhancer adds parameters: {on} vs {off}")));
    }
    Ok((on, off))
}

pub fn csv_line(r: &Row) -> String {
    format!(
        "{},{},{:.4},{:.4},{:.4},{:.6},{}",
        r.axis.name(),
        r.variant,
        r.psnr,
        r.ssim,
        r.degraded_psnr,
        r.final_loss,
        r.trainable_params
    )
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", csv_line(r));
    }
    s
}
