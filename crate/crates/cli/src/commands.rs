use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use undersea::ablation::{self, Axis};
use undersea::data::{self, smooth_field, verify_pairs, Dataset};
use undersea::model::{self, ForwardOptions};
use undersea::trainer::{self, EvalReport, TrainConfig, Trainer};
use undersea::{physics, LossReport, Rng};

use crate::manifest::{write_text, Manifest};
use crate::{resolve_config, AxisArg, Cli, CliError, CliResult, Command, GRADCHECK_TOLERANCE};

pub fn dispatch(cli: &Cli, args: &[String]) -> CliResult<()> {
    let g = &cli.global;
    let name = cli.command.name();
    match &cli.command {
        Command::Synth { count, size } => {
            let mut cfg = resolve_config(g)?;
            if let Some(n) = count {
                cfg.data.count = *n;
            }
            if let Some(s) = size {
                cfg.data.height = *s;
                cfg.data.width = *s;
            }
            synth(
                &cfg,
                &out_dir(g.out.as_deref()),
                Manifest::new(name, args, &cfg),
            )
        }
        Command::Degrade {
            input,
            t_map,
            b_map,
        } => {
            let cfg = resolve_config(g)?;
            let out = out_file(g.out.as_deref())?;
            let maps = t_map.as_deref().zip(b_map.as_deref());
            degrade(&cfg, input, maps, &out, Manifest::new(name, args, &cfg))
        }
        Command::Enhance { ckpt, input } => {
            enhance(ckpt, input, &out_file(g.out.as_deref())?, name, args)
        }
        Command::Train {
            steps,
            data,
            resume,
        } => {
            let mut t = match resume {
                Some(path) => Trainer::from_checkpoint(trainer::load_checkpoint(path)?)?,
                None => Trainer::new(resolve_config(g)?)?,
            };
            if steps.is_some() {
                t.cfg.steps = *steps;
            }
            let manifest = Manifest::new(name, args, &t.cfg);
            train(t, data.as_deref(), &out_dir(g.out.as_deref()), manifest)
        }
        Command::Eval {
            ckpt,
            data,
            verify_pairs,
        } => eval(
            ckpt.as_deref(),
            data.as_deref(),
            *verify_pairs,
            &out_dir(g.out.as_deref()),
            g,
            name,
            args,
        ),
        Command::Gradcheck { coords, step } => {
            let cfg = resolve_config(g)?;
            gradcheck(
                &cfg,
                *coords,
                *step,
                &out_dir(g.out.as_deref()),
                Manifest::new(name, args, &cfg),
            )
        }
        Command::Ablate { axis, steps } => {
            let mut cfg = resolve_config(g)?;
            if steps.is_some() {
                cfg.steps = *steps;
            }
            let axes: Vec<Axis> = match axis {
                AxisArg::Fusion => vec![Axis::Fusion],
                AxisArg::Loss => vec![Axis::Loss],
                AxisArg::Enhancer => vec![Axis::Enhancer],
                AxisArg::All => Axis::ALL.to_vec(),
            };
            ablate(
                &cfg,
                &axes,
                &out_dir(g.out.as_deref()),
                Manifest::new(name, args, &cfg),
            )
        }
    }
}

fn out_dir(out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn out_file(out: Option<&Path>) -> CliResult<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| CliError::usage("--out is required for single-image commands"))
}

/// `b.ppm` -> `b.<suffix>` beside it.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn synth(cfg: &TrainConfig, out: &Path, mut manifest: Manifest) -> CliResult<()> {
    let ds = Dataset::synthetic(&cfg.data)?;
    for p in ds.save_dir(out)? {
        manifest.output(out, &p);
    }
    let check = verify_pairs(&Dataset::load_dir(out)?)?;
    if !check.mismatched.is_empty() {
        return Err(CliError::numeric(format!(
            "written pairs fail re-degradation: {:?}",
            check.mismatched
        )));
    }
    println!("wrote {} pairs to {}", ds.len(), out.display());
    manifest.results = json!({ "count": ds.len(), "verified": check.checked });
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn degrade(
    cfg: &TrainConfig,
    input: &Path,
    maps: Option<(&Path, &Path)>,
    out: &Path,
    mut manifest: Manifest,
) -> CliResult<()> {
    let clear = data::read_image(input)?;
    let (h, w) = (clear.shape()[1], clear.shape()[2]);
    let root = parent(out);
    let (t, b) = match maps {
        Some((tp, bp)) => (data::read_map(tp)?, data::read_map(bp)?),
        None => {
            let mut rng = Rng::new(cfg.seed);
            let d = &cfg.data;
            let t = smooth_field(&mut rng, h, w, d.t_lo, d.t_hi, d.sigma_field);
            let b = smooth_field(&mut rng, h, w, d.b_lo, d.b_hi, d.sigma_field);
            let (tp, bp) = (sibling(out, "t.pfm"), sibling(out, "b.pfm"));
            data::write_map(&tp, &t)?;
            data::write_map(&bp, &b)?;
            manifest.output(&root, &tp);
            manifest.output(&root, &bp);
            (t, b)
        }
    };
    let deg = physics::degrade(&clear, &t, &b)?;
    data::write_image(out, &deg)?;
    manifest.output(&root, out);
    manifest.results = json!({ "input": input.to_string_lossy(), "height": h, "width": w });
    manifest.write(&sibling(out, "manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn enhance(ckpt: &Path, input: &Path, out: &Path, name: &str, args: &[String]) -> CliResult<()> {
    let ck = trainer::load_checkpoint(ckpt)?;
    ck.params.check(&ck.config.model)?;
    let img = data::read_image(input)?;
    let res = model::forward(
        &ck.params,
        &ck.config.model,
        &img,
        &ForwardOptions::default(),
    )?;
    if !res.enhanced.all_finite() {
        return Err(CliError::numeric("enhanced image has non-finite values"));
    }
    data::write_image(out, &physics::finalize(&res.enhanced))?;
    let mut manifest = Manifest::new(name, args, &ck.config);
    manifest.output(&parent(out), out);
    manifest.results = json!({ "checkpoint_step": ck.step });
    manifest.write(&sibling(out, "manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn history_csv(history: &[LossReport]) -> String {
    let mut s = String::from("step,rec,lap,cycle,transmission,total\n");
    for (i, r) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i + 1,
            r.rec,
            r.lap,
            r.cycle,
            r.transmission,
            r.total
        );
    }
    s
}

fn metrics_csv(r: &EvalReport) -> String {
    format!(
        "count,enhanced_psnr,enhanced_ssim,degraded_psnr,degraded_ssim,loss_total\n{},{:.6},{:.6},{:.6},{:.6},{:.9}\n",
        r.count, r.enhanced.psnr, r.enhanced.ssim, r.degraded.psnr, r.degraded.ssim, r.loss.total
    )
}

fn print_eval(r: &EvalReport) {
    println!("{:<10} {:>9} {:>7}", "", "PSNR", "SSIM");
    println!(
        "{:<10} {:>9.3} {:>7.4}",
        "enhanced", r.enhanced.psnr, r.enhanced.ssim
    );
    println!(
        "{:<10} {:>9.3} {:>7.4}",
        "degraded", r.degraded.psnr, r.degraded.ssim
    );
}

fn train(
    mut t: Trainer,
    data_dir: Option<&Path>,
    out: &Path,
    mut manifest: Manifest,
) -> CliResult<()> {
    let data = match data_dir {
        Some(d) => Dataset::load_dir(d)?,
        None => t.cfg.train_set()?,
    };
    let every = t.cfg.checkpoint_every;
    let mut saved = Vec::new();
    t.run(&data, |t| {
        if t.step % 20 == 0 {
            println!("step {:>5}  {}", t.step, t.history[t.step - 1]);
        }
        if every > 0 && t.step % every == 0 {
            let p = out.join(format!("ckpt-{:06}.bin", t.step));
            trainer::save_checkpoint(&p, &t.checkpoint())?;
            saved.push(p);
        }
        Ok(())
    })?;
    let ck = out.join("checkpoint.bin");
    trainer::save_checkpoint(&ck, &t.checkpoint())?;
    let hist = out.join("history.csv");
    write_text(&hist, &history_csv(&t.history))?;
    let report = trainer::evaluate(&t.params, &t.cfg.model, &t.cfg.loss, &t.cfg.eval_set()?)?;
    let metrics = out.join("metrics.csv");
    write_text(&metrics, &metrics_csv(&report))?;
    for p in saved.iter().chain([&ck, &hist, &metrics]) {
        manifest.output(out, p);
    }
    let smooth = trainer::smoothed_totals(&t.history, ablation::FINAL_LOSS_WINDOW);
    manifest.results = json!({
        "steps": t.step,
        "initial_smoothed_loss": smooth.first(),
        "final_smoothed_loss": smooth.last(),
        "eval": report,
    });
    manifest.write(&out.join("manifest.json"))?;
    print_eval(&report);
    Ok(())
}

fn eval(
    ckpt: Option<&Path>,
    data_dir: Option<&Path>,
    verify: bool,
    out: &Path,
    g: &crate::Global,
    name: &str,
    args: &[String],
) -> CliResult<()> {
    if ckpt.is_none() && !verify {
        return Err(CliError::usage("eval needs --ckpt, --verify-pairs or both"));
    }
    let loaded = data_dir.map(Dataset::load_dir).transpose()?;
    let mut results = serde_json::Map::new();
    let config = match ckpt {
        Some(p) => trainer::load_checkpoint(p)?.config,
        None => resolve_config(g)?,
    };
    let mut manifest = Manifest::new(name, args, &config);
    if verify {
        let ds = loaded
            .as_ref()
            .ok_or_else(|| CliError::usage("--verify-pairs needs --data"))?;
        let check = verify_pairs(ds)?;
        println!(
            "verified {} pairs, {} without truth, {} mismatched",
            check.checked,
            check.skipped,
            check.mismatched.len()
        );
        results.insert("verify".into(), json!({ "checked": check.checked, "skipped": check.skipped, "mismatched": check.mismatched }));
        if !check.mismatched.is_empty() {
            manifest.results = results.into();
            manifest.write(&out.join("manifest.json"))?;
            return Err(CliError::numeric(format!(
                "pairs fail re-degradation: {}",
                check.mismatched.join(", ")
            )));
        }
    }
    if let Some(p) = ckpt {
        let ck = trainer::load_checkpoint(p)?;
        let ds = match loaded {
            Some(d) => d,
            None => ck.config.eval_set()?,
        };
        let report = trainer::evaluate(&ck.params, &ck.config.model, &ck.config.loss, &ds)?;
        let metrics = out.join("metrics.csv");
        write_text(&metrics, &metrics_csv(&report))?;
        manifest.output(out, &metrics);
        results.insert("eval".into(), json!(report));
        print_eval(&report);
    }
    manifest.results = results.into();
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn gradcheck(
    cfg: &TrainConfig,
    coords: usize,
    step: f64,
    out: &Path,
    mut manifest: Manifest,
) -> CliResult<()> {
    if !(step > 0.0) || coords == 0 {
        return Err(CliError::usage(
            "--step must be positive and --coords at least 1",
        ));
    }
    let r = trainer::gradcheck_total_loss(cfg, step, coords, cfg.seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates ({} skipped at kinks)",
        r.max_rel_error, r.checked, r.skipped
    );
    let result = json!({
        "max_rel_error": r.max_rel_error,
        "checked": r.checked,
        "skipped": r.skipped,
        "step": step,
        "tolerance": GRADCHECK_TOLERANCE,
    });
    let path = out.join("gradcheck.json");
    write_text(
        &path,
        &(serde_json::to_string_pretty(&result).unwrap_or_default() + "\n"),
    )?;
    manifest.output(out, &path);
    manifest.results = result;
    manifest.write(&out.join("manifest.json"))?;
    if r.checked < coords {
        return Err(CliError::numeric(format!(
            "only {} of {coords} coordinates were smooth enough to check",
            r.checked
        )));
    }
    if !(r.max_rel_error <= GRADCHECK_TOLERANCE) {
        return Err(CliError::numeric(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )));
    }
    Ok(())
}

fn ablate(cfg: &TrainConfig, axes: &[Axis], out: &Path, mut manifest: Manifest) -> CliResult<()> {
    let (on, off) = ablation::check_enhancer_parameter_free(cfg)
        .map_err(|e| CliError::numeric(e.to_string()))?;
    println!("{}", ablation::CSV_HEADER);
    let rows = ablation::run(axes, cfg, |r| println!("{}", ablation::csv_line(r)))?;
    let path = out.join("ablation.csv");
    write_text(&path, &ablation::to_csv(&rows))?;
    manifest.output(out, &path);
    manifest.results = json!({
        "rows": rows.len(),
        "enhancer_params": { "physics": on, "none": off },
    });
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}
