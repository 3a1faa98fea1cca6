//! Subcommand bodies. Each reads the resolved config, writes artifacts to its
//! output directory and prints a short report.

use std::path::{Path, PathBuf};

use log::info;
use quarc_core::analysis::{
    bench, bench_csv, correlate, layer_kl, loss_trend, summary_csv, summary_text, CorrelateSetup, ExperimentPlan,
    NamedRun, SummaryRow,
};
use quarc_core::coreset::{score_dataset, write_scores_csv, ScoringPass, WorkCounter};
use quarc_core::data::SplitData;
use quarc_core::model::{ModelInstance, Precision};
use quarc_core::train::{pretrain_fp, run_quarc, RunConfig, RunOutput};
use quarc_core::{Error, Result, Tensor};

use crate::config::Config;
use crate::output::{aligned, OutDir};

/// Window for the loss-trend line printed after training.
const TREND_WINDOW: usize = 10;

pub fn load_checkpoint(path: &Path, what: &str) -> Result<ModelInstance> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} checkpoint {} does not exist",
            path.display()
        )));
    }
    ModelInstance::load(path)
}

fn check_fits(model: &ModelInstance, split: &SplitData, what: &str) -> Result<()> {
    let (d, m) = (split.train.sample_size(), split.train.classes);
    if model.def.input_size() != d || model.def.classes != m {
        return Err(Error::Format(format!(
            "{what} checkpoint expects {} inputs and {} classes; data has {d} and {m}",
            model.def.input_size(),
            model.def.classes
        )));
    }
    Ok(())
}

fn full_precision(model: ModelInstance, what: &str) -> Result<ModelInstance> {
    if model.precision != Precision::Full {
        return Err(Error::Format(format!("{what} checkpoint is not full precision")));
    }
    Ok(model)
}

fn calibration_batch(split: &SplitData, batch_size: usize) -> Tensor {
    let ids: Vec<usize> = (0..batch_size.min(split.train.len())).collect();
    split.train.gather(&ids).0
}

fn fresh_student(fp: &ModelInstance, split: &SplitData, run: &RunConfig) -> Result<ModelInstance> {
    fp.clone_as_quantized(run.bits_w, run.bits_a, Some(&calibration_batch(split, run.batch_size)))
}

fn final_line(out: &RunOutput) -> String {
    let last = out.metrics.last();
    let top1 = last.map_or(f64::NAN, |m| m.top1);
    let top5 = last.map_or(f64::NAN, |m| m.top5);
    let total = last.map_or(f64::NAN, |m| m.loss.total);
    format!("top1 {top1:.4}  top5 {top5:.4}  loss {total:.5}")
}

fn write_run(dir: &OutDir, out: &RunOutput) -> Result<()> {
    dir.write_jsonl("metrics.jsonl", &out.metrics)?;
    dir.write_jsonl("rounds.jsonl", &out.rounds)?;
    dir.write_json("work.json", &out.work)?;
    out.student.save(&dir.path("student.json"))
}

pub fn pretrain(cfg: &Config, out: &OutDir) -> Result<()> {
    let split = cfg.split()?;
    let def = cfg.model_def(&split.train)?;
    info!(
        "pretraining {} parameters on {} samples",
        def.param_count(),
        split.train.len()
    );
    let (model, history) = pretrain_fp(&def, &split, &cfg.pretrain)?;
    out.write_jsonl("pretrain.jsonl", &history)?;
    model.save(&out.path("fp.json"))?;
    let last = history.last();
    println!(
        "fp.json  top1 {:.4}  top5 {:.4}",
        last.map_or(f64::NAN, |e| e.top1),
        last.map_or(f64::NAN, |e| e.top5)
    );
    Ok(())
}

pub fn train(cfg: &Config, fp_path: &Path, teacher: Option<&Path>, out: &OutDir) -> Result<()> {
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let teacher = match teacher {
        Some(p) => load_checkpoint(p, "teacher")?,
        None => fp.clone(),
    };
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    check_fits(&teacher, &split, "teacher")?;
    let run = run_quarc(&fp, &teacher, &split, &cfg.run)?;
    write_run(out, &run)?;
    let totals: Vec<f64> = run.metrics.iter().map(|m| m.loss.total).collect();
    println!("{}", final_line(&run));
    if totals.len() > TREND_WINDOW {
        let t = loss_trend(&totals, TREND_WINDOW)?;
        println!(
            "loss trend: {}/{} windows non-increasing ({:.2})",
            t.non_increasing, t.comparisons, t.fraction
        );
    }
    Ok(())
}

pub fn ablation_plan(cfg: &Config) -> Result<ExperimentPlan> {
    let plan = if cfg.ablate.runs.is_empty() {
        ExperimentPlan::ablation(&cfg.run, &cfg.ablate.seeds)
    } else {
        let runs = cfg
            .ablate
            .runs
            .iter()
            .map(|r| {
                Ok(NamedRun {
                    name: r.name.clone(),
                    config: cfg.run_variant(&r.overrides)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ExperimentPlan {
            runs,
            seeds: cfg.ablate.seeds.clone(),
        }
    };
    plan.validate()?;
    for r in &plan.runs {
        r.config.validate()?;
        if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name.starts_with('.') {
            return Err(Error::Config(format!(
                "run name {:?} cannot be used as a directory",
                r.name
            )));
        }
    }
    Ok(plan)
}

pub fn ablate(cfg: &Config, fp_path: &Path, out: &OutDir) -> Result<()> {
    let plan = ablation_plan(cfg)?;
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    out.write_json("plan.json", &plan)?;
    let mut rows = Vec::with_capacity(plan.runs.len() * plan.seeds.len());
    for named in &plan.runs {
        let dir = out.subdir(&named.name)?;
        for &seed in &plan.seeds {
            let run_cfg = RunConfig {
                seed,
                ..named.config.clone()
            };
            let run = run_quarc(&fp, &fp, &split, &run_cfg)?;
            dir.write_jsonl(&format!("seed-{seed}.jsonl"), &run.metrics)?;
            info!("{} seed {seed}: {}", named.name, final_line(&run));
            let last = run
                .metrics
                .last()
                .ok_or_else(|| Error::Config("runs need at least one epoch".into()))?;
            rows.push(SummaryRow {
                name: named.name.clone(),
                seed,
                top1: last.top1,
                top5: last.top5,
                final_loss: last.loss.total,
            });
        }
    }
    out.write("summary.csv", &summary_csv(&rows))?;
    let text = summary_text(&rows);
    out.write("summary.txt", &text)?;
    print!("{text}");
    Ok(())
}

pub fn correlate_cmd(cfg: &Config, fp_path: &Path, quantized: Option<&Path>, out: &OutDir) -> Result<()> {
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let q_loaded = quantized.map(|p| load_checkpoint(p, "quantized")).transpose()?;
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    let q = match q_loaded {
        Some(q) => {
            check_fits(&q, &split, "quantized")?;
            q
        }
        None => fresh_student(&fp, &split, &cfg.run)?,
    };
    let c = &cfg.correlate;
    let report = correlate(&CorrelateSetup {
        fp: &fp,
        quantized: &q,
        split: &split,
        buckets: c.buckets,
        fraction: c.fraction,
        seeds: &c.seeds,
        config: &cfg.run,
    })?;
    out.write("correlation.csv", &report.to_csv())?;
    out.write_json("correlation.json", &report)?;
    let rows: Vec<Vec<String>> = report
        .buckets
        .iter()
        .map(|b| {
            vec![
                b.bucket.to_string(),
                format!("{:.5}", b.mean_res),
                format!("{:.4}", b.mean_top1),
            ]
        })
        .collect();
    print!("{}", aligned(&["bucket", "mean_res", "mean_top1"], &rows));
    println!("spearman rho {:.4}  p {:.4}", report.rho, report.p_value);
    Ok(())
}

pub fn layer_kl_cmd(cfg: &Config, fp_path: &Path, students: &[PathBuf], out: &OutDir) -> Result<()> {
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let loaded = students
        .iter()
        .map(|p| Ok((p.display().to_string(), load_checkpoint(p, "student")?)))
        .collect::<Result<Vec<_>>>()?;
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    let models = if loaded.is_empty() {
        let mut trained = Vec::with_capacity(2);
        for (name, clc) in [("kd", false), ("kd+clc", true)] {
            let run_cfg = RunConfig { clc, ..cfg.run.clone() };
            let run = run_quarc(&fp, &fp, &split, &run_cfg)?;
            write_run(&out.subdir(name)?, &run)?;
            trained.push((name.to_string(), run.student));
        }
        trained
    } else {
        loaded
    };
    let mut csv = String::from("student,tap,kl\n");
    let mut rows = Vec::new();
    for (name, student) in &models {
        for (tap, kl) in layer_kl(&fp, student, &split.eval, cfg.run.batch_size)? {
            csv += &format!("{name},{tap},{kl}\n");
            rows.push(vec![name.clone(), tap, format!("{kl:.6e}")]);
        }
    }
    out.write("layer_kl.csv", &csv)?;
    print!("{}", aligned(&["student", "tap", "kl"], &rows));
    Ok(())
}

pub fn bench_cmd(cfg: &Config, fp_path: &Path, out: &OutDir) -> Result<()> {
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    let rows = bench(&fp, &split, &cfg.run, &cfg.bench.fractions)?;
    out.write("bench.csv", &bench_csv(&rows))?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                format!("{:.3}", r.seconds_total),
                format!("{:.4}", r.seconds_per_epoch),
                r.train_forwards.to_string(),
                r.selection_forwards.to_string(),
                r.backwards.to_string(),
                format!("{:.3}", r.ratio_to_full),
            ]
        })
        .collect();
    let text = aligned(
        &[
            "variant",
            "seconds",
            "per_epoch",
            "train_fwd",
            "select_fwd",
            "backward",
            "ratio",
        ],
        &table,
    );
    out.write("bench.txt", &text)?;
    print!("{text}");
    Ok(())
}

pub fn scores_dump(cfg: &Config, fp_path: &Path, student: Option<&Path>, epoch: usize, out: &OutDir) -> Result<()> {
    let fp = full_precision(load_checkpoint(fp_path, "full-precision")?, "full-precision")?;
    let loaded = student.map(|p| load_checkpoint(p, "student")).transpose()?;
    if epoch > cfg.run.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} is past the {} configured epochs",
            cfg.run.epochs
        )));
    }
    let split = cfg.split()?;
    check_fits(&fp, &split, "full-precision")?;
    let q = match loaded {
        Some(q) => {
            check_fits(&q, &split, "student")?;
            q
        }
        None => fresh_student(&fp, &split, &cfg.run)?,
    };
    let pass = ScoringPass {
        epoch,
        total_epochs: cfg.run.epochs,
        batch_size: cfg.run.batch_size,
        mask: cfg.run.metrics,
    };
    let scores = score_dataset(&q, &fp, &split.train, pass, &mut WorkCounter::default())?;
    write_scores_csv(&scores, std::fs::File::create(out.path("scores.csv"))?)?;
    println!("{} scores -> {}", scores.len(), out.path("scores.csv").display());
    Ok(())
}
