//! Experiment recipes: sweeps over n, K, or epsilon, plus the VR ablation.
//!
//! Each sweep point is a fully self-contained run; points execute
//! sequentially by default or concurrently with `--parallel`. Every point
//! writes a metrics CSV, and the whole recipe writes one summary JSON.

use crate::config::{LoadedConfig, RecipeKind};
use crate::engine::{run, write_metrics_csv, Algorithm, EngineError, RunConfig};
use crate::privacy::{optimal_iterations, PrivacyBudget};
use crate::topology::GraphSchedule;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("config invalid: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize)]
pub struct PointSummary {
    pub label: String,
    pub seed: u64,
    pub final_loss: f64,
    pub final_grad_sq: f64,
    /// First recorded iteration with loss <= threshold, when one was set.
    pub iterations_to_threshold: Option<u64>,
    pub csv: String,
}

#[derive(Debug, Serialize)]
pub struct RecipeSummary {
    pub kind: String,
    pub points: Vec<PointSummary>,
    /// k-sweep only: sweep value whose mean final loss is smallest.
    pub argmin_label: Option<String>,
    /// Planner K* where constants were available.
    pub k_star: Option<f64>,
    pub warnings: Vec<String>,
}

struct Job {
    label: String,
    seed: u64,
    config: RunConfig,
    n: usize,
}

fn rebuild_schedule(base: &GraphSchedule, n: usize) -> Result<GraphSchedule, RecipeError> {
    use crate::topology::ScheduleKind;
    match base.kind {
        ScheduleKind::Exponential => Ok(GraphSchedule::exponential(n)),
        ScheduleKind::Ring => Ok(GraphSchedule::ring(n)),
        ScheduleKind::Complete => Ok(GraphSchedule::complete(n)),
        ScheduleKind::StaticCustom => {
            if n == base.n {
                Ok(base.clone())
            } else {
                Err(RecipeError::Config("n-sweep cannot resize a custom schedule".into()))
            }
        }
    }
}

fn jobs_for(loaded: &LoadedConfig) -> Result<(Vec<Job>, Option<f64>), RecipeError> {
    let base = &loaded.run;
    let mut jobs = Vec::new();
    let mut k_star = None;
    match &loaded.recipe {
        RecipeKind::SingleRun => {
            for &seed in &loaded.seeds {
                let mut config = base.clone();
                config.seed = seed;
                jobs.push(Job { label: "run".into(), seed, config, n: base.n() });
            }
        }
        RecipeKind::NSweep { n_values } => {
            for &n in n_values {
                for &seed in &loaded.seeds {
                    let mut config = base.clone();
                    config.schedule = rebuild_schedule(&base.schedule, n)?;
                    config.seed = seed;
                    if config.budgets.len() == base.n() && !config.budgets.is_empty() {
                        config.budgets = vec![config.budgets[0]; n];
                    }
                    jobs.push(Job { label: format!("n{n}"), seed, config, n });
                }
            }
        }
        RecipeKind::KSweep { k_values } => {
            if let Some(c) = &loaded.constants {
                if let Some(b) = base.budgets.first() {
                    let budgets = vec![*b; base.n()];
                    k_star = optimal_iterations(
                        c,
                        &budgets,
                        base.n(),
                        loaded.problem_spec.samples_per_node,
                    )
                    .ok()
                    .map(|k| k as f64);
                }
            }
            for &k in k_values {
                for &seed in &loaded.seeds {
                    let mut config = base.clone();
                    config.k = k;
                    config.seed = seed;
                    jobs.push(Job { label: format!("k{k}"), seed, config, n: base.n() });
                }
            }
        }
        RecipeKind::EpsSweep { eps_values } => {
            for &eps in eps_values {
                for &seed in &loaded.seeds {
                    let mut config = base.clone();
                    let delta = base
                        .budgets
                        .first()
                        .map(|b| b.delta)
                        .ok_or_else(|| RecipeError::Config("eps-sweep needs privacy.delta".into()))?;
                    let budget = PrivacyBudget::new(eps, delta)
                        .map_err(|e| RecipeError::Config(e.to_string()))?;
                    config.budgets = vec![budget; base.n()];
                    if let Some(c) = &loaded.constants {
                        config.k = optimal_iterations(
                            c,
                            &config.budgets,
                            base.n(),
                            loaded.problem_spec.samples_per_node,
                        )
                        .map_err(|e| RecipeError::Config(e.to_string()))?
                        .max(1);
                    }
                    config.seed = seed;
                    jobs.push(Job { label: format!("eps{eps}"), seed, config, n: base.n() });
                }
            }
        }
        RecipeKind::VrAblation => {
            for &seed in &loaded.seeds {
                for (tag, alg) in [("vr", Algorithm::PrivSgpVr), ("sgd", Algorithm::PrivSgp)] {
                    let mut config = base.clone();
                    config.algorithm = alg;
                    config.seed = seed;
                    jobs.push(Job { label: tag.to_string(), seed, config, n: base.n() });
                }
            }
        }
    }
    Ok((jobs, k_star))
}

fn run_job(
    job: &Job,
    loaded: &LoadedConfig,
    out_dir: &Path,
) -> Result<(PointSummary, Vec<String>), RecipeError> {
    let problem =
        loaded.problem_spec.build(job.n).map_err(|e| RecipeError::Config(e.to_string()))?;
    let result = run(&job.config, &problem, None)?;
    let csv_name = format!("{}_seed{}.csv", job.label, job.seed);
    let path = out_dir.join(&csv_name);
    let mut out = BufWriter::new(File::create(&path)?);
    write_metrics_csv(&mut out, &result.metrics)?;
    let last = result.metrics.last().expect("at least one record");
    let iterations_to_threshold = loaded.threshold.and_then(|t| {
        result.metrics.iter().find(|m| m.loss <= t).map(|m| m.k)
    });
    Ok((
        PointSummary {
            label: job.label.clone(),
            seed: job.seed,
            final_loss: last.loss,
            final_grad_sq: last.grad_sq,
            iterations_to_threshold,
            csv: csv_name,
        },
        result.warnings,
    ))
}

/// Executes the recipe, writing per-point CSVs and `summary.json` into
/// `out_dir`. Returns the summary for programmatic use.
pub fn run_recipe(
    loaded: &LoadedConfig,
    out_dir: &Path,
    parallel: usize,
) -> Result<RecipeSummary, RecipeError> {
    std::fs::create_dir_all(out_dir)?;
    let (jobs, k_star) = jobs_for(loaded)?;
    if jobs.is_empty() {
        return Err(RecipeError::Config("recipe produced no runs".into()));
    }

    let results: Vec<Result<(PointSummary, Vec<String>), RecipeError>> = if parallel > 1 {
        jobs.par_iter().map(|j| run_job(j, loaded, out_dir)).collect()
    } else {
        jobs.iter().map(|j| run_job(j, loaded, out_dir)).collect()
    };
    let mut points = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for r in results {
        let (p, w) = r?;
        points.push(p);
        warnings.extend(w);
    }
    warnings.dedup();

    // mean final loss per label, in first-appearance order
    let mut labels: Vec<String> = Vec::new();
    for p in &points {
        if !labels.contains(&p.label) {
            labels.push(p.label.clone());
        }
    }
    let means: Vec<(String, f64)> = labels
        .iter()
        .map(|label| {
            let vals: Vec<f64> =
                points.iter().filter(|p| &p.label == label).map(|p| p.final_loss).collect();
            (label.clone(), vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let argmin_label = matches!(loaded.recipe, RecipeKind::KSweep { .. }).then(|| {
        means
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty")
            .0
            .clone()
    });

    let kind = match &loaded.recipe {
        RecipeKind::SingleRun => "single-run",
        RecipeKind::NSweep { .. } => "n-sweep",
        RecipeKind::KSweep { .. } => "k-sweep",
        RecipeKind::EpsSweep { .. } => "eps-sweep",
        RecipeKind::VrAblation => "vr-ablation",
    }
    .to_string();
    let summary = RecipeSummary { kind, points, argmin_label, k_star, warnings };

    let mut doc = serde_json::to_value(&summary)?;
    if let Some(obj) = doc.as_object_mut() {
        let mean_obj: serde_json::Map<String, serde_json::Value> =
            means.iter().map(|(l, v)| (l.clone(), json!(v))).collect();
        obj.insert("mean_final_loss".into(), serde_json::Value::Object(mean_obj));
    }
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(summary)
}
