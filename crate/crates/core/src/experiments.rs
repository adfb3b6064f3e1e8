//! Multi-run studies: clean-versus-noisy edge robustness and the ablation
//! over function-set size and inference steps.

use log::info;
use serde::Serialize;

use crate::config::{Baseline, RunConfig, TaskSpec};
use crate::error::{PmpError, Result};
use crate::tasks::{generate, GraphInstance, TEST};
use crate::train::{evaluate_model, EvalReport, TrainSummary, Trainer};

/// A finished training run scored on held-out data.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: TrainSummary,
    pub test: EvalReport,
}

/// Trains on `train` (validation split included) and scores the
/// best-validation parameters on the test-flagged nodes of `test`.
pub fn train_and_test(
    cfg: &RunConfig,
    train: &[GraphInstance],
    test: &[GraphInstance],
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), train, None)?;
    let summary = trainer.run()?;
    let store = trainer.best_store()?;
    let puzzle = matches!(cfg.task, TaskSpec::Puzzle { .. });
    let test = evaluate_model(
        &trainer.model,
        &store,
        test,
        TEST,
        cfg.model.samples,
        cfg.schedule.seed,
        puzzle,
        trainer.pool(),
    )?;
    Ok(RunOutcome { summary, test })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePoint {
    pub baseline: Baseline,
    pub seed: u64,
    /// Added edges as a fraction of the clean edge count; `0` is clean.
    pub ratio: f64,
    pub accuracy: f64,
}

/// Trains every baseline on the community graph of each seed, clean and
/// with each noise ratio, and reports test accuracy. `base.task` must be a
/// community spec; its own noise ratio is ignored.
pub fn noise_sweep(
    base: &RunConfig,
    ratios: &[f64],
    seeds: &[u64],
    baselines: &[Baseline],
) -> Result<Vec<NoisePoint>> {
    let TaskSpec::Community {
        nodes, communities, ..
    } = base.task
    else {
        return Err(PmpError::Config(format!(
            "noise sweep needs a community task, got {}",
            base.task.name()
        )));
    };
    let mut all_ratios = vec![0.0];
    all_ratios.extend(ratios.iter().copied().filter(|&r| r != 0.0));
    let mut out = Vec::new();
    for &seed in seeds {
        for &ratio in &all_ratios {
            let spec = TaskSpec::Community {
                nodes,
                communities,
                noise_ratio: ratio,
            };
            let data = generate(&spec, 1, seed)?;
            for &baseline in baselines {
                let mut cfg = base.clone();
                cfg.task = spec.clone();
                cfg.baseline = baseline;
                cfg.schedule.seed = seed;
                let run = train_and_test(&cfg, &data.instances, &data.instances)?;
                info!(
                    "noise sweep seed {seed} ratio {ratio} {}: accuracy {:.4}",
                    baseline.name(),
                    run.test.accuracy
                );
                out.push(NoisePoint {
                    baseline,
                    seed,
                    ratio,
                    accuracy: run.test.accuracy,
                });
            }
        }
    }
    Ok(out)
}

/// Mean over seeds of clean accuracy minus accuracy at `ratio`.
pub fn mean_drop(points: &[NoisePoint], baseline: Baseline, ratio: f64) -> Option<f64> {
    let of = |r: f64| {
        let mut v: Vec<(u64, f64)> = points
            .iter()
            .filter(|p| p.baseline == baseline && p.ratio == r)
            .map(|p| (p.seed, p.accuracy))
            .collect();
        v.sort_by_key(|&(s, _)| s);
        v
    };
    let (clean, noisy) = (of(0.0), of(ratio));
    if clean.is_empty() || clean.len() != noisy.len() {
        return None;
    }
    let total: f64 = clean.iter().zip(&noisy).map(|(c, n)| c.1 - n.1).sum();
    Some(total / clean.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPoint {
    pub k: usize,
    pub steps: usize,
    pub accuracy: f64,
    pub kendall_tau: Option<f64>,
}

/// Trains the policy model once per function-set size in `ks` (at the
/// configured step count) and once per step count in `steps` (at the
/// configured `K`).
pub fn ablation(
    base: &RunConfig,
    train: &[GraphInstance],
    test: &[GraphInstance],
    ks: &[usize],
    steps: &[usize],
) -> Result<Vec<AblationPoint>> {
    let mut settings: Vec<(usize, usize)> = ks.iter().map(|&k| (k, base.steps())).collect();
    settings.extend(steps.iter().map(|&t| (base.model.k, t)));
    let mut out: Vec<AblationPoint> = Vec::new();
    for (k, t) in settings {
        if let Some(done) = out.iter().find(|p| p.k == k && p.steps == t) {
            out.push(done.clone());
            continue;
        }
        let mut cfg = base.clone();
        cfg.baseline = Baseline::Pmp;
        cfg.model.k = k;
        cfg.model.steps = Some(t);
        let run = train_and_test(&cfg, train, test)?;
        info!("ablation K={k} T={t}: accuracy {:.4}", run.test.accuracy);
        out.push(AblationPoint {
            k,
            steps: t,
            accuracy: run.test.accuracy,
            kendall_tau: run.test.kendall_tau,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(baseline: Baseline, seed: u64, ratio: f64, accuracy: f64) -> NoisePoint {
        NoisePoint {
            baseline,
            seed,
            ratio,
            accuracy,
        }
    }

    #[test]
    fn mean_drop_pairs_by_seed() {
        let pts = vec![
            point(Baseline::Pmp, 1, 0.0, 0.9),
            point(Baseline::Pmp, 0, 1.0, 0.7),
            point(Baseline::Pmp, 0, 0.0, 0.8),
            point(Baseline::Pmp, 1, 1.0, 0.6),
            point(Baseline::GnnMean, 0, 0.0, 0.5),
        ];
        let d = mean_drop(&pts, Baseline::Pmp, 1.0).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
        assert_eq!(mean_drop(&pts, Baseline::GnnMean, 1.0), None);
    }

    #[test]
    fn sweep_rejects_other_tasks() {
        let cfg = RunConfig::new(TaskSpec::Puzzle { d: 2, image: 16 });
        assert!(noise_sweep(&cfg, &[1.0], &[0], &[Baseline::Pmp]).is_err());
    }
}
