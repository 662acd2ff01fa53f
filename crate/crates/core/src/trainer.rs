//! Optimization loop building blocks: Adam, the warmup/decay learning-rate
//! schedule, hyperparameter grid search, and patience-based early stopping.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{ArchiveError, ParamSet, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("{0}")]
    Invalid(String),
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction. Moment state is keyed by parameter name, so it
/// survives checkpointing as an ordinary parameter archive.
pub struct Adam<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// Applies one update, consuming accumulated gradients. Parameters that
    /// received no gradient this step are left untouched and their moments
    /// do not advance. A non-finite gradient aborts before any parameter is
    /// modified.
    pub fn step(&mut self, params: &ParamSet<T>, lr: f64) -> Result<(), TrainError> {
        let mut updates: Vec<(&String, &Tensor<T>, Vec<T>)> = Vec::new();
        for (name, t) in params.iter() {
            if let Some(g) = t.take_grad() {
                if g.iter().any(|v| !v.is_finite_val()) {
                    return Err(TensorError::NonFiniteGrad(name.clone()).into());
                }
                updates.push((name, t, g));
            }
        }
        self.steps += 1;
        let t_f = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t_f);
        let c2 = 1.0 - self.beta2.powi(t_f);
        for (name, tensor, grad) in updates {
            let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            if entry.m.len() != grad.len() {
                return Err(TrainError::Invalid(format!(
                    "optimizer state for {} has {} elements, gradient has {}",
                    name,
                    entry.m.len(),
                    grad.len()
                )));
            }
            let mut data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                let m = self.beta1 * entry.m[i].to_f64() + (1.0 - self.beta1) * g;
                let v = self.beta2 * entry.v[i].to_f64() + (1.0 - self.beta2) * g * g;
                entry.m[i] = T::from_f64(m);
                entry.v[i] = T::from_f64(v);
                let update = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                data[i] = T::from_f64(data[i].to_f64() - update);
            }
        }
        Ok(())
    }

    /// Moment state as a parameter set ("name.m", "name.v", plus a scalar
    /// step counter), ready for the checkpoint archive.
    pub fn export_state(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        out.insert("adam.steps", Tensor::scalar(T::from_f64(self.steps as f64)));
        for (name, mo) in &self.moments {
            out.insert(
                format!("{}.m", name),
                Tensor::raw(vec![mo.m.len()], mo.m.clone()),
            );
            out.insert(
                format!("{}.v", name),
                Tensor::raw(vec![mo.v.len()], mo.v.clone()),
            );
        }
        out
    }

    pub fn import_state(&mut self, state: &ParamSet<T>) -> Result<(), TrainError> {
        let steps = state.get("adam.steps")?.item()?.to_f64();
        if steps < 0.0 || steps.fract() != 0.0 {
            return Err(TrainError::Invalid(format!("bad step counter {}", steps)));
        }
        self.steps = steps as u64;
        self.moments.clear();
        let mut halves: BTreeMap<String, (Option<Vec<T>>, Option<Vec<T>>)> = BTreeMap::new();
        for (name, t) in state.iter() {
            if name == "adam.steps" {
                continue;
            }
            if let Some(base) = name.strip_suffix(".m") {
                halves.entry(base.to_string()).or_default().0 = Some(t.to_vec());
            } else if let Some(base) = name.strip_suffix(".v") {
                halves.entry(base.to_string()).or_default().1 = Some(t.to_vec());
            } else {
                return Err(TrainError::Invalid(format!("unexpected state entry {}", name)));
            }
        }
        for (base, (m, v)) in halves {
            match (m, v) {
                (Some(m), Some(v)) if m.len() == v.len() => {
                    self.moments.insert(base, Moments { m, v });
                }
                _ => return Err(TrainError::Invalid(format!("incomplete moments for {}", base))),
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Slanted-triangular learning rate: linear warmup over the first
/// `round(warmup_fraction * total)` steps (at least one), then linear decay
/// to zero at `total`. Steps count from 1.
pub fn lr_at(step: u64, total: u64, lr_max: f64, warmup_fraction: f64) -> f64 {
    if total == 0 || step == 0 {
        return 0.0;
    }
    let w = ((warmup_fraction * total as f64).round() as u64).clamp(1, total);
    if step <= w {
        lr_max * step as f64 / w as f64
    } else if w == total {
        lr_max
    } else {
        lr_max * total.saturating_sub(step) as f64 / (total - w) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub epochs: Vec<u32>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl GridSpec {
    /// The full dev-selection grid: 2 to 5 epochs crossed with four learning
    /// rates at batch size 32.
    pub fn default_finetune() -> Self {
        GridSpec {
            epochs: vec![2, 3, 4, 5],
            lrs: vec![5e-6, 1e-5, 2e-5, 5e-5],
            batch_sizes: vec![32],
        }
    }

    /// Reduced preset: 2 or 4 epochs at learning rate 2e-5.
    pub fn fast() -> Self {
        GridSpec {
            epochs: vec![2, 4],
            lrs: vec![2e-5],
            batch_sizes: vec![32],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &epochs in &self.epochs {
            for &lr in &self.lrs {
                for &batch_size in &self.batch_sizes {
                    out.push(GridPoint { epochs, lr, batch_size });
                }
            }
        }
        out
    }

    pub fn single(epochs: u32, lr: f64, batch_size: usize) -> Self {
        GridSpec {
            epochs: vec![epochs],
            lrs: vec![lr],
            batch_sizes: vec![batch_size],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialReport {
    pub point: GridPoint,
    pub dev_scores: Vec<f64>,
    pub mean_dev: f64,
}

pub struct GridOutcome<M> {
    /// One trained model per seed, for the selected configuration.
    pub models: Vec<M>,
    pub point: GridPoint,
    pub seeds: Vec<u64>,
    pub dev_scores: Vec<f64>,
    pub mean_dev: f64,
    pub test_scores: Vec<f64>,
    pub mean_test: f64,
    pub trials: Vec<TrialReport>,
}

/// One task's train/evaluate surface, as seen by the grid search.
pub trait TaskRunner {
    type Trained;

    fn train(
        &mut self,
        epochs: u32,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self::Trained, TrainError>;

    fn dev_score(&self, model: &Self::Trained) -> Result<f64, TrainError>;

    /// Consulted exactly once per seed, on the selected configuration only.
    fn test_score(&self, model: &Self::Trained) -> Result<f64, TrainError>;
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Trains every grid point once per seed, selects the point with the best
/// mean dev score, and only then evaluates that point's models on test.
/// Dev ties go to the lower learning rate, then fewer epochs, then the
/// smaller batch, so selection does not depend on evaluation order.
pub fn run_grid<R: TaskRunner>(
    runner: &mut R,
    spec: &GridSpec,
    seeds: &[u64],
) -> Result<GridOutcome<R::Trained>, TrainError> {
    let points = spec.points();
    if points.is_empty() {
        return Err(TrainError::Invalid("empty hyperparameter grid".to_string()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Invalid("no seeds given".to_string()));
    }
    let mut trials = Vec::with_capacity(points.len());
    let mut best: Option<(GridPoint, f64, Vec<f64>, Vec<R::Trained>)> = None;
    for point in points {
        let context = |what: &str, seed: u64, e: TrainError| {
            TrainError::Invalid(format!(
                "{} failed for epochs={} lr={} batch={} seed={}: {}",
                what, point.epochs, point.lr, point.batch_size, seed, e
            ))
        };
        let mut models = Vec::with_capacity(seeds.len());
        let mut dev_scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let model = runner
                .train(point.epochs, point.lr, point.batch_size, seed)
                .map_err(|e| context("training", seed, e))?;
            dev_scores.push(runner.dev_score(&model).map_err(|e| context("dev eval", seed, e))?);
            models.push(model);
        }
        let mean_dev = mean(&dev_scores);
        trials.push(TrialReport {
            point,
            dev_scores: dev_scores.clone(),
            mean_dev,
        });
        let replace = match &best {
            None => true,
            Some((ip, is, _, _)) => {
                mean_dev > *is
                    || (mean_dev == *is
                        && (point.lr, point.epochs, point.batch_size) < (ip.lr, ip.epochs, ip.batch_size))
            }
        };
        if replace {
            best = Some((point, mean_dev, dev_scores, models));
        }
    }
    let (point, mean_dev, dev_scores, models) = best.expect("grid has at least one point");
    let mut test_scores = Vec::with_capacity(models.len());
    for (model, &seed) in models.iter().zip(seeds) {
        test_scores.push(
            runner
                .test_score(model)
                .map_err(|e| TrainError::Invalid(format!("test eval failed for seed {}: {}", seed, e)))?,
        );
    }
    let mean_test = mean(&test_scores);
    Ok(GridOutcome {
        models,
        point,
        seeds: seeds.to_vec(),
        dev_scores,
        mean_dev,
        test_scores,
        mean_test,
        trials,
    })
}

pub struct EarlyStopReport<S> {
    pub best: S,
    pub best_epoch: u32,
    pub best_score: f64,
    pub history: Vec<f64>,
}

/// Runs up to `max_epochs` epochs, snapshotting on every strict improvement
/// of the dev score, and stops once `patience` consecutive epochs fail to
/// improve. Epochs are 1-indexed in the report.
pub fn early_stop_loop<S, E>(
    max_epochs: u32,
    patience: u32,
    mut run_epoch: E,
    mut snapshot: impl FnMut() -> S,
) -> Result<Option<EarlyStopReport<S>>, TrainError>
where
    E: FnMut(u32) -> Result<f64, TrainError>,
{
    let mut report: Option<EarlyStopReport<S>> = None;
    let mut stale = 0u32;
    let mut history = Vec::new();
    for epoch in 1..=max_epochs {
        let score = run_epoch(epoch)?;
        history.push(score);
        let improved = report.as_ref().map_or(true, |r| score > r.best_score);
        if improved {
            report = Some(EarlyStopReport {
                best: snapshot(),
                best_epoch: epoch,
                best_score: score,
                history: Vec::new(),
            });
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    Ok(report.map(|mut r| {
        r.history = history;
        r
    }))
}
