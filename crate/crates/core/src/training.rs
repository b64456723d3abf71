//! Maximum-likelihood behavioral cloning.
//!
//! The dataset log-likelihood is the sum over trajectories of an optional
//! initial term `log p(y_0 | c_0)` and the transition terms
//! `log p(y_t | y_{t-1}, c_{t-1})`. It is reported per transition.

use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, Matrix, ParamVector, Parameterized};
use crate::dataset::TrajectoryDataset;
use crate::error::{check_dim, Error, Result};
use crate::flow::{ConditionedFlow, FlowConfig};
use crate::latent::{LatentDynamics, LimitCycleLatent, LinearAttractor};
use crate::policy::{StablePolicyModel, Standardization};

/// Latent process settings; dimension comes from the data, and an unset `dt`
/// to the dataset step.
///
/// Attractor: `alpha` defaults to `0.25/Δt` and `sigma` to a quarter of the
/// stability margin. Limit cycle: `beta` defaults to `0.05/Δt`, `sigma` to
/// about twice the per-step radial pull (capped inside the margin), `r_star`
/// to half the smallest standardized radius in the cycle plane, and `omega`
/// to the mean angular speed of the standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentConfig {
    Attractor {
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default)]
        dt: Option<f64>,
    },
    LimitCycle {
        #[serde(default)]
        r_star: Option<f64>,
        #[serde(default)]
        beta: Option<f64>,
        #[serde(default)]
        omega: Option<f64>,
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default)]
        sigma_phase: Option<f64>,
        #[serde(default)]
        dt: Option<f64>,
    },
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig::Attractor {
            alpha: None,
            sigma: None,
            dt: None,
        }
    }
}

/// Mean angular speed of dims (0, 1) about the origin, from standardized
/// training states.
fn estimate_omega(ds: &TrajectoryDataset, st: &Standardization) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for t in &ds.trajectories {
        for w in t.states.windows(2) {
            let a = st.state(&w[0]);
            let b = st.state(&w[1]);
            let mut dphi = b[1].atan2(b[0]) - a[1].atan2(a[0]);
            while dphi > std::f64::consts::PI {
                dphi -= 2.0 * std::f64::consts::PI;
            }
            while dphi < -std::f64::consts::PI {
                dphi += 2.0 * std::f64::consts::PI;
            }
            total += dphi;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / (n as f64 * ds.dt)
    }
}

/// Half the smallest standardized radius in the cycle plane, so that at
/// initialization every sample lies outside the latent cycle. Noise vanishes
/// on the cycle, and samples straddling it start with an enormous loss.
fn default_cycle_radius(ds: &TrajectoryDataset, st: &Standardization) -> f64 {
    let radii: Vec<f64> = ds
        .states()
        .map(|y| {
            let a = st.state(y);
            a[0].hypot(a[1])
        })
        .collect();
    let min = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = radii.iter().sum::<f64>() / radii.len().max(1) as f64;
    if min.is_finite() && min > 1e-3 * mean {
        0.5 * min
    } else if mean > 0.0 {
        0.5 * mean
    } else {
        1.0
    }
}

impl LatentConfig {
    pub fn resolve(&self, ds: &TrajectoryDataset, st: &Standardization) -> Result<LatentDynamics> {
        let d = ds.dim_y;
        Ok(match *self {
            LatentConfig::Attractor { alpha, sigma, dt } => {
                let dt = dt.unwrap_or(ds.dt);
                let alpha = alpha.unwrap_or(0.25 / dt);
                let sigma = sigma.unwrap_or((alpha / (2.0 * d as f64)).sqrt());
                LatentDynamics::Attractor(LinearAttractor::new(d, alpha, sigma, dt)?)
            }
            LatentConfig::LimitCycle {
                r_star,
                beta,
                omega,
                sigma,
                sigma_phase,
                dt,
            } => {
                let dt = dt.unwrap_or(ds.dt);
                let beta = beta.unwrap_or(0.05 / dt);
                let worst = d.saturating_sub(2).max(1) as f64;
                // Noise comparable to the per-step radial pull, well inside the margin.
                let sigma = sigma.unwrap_or((1.75 * beta * dt.sqrt()).min(0.9 * (2.0 * beta / worst).sqrt()));
                let omega = omega.unwrap_or_else(|| estimate_omega(ds, st));
                LatentDynamics::LimitCycle(LimitCycleLatent::new(
                    d,
                    r_star.unwrap_or_else(|| default_cycle_radius(ds, st)),
                    beta,
                    omega,
                    sigma,
                    sigma_phase.unwrap_or(0.1),
                    dt,
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size in transitions.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub include_initial_term: bool,
    /// Epochs without test improvement before stopping.
    pub patience: usize,
    /// Fit the data standardization; otherwise use the identity.
    pub standardize: bool,
    /// Minibatch gradients are rescaled to at most this global norm; 0 disables.
    pub grad_clip: f64,
    /// An epoch whose train log-likelihood falls more than this many nats per
    /// transition below the best seen is undone, and the learning rate halved.
    /// 0 disables.
    pub rollback_threshold: f64,
    /// Weight of a penalty on the flow's departure from affine dependence on
    /// the context: `|f(z, a) + f(z, b) - 2 f(z, (a+b)/2)|²` for contexts drawn
    /// from the box spanned by the training contexts, at the latent preimages
    /// of the batch. 0 disables.
    pub context_linearity: f64,
    pub flow: FlowConfig,
    pub latent: LatentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            train_fraction: 0.8,
            include_initial_term: true,
            patience: 50,
            standardize: true,
            grad_clip: 10.0,
            rollback_threshold: 1.0,
            context_linearity: 0.0,
            flow: FlowConfig::default(),
            latent: LatentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight_decay must be non-negative".into()));
        }
        if !(self.grad_clip >= 0.0 && self.rollback_threshold >= 0.0 && self.context_linearity >= 0.0) {
            return Err(Error::Validation(
                "grad_clip, rollback_threshold and context_linearity must be non-negative".into(),
            ));
        }
        if !(self.flow.clamp.is_finite() && self.flow.clamp > 0.0) || self.flow.hidden.contains(&0) {
            return Err(Error::Validation("invalid flow architecture".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(Error::from_json)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ll: f64,
    pub test_ll: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint; 0 is the initial model.
    pub best_epoch: usize,
    pub best_test_ll: f64,
    pub initial_train_ll: f64,
    pub initial_test_ll: f64,
    pub wall_clock_s: f64,
    pub checksum: String,
    pub n_params: usize,
    pub train_transitions: usize,
    pub test_transitions: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_ll,test_ll\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_ll, r.test_ll));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Log-likelihood per transition of each trajectory.
    pub per_trajectory: Vec<f64>,
    /// Log-likelihood per transition over the whole dataset.
    pub mean_ll: f64,
    pub transitions: usize,
    pub include_initial_term: bool,
}

/// Standardized transition arrays for one dataset under one model.
struct Prepared {
    prev: Matrix,
    next: Matrix,
    ctx: Matrix,
    /// `(trajectory, step)` of each transition row.
    owner: Vec<(usize, usize)>,
    init_y: Matrix,
    init_c: Matrix,
    /// Initial-term row carried by each transition row, if any.
    init_of: Vec<Option<usize>>,
}

const EVAL_CHUNK: usize = 2048;

impl Prepared {
    fn new(model: &StablePolicyModel, ds: &TrajectoryDataset) -> Result<Self> {
        check_dim("dataset state dim", model.dim(), ds.dim_y)?;
        check_dim("dataset context dim", model.context_dim(), ds.dim_c)?;
        let st = model.standardization();
        let (d, n) = (ds.dim_y, ds.dim_c);
        let total = ds.transition_count();
        let mut prev = Vec::with_capacity(total * d);
        let mut next = Vec::with_capacity(total * d);
        let mut ctx = Vec::with_capacity(total * n);
        let mut init_y = Vec::new();
        let mut init_c = Vec::new();
        let mut owner = Vec::with_capacity(total);
        let mut init_of = Vec::with_capacity(total);
        for (i, t) in ds.trajectories.iter().enumerate() {
            init_y.extend(st.state(&t.states[0]));
            init_c.extend(st.context(&t.contexts[0]));
            for k in 1..t.states.len() {
                prev.extend(st.state(&t.states[k - 1]));
                next.extend(st.state(&t.states[k]));
                ctx.extend(st.context(&t.contexts[k - 1]));
                owner.push((i, k));
                init_of.push((k == 1).then_some(i));
            }
        }
        let m = ds.len();
        Ok(Self {
            prev: Array2::from_shape_vec((total, d), prev).unwrap(),
            next: Array2::from_shape_vec((total, d), next).unwrap(),
            ctx: Array2::from_shape_vec((total, n), ctx).unwrap(),
            owner,
            init_y: Array2::from_shape_vec((m, d), init_y).unwrap(),
            init_c: Array2::from_shape_vec((m, n), init_c).unwrap(),
            init_of,
        })
    }

    fn len(&self) -> usize {
        self.owner.len()
    }
}

/// Per-row values of one batch: transition log-densities, initial-term
/// log-densities with their trajectory index, and the flat parameter
/// gradient of `-(Σ values)/rows` when requested.
struct BatchOut {
    trans: Vec<f64>,
    init: Vec<(usize, f64)>,
    grad: Option<ParamVector>,
}

fn degenerate(model: &StablePolicyModel, ds: Option<&TrajectoryDataset>, traj: usize, step: usize) -> Error {
    let detail = ds
        .and_then(|ds| {
            let t = &ds.trajectories[traj];
            let c = if step == 0 {
                &t.contexts[0]
            } else {
                &t.contexts[step - 1]
            };
            let r = if step == 0 {
                model.log_initial_density(&t.states[0], c)
            } else {
                model.log_cond_density(&t.states[step - 1], &t.states[step], c)
            };
            r.err().map(|e| e.to_string())
        })
        .unwrap_or_else(|| "non-finite log-density".into());
    Error::DegenerateDensity(format!("trajectory {traj}, step {step}: {detail}"))
}

fn run_batch(
    model: &StablePolicyModel,
    prep: &Prepared,
    rows: &[usize],
    include_initial: bool,
    want_grad: bool,
    ds: Option<&TrajectoryDataset>,
) -> Result<BatchOut> {
    let mut g = Graph::new();
    let bound = model.flow().bind(&mut g);
    let p = g.input(prep.prev.select(Axis(0), rows));
    let n = g.input(prep.next.select(Axis(0), rows));
    let c = g.input(prep.ctx.select(Axis(0), rows));
    let lp = model.log_density_graph(&mut g, &bound, p, n, c);
    let trans: Vec<f64> = g.value(lp).column(0).to_vec();
    if let Some(bad) = trans.iter().position(|v| !v.is_finite()) {
        let (traj, step) = prep.owner[rows[bad]];
        return Err(degenerate(model, ds, traj, step));
    }
    let mut total = g.sum_all(lp);
    let mut init = Vec::new();
    if include_initial {
        let init_rows: Vec<usize> = rows.iter().filter_map(|&r| prep.init_of[r]).collect();
        if !init_rows.is_empty() {
            let y0 = g.input(prep.init_y.select(Axis(0), &init_rows));
            let c0 = g.input(prep.init_c.select(Axis(0), &init_rows));
            let l0 = model.log_initial_graph(&mut g, &bound, y0, c0);
            for (k, &traj) in init_rows.iter().enumerate() {
                let v = g.value(l0)[[k, 0]];
                if !v.is_finite() {
                    return Err(degenerate(model, ds, traj, 0));
                }
                init.push((traj, v));
            }
            let s0 = g.sum_all(l0);
            total = g.add(total, s0);
        }
    }
    let grad = if want_grad {
        let loss = g.scale(total, -1.0 / rows.len() as f64);
        Some(ParamVector::new(g.backward(loss)?.into_params()))
    } else {
        None
    };
    Ok(BatchOut { trans, init, grad })
}

/// Sum of all log-likelihood terms, evaluated in chunks.
fn total_ll(
    model: &StablePolicyModel,
    prep: &Prepared,
    include_initial: bool,
    ds: Option<&TrajectoryDataset>,
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let all: Vec<usize> = (0..prep.len()).collect();
    let mut trans = Vec::with_capacity(prep.len());
    let mut init = Vec::new();
    for chunk in all.chunks(EVAL_CHUNK) {
        let out = run_batch(model, prep, chunk, include_initial, false, ds)?;
        trans.extend(out.trans);
        init.extend(out.init);
    }
    Ok((trans, init))
}

fn mean_ll(trans: &[f64], init: &[(usize, f64)]) -> f64 {
    let s: f64 = trans.iter().sum::<f64>() + init.iter().map(|(_, v)| v).sum::<f64>();
    s / trans.len() as f64
}

fn adam_config(config: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::with_learning_rate(lr)
    }
}

const MAX_ROLLBACKS: usize = 20;

/// Per-dimension range of the standardized training contexts.
fn context_box(prep: &Prepared) -> Vec<(f64, f64)> {
    prep.ctx
        .columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
        })
        .collect()
}

/// Gradient of the context-linearity penalty on one batch.
fn linearity_grad<R: rand::Rng + ?Sized>(
    model: &StablePolicyModel,
    prep: &Prepared,
    rows: &[usize],
    bounds: &[(f64, f64)],
    weight: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    let (z, _) = model
        .flow()
        .inverse_batch(&prep.prev.select(Axis(0), rows), &prep.ctx.select(Axis(0), rows))?;
    let draw = |rng: &mut R| {
        Array2::from_shape_fn((rows.len(), bounds.len()), |(_, k)| {
            let (lo, hi) = bounds[k];
            lo + (hi - lo) * rng.random::<f64>()
        })
    };
    let ca = draw(rng);
    let cb = draw(rng);
    let cm = (&ca + &cb) * 0.5;
    let mut g = Graph::new();
    let bound = model.flow().bind(&mut g);
    let zv = g.input(z);
    let mut ends = Vec::with_capacity(3);
    for c in [ca, cb, cm] {
        let cv = g.input(c);
        ends.push(bound.forward(&mut g, zv, cv).0);
    }
    let outer = g.add(ends[0], ends[1]);
    let mid = g.scale(ends[2], 2.0);
    let diff = g.sub(outer, mid);
    let sq = g.square(diff);
    let total = g.sum_all(sq);
    let loss = g.scale(total, weight / rows.len() as f64);
    Ok(ParamVector::new(g.backward(loss)?.into_params()))
}

fn clip_norm(grad: &mut ParamVector, limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let norm = grad.as_slice().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let k = limit / norm;
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= k);
    }
}

fn require_transitions(ds: &TrajectoryDataset) -> Result<()> {
    if ds.transition_count() == 0 {
        return Err(Error::InvalidInput("dataset has no transitions".into()));
    }
    Ok(())
}

/// Mean negative log-likelihood per transition.
pub fn dataset_nll(model: &StablePolicyModel, ds: &TrajectoryDataset, include_initial: bool) -> Result<f64> {
    require_transitions(ds)?;
    let prep = Prepared::new(model, ds)?;
    let (trans, init) = total_ll(model, &prep, include_initial, Some(ds))?;
    Ok(-mean_ll(&trans, &init))
}

/// [`dataset_nll`] with its gradient with respect to the flow parameters, in
/// [`Parameterized::flatten`] order.
pub fn dataset_nll_grad(
    model: &StablePolicyModel,
    ds: &TrajectoryDataset,
    include_initial: bool,
) -> Result<(f64, ParamVector)> {
    require_transitions(ds)?;
    let prep = Prepared::new(model, ds)?;
    let all: Vec<usize> = (0..prep.len()).collect();
    let out = run_batch(model, &prep, &all, include_initial, true, Some(ds))?;
    Ok((-mean_ll(&out.trans, &out.init), out.grad.unwrap()))
}

/// Read-only per-trajectory and overall log-likelihood per transition.
pub fn evaluate(model: &StablePolicyModel, ds: &TrajectoryDataset, include_initial: bool) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    require_transitions(ds)?;
    let prep = Prepared::new(model, ds)?;
    let (trans, init) = total_ll(model, &prep, include_initial, Some(ds))?;
    let mut sums = vec![0.0; ds.len()];
    for (&(traj, _), v) in prep.owner.iter().zip(&trans) {
        sums[traj] += v;
    }
    for &(traj, v) in &init {
        sums[traj] += v;
    }
    let per_trajectory = sums
        .iter()
        .zip(&ds.trajectories)
        .map(|(s, t)| s / t.transitions() as f64)
        .collect();
    Ok(EvalReport {
        per_trajectory,
        mean_ll: mean_ll(&trans, &init),
        transitions: trans.len(),
        include_initial_term: include_initial,
    })
}

/// Builds the untrained model for a training split: fitted standardization,
/// resolved latent process and an identity-initialized flow.
pub fn initial_model(config: &TrainConfig, train: &TrajectoryDataset) -> Result<StablePolicyModel> {
    let st = if config.standardize {
        Standardization::fit(train.states(), train.contexts(), train.dim_y, train.dim_c)?
    } else {
        let mut st = Standardization::identity(train.dim_y, train.dim_c);
        st.data_radius = Standardization::fit(train.states(), train.contexts(), train.dim_y, train.dim_c)?.data_radius;
        st
    };
    let latent = config.latent.resolve(train, &st)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let flow = ConditionedFlow::new(train.dim_y, train.dim_c, &config.flow, &mut rng)?;
    StablePolicyModel::new(flow, latent, st)
}

/// Splits, fits and returns the checkpoint with the best held-out
/// log-likelihood (the training split stands in when the test split is
/// empty).
pub fn train(config: &TrainConfig, ds: &TrajectoryDataset) -> Result<(StablePolicyModel, TrainReport)> {
    config.validate()?;
    ds.validate()?;
    let (train_ds, test_ds) = ds.split(config.train_fraction, config.seed)?;
    train_split(config, &train_ds, &test_ds)
}

/// [`train`] on an explicit split.
pub fn train_split(
    config: &TrainConfig,
    train_ds: &TrajectoryDataset,
    test_ds: &TrajectoryDataset,
) -> Result<(StablePolicyModel, TrainReport)> {
    config.validate()?;
    let model = initial_model(config, train_ds)?;
    train_from(config, model, train_ds, test_ds)
}

/// Continues training `model` (its latent dynamics and standardization are
/// kept as they are; `config.flow` and `config.latent` are ignored).
pub fn train_from(
    config: &TrainConfig,
    mut model: StablePolicyModel,
    train_ds: &TrajectoryDataset,
    test_ds: &TrajectoryDataset,
) -> Result<(StablePolicyModel, TrainReport)> {
    config.validate()?;
    require_transitions(train_ds)?;
    let start = Instant::now();
    let train_prep = Prepared::new(&model, train_ds)?;
    let test_prep = if test_ds.transition_count() > 0 {
        Some(Prepared::new(&model, test_ds)?)
    } else {
        None
    };
    let inc = config.include_initial_term;
    let eval = |m: &StablePolicyModel, epoch: usize| -> Result<(f64, f64)> {
        let wrap = |e: Error| match e {
            Error::DegenerateDensity(_) => e,
            other => Error::Training {
                epoch,
                message: other.to_string(),
            },
        };
        let (tr, ti) = total_ll(m, &train_prep, inc, Some(train_ds)).map_err(wrap)?;
        let train_ll = mean_ll(&tr, &ti);
        let test_ll = match &test_prep {
            Some(p) => {
                let (a, b) = total_ll(m, p, inc, Some(test_ds)).map_err(wrap)?;
                mean_ll(&a, &b)
            }
            None => train_ll,
        };
        if !(train_ll.is_finite() && test_ll.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "log-likelihood is not finite".into(),
            });
        }
        Ok((train_ll, test_ll))
    };

    let (initial_train_ll, initial_test_ll) = eval(&model, 0)?;
    info!("epoch 0: train {initial_train_ll:.4} test {initial_test_ll:.4}");
    let mut params = model.flow().flatten();
    let mut lr = config.learning_rate;
    let mut adam = AdamState::new(params.len(), adam_config(config, lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    let mut best = (0usize, initial_test_ll, model.clone());
    // Restore point for rollbacks: best train likelihood so far.
    let mut anchor = (initial_train_ll, initial_test_ll, params.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;
    let mut rollbacks = 0usize;
    let bounds = context_box(&train_prep);
    let smooth = config.context_linearity > 0.0 && bounds.iter().any(|(lo, hi)| hi > lo);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let out = run_batch(&model, &train_prep, batch, inc, true, None).map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            let mut grad = out.grad.unwrap();
            if smooth {
                let extra = linearity_grad(&model, &train_prep, batch, &bounds, config.context_linearity, &mut rng)
                    .map_err(|e| Error::Training {
                        epoch,
                        message: e.to_string(),
                    })?;
                grad.as_mut_slice()
                    .iter_mut()
                    .zip(extra.as_slice())
                    .for_each(|(a, b)| *a += b);
            }
            clip_norm(&mut grad, config.grad_clip);
            adam.step(&mut params, &grad).map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            model.flow_mut().unflatten(&params)?;
        }
        let (train_ll, test_ll) = match eval(&model, epoch) {
            Ok(v) => v,
            Err(e) if config.rollback_threshold == 0.0 => return Err(e),
            Err(_) => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        };
        if config.rollback_threshold > 0.0 && !(train_ll >= anchor.0 - config.rollback_threshold) {
            rollbacks += 1;
            lr *= 0.5;
            info!(
                "epoch {epoch}: train {train_ll:.4} fell below {:.4}; rolling back, learning rate {lr:.3e}",
                anchor.0
            );
            if rollbacks > MAX_ROLLBACKS {
                return Err(Error::Training {
                    epoch,
                    message: format!("diverged {rollbacks} times; last train log-likelihood {train_ll}"),
                });
            }
            params = anchor.2.clone();
            model.flow_mut().unflatten(&params)?;
            adam = AdamState::new(params.len(), adam_config(config, lr))?;
            let (train_ll, test_ll) = (anchor.0, anchor.1);
            history.push(EpochRecord {
                epoch,
                train_ll,
                test_ll,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
            if epoch - best.0 >= config.patience {
                stopped_early = true;
                break;
            }
            continue;
        }
        debug!("epoch {epoch}: train {train_ll:.4} test {test_ll:.4}");
        if train_ll > anchor.0 {
            anchor = (train_ll, test_ll, params.clone());
        }
        history.push(EpochRecord {
            epoch,
            train_ll,
            test_ll,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        if test_ll > best.1 {
            best = (epoch, test_ll, model.clone());
        } else if epoch - best.0 >= config.patience {
            info!("stopping at epoch {epoch}: no improvement since epoch {}", best.0);
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_test_ll, best_model) = best;
    let checksum = best_model.flow().flatten().checksum();
    let report = TrainReport {
        history,
        best_epoch,
        best_test_ll,
        initial_train_ll,
        initial_test_ll,
        wall_clock_s: start.elapsed().as_secs_f64(),
        checksum,
        n_params: params.len(),
        train_transitions: train_ds.transition_count(),
        test_transitions: test_ds.transition_count(),
        stopped_early,
    };
    Ok((best_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, Trajectory};
    use crate::experiments::{gen_cycle_dataset, MorphingCycleSpec};
    use rand::Rng;

    fn latent_data(n_traj: usize, len: usize, seed: u64) -> (TrajectoryDataset, LatentDynamics) {
        let latent = LatentDynamics::Attractor(LinearAttractor::new(2, 2.0, 0.8, 0.05).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n_traj)
            .map(|_| {
                let mut z = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let mut states = vec![z.clone()];
                for _ in 1..len {
                    z = latent.em_step(&z, &mut rng).unwrap();
                    states.push(z.clone());
                }
                Trajectory {
                    contexts: vec![vec![0.3]; len],
                    states,
                }
            })
            .collect();
        let ds = TrajectoryDataset::new(2, 1, 0.05, Provenance::new("test", seed), trajs).unwrap();
        (ds, latent)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            flow: FlowConfig {
                layers: 2,
                hidden: vec![8],
                ..FlowConfig::default()
            },
            latent: LatentConfig::Attractor {
                alpha: Some(2.0),
                sigma: Some(0.8),
                dt: None,
            },
            standardize: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_transition_reduces_to_one_density() {
        let (ds, _) = latent_data(1, 2, 0);
        let model = initial_model(&small_config(), &ds).unwrap();
        let t = &ds.trajectories[0];
        let lp = model
            .log_cond_density(&t.states[0], &t.states[1], &t.contexts[0])
            .unwrap();
        assert!((dataset_nll(&model, &ds, false).unwrap() + lp).abs() < 1e-12);
    }

    #[test]
    fn identity_model_matches_latent_sum() {
        let (ds, latent) = latent_data(3, 20, 1);
        let model = initial_model(&small_config(), &ds).unwrap();
        let mut total = 0.0;
        for t in &ds.trajectories {
            for w in t.states.windows(2) {
                total += latent.log_transition(&w[0], &w[1]).unwrap();
            }
        }
        let nll = dataset_nll(&model, &ds, false).unwrap();
        assert!((nll + total / ds.transition_count() as f64).abs() < 1e-10);
    }

    #[test]
    fn duplication_and_reordering_leave_nll_unchanged() {
        let (ds, _) = latent_data(3, 10, 2);
        let model = initial_model(
            &TrainConfig {
                standardize: true,
                ..small_config()
            },
            &ds,
        )
        .unwrap();
        let base = dataset_nll(&model, &ds, true).unwrap();
        let mut doubled = ds.trajectories.clone();
        doubled.extend(ds.trajectories.clone());
        let mut reversed = ds.trajectories.clone();
        reversed.reverse();
        assert!((dataset_nll(&model, &ds.with_trajectories(doubled), true).unwrap() - base).abs() < 1e-12);
        assert!((dataset_nll(&model, &ds.with_trajectories(reversed), true).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ds, _) = latent_data(2, 8, 3);
        let mut model = initial_model(
            &TrainConfig {
                standardize: true,
                ..small_config()
            },
            &ds,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = model.flow().flatten();
        for v in p.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        model.flow_mut().unflatten(&p).unwrap();
        let (_, grad) = dataset_nll_grad(&model, &ds, true).unwrap();
        for _ in 0..20 {
            let i = rng.random_range(0..p.len());
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.as_mut_slice()[i] += delta;
                let mut m = model.clone();
                m.flow_mut().unflatten(&q).unwrap();
                dataset_nll(&m, &ds, true).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let g = grad.as_slice()[i];
            assert!((g - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "param {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn evaluate_agrees_with_nll() {
        let (ds, _) = latent_data(3, 10, 5);
        let model = initial_model(&small_config(), &ds).unwrap();
        let rep = evaluate(&model, &ds, true).unwrap();
        assert!((rep.mean_ll + dataset_nll(&model, &ds, true).unwrap()).abs() < 1e-12);
        assert_eq!(rep.per_trajectory.len(), 3);
        assert!(evaluate(&model, &ds.with_trajectories(vec![]), true).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (ds, _) = latent_data(4, 10, 6);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let (model, report) = train(&cfg, &ds).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(report.best_epoch, 0);
        assert_eq!(model, initial_model(&cfg, &ds.split(0.8, 0).unwrap().0).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (ds, _) = latent_data(6, 30, 7);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 5e-3,
            standardize: true,
            ..small_config()
        };
        let (a, ra) = train(&cfg, &ds).unwrap();
        let (b, rb) = train(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.checksum, rb.checksum);
        assert_eq!(ra.history.len(), 5);
        assert!(ra.history[4].train_ll > ra.initial_train_ll);
        assert!(ra.to_csv().starts_with("epoch,train_ll,test_ll\n1,"));
    }

    #[test]
    fn degenerate_transition_names_location() {
        let (mut ds, _) = latent_data(2, 5, 8);
        ds.trajectories[1].states[2] = vec![0.0, 0.0];
        let model = initial_model(&small_config(), &ds).unwrap();
        let err = dataset_nll(&model, &ds, false).unwrap_err();
        assert!(
            matches!(err, Error::DegenerateDensity(ref m) if m.contains("trajectory 1, step 3")),
            "{err}"
        );
    }

    #[test]
    fn config_json_defaults() {
        let cfg =
            TrainConfig::from_json_str(r#"{"epochs": 3, "latent": {"kind": "limit_cycle", "omega": 2.0}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 256);
        assert!(TrainConfig::from_json_str(r#"{"epochz": 3}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"train_fraction": 1.0}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"context_linearity": -1.0}"#).is_err());
    }

    #[test]
    fn context_linearity_penalty_moves_a_context_flow() {
        // Two contexts with different targets; the penalty must not break
        // determinism and must change the trained parameters.
        let mk = |c: f64| MorphingCycleSpec {
            context: c,
            revolutions: 0.5,
            ..Default::default()
        };
        let ds = gen_cycle_dataset(&[mk(0.0), mk(1.0)], 1, 0).unwrap();
        let base = TrainConfig {
            epochs: 3,
            flow: FlowConfig {
                layers: 2,
                hidden: vec![8],
                ..FlowConfig::default()
            },
            ..TrainConfig::default()
        };
        let smooth = TrainConfig {
            context_linearity: 10.0,
            ..base.clone()
        };
        let (a, _) = train_split(&base, &ds, &ds).unwrap();
        let (b, _) = train_split(&smooth, &ds, &ds).unwrap();
        let (b2, _) = train_split(&smooth, &ds, &ds).unwrap();
        assert_eq!(b.flow().flatten(), b2.flow().flatten());
        assert_ne!(a.flow().flatten(), b.flow().flatten());
    }
}
