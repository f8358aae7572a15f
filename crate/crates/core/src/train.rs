//! Meta-training: masked inner-loop adaptation and the outer updates of
//! weights, inner step sizes and attention modules.

use std::fmt;
use std::str::FromStr;

use crate::attention::{critical_ratio, pool_abs_mean, pool_mean, scores_graph, LayerAttention, ModuleVars};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::layers::mask_channels;
use crate::model::{forward_graph, init_params, Params};
use crate::plan::AdaptPlan;
use crate::rng::Rng;
use crate::spec::{LayerSpec, NetworkSpec};
use crate::tasks::{Batch, Targets, Task, TaskStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One shared, fixed step size.
    Maml,
    /// Learned per-layer per-step step sizes.
    MamlPlusPlus,
    /// Only the output layer adapts.
    Anil,
    /// Everything but the output layer adapts.
    Boil,
    /// Learned sparse step sizes with attention-masked gradients.
    PMeta,
}

impl Mode {
    pub fn learns_alpha(self) -> bool {
        matches!(self, Mode::MamlPlusPlus | Mode::PMeta)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maml" => Ok(Mode::Maml),
            "maml++" | "mamlpp" => Ok(Mode::MamlPlusPlus),
            "anil" => Ok(Mode::Anil),
            "boil" => Ok(Mode::Boil),
            "pmeta" | "p-meta" => Ok(Mode::PMeta),
            other => Err(invalid!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Maml => "maml",
            Mode::MamlPlusPlus => "maml++",
            Mode::Anil => "anil",
            Mode::Boil => "boil",
            Mode::PMeta => "pmeta",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub mode: Mode,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub lambda: f64,
    pub alpha_init: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub alpha_lr: f64,
    pub attention_lr: f64,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub first_order: bool,
    pub attention: bool,
    pub rho_fw: f64,
    pub rho_bw: f64,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            mode: Mode::PMeta,
            inner_steps: 1,
            task_batch: 4,
            lambda: 0.001,
            alpha_init: 0.01,
            lr: 1e-3,
            lr_min: 1e-5,
            alpha_lr: 1e-3,
            attention_lr: 1e-3,
            epochs: 100,
            tasks_per_epoch: 100,
            val_every: 1,
            val_tasks: 50,
            first_order: false,
            attention: true,
            rho_fw: 0.3,
            rho_bw: 0.0,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(invalid!("inner_steps must be at least 1"));
        }
        if self.task_batch == 0 || self.epochs == 0 || self.tasks_per_epoch == 0 || self.val_every == 0 {
            return Err(invalid!("task_batch, epochs, tasks_per_epoch and val_every must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.alpha_init >= 0.0) {
            return Err(invalid!("lambda and alpha_init must be nonnegative"));
        }
        for (name, v) in [("lr", self.lr), ("lr_min", self.lr_min), ("alpha_lr", self.alpha_lr), ("attention_lr", self.attention_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("{name} must be finite and nonnegative"));
            }
        }
        for r in [self.rho_fw, self.rho_bw] {
            if !(0.0..1.0).contains(&r) {
                return Err(invalid!("clip ratio {r} outside [0, 1)"));
            }
        }
        Ok(())
    }

    fn uses_attention(&self) -> bool {
        self.mode == Mode::PMeta && self.attention
    }
}

/// Fresh plan for a mode: random weights, initial step sizes per the mode's
/// freezing rules, and attention on every trainable layer but the output.
pub fn initial_plan(cfg: &MetaTrainConfig, spec: &NetworkSpec, rng: &mut Rng) -> Result<AdaptPlan> {
    cfg.validate()?;
    let params = init_params(spec, rng)?;
    let n = params.len();
    let alpha = (0..n)
        .map(|l| {
            let last = l + 1 == n;
            let a = match cfg.mode {
                Mode::Anil if !last => 0.0,
                Mode::Boil if last => 0.0,
                _ => cfg.alpha_init,
            };
            vec![a; cfg.inner_steps]
        })
        .collect();
    let trainable = spec.trainable();
    let attention = (0..n)
        .map(|l| {
            if !cfg.uses_attention() || l + 1 == n {
                return None;
            }
            let (ci, co) = mask_channels(&spec.layers[trainable[l]]).expect("trainable layer");
            Some(LayerAttention::new(ci, co, rng))
        })
        .collect();
    let plan = AdaptPlan { spec: spec.clone(), params, alpha, attention, rho_fw: cfg.rho_fw, rho_bw: cfg.rho_bw };
    plan.validate()?;
    Ok(plan)
}

/// Running sums of realized critical ratios.
#[derive(Debug, Clone, Copy, Default)]
pub struct RatioStats {
    pub mu_fw: f64,
    pub mu_bw: f64,
    pub count: usize,
}

impl RatioStats {
    pub fn mean(&self) -> (f64, f64) {
        if self.count == 0 {
            (1.0, 1.0)
        } else {
            (self.mu_fw / self.count as f64, self.mu_bw / self.count as f64)
        }
    }
}

struct PlanVars {
    params: Vec<[Var; 2]>,
    alpha: Vec<Vec<Var>>,
    attention: Vec<Option<[ModuleVars; 2]>>,
}

fn plan_vars(g: &mut Graph, plan: &AdaptPlan) -> PlanVars {
    let params = plan.params.iter().map(|[w, b]| [g.leaf(w.clone()), g.leaf(b.clone())]).collect();
    let alpha = plan.alpha.iter().map(|r| r.iter().map(|&a| g.leaf(Tensor::scalar(a))).collect()).collect();
    let attention =
        plan.attention.iter().map(|a| a.as_ref().map(|a| [a.fw.leaves(g), a.bw.leaves(g)])).collect();
    PlanVars { params, alpha, attention }
}

/// Broadcasts channel scores to the weight shape of a layer.
fn weight_mask(g: &mut Graph, l: &LayerSpec, fw: Var, bw: Var) -> Result<Var> {
    match *l {
        LayerSpec::GroupNorm { .. } => g.mul(fw, bw),
        LayerSpec::FullyConnected { in_features, out_features } => {
            let b = g.reshape(bw, &[out_features, 1])?;
            let f = g.reshape(fw, &[1, in_features])?;
            g.matmul(b, f)
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
            let b = g.reshape(bw, &[out_channels, 1])?;
            let f = g.reshape(fw, &[1, in_channels])?;
            let o = g.matmul(b, f)?;
            let o = g.reshape(o, &[out_channels * in_channels])?;
            let o = g.expand_cols(o, kernel * kernel)?;
            g.reshape(o, &[out_channels, in_channels, kernel, kernel])
        }
        _ => Err(invalid!("{} has no weights", l.kind())),
    }
}

/// K masked inner steps on the support set. Layers whose step size is zero
/// are skipped unless `keep_all` is set (needed to differentiate with
/// respect to a zero step size).
fn unroll(
    g: &mut Graph,
    plan: &AdaptPlan,
    vars: &PlanVars,
    support: &Batch,
    create_graph: bool,
    keep_all: bool,
    stats: &mut RatioStats,
) -> Result<Vec<[Var; 2]>> {
    let trainable = plan.spec.trainable();
    let x = g.leaf(support.x.clone());
    let mut w = vars.params.clone();
    for k in 0..plan.inner_steps() {
        let active: Vec<usize> = (0..w.len()).filter(|&l| keep_all || plan.alpha[l][k] > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let (out, traces) = forward_graph(g, &plan.spec, &w, x)?;
        let loss = support.loss_graph(g, out)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite("support loss".into()));
        }
        let mut wrt = Vec::new();
        for &l in &active {
            wrt.extend(w[l]);
            if vars.attention[l].is_some() {
                wrt.push(traces[l].output);
            }
        }
        let grads = g.grad(loss, &wrt, None, create_graph)?;
        let mut gi = grads.into_iter();
        let mut next = w.clone();
        for &l in &active {
            let mut gw = gi.next().expect("weight grad");
            let mut gb = gi.next().expect("bias grad");
            if let Some([fw_m, bw_m]) = &vars.attention[l] {
                let gy = gi.next().expect("output grad");
                let pf = pool_mean(g, traces[l].stored)?;
                let fw = scores_graph(g, fw_m, pf, plan.rho_fw)?;
                let pb = pool_abs_mean(g, gy)?;
                let bw = scores_graph(g, bw_m, pb, plan.rho_bw)?;
                stats.mu_fw += critical_ratio(g.value(fw).data());
                stats.mu_bw += critical_ratio(g.value(bw).data());
                stats.count += 1;
                let m = weight_mask(g, &plan.spec.layers[trainable[l]], fw, bw)?;
                gw = g.mul(gw, m)?;
                gb = g.mul(gb, bw)?;
            }
            let a = vars.alpha[l][k];
            let sw = g.mul_scalar(gw, a)?;
            let sb = g.mul_scalar(gb, a)?;
            next[l] = [g.sub(w[l][0], sw)?, g.sub(w[l][1], sb)?];
        }
        w = next;
    }
    Ok(w)
}

/// Adapts the plan's weights to a support set on the tape (no meta-gradients).
pub fn adapt_on_graph(plan: &AdaptPlan, support: &Batch) -> Result<Params> {
    let mut g = Graph::first_order();
    let vars = plan_vars(&mut g, plan);
    let mut stats = RatioStats::default();
    let w = unroll(&mut g, plan, &vars, support, false, false, &mut stats)?;
    Ok(w.iter().map(|[a, b]| [g.value(*a).clone(), g.value(*b).clone()]).collect())
}

/// Loss of `params` on a batch.
pub fn batch_loss(spec: &NetworkSpec, params: &[[Tensor; 2]], batch: &Batch) -> Result<(f64, Tensor)> {
    let out = crate::model::predict(spec, params, &batch.x)?;
    let (l, _) = batch.loss_and_grad(&out)?;
    Ok((l, out))
}

/// Query loss and meta-gradients for one task.
#[derive(Debug, Clone)]
pub struct TaskGrad {
    pub loss: f64,
    pub params: Vec<[Tensor; 2]>,
    pub alpha: Vec<Vec<f64>>,
    pub attention: Vec<Option<[[Tensor; 4]; 2]>>,
}

/// Differentiates the post-adaptation query loss with respect to the initial
/// weights, the step sizes and the attention parameters.
pub fn meta_gradient(plan: &AdaptPlan, task: &Task, first_order: bool, stats: &mut RatioStats) -> Result<TaskGrad> {
    let mut g = if first_order { Graph::first_order() } else { Graph::new() };
    let vars = plan_vars(&mut g, plan);
    let w = unroll(&mut g, plan, &vars, &task.support, !first_order, true, stats)?;
    let xq = g.leaf(task.query.x.clone());
    let (out, _) = forward_graph(&mut g, &plan.spec, &w, xq)?;
    let loss = task.query.loss_graph(&mut g, out)?;
    let loss_value = g.value(loss).item();
    let mut wrt: Vec<Var> = vars.params.iter().flatten().copied().collect();
    wrt.extend(vars.alpha.iter().flatten().copied());
    for a in vars.attention.iter().flatten() {
        wrt.extend(a[0].0);
        wrt.extend(a[1].0);
    }
    let grads = g.grad_values(loss, &wrt)?;
    let mut it = grads.into_iter();
    let params = vars.params.iter().map(|_| [it.next().expect("w"), it.next().expect("b")]).collect();
    let alpha = plan.alpha.iter().map(|r| r.iter().map(|_| it.next().expect("alpha").item()).collect()).collect();
    let attention = vars
        .attention
        .iter()
        .map(|a| {
            a.as_ref().map(|_| {
                let mut take4 = || [0; 4].map(|_| it.next().expect("attention"));
                let fw = take4();
                let bw = take4();
                [fw, bw]
            })
        })
        .collect();
    Ok(TaskGrad { loss: loss_value, params, alpha, attention })
}

/// Adam with bias correction over a flat parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.enumerate() {
            let g = grads[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            *p -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Cosine decay from `lr` to `lr_min` over `total` steps.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub query_loss: f64,
    pub val_metric: f64,
    pub alpha_sparsity: f64,
    pub mu_fw: f64,
    pub mu_bw: f64,
}

pub const METRICS_HEADER: &str = "epoch,query_loss,val_metric,alpha_sparsity,mu_fw,mu_bw";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.6},{:.6},{:.6}",
            self.epoch, self.query_loss, self.val_metric, self.alpha_sparsity, self.mu_fw, self.mu_bw
        )
    }
}

/// Pre- and post-adaptation evaluation over a task set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub pre_loss: f64,
    pub post_loss: f64,
    /// Mean post-adaptation accuracy for classification, else NaN.
    pub accuracy: f64,
    /// Fraction of tasks whose query loss strictly decreased.
    pub improved: f64,
}

impl Evaluation {
    /// Validation metric: accuracy for classification, post-adaptation loss otherwise.
    pub fn metric(&self) -> f64 {
        if self.accuracy.is_nan() {
            self.post_loss
        } else {
            self.accuracy
        }
    }
}

pub fn evaluate(plan: &AdaptPlan, tasks: &[Task]) -> Result<Evaluation> {
    let (mut pre, mut post, mut acc, mut improved) = (0.0, 0.0, 0.0, 0usize);
    let mut classes = false;
    for t in tasks {
        let (l0, _) = batch_loss(&plan.spec, &plan.params, &t.query)?;
        let adapted = adapt_on_graph(plan, &t.support)?;
        let (l1, out) = batch_loss(&plan.spec, &adapted, &t.query)?;
        pre += l0;
        post += l1;
        if l1 < l0 {
            improved += 1;
        }
        if let Some(a) = t.query.accuracy(&out) {
            acc += a;
            classes = true;
        }
    }
    let n = tasks.len().max(1) as f64;
    Ok(Evaluation {
        pre_loss: pre / n,
        post_loss: post / n,
        accuracy: if classes { acc / n } else { f64::NAN },
        improved: improved as f64 / n,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub plan: AdaptPlan,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn flat_params(p: &Params) -> Vec<f64> {
    p.iter().flat_map(|[w, b]| w.data().iter().chain(b.data()).copied().collect::<Vec<_>>()).collect()
}

fn params_mut(p: &mut Params) -> impl Iterator<Item = &mut f64> {
    p.iter_mut().flat_map(|[w, b]| w.data_mut().iter_mut().chain(b.data_mut().iter_mut()))
}

fn attention_mut(a: &mut [Option<LayerAttention>]) -> impl Iterator<Item = &mut f64> {
    a.iter_mut().flatten().flat_map(|la| {
        let [a, b, c, d] = la.fw.tensors_mut();
        let [e, f, g, h] = la.bw.tensors_mut();
        [a, b, c, d, e, f, g, h].into_iter().flat_map(|t| t.data_mut().iter_mut())
    })
}

fn attention_len(a: &[Option<LayerAttention>]) -> usize {
    a.iter().flatten().map(|la| la.fw.tensors().iter().chain(la.bw.tensors().iter()).map(|t| t.len()).sum::<usize>()).sum()
}

/// Runs meta-training and returns the plan of the best validation epoch.
pub fn meta_train(cfg: &MetaTrainConfig, spec: &NetworkSpec, tasks: &mut TaskStream, val_tasks: &[Task]) -> Result<TrainOutcome> {
    meta_train_with(cfg, spec, tasks, val_tasks, |_| {})
}

/// As [`meta_train`], invoking `on_epoch` after every epoch.
pub fn meta_train_with(
    cfg: &MetaTrainConfig,
    spec: &NetworkSpec,
    tasks: &mut TaskStream,
    val_tasks: &[Task],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut plan = initial_plan(cfg, spec, &mut rng)?;
    let n_params = flat_params(&plan.params).len();
    let mut adam_w = Adam::new(n_params);
    let mut adam_a = Adam::new(plan.alpha.iter().map(Vec::len).sum());
    let mut adam_t = Adam::new(attention_len(&plan.attention));
    let input_words = plan.input_words();
    let batches = cfg.tasks_per_epoch.div_ceil(cfg.task_batch);
    let total = cfg.epochs * batches;
    let mut step = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, AdaptPlan)> = None;
    let classification = val_tasks.first().is_some_and(|t| matches!(t.query.y, Targets::Classes { .. }));
    let mut last_val = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let mut stats = RatioStats::default();
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for bi in 0..batches {
            let count = cfg.task_batch.min(cfg.tasks_per_epoch - bi * cfg.task_batch);
            let mut gw = vec![0.0; n_params];
            let mut ga: Vec<f64> = vec![0.0; adam_a.m.len()];
            let mut gt: Vec<f64> = vec![0.0; adam_t.m.len()];
            for _ in 0..count {
                let task = tasks.next_task();
                let tg = meta_gradient(&plan, &task, cfg.first_order, &mut stats)
                    .map_err(|e| Error::Diverged { epoch, msg: e.to_string() })?;
                if !tg.loss.is_finite() {
                    return Err(Error::Diverged { epoch, msg: "query loss is not finite".into() });
                }
                loss_sum += tg.loss;
                seen += 1;
                for (acc, g) in gw.iter_mut().zip(tg.params.iter().flat_map(|[w, b]| w.data().iter().chain(b.data()))) {
                    *acc += g;
                }
                for (acc, g) in ga.iter_mut().zip(tg.alpha.iter().flatten()) {
                    *acc += g;
                }
                let att = tg.attention.iter().flatten().flat_map(|m| m.iter().flatten()).flat_map(|t| t.data().iter());
                for (acc, g) in gt.iter_mut().zip(att) {
                    *acc += g;
                }
            }
            let inv = 1.0 / count as f64;
            for v in gw.iter_mut().chain(ga.iter_mut()).chain(gt.iter_mut()) {
                *v *= inv;
            }
            if gw.iter().chain(&ga).chain(&gt).any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, msg: "meta-gradient is not finite".into() });
            }
            let lr = cosine_lr(cfg.lr, cfg.lr_min, step, total);
            let scale = lr / cfg.lr.max(f64::MIN_POSITIVE);
            adam_w.step(params_mut(&mut plan.params), &gw, lr);
            if cfg.mode.learns_alpha() {
                let k = cfg.inner_steps;
                let lambda = if cfg.mode == Mode::PMeta { cfg.lambda } else { 0.0 };
                for (i, g) in ga.iter_mut().enumerate() {
                    let a = plan.alpha[i / k][i % k];
                    if a > 0.0 {
                        *g += lambda * input_words[i / k] as f64;
                    }
                }
                adam_a.step(plan.alpha.iter_mut().flatten(), &ga, cfg.alpha_lr * scale);
                for a in plan.alpha.iter_mut().flatten() {
                    if *a < 0.0 {
                        *a = 0.0;
                    }
                }
            }
            if !gt.is_empty() {
                adam_t.step(attention_mut(&mut plan.attention), &gt, cfg.attention_lr * scale);
            }
            step += 1;
        }
        if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let ev = evaluate(&plan, val_tasks)?;
            last_val = ev.metric();
            let better = match &best {
                None => true,
                Some((b, _, _)) => {
                    if classification {
                        last_val > *b
                    } else {
                        last_val < *b
                    }
                }
            };
            if better && last_val.is_finite() {
                best = Some((last_val, epoch, plan.clone()));
            }
        }
        let (mu_fw, mu_bw) = stats.mean();
        let m = EpochMetrics {
            epoch,
            query_loss: loss_sum / seen.max(1) as f64,
            val_metric: last_val,
            alpha_sparsity: plan.alpha_sparsity(),
            mu_fw,
            mu_bw,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    let (best_epoch, plan) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs, plan),
    };
    Ok(TrainOutcome { plan, metrics, best_epoch })
}
