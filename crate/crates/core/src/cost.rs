//! Analytical memory and MAC model for inference and few-shot adaptation.
//!
//! Activation sizes are per sample and scaled by the batch. One word is four
//! bytes; one MB is 10^6 bytes unless a caller converts differently.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::spec::{LayerSpec, NetworkSpec, Shape};
use crate::train::Mode;

pub const BYTES_PER_WORD: f64 = 4.0;
pub const BYTES_PER_MB: f64 = 1e6;
/// Flags per word for ReLU derivative storage.
pub const T_RELU: f64 = 32.0;
/// Indices per word for max-pooling derivative storage.
pub const T_POOL: f64 = 16.0;

pub fn words_to_mb(words: f64) -> f64 {
    words * BYTES_PER_WORD / BYTES_PER_MB
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv,
    Fc,
    Norm,
    Relu,
    Pool,
    Add,
    AvgPool,
}

/// One primitive op of a network after residual blocks are expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLayer {
    pub name: String,
    pub kind: OpKind,
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    /// `m(w)`, biases and shifts excluded.
    pub weight_words: usize,
    /// Reads the network input, which is sample memory rather than dynamic memory.
    pub from_input: bool,
    /// Words held by a parallel branch while this op runs forward.
    pub held_fw: usize,
    /// Words held by a parallel branch while this op runs backward.
    pub held_bw: usize,
}

impl CostLayer {
    pub fn trainable(&self) -> bool {
        matches!(self.kind, OpKind::Conv | OpKind::Fc | OpKind::Norm)
    }

    /// Channel count and plane size of the input as a stored tensor sees it.
    pub fn input_channels(&self) -> (usize, usize) {
        match self.kind {
            OpKind::Fc => (self.input.words(), 1),
            _ => (self.input.c, self.input.hw()),
        }
    }

    pub fn output_channels(&self) -> usize {
        match self.kind {
            OpKind::Fc => self.output.words(),
            _ => self.output.c,
        }
    }

    /// `H_l W_l m(w_l)` per sample.
    pub fn forward_macs(&self) -> f64 {
        match self.kind {
            OpKind::Conv | OpKind::Norm => (self.output.hw() * self.weight_words) as f64,
            OpKind::Fc => self.weight_words as f64,
            _ => 0.0,
        }
    }

    /// `H_{l-1} W_{l-1} m(w_l)` per sample.
    pub fn input_grad_macs(&self) -> f64 {
        match self.kind {
            OpKind::Conv | OpKind::Norm => (self.input.hw() * self.weight_words) as f64,
            OpKind::Fc => self.weight_words as f64,
            _ => 0.0,
        }
    }

    /// Working set while the op runs: shared buffers for elementwise and
    /// spatial ops, separate input and output for dense and add ops.
    fn transient(&self) -> f64 {
        let (i, o) = (self.input.words() as f64, self.output.words() as f64);
        match self.kind {
            OpKind::Fc | OpKind::Add => i + o,
            _ => i.max(o),
        }
    }
}

/// Flattens a spec into primitive ops. Residual blocks become a 1x1 conv and
/// group-norm shortcut followed by three 3x3 conv + group-norm stages, an add,
/// a ReLU and a max-pool.
pub fn expand(spec: &NetworkSpec) -> Result<Vec<CostLayer>> {
    let shapes = spec.shapes()?;
    let mut out = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let (s_in, s_out) = (shapes[i], shapes[i + 1]);
        let from_input = i == 0;
        let op = |name: String, kind, input, output, kernel, weight_words| CostLayer {
            name,
            kind,
            input,
            output,
            kernel,
            weight_words,
            from_input,
            held_fw: 0,
            held_bw: 0,
        };
        match *l {
            LayerSpec::Conv2d { kernel, .. } => out.push(op(format!("{i}.conv"), OpKind::Conv, s_in, s_out, kernel, l.weight_words())),
            LayerSpec::FullyConnected { .. } => out.push(op(format!("{i}.fc"), OpKind::Fc, s_in, s_out, 1, l.weight_words())),
            LayerSpec::GroupNorm { .. } => out.push(op(format!("{i}.norm"), OpKind::Norm, s_in, s_out, 1, l.weight_words())),
            LayerSpec::Relu => out.push(op(format!("{i}.relu"), OpKind::Relu, s_in, s_out, 0, 0)),
            LayerSpec::MaxPool { .. } => out.push(op(format!("{i}.pool"), OpKind::Pool, s_in, s_out, 0, 0)),
            LayerSpec::GlobalAvgPool => out.push(op(format!("{i}.avgpool"), OpKind::AvgPool, s_in, s_out, 0, 0)),
            LayerSpec::ResnetBlock { in_channels, out_channels, .. } => {
                let full = Shape::image(out_channels, s_in.h, s_in.w);
                let m_full = full.words();
                let m_in = s_in.words();
                let mut push = |name: &str, kind, input: Shape, kernel: usize, ww: usize, fw: usize, bw: usize, first: bool| {
                    let mut o = op(format!("{i}.{name}"), kind, input, full, kernel, ww);
                    o.from_input = from_input && first;
                    o.held_fw = fw;
                    o.held_bw = bw;
                    out.push(o);
                };
                push("shortcut.conv", OpKind::Conv, s_in, 1, out_channels * in_channels, 0, m_in, true);
                push("shortcut.norm", OpKind::Norm, full, 1, out_channels, 0, m_in, false);
                let mut c = in_channels;
                for stage in 1..=3 {
                    let input = Shape::image(c, s_in.h, s_in.w);
                    push(&format!("conv{stage}"), OpKind::Conv, input, 3, out_channels * c * 9, m_full, m_full, stage == 1);
                    push(&format!("norm{stage}"), OpKind::Norm, full, 1, out_channels, m_full, m_full, false);
                    if stage < 3 {
                        push(&format!("relu{stage}"), OpKind::Relu, full, 0, 0, m_full, m_full, false);
                    }
                    c = out_channels;
                }
                push("add", OpKind::Add, full, 0, 0, 0, 0, false);
                push("relu", OpKind::Relu, full, 0, 0, 0, 0, false);
                let mut p = op(format!("{i}.pool"), OpKind::Pool, full, s_out, 0, 0);
                p.from_input = false;
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Inputs to the adaptation formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct CostQuery {
    pub spec: NetworkSpec,
    pub batch: usize,
    /// `alpha_hat[l][k]` per trainable op of the expanded network.
    pub alpha_hat: Vec<Vec<bool>>,
    pub mu_fw: Vec<f64>,
    pub mu_bw: Vec<f64>,
}

impl CostQuery {
    /// Masks of a dense method with `steps` inner steps and unit ratios.
    pub fn for_method(spec: &NetworkSpec, mode: Mode, batch: usize, steps: usize) -> Result<Self> {
        if mode == Mode::PMeta {
            return Err(Error::Invalid("pmeta costs come from a plan or a session, not a fixed mask".into()));
        }
        let n = trainable_count(spec)?;
        let row = |on: bool| vec![on; steps];
        let alpha_hat = (0..n)
            .map(|l| match mode {
                Mode::Maml | Mode::MamlPlusPlus => row(true),
                Mode::Anil => row(l + 1 == n),
                Mode::Boil => row(l + 1 != n),
                Mode::PMeta => unreachable!(),
            })
            .collect();
        Ok(CostQuery { spec: spec.clone(), batch, alpha_hat, mu_fw: vec![1.0; n], mu_bw: vec![1.0; n] })
    }

    fn check(&self) -> Result<Vec<CostLayer>> {
        let ops = expand(&self.spec)?;
        let n = ops.iter().filter(|o| o.trainable()).count();
        if self.alpha_hat.len() != n || self.mu_fw.len() != n || self.mu_bw.len() != n {
            return Err(shape_err!(
                "{} trainable ops but {} mask rows, {} forward and {} backward ratios",
                n,
                self.alpha_hat.len(),
                self.mu_fw.len(),
                self.mu_bw.len()
            ));
        }
        let k = self.steps();
        if k == 0 || self.alpha_hat.iter().any(|r| r.len() != k) {
            return Err(shape_err!("step masks must form an L x K matrix with K >= 1"));
        }
        if self.mu_fw.iter().chain(&self.mu_bw).any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Invalid("ratios must lie in [0, 1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be at least 1".into()));
        }
        Ok(ops)
    }

    pub fn steps(&self) -> usize {
        self.alpha_hat.first().map_or(0, Vec::len)
    }

    fn step_mask(&self, k: usize) -> Vec<bool> {
        self.alpha_hat.iter().map(|r| r[k]).collect()
    }
}

fn trainable_count(spec: &NetworkSpec) -> Result<usize> {
    Ok(expand(spec)?.iter().filter(|o| o.trainable()).count())
}

/// Per-op values indexed like the expanded network, from per-trainable-op values.
fn spread<T: Copy>(ops: &[CostLayer], per_trainable: &[T], fill: T) -> Vec<T> {
    let mut it = per_trainable.iter();
    ops.iter().map(|o| if o.trainable() { *it.next().expect("length checked") } else { fill }).collect()
}

/// `(peak words, MACs)` of inference on a batch of `batch` samples.
pub fn inference_cost(spec: &NetworkSpec, batch: usize) -> Result<(f64, f64)> {
    let ops = expand(spec)?;
    let peak = ops.iter().map(|o| o.held_fw as f64 + o.transient()).fold(0.0, f64::max);
    let macs: f64 = ops.iter().map(CostLayer::forward_macs).sum();
    Ok((batch as f64 * peak, batch as f64 * macs))
}

/// `(m(x_l), m(w_l))` per layer of the spec, activation words per sample.
pub fn layer_memory(spec: &NetworkSpec) -> Result<Vec<(usize, usize)>> {
    let shapes = spec.shapes()?;
    Ok(spec.layers.iter().enumerate().map(|(i, l)| (shapes[i + 1].words(), l.weight_words())).collect())
}

/// Terms of the full peak-memory expression for one step, in words.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundTerms {
    pub activation_max: f64,
    pub weights: f64,
    pub stored: f64,
    pub sigma: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.activation_max + self.weights + self.stored + self.sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakMemory {
    /// Literal bound for the worst step.
    pub bound: BoundTerms,
    /// Dominant stored-activation term for the worst step, in words.
    pub stored_term: f64,
    /// Buffer-liveness estimate for the worst step, in words.
    pub simulated: f64,
}

fn sigma_words(o: &CostLayer) -> f64 {
    match o.kind {
        OpKind::Relu => o.input.words() as f64 / T_RELU,
        OpKind::Pool => o.output.words() as f64 / T_POOL,
        _ => 0.0,
    }
}

fn step_terms(ops: &[CostLayer], active: &[bool], mu_fw: &[f64], batch: f64) -> (BoundTerms, f64, f64) {
    let l_min = active.iter().position(|a| *a);
    let act_max = ops.iter().map(|o| o.input.words().max(o.output.words())).max().unwrap_or(0) as f64;
    let mut t = BoundTerms { activation_max: batch * act_max, ..Default::default() };
    for (i, o) in ops.iter().enumerate() {
        if active[i] {
            t.weights += o.weight_words as f64;
            t.stored += batch * mu_fw[i] * o.input.words() as f64;
        }
        if l_min.is_some_and(|m| i >= m) {
            t.sigma += batch * sigma_words(o);
        }
    }
    let sim = simulate(ops, active, mu_fw);
    (t, t.stored, t.weights + batch * sim)
}

/// Per-sample peak of live activation buffers over one forward and backward pass.
fn simulate(ops: &[CostLayer], active: &[bool], mu_fw: &[f64]) -> f64 {
    let l_min = active.iter().position(|a| *a);
    let retained: Vec<f64> = ops
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let keep = l_min.is_some_and(|m| i > m);
            let m_in = o.input.words() as f64;
            match o.kind {
                OpKind::Conv | OpKind::Fc if active[i] && !o.from_input => mu_fw[i] * m_in,
                OpKind::Norm if keep => m_in,
                OpKind::Norm if active[i] => mu_fw[i] * m_in,
                OpKind::Relu | OpKind::Pool if keep => sigma_words(o),
                _ => 0.0,
            }
        })
        .collect();
    let mut live = 0.0;
    let mut peak: f64 = 0.0;
    for (o, r) in ops.iter().zip(&retained) {
        peak = peak.max(live + o.held_fw as f64 + o.transient());
        live += r;
    }
    if let Some(m) = l_min {
        for i in (m..ops.len()).rev() {
            live -= retained[i];
            let o = &ops[i];
            let work = if i == m { o.output.words() as f64 } else { o.transient() };
            peak = peak.max(live + o.held_bw as f64 + work);
        }
    }
    peak
}

/// Peak dynamic memory of adaptation, worst step over K.
pub fn adapt_peak_memory(q: &CostQuery) -> Result<PeakMemory> {
    let ops = q.check()?;
    let mu = spread(&ops, &q.mu_fw, 0.0);
    let mut best: Option<PeakMemory> = None;
    for k in 0..q.steps() {
        let active = spread(&ops, &q.step_mask(k), false);
        let (bound, stored_term, simulated) = step_terms(&ops, &active, &mu, q.batch as f64);
        if best.as_ref().map_or(true, |b| simulated > b.simulated || (simulated == b.simulated && bound.total() > b.bound.total())) {
            best = Some(PeakMemory { bound, stored_term, simulated });
        }
    }
    Ok(best.expect("at least one step"))
}

/// MAC terms of one inner step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacTerms {
    pub forward: f64,
    pub weight_grad: f64,
    pub input_grad: f64,
}

impl MacTerms {
    pub fn total(&self) -> f64 {
        self.forward + self.weight_grad + self.input_grad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacCost {
    pub per_step: Vec<MacTerms>,
}

impl MacCost {
    pub fn total(&self) -> f64 {
        self.per_step.iter().map(MacTerms::total).sum()
    }

    pub fn mean_step(&self) -> f64 {
        self.total() / self.per_step.len().max(1) as f64
    }
}

/// Adaptation MACs per step; input gradients run for every op above the
/// shallowest adapting layer.
pub fn adapt_macs(q: &CostQuery) -> Result<MacCost> {
    let ops = q.check()?;
    let (fw, bw) = (spread(&ops, &q.mu_fw, 0.0), spread(&ops, &q.mu_bw, 0.0));
    let b = q.batch as f64;
    let per_step = (0..q.steps())
        .map(|k| {
            let active = spread(&ops, &q.step_mask(k), false);
            let l_min = active.iter().position(|a| *a);
            let mut t = MacTerms::default();
            for (i, o) in ops.iter().enumerate() {
                t.forward += b * o.forward_macs();
                if active[i] {
                    t.weight_grad += b * o.forward_macs() * fw[i] * bw[i];
                }
                if l_min.is_some_and(|m| i > m) {
                    t.input_grad += b * o.input_grad_macs();
                }
            }
            t
        })
        .collect();
    Ok(MacCost { per_step })
}

/// Stored words for realized masks: `b * sum_l [alpha_l > 0] nnz_fw_l * H_{l-1} W_{l-1}`.
pub fn stored_words_realized(spec: &NetworkSpec, active: &[bool], nnz_fw: &[usize], batch: usize) -> Result<usize> {
    let ops = expand(spec)?;
    let tr: Vec<&CostLayer> = ops.iter().filter(|o| o.trainable()).collect();
    if active.len() != tr.len() || nnz_fw.len() != tr.len() {
        return Err(shape_err!("{} trainable ops, {} flags, {} counts", tr.len(), active.len(), nnz_fw.len()));
    }
    Ok(tr.iter().zip(active).zip(nnz_fw).filter(|((_, a), _)| **a).map(|((o, _), n)| batch * n * o.input_channels().1).sum())
}

/// Weight-gradient MACs of one trainable op for realized masks:
/// `b * H_l W_l * k^2 * nnz_fw * nnz_bw` for conv and `b * nnz_fw * nnz_bw` for fc.
pub fn weight_grad_macs_realized(spec: &NetworkSpec, slot: usize, nnz_fw: usize, nnz_bw: usize, batch: usize) -> Result<u64> {
    let ops = expand(spec)?;
    let o = ops
        .iter()
        .filter(|o| o.trainable())
        .nth(slot)
        .ok_or_else(|| shape_err!("no trainable op {slot}"))?;
    Ok(match o.kind {
        OpKind::Conv => (batch * o.output.hw() * o.kernel * o.kernel * nnz_fw * nnz_bw) as u64,
        OpKind::Fc => (batch * nnz_fw * nnz_bw) as u64,
        _ => (batch * o.output.hw() * nnz_fw.min(nnz_bw)) as u64,
    })
}

/// One row of a resource table.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: String,
    pub method: String,
    pub setting: String,
    pub spec: NetworkSpec,
    pub inference_mem_batch: usize,
    pub inference_mac_batch: usize,
    pub adapt_mem_batch: usize,
    pub adapt_mac_batch: usize,
    pub alpha_hat: Vec<Vec<bool>>,
    pub mu_fw: Vec<f64>,
    pub mu_bw: Vec<f64>,
}

impl Scenario {
    /// A dense-method row: `shots` per class over 5 ways, memory at batch 1.
    pub fn method(model: &str, method: Mode, shots: usize) -> Result<Scenario> {
        let spec = NetworkSpec::preset(model, 5)?;
        let q = CostQuery::for_method(&spec, method, 1, 1)?;
        let b = 5 * shots;
        Ok(Scenario {
            model: model.to_string(),
            method: method.to_string(),
            setting: format!("5-way {shots}-shot"),
            spec,
            inference_mem_batch: 1,
            inference_mac_batch: b,
            adapt_mem_batch: 1,
            adapt_mac_batch: b,
            alpha_hat: q.alpha_hat,
            mu_fw: q.mu_fw,
            mu_bw: q.mu_bw,
        })
    }

    fn query(&self, batch: usize) -> CostQuery {
        CostQuery {
            spec: self.spec.clone(),
            batch,
            alpha_hat: self.alpha_hat.clone(),
            mu_fw: self.mu_fw.clone(),
            mu_bw: self.mu_bw.clone(),
        }
    }
}

/// Rows of the static/dynamic resource table: image models at batch 25 and a
/// locomotion policy over 20 rollouts of 200 steps.
pub fn table1() -> Result<Vec<Scenario>> {
    let mut rows = Vec::new();
    for (model, mem_b, mac_b, adapt_b) in [("4conv", 1, 25, 25), ("resnet12", 1, 25, 25), ("mlp-100-100", 1, 4000, 4000)] {
        let mut s = Scenario::method(model, Mode::Maml, 5)?;
        s.setting = "table1".into();
        s.inference_mem_batch = mem_b;
        s.inference_mac_batch = mac_b;
        s.adapt_mem_batch = adapt_b;
        s.adapt_mac_batch = adapt_b;
        rows.push(s);
    }
    Ok(rows)
}

/// Dense-method rows of the few-shot image table.
pub fn table2(shots: usize) -> Result<Vec<Scenario>> {
    let mut rows = Vec::new();
    for model in ["4conv", "resnet12"] {
        for m in [Mode::Maml, Mode::Anil, Mode::Boil, Mode::MamlPlusPlus] {
            rows.push(Scenario::method(model, m, shots)?);
        }
    }
    Ok(rows)
}

/// Per-op detail of a scenario, counts per sample and per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub layer: String,
    pub output_words: usize,
    pub weight_words: usize,
    pub stored_words: f64,
    pub forward_macs: f64,
    pub input_grad_macs: f64,
    pub weight_grad_macs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub method: String,
    pub setting: String,
    pub inference_mb: f64,
    pub adapt_mb: f64,
    pub inference_gmac: f64,
    pub adapt_gmac: f64,
    pub memory: PeakMemory,
    pub layers: Vec<LayerRow>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResourceReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "model,method,setting,inference_MB,adapt_MB,inference_GMAC,adapt_GMAC";
pub const DETAIL_HEADER: &str =
    "model,method,setting,layer,output_words,weight_words,stored_words,forward_MAC,input_grad_MAC,weight_grad_MAC";
pub const BREAKDOWN_HEADER: &str = "model,method,setting,activation_max_MB,weights_MB,stored_MB,sigma_MB,bound_MB,stored_term_MB,simulated_MB";

impl ResourceReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.model, r.method, r.setting, r.inference_mb, r.adapt_mb, r.inference_gmac, r.adapt_gmac
            );
        }
        s
    }

    pub fn detail_csv(&self) -> String {
        let mut s = format!("{DETAIL_HEADER}\n");
        for r in &self.rows {
            for l in &r.layers {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.model,
                    r.method,
                    r.setting,
                    l.layer,
                    l.output_words,
                    l.weight_words,
                    l.stored_words,
                    l.forward_macs,
                    l.input_grad_macs,
                    l.weight_grad_macs
                );
            }
        }
        s
    }

    /// Term-by-term adaptation memory for each row.
    pub fn breakdown_csv(&self) -> String {
        let mut s = format!("{BREAKDOWN_HEADER}\n");
        for r in &self.rows {
            let m = &r.memory;
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.model,
                r.method,
                r.setting,
                words_to_mb(m.bound.activation_max),
                words_to_mb(m.bound.weights),
                words_to_mb(m.bound.stored),
                words_to_mb(m.bound.sigma),
                words_to_mb(m.bound.total()),
                words_to_mb(m.stored_term),
                words_to_mb(m.simulated)
            );
        }
        s
    }
}

pub fn table_report(scenarios: &[Scenario]) -> Result<ResourceReport> {
    let mut rows = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let (inf_words, _) = inference_cost(&sc.spec, sc.inference_mem_batch)?;
        let (_, inf_macs) = inference_cost(&sc.spec, sc.inference_mac_batch)?;
        let memory = adapt_peak_memory(&sc.query(sc.adapt_mem_batch))?;
        let macs = adapt_macs(&sc.query(sc.adapt_mac_batch))?;
        let ops = expand(&sc.spec)?;
        let any = |i: usize| sc.alpha_hat[i].iter().any(|a| *a);
        let mut t = 0;
        let layers = ops
            .iter()
            .map(|o| {
                let (stored, wg) = if o.trainable() {
                    let on = any(t);
                    let r = if on {
                        (sc.mu_fw[t] * o.input.words() as f64, o.forward_macs() * sc.mu_fw[t] * sc.mu_bw[t])
                    } else {
                        (0.0, 0.0)
                    };
                    t += 1;
                    r
                } else {
                    (0.0, 0.0)
                };
                LayerRow {
                    layer: o.name.clone(),
                    output_words: o.output.words(),
                    weight_words: o.weight_words,
                    stored_words: stored,
                    forward_macs: o.forward_macs(),
                    input_grad_macs: o.input_grad_macs(),
                    weight_grad_macs: wg,
                }
            })
            .collect();
        rows.push(ReportRow {
            model: sc.model.clone(),
            method: sc.method.clone(),
            setting: sc.setting.clone(),
            inference_mb: words_to_mb(inf_words),
            adapt_mb: words_to_mb(memory.simulated),
            inference_gmac: inf_macs / 1e9,
            adapt_gmac: macs.mean_step() / 1e9,
            memory,
            layers,
        });
    }
    Ok(ResourceReport { rows })
}
