//! Few-shot adaptation under memory discipline: partial batches with
//! gradient accumulation, channel-subsampled activation storage, backward
//! truncation at the shallowest adapting layer, and live counters.

use crate::attention::pool_mean_values;
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{self, ActivationStore, ChannelMask, GroupNormCache, WeightGrad};
use crate::model::Params;
use crate::plan::AdaptPlan;
use crate::spec::LayerSpec;
use crate::tasks::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptOptions {
    /// Samples per partial batch.
    pub partial_batch: usize,
    pub rho_fw: Option<f64>,
    pub rho_bw: Option<f64>,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions { partial_batch: 1, rho_fw: None, rho_bw: None }
    }
}

/// Realized counts for one partial batch of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialRecord {
    pub samples: usize,
    /// Nonzero forward scores per trainable layer (0 for frozen layers).
    pub nnz_fw: Vec<usize>,
    /// Nonzero backward scores per trainable layer (0 for frozen layers).
    pub nnz_bw: Vec<usize>,
    /// Channels kept by the forward scores per trainable layer.
    pub fw_support: Vec<Vec<usize>>,
    /// Peak words held by the activation store.
    pub stored_words: usize,
    /// Words the store retained per trainable layer.
    pub layer_words: Vec<usize>,
    /// Weight-gradient MACs per trainable layer.
    pub weight_macs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub active: Vec<bool>,
    /// Shallowest adapting trainable layer.
    pub l_min: Option<usize>,
    pub partials: Vec<PartialRecord>,
    pub forward_macs: u64,
    pub input_grad_macs: u64,
    pub weight_grad_macs: u64,
    pub attention_macs: u64,
    /// Largest pooled-score buffer of the attention modules, in words.
    pub attention_words: usize,
    /// Largest store occupancy over the step's partial batches.
    pub peak_stored_words: usize,
    /// Store size if every partial batch kept the union of the step's channels.
    pub union_stored_words: usize,
    /// Words of one-bit ReLU flags (T = 32) plus pooling indices (T = 16), largest partial batch.
    pub sigma_words: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub steps: Vec<StepRecord>,
    pub support_size: usize,
    pub partial_batch: usize,
}

impl SessionReport {
    /// `(peak stored words, total MACs)` over the session.
    pub fn measure(&self) -> (usize, u64) {
        let peak = self.steps.iter().map(|s| s.peak_stored_words).max().unwrap_or(0);
        let macs = self
            .steps
            .iter()
            .map(|s| s.forward_macs + s.input_grad_macs + s.weight_grad_macs + s.attention_macs)
            .sum();
        (peak, macs)
    }

    pub fn weight_grad_macs(&self) -> u64 {
        self.steps.iter().map(|s| s.weight_grad_macs).sum()
    }
}

pub fn measure_session(report: &SessionReport) -> (usize, u64) {
    report.measure()
}

enum State {
    Shape(Vec<usize>),
    Norm(GroupNormCache),
    Relu(Vec<bool>),
    Pool(Vec<usize>, Vec<usize>),
}

fn add_scaled(acc: &mut Option<[Tensor; 2]>, g: &WeightGrad, s: f64) -> Result<()> {
    match acc {
        None => *acc = Some([g.w.scale(s), g.b.scale(s)]),
        Some([w, b]) => {
            w.axpy(s, &g.w)?;
            b.axpy(s, &g.b)?;
        }
    }
    Ok(())
}

/// Runs the plan's K inner steps on `support` and returns adapted weights with
/// the session's counters.
pub fn few_shot_adapt(plan: &AdaptPlan, support: &Batch, opts: &AdaptOptions) -> Result<(Params, SessionReport)> {
    plan.validate()?;
    if opts.partial_batch == 0 {
        return Err(invalid!("partial batch size must be at least 1"));
    }
    let rho_fw = opts.rho_fw.unwrap_or(plan.rho_fw);
    let rho_bw = opts.rho_bw.unwrap_or(plan.rho_bw);
    let spec = &plan.spec;
    let mut want = vec![support.len()];
    want.extend(spec.input.dims());
    if support.x.shape() != want.as_slice() {
        return Err(shape_err!("support inputs {:?} do not match network input {:?}", support.x.shape(), want));
    }
    let trainable = spec.trainable();
    let slot_of: Vec<Option<usize>> =
        (0..spec.layers.len()).map(|i| trainable.iter().position(|&t| t == i)).collect();
    let n_slots = trainable.len();
    let n = support.len();
    let mut params = plan.params.clone();
    let mut steps = Vec::with_capacity(plan.inner_steps());
    for k in 0..plan.inner_steps() {
        let active: Vec<bool> = (0..n_slots).map(|t| plan.alpha[t][k] > 0.0).collect();
        let l_min_slot = active.iter().position(|a| *a);
        let l_min = l_min_slot.map(|t| trainable[t]);
        let mut rec = StepRecord {
            step: k,
            active: active.clone(),
            l_min: l_min_slot,
            partials: Vec::new(),
            forward_macs: 0,
            input_grad_macs: 0,
            weight_grad_macs: 0,
            attention_macs: 0,
            attention_words: 0,
            peak_stored_words: 0,
            union_stored_words: 0,
            sigma_words: 0,
        };
        let mut acc: Vec<Option<[Tensor; 2]>> = vec![None; n_slots];
        let mut start = 0;
        while start < n {
            let end = (start + opts.partial_batch).min(n);
            let part = support.slice(start, end);
            let np = end - start;
            let frac = np as f64 / n as f64;
            let mut store = ActivationStore::new(n_slots);
            let mut fw_masks: Vec<Vec<f64>> = vec![Vec::new(); n_slots];
            let mut pr = PartialRecord {
                samples: np,
                nnz_fw: vec![0; n_slots],
                nnz_bw: vec![0; n_slots],
                fw_support: vec![Vec::new(); n_slots],
                stored_words: 0,
                layer_words: vec![0; n_slots],
                weight_macs: vec![0; n_slots],
            };
            let mut states: Vec<Option<State>> = (0..spec.layers.len()).map(|_| None).collect();
            let mut relu_bits = 0usize;
            let mut pool_entries = 0usize;
            let mut attn_words = 0usize;
            let mut h = part.x.clone();
            for (i, l) in spec.layers.iter().enumerate() {
                let keep = l_min.is_some_and(|m| i > m);
                let slot = slot_of[i];
                let slot_active = slot.is_some_and(|t| active[t]);
                let mut fw_for = |x: &Tensor, c: usize, t: usize, rec: &mut StepRecord| -> Result<Vec<f64>> {
                    Ok(match &plan.attention[t] {
                        Some(a) => {
                            let pooled = pool_mean_values(x, false);
                            rec.attention_macs += module_macs(a.fw.channels(), np);
                            attn_words += np * c;
                            a.fw.scores(&pooled, rho_fw)?
                        }
                        None => vec![1.0; c],
                    })
                };
                h = match *l {
                    LayerSpec::Conv2d { in_channels, .. } => {
                        if let (Some(t), true) = (slot, slot_active) {
                            let fw = fw_for(&h, in_channels, t, &mut rec)?;
                            store.put(t, &h, &fw)?;
                            fw_masks[t] = fw;
                        }
                        let w = &params[slot.expect("conv is trainable")];
                        let f = layers::conv_forward(l, &h, &w[0], &w[1])?;
                        rec.forward_macs += f.macs;
                        states[i] = Some(State::Shape(h.shape().to_vec()));
                        f.y
                    }
                    LayerSpec::FullyConnected { in_features, .. } => {
                        if let (Some(t), true) = (slot, slot_active) {
                            let flat = h.clone().reshape(&[np, in_features])?;
                            let fw = fw_for(&flat, in_features, t, &mut rec)?;
                            store.put(t, &flat, &fw)?;
                            fw_masks[t] = fw;
                        }
                        let w = &params[slot.expect("fc is trainable")];
                        let f = layers::fc_forward(&h, &w[0], &w[1])?;
                        rec.forward_macs += f.macs;
                        states[i] = Some(State::Shape(h.shape().to_vec()));
                        f.y
                    }
                    LayerSpec::GroupNorm { channels, groups } => {
                        let t = slot.expect("group norm is trainable");
                        let (f, cache) = layers::group_norm_forward(&h, &params[t][0], &params[t][1], groups)?;
                        rec.forward_macs += f.macs;
                        if slot_active {
                            let fw = fw_for(&cache.xhat, channels, t, &mut rec)?;
                            store.put(t, &cache.xhat, &fw)?;
                            fw_masks[t] = fw;
                        }
                        if keep {
                            states[i] = Some(State::Norm(cache));
                        }
                        f.y
                    }
                    LayerSpec::Relu => {
                        let (y, bits) = layers::relu_forward(&h);
                        if keep {
                            relu_bits += bits.len();
                            store.add_sigma_bits(bits.len());
                            states[i] = Some(State::Relu(bits));
                        }
                        y
                    }
                    LayerSpec::MaxPool { window, stride } => {
                        let (y, idx) = layers::max_pool_forward(&h, window, stride)?;
                        if keep {
                            pool_entries += idx.len();
                            states[i] = Some(State::Pool(idx, h.shape().to_vec()));
                        }
                        y
                    }
                    LayerSpec::ResnetBlock { .. } | LayerSpec::GlobalAvgPool => {
                        return Err(Error::Invalid(format!("{} is cost-only", l.kind())));
                    }
                };
                if let Some(t) = slot.filter(|&t| active[t]) {
                    pr.nnz_fw[t] = fw_masks[t].iter().filter(|v| **v != 0.0).count();
                    pr.fw_support[t] = (0..fw_masks[t].len()).filter(|&c| fw_masks[t][c] != 0.0).collect();
                }
            }
            if !h.is_finite() {
                return Err(Error::NonFinite("network output during adaptation".into()));
            }
            pr.stored_words = store.peak_words();
            for t in (0..n_slots).filter(|&t| active[t]) {
                pr.layer_words[t] = store.slot_words(t);
            }
            let (loss, mut gy) = part.loss_and_grad(&h)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("support loss".into()));
            }
            if let Some(m) = l_min {
                for i in (m..spec.layers.len()).rev() {
                    let l = &spec.layers[i];
                    if let Some(t) = slot_of[i].filter(|&t| active[t]) {
                        let (_, c_out) = layers::mask_channels(l).expect("trainable");
                        let bw = match &plan.attention[t] {
                            Some(a) => {
                                let pooled = pool_mean_values(&gy, true);
                                rec.attention_macs += module_macs(a.bw.channels(), np);
                                attn_words += np * c_out;
                                a.bw.scores(&pooled, rho_bw)?
                            }
                            None => vec![1.0; c_out],
                        };
                        let mask = ChannelMask::new(std::mem::take(&mut fw_masks[t]), bw)?;
                        pr.nnz_bw[t] = mask.nnz_bw();
                        let stored = store.take(t).ok_or_else(|| Error::State(format!("no stored input for layer {t}")))?;
                        let wg = match l {
                            LayerSpec::Conv2d { .. } => layers::conv_weight_grad_masked(l, &stored, &gy, &mask)?,
                            LayerSpec::FullyConnected { .. } => layers::fc_weight_grad_masked(&stored, &gy, &mask)?,
                            LayerSpec::GroupNorm { .. } => layers::group_norm_weight_grad_masked(&stored, &gy, &mask)?,
                            _ => unreachable!("trainable kinds only"),
                        };
                        pr.weight_macs[t] = wg.macs;
                        rec.weight_grad_macs += wg.macs;
                        add_scaled(&mut acc[t], &wg, frac)?;
                    }
                    if i == m {
                        break;
                    }
                    gy = match (l, states[i].take()) {
                        (LayerSpec::Conv2d { .. }, Some(State::Shape(s))) => {
                            let f = layers::conv_input_grad(l, &params[slot_of[i].expect("conv")][0], &gy, &s)?;
                            rec.input_grad_macs += f.macs;
                            f.y
                        }
                        (LayerSpec::FullyConnected { .. }, Some(State::Shape(s))) => {
                            let f = layers::fc_input_grad(&params[slot_of[i].expect("fc")][0], &gy, &s)?;
                            rec.input_grad_macs += f.macs;
                            f.y
                        }
                        (LayerSpec::GroupNorm { .. }, Some(State::Norm(cache))) => {
                            let f = layers::group_norm_input_grad(&cache, &params[slot_of[i].expect("gn")][0], &gy)?;
                            rec.input_grad_macs += f.macs;
                            f.y
                        }
                        (LayerSpec::Relu, Some(State::Relu(bits))) => layers::relu_backward(&bits, &gy),
                        (LayerSpec::MaxPool { .. }, Some(State::Pool(idx, s))) => layers::max_pool_backward(&idx, &gy, &s)?,
                        _ => return Err(Error::State(format!("missing forward state for layer {i}"))),
                    };
                }
            }
            rec.attention_words = rec.attention_words.max(attn_words);
            rec.sigma_words = rec.sigma_words.max(relu_bits.div_ceil(32) + pool_entries.div_ceil(16));
            rec.peak_stored_words = rec.peak_stored_words.max(pr.stored_words);
            rec.partials.push(pr);
            start = end;
        }
        let shapes = spec.shapes()?;
        let b = opts.partial_batch.min(n);
        for t in 0..n_slots {
            if !active[t] {
                continue;
            }
            let mut union: Vec<usize> = rec.partials.iter().flat_map(|p| p.fw_support[t].iter().copied()).collect();
            union.sort_unstable();
            union.dedup();
            rec.union_stored_words += b * union.len() * shapes[trainable[t]].hw();
        }
        for (t, a) in acc.into_iter().enumerate() {
            let Some([gw, gb]) = a else { continue };
            let alpha = plan.alpha[t][k];
            params[t][0].axpy(-alpha, &gw)?;
            params[t][1].axpy(-alpha, &gb)?;
        }
        steps.push(rec);
    }
    for [w, b] in &params {
        w.check_finite("adapted weights")?;
        b.check_finite("adapted biases")?;
    }
    Ok((params, SessionReport { steps, support_size: n, partial_batch: opts.partial_batch }))
}

/// MACs of one attention module's bottleneck on `b` pooled samples.
fn module_macs(c: usize, b: usize) -> u64 {
    let h = c.div_ceil(crate::attention::REDUCTION);
    (2 * b * c * h) as u64
}
