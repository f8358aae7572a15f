#![allow(dead_code)]

use pmeta::autodiff::Graph;
use pmeta::cost;
use pmeta::layers::{self, ChannelMask, StoredInput};
use pmeta::model;
use pmeta::plan::AdaptPlan;
use pmeta::report::session_checks;
use pmeta::runtime::SessionReport;
use pmeta::spec::{LayerSpec, NetworkSpec, Shape};
use pmeta::tasks::{Batch, Targets};
use pmeta::train::{initial_plan, MetaTrainConfig, Mode};
use pmeta::{Result, Rng, Tensor};

pub const KINDS: [&str; 5] = ["conv2d", "fully_connected", "group_norm", "relu", "max_pool"];

/// `||a - b|| / max(||b||, 1e-12)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(1e-12)
}

/// `max|a - b| / max|b|`, zero when both vanish.
pub fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.sub(b).unwrap().max_abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.max_abs().max(1e-300)
    }
}

/// One layer with an input batch, parameters and a random linear readout.
pub struct Instance {
    pub layer: LayerSpec,
    pub x: Tensor,
    pub params: Option<[Tensor; 2]>,
    pub readout: Tensor,
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Values bounded away from zero so ReLU kinks sit far from any probe.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let d = (0..n).map(|_| {
        let m = 0.1 + rng.uniform();
        if rng.uniform() < 0.5 { -m } else { m }
    });
    Tensor::new(shape.to_vec(), d.collect()).unwrap()
}

/// Distinct values spaced well apart so max-pool winners are stable.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn instance(kind: &str, rng: &mut Rng) -> Instance {
    let b = pick(rng, 1, 3);
    let (layer, x) = match kind {
        "conv2d" => {
            let (cin, cout, k) = (pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3));
            let (stride, padding) = (pick(rng, 1, 2), pick(rng, 0, 1));
            let (h, w) = (pick(rng, k, 6), pick(rng, k, 6));
            let l = LayerSpec::Conv2d { in_channels: cin, out_channels: cout, kernel: k, stride, padding };
            (l, Tensor::randn(&[b, cin, h, w], 1.0, rng))
        }
        "fully_connected" => {
            let (i, o) = (pick(rng, 1, 6), pick(rng, 1, 4));
            (LayerSpec::FullyConnected { in_features: i, out_features: o }, Tensor::randn(&[b, i], 1.0, rng))
        }
        "group_norm" => {
            let groups = pick(rng, 1, 2);
            let c = groups * pick(rng, 1, 2);
            let (h, w) = (pick(rng, 1, 3), pick(rng, 2, 3));
            (LayerSpec::GroupNorm { channels: c, groups }, Tensor::randn(&[b, c, h, w], 1.0, rng))
        }
        "relu" => {
            let c = pick(rng, 1, 3);
            (LayerSpec::Relu, away_from_zero(&[b, c, pick(rng, 1, 3), pick(rng, 1, 3)], rng))
        }
        "max_pool" => {
            let (window, stride) = (2, pick(rng, 1, 2));
            let c = pick(rng, 1, 2);
            let x = distinct(&[b, c, pick(rng, 2, 5), pick(rng, 2, 5)], rng);
            (LayerSpec::MaxPool { window, stride }, x)
        }
        other => panic!("unknown kind {other}"),
    };
    let params = layer.param_shapes().map(|[ws, bs]| [Tensor::randn(&ws, 0.7, rng), Tensor::randn(&bs, 0.7, rng)]);
    let y = forward(&layer, &x, params.as_ref()).unwrap();
    let readout = Tensor::randn(y.shape(), 1.0, rng);
    Instance { layer, x, params, readout }
}

/// Explicit-kernel forward pass of one layer.
pub fn forward(l: &LayerSpec, x: &Tensor, p: Option<&[Tensor; 2]>) -> Result<Tensor> {
    Ok(match *l {
        LayerSpec::Conv2d { .. } => {
            let [w, b] = p.unwrap();
            layers::conv_forward(l, x, w, b)?.y
        }
        LayerSpec::FullyConnected { .. } => {
            let [w, b] = p.unwrap();
            layers::fc_forward(x, w, b)?.y
        }
        LayerSpec::GroupNorm { groups, .. } => {
            let [s, t] = p.unwrap();
            layers::group_norm_forward(x, s, t, groups)?.0.y
        }
        LayerSpec::Relu => layers::relu_forward(x).0,
        LayerSpec::MaxPool { window, stride } => layers::max_pool_forward(x, window, stride)?.0,
        _ => unreachable!(),
    })
}

impl Instance {
    pub fn objective(&self, x: &Tensor, p: Option<&[Tensor; 2]>) -> Result<f64> {
        Ok(forward(&self.layer, x, p)?.mul(&self.readout)?.sum())
    }

    /// Gradients `[x, w, b]` of the readout objective from the tape.
    pub fn graph_grads(&self) -> Vec<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(self.x.clone());
        let p = self.params.as_ref().map(|[w, b]| [g.leaf(w.clone()), g.leaf(b.clone())]);
        let y = match self.layer {
            LayerSpec::Conv2d { .. } => {
                let [w, b] = p.unwrap();
                model::conv_graph(&mut g, x, w, b, &self.layer).unwrap()
            }
            LayerSpec::FullyConnected { .. } => {
                let [w, b] = p.unwrap();
                model::fc_graph(&mut g, x, w, b).unwrap()
            }
            LayerSpec::GroupNorm { groups, .. } => {
                let [s, t] = p.unwrap();
                model::group_norm_graph(&mut g, x, s, t, groups).unwrap().0
            }
            LayerSpec::Relu => g.relu(x).unwrap(),
            LayerSpec::MaxPool { window, stride } => model::max_pool_graph(&mut g, x, window, stride).unwrap(),
            _ => unreachable!(),
        };
        let r = g.leaf(self.readout.clone());
        let prod = g.mul(y, r).unwrap();
        let s = g.sum_all(prod).unwrap();
        let mut wrt = vec![x];
        if let Some([w, b]) = p {
            wrt.extend([w, b]);
        }
        g.grad_values(s, &wrt).unwrap()
    }

    /// Gradients `[x, w, b]` from the explicit backward kernels.
    pub fn kernel_grads(&self) -> Vec<Tensor> {
        let gy = &self.readout;
        let x = &self.x;
        match self.layer {
            LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                let [w, _] = self.params.as_ref().unwrap();
                let gx = layers::conv_input_grad(&self.layer, w, gy, x.shape()).unwrap().y;
                let st = StoredInput::capture(x, &vec![1.0; in_channels]).unwrap();
                let wg = layers::conv_weight_grad_masked(&self.layer, &st, gy, &ChannelMask::ones(in_channels, out_channels)).unwrap();
                vec![gx, wg.w, wg.b]
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                let [w, _] = self.params.as_ref().unwrap();
                let gx = layers::fc_input_grad(w, gy, x.shape()).unwrap().y;
                let st = StoredInput::capture(x, &vec![1.0; in_features]).unwrap();
                let wg = layers::fc_weight_grad_masked(&st, gy, &ChannelMask::ones(in_features, out_features)).unwrap();
                vec![gx, wg.w, wg.b]
            }
            LayerSpec::GroupNorm { channels, groups } => {
                let [s, t] = self.params.as_ref().unwrap();
                let (_, cache) = layers::group_norm_forward(x, s, t, groups).unwrap();
                let gx = layers::group_norm_input_grad(&cache, s, gy).unwrap().y;
                let st = StoredInput::capture(&cache.xhat, &vec![1.0; channels]).unwrap();
                let wg = layers::group_norm_weight_grad_masked(&st, gy, &ChannelMask::ones(channels, channels)).unwrap();
                vec![gx, wg.w, wg.b]
            }
            LayerSpec::Relu => {
                let (_, bits) = layers::relu_forward(x);
                vec![layers::relu_backward(&bits, gy)]
            }
            LayerSpec::MaxPool { window, stride } => {
                let (_, idx) = layers::max_pool_forward(x, window, stride).unwrap();
                vec![layers::max_pool_backward(&idx, gy, x.shape()).unwrap()]
            }
            _ => unreachable!(),
        }
    }

    /// Central differences `[x, w, b]` of the readout objective.
    pub fn fd_grads(&self, h: f64) -> Vec<Tensor> {
        use pmeta::autodiff::finite_diff_oracle;
        let p = self.params.as_ref();
        let mut out = vec![finite_diff_oracle(|x| self.objective(x, p), &self.x, h).unwrap()];
        if let Some([w, b]) = p {
            out.push(finite_diff_oracle(|w| self.objective(&self.x, Some(&[w.clone(), b.clone()])), w, h).unwrap());
            out.push(finite_diff_oracle(|b| self.objective(&self.x, Some(&[w.clone(), b.clone()])), b, h).unwrap());
        }
        out
    }
}

pub fn small_gn_net() -> NetworkSpec {
    NetworkSpec::new(
        Shape::image(2, 6, 6),
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::GroupNorm { channels: 4, groups: 2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv2d { in_channels: 4, out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::GroupNorm { channels: 4, groups: 2 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { in_features: 36, out_features: 3 },
        ],
    )
    .unwrap()
}

pub fn regression_batch(spec: &NetworkSpec, n: usize, rng: &mut Rng) -> Batch {
    let mut xs = vec![n];
    xs.extend(spec.input.dims());
    let y = Tensor::randn(&[n, spec.output_shape().words()], 1.0, rng);
    Batch::new(Tensor::randn(&xs, 1.0, rng), Targets::Regression(y)).unwrap()
}

pub fn class_batch(spec: &NetworkSpec, n: usize, rng: &mut Rng) -> Batch {
    let mut xs = vec![n];
    xs.extend(spec.input.dims());
    let n_way = spec.output_shape().words();
    let labels = (0..n).map(|i| i % n_way).collect();
    Batch::new(Tensor::randn(&xs, 1.0, rng), Targets::Classes { labels, n_way }).unwrap()
}

pub fn plan(spec: &NetworkSpec, mode: Mode, steps: usize, seed: u64) -> AdaptPlan {
    let cfg = MetaTrainConfig { mode, inner_steps: steps, alpha_init: 0.05, ..Default::default() };
    let mut rng = Rng::new(seed);
    let mut p = initial_plan(&cfg, spec, &mut rng).unwrap();
    for a in p.alpha.iter_mut().flatten() {
        *a = rng.range(0.01, 0.08);
    }
    p
}

/// Randomizes attention modules so scores are uneven and some channels clip.
pub fn perturb_attention(p: &mut AdaptPlan, rng: &mut Rng) {
    for a in p.attention.iter_mut().flatten() {
        for m in [&mut a.fw, &mut a.bw] {
            for t in m.tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.normal() * 1.5;
                }
            }
        }
    }
}

/// Every counter that disagrees with its closed-form value.
pub fn mismatches(p: &AdaptPlan, rep: &SessionReport) -> Vec<String> {
    let mut bad: Vec<String> = session_checks(p, rep).unwrap().into_iter().filter(|c| !c.exact()).map(|c| format!("{c:?}")).collect();
    let trainable = p.spec.trainable();
    for s in &rep.steps {
        let mut wg = 0u64;
        for part in &s.partials {
            let predicted = cost::stored_words_realized(&p.spec, &s.active, &part.nnz_fw, part.samples).unwrap();
            if part.stored_words != predicted {
                bad.push(format!("step {} stored {} vs {predicted}", s.step, part.stored_words));
            }
            for t in (0..s.active.len()).filter(|&t| s.active[t]) {
                let l = &p.spec.layers[trainable[t]];
                if !matches!(l, LayerSpec::GroupNorm { .. }) {
                    let f = cost::weight_grad_macs_realized(&p.spec, t, part.nnz_fw[t], part.nnz_bw[t], part.samples).unwrap();
                    if part.weight_macs[t] != f {
                        bad.push(format!("step {} layer {t} macs {} vs {f}", s.step, part.weight_macs[t]));
                    }
                }
                wg += part.weight_macs[t];
            }
        }
        if s.weight_grad_macs != wg {
            bad.push(format!("step {} total macs {} vs {wg}", s.step, s.weight_grad_macs));
        }
    }
    bad
}

pub fn assert_exact(p: &AdaptPlan, rep: &SessionReport) {
    let bad = mismatches(p, rep);
    assert!(bad.is_empty(), "counter mismatch: {bad:?}");
}

/// Scores with roughly a third of entries zeroed, the rest positive.
pub fn scores(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.uniform() < 0.35 { 0.0 } else { rng.range(0.1, 2.0) }).collect()
}

pub fn random_network(rng: &mut Rng) -> NetworkSpec {
    let c = 1 + rng.below(3);
    let f = 1 + rng.below(4);
    let g = 1 + rng.below(2);
    let k = 1 + rng.below(3);
    let side = 4 + rng.below(3);
    let layers = vec![
        LayerSpec::Conv2d { in_channels: c, out_channels: f * g, kernel: k, stride: 1 + rng.below(2), padding: rng.below(2) },
        LayerSpec::GroupNorm { channels: f * g, groups: g },
        LayerSpec::Relu,
    ];
    let spec = NetworkSpec::new(Shape::image(c, side, side), layers).unwrap();
    let feat = spec.output_shape().words();
    let mut layers = spec.layers.clone();
    layers.push(LayerSpec::FullyConnected { in_features: feat, out_features: 1 + rng.below(4) });
    NetworkSpec::new(spec.input, layers).unwrap()
}

/// Dense gradient with unit masks, then scaled entrywise by the scores.
pub fn dense_then_mask(l: &LayerSpec, x: &Tensor, gy: &Tensor, m: &ChannelMask) -> [Tensor; 2] {
    let (ci, co) = layers::mask_channels(l).unwrap();
    let st = StoredInput::capture(x, &vec![1.0; ci]).unwrap();
    let ones = ChannelMask::ones(ci, co);
    let d = match l {
        LayerSpec::Conv2d { .. } => layers::conv_weight_grad_masked(l, &st, gy, &ones).unwrap(),
        LayerSpec::FullyConnected { .. } => layers::fc_weight_grad_masked(&st, gy, &ones).unwrap(),
        LayerSpec::GroupNorm { .. } => layers::group_norm_weight_grad_masked(&st, gy, &ones).unwrap(),
        _ => unreachable!(),
    };
    let wshape = d.w.shape().to_vec();
    let mut w = d.w.into_data();
    let per = w.len() / co;
    for (i, v) in w.iter_mut().enumerate() {
        let o = i / per;
        let c = if matches!(l, LayerSpec::GroupNorm { .. }) { o } else { (i % per) / (per / ci) };
        *v *= m.bw[o] * m.fw[c];
    }
    let b: Vec<f64> = d.b.data().iter().enumerate().map(|(o, v)| v * m.bw[o]).collect();
    [Tensor::new(wshape, w).unwrap(), Tensor::from_vec(b)]
}
