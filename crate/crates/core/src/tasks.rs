//! Few-shot task containers, losses and synthetic task generators.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `[B, outputs]` real targets, scored by mean squared error.
    Regression(Tensor),
    /// Class labels in `0..n_way`, scored by softmax cross-entropy.
    Classes { labels: Vec<usize>, n_way: usize },
}

/// Inputs `[B, dims...]` with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Targets,
}

impl Batch {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        let b = x.shape()[0];
        let n = match &y {
            Targets::Regression(t) => t.shape()[0],
            Targets::Classes { labels, n_way } => {
                if labels.iter().any(|l| l >= n_way) {
                    return Err(invalid!("label out of range for {n_way} classes"));
                }
                labels.len()
            }
        };
        if n != b {
            return Err(shape_err!("{b} inputs but {n} targets"));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let rows = |t: &Tensor| {
            let per = t.len() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("row slice")
        };
        let y = match &self.y {
            Targets::Regression(t) => Targets::Regression(rows(t)),
            Targets::Classes { labels, n_way } => Targets::Classes { labels: labels[start..end].to_vec(), n_way: *n_way },
        };
        Batch { x: rows(&self.x), y }
    }

    /// Loss of network output `out` on the tape.
    pub fn loss_graph(&self, g: &mut Graph, out: Var) -> Result<Var> {
        match &self.y {
            Targets::Regression(t) => g.mse(out, t),
            Targets::Classes { labels, .. } => g.cross_entropy(out, labels),
        }
    }

    /// Loss value and its gradient with respect to `out`.
    pub fn loss_and_grad(&self, out: &Tensor) -> Result<(f64, Tensor)> {
        match &self.y {
            Targets::Regression(t) => {
                if out.shape() != t.shape() {
                    return Err(shape_err!("output {:?} vs targets {:?}", out.shape(), t.shape()));
                }
                let n = out.len() as f64;
                let diff = out.sub(t)?;
                let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
                Ok((loss, diff.scale(2.0 / n)))
            }
            Targets::Classes { labels, n_way } => {
                let b = labels.len();
                if out.shape() != [b, *n_way] {
                    return Err(shape_err!("logits {:?} for {b} labels over {n_way} classes", out.shape()));
                }
                let mut grad = vec![0.0; b * n_way];
                let mut loss = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    let row = &out.data()[i * n_way..(i + 1) * n_way];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    loss += s.ln() - (row[l] - mx);
                    for j in 0..*n_way {
                        let p = (row[j] - mx).exp() / s;
                        grad[i * n_way + j] = (p - if j == l { 1.0 } else { 0.0 }) / b as f64;
                    }
                }
                Ok((loss / b as f64, Tensor::new(vec![b, *n_way], grad)?))
            }
        }
    }

    /// Accuracy for classification; `None` for regression.
    pub fn accuracy(&self, out: &Tensor) -> Option<f64> {
        let Targets::Classes { labels, n_way } = &self.y else { return None };
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let row = &out.data()[i * n_way..(i + 1) * n_way];
                let best = (0..*n_way).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == l
            })
            .count();
        Some(hits as f64 / labels.len() as f64)
    }

    /// Text form: a header line `regression <features> <outputs>` or
    /// `classes <features> <n_way>`, then one comma-separated row per sample
    /// with the features followed by the targets (or the label).
    pub fn to_text(&self) -> String {
        let b = self.len();
        let feat = self.x.len() / b;
        let mut s = String::new();
        match &self.y {
            Targets::Regression(t) => {
                let outs = t.len() / b;
                let _ = writeln!(s, "regression {feat} {outs}");
                for i in 0..b {
                    let vals: Vec<String> = self.x.data()[i * feat..(i + 1) * feat]
                        .iter()
                        .chain(&t.data()[i * outs..(i + 1) * outs])
                        .map(|v| format!("{v:?}"))
                        .collect();
                    let _ = writeln!(s, "{}", vals.join(","));
                }
            }
            Targets::Classes { labels, n_way } => {
                let _ = writeln!(s, "classes {feat} {n_way}");
                for (i, l) in labels.iter().enumerate() {
                    let vals: Vec<String> = self.x.data()[i * feat..(i + 1) * feat].iter().map(|v| format!("{v:?}")).collect();
                    let _ = writeln!(s, "{},{l}", vals.join(","));
                }
            }
        }
        s
    }

    /// Parses [`Batch::to_text`] output; `input_dims` are the per-sample dims.
    pub fn from_text(text: &str, input_dims: &[usize]) -> Result<Batch> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hno, header) = lines.next().ok_or(Error::Parse { line: 0, msg: "empty support file".into() })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        if h.len() != 3 {
            return Err(perr(hno, "header must be `<regression|classes> <features> <outputs>`".into()));
        }
        let feat: usize = h[1].parse().map_err(|_| perr(hno, "bad feature count".into()))?;
        let outs: usize = h[2].parse().map_err(|_| perr(hno, "bad output count".into()))?;
        if feat != input_dims.iter().product::<usize>() {
            return Err(shape_err!("support file has {feat} features, network expects {:?}", input_dims));
        }
        let classes = match h[0] {
            "regression" => false,
            "classes" => true,
            other => return Err(perr(hno, format!("unknown support kind `{other}`"))),
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut labels = Vec::new();
        for (no, line) in lines {
            let vals: Vec<&str> = line.split(',').map(str::trim).collect();
            let want = feat + if classes { 1 } else { outs };
            if vals.len() != want {
                return Err(perr(no, format!("expected {want} values, got {}", vals.len())));
            }
            for v in &vals[..feat] {
                xs.push(v.parse::<f64>().map_err(|_| perr(no, format!("bad number `{v}`")))?);
            }
            if classes {
                let l: usize = vals[feat].parse().map_err(|_| perr(no, format!("bad label `{}`", vals[feat])))?;
                labels.push(l);
            } else {
                for v in &vals[feat..] {
                    ys.push(v.parse::<f64>().map_err(|_| perr(no, format!("bad number `{v}`")))?);
                }
            }
        }
        let b = xs.len() / feat.max(1);
        if b == 0 {
            return Err(Error::Parse { line: hno + 1, msg: "support file has no samples".into() });
        }
        let mut shape = vec![b];
        shape.extend_from_slice(input_dims);
        let x = Tensor::new(shape, xs)?;
        let y = if classes {
            Targets::Classes { labels, n_way: outs }
        } else {
            Targets::Regression(Tensor::new(vec![b, outs], ys)?)
        };
        Batch::new(x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Batch,
    pub query: Batch,
}

pub const SINUSOID_QUERY: usize = 10;
pub const CLUSTER_QUERY_PER_CLASS: usize = 15;
pub const CLUSTER_SIGMA: f64 = 0.3;

/// Parameters of one sinusoid regression task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn sample(rng: &mut Rng) -> Self {
        Sinusoid { amplitude: rng.range(0.1, 5.0), phase: rng.range(0.0, PI) }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }

    pub fn batch(&self, n: usize, rng: &mut Rng) -> Batch {
        let xs: Vec<f64> = (0..n).map(|_| rng.range(-5.0, 5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        Batch::new(Tensor::new(vec![n, 1], xs).expect("n > 0"), Targets::Regression(Tensor::new(vec![n, 1], ys).expect("n > 0")))
            .expect("matching rows")
    }
}

/// Infinite deterministic stream of synthetic tasks.
#[derive(Debug, Clone)]
pub enum TaskStream {
    Sinusoid { rng: Rng, shots: usize },
    Clusters { rng: Rng, n_way: usize, k_shot: usize, dim: usize },
}

impl TaskStream {
    pub fn sinusoid(seed: u64, shots: usize) -> Result<Self> {
        if shots == 0 {
            return Err(invalid!("shots must be at least 1"));
        }
        Ok(TaskStream::Sinusoid { rng: Rng::new(seed), shots })
    }

    pub fn clusters(seed: u64, n_way: usize, k_shot: usize, dim: usize) -> Result<Self> {
        if n_way < 2 || k_shot == 0 || dim == 0 {
            return Err(invalid!("cluster tasks need n_way >= 2, k_shot >= 1, dim >= 1"));
        }
        Ok(TaskStream::Clusters { rng: Rng::new(seed), n_way, k_shot, dim })
    }

    pub fn next_task(&mut self) -> Task {
        match self {
            TaskStream::Sinusoid { rng, shots } => {
                let s = Sinusoid::sample(rng);
                Task { support: s.batch(*shots, rng), query: s.batch(SINUSOID_QUERY, rng) }
            }
            TaskStream::Clusters { rng, n_way, k_shot, dim } => {
                let centers: Vec<Vec<f64>> = (0..*n_way).map(|_| unit_vector(*dim, rng)).collect();
                let support = cluster_batch(&centers, *k_shot, CLUSTER_SIGMA, rng);
                let query = cluster_batch(&centers, CLUSTER_QUERY_PER_CLASS, CLUSTER_SIGMA, rng);
                Task { support, query }
            }
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<Task> {
        (0..n).map(|_| self.next_task()).collect()
    }
}

pub fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `per_class` noisy draws around each center, grouped by class.
pub fn cluster_batch(centers: &[Vec<f64>], per_class: usize, sigma: f64, rng: &mut Rng) -> Batch {
    let dim = centers[0].len();
    let mut xs = Vec::with_capacity(centers.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            xs.extend(center.iter().map(|m| m + sigma * rng.normal()));
            labels.push(c);
        }
    }
    let n = labels.len();
    Batch::new(Tensor::new(vec![n, dim], xs).expect("n > 0"), Targets::Classes { labels, n_way: centers.len() })
        .expect("matching rows")
}
