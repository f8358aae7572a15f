//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails.

mod common;

use std::thread;
use std::time::Instant;

use common::{
    class_batch, dense_then_mask, instance, max_rel, mismatches, perturb_attention, plan, random_network, regression_batch, rel_err,
    scores, small_gn_net, KINDS,
};
use pmeta::attention::clip_normalize;
use pmeta::autodiff::finite_diff_oracle;
use pmeta::cost::{self, ReportRow};
use pmeta::layers::{self, ChannelMask, StoredInput};
use pmeta::plan::AdaptPlan;
use pmeta::runtime::{few_shot_adapt, AdaptOptions};
use pmeta::spec::{mlp, LayerSpec, NetworkSpec};
use pmeta::tasks::{Task, TaskStream};
use pmeta::train::{batch_loss, evaluate, initial_plan, meta_gradient, meta_train, MetaTrainConfig, Mode, RatioStats, TrainOutcome};
use pmeta::{Rng, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

fn find<'a>(rows: &'a [ReportRow], model: &str, method: &str) -> &'a ReportRow {
    rows.iter().find(|r| r.model == model && r.method == method).expect("row present")
}

/// Checks `(label, got, want, tol)` and formats them.
fn compare(checks: &[(&str, f64, f64, f64)]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for &(label, got, want, tol) in checks {
        let ok = within(got, want, tol);
        pass &= ok;
        parts.push(format!("{label} {got:.4}/{want} ({:+.1}%){}", 100.0 * (got - want) / want, if ok { "" } else { " OUT" }));
    }
    (pass, parts.join(", "))
}

fn resource_tables_one() -> Outcome {
    let r = cost::table_report(&cost::table1().unwrap()).unwrap().rows;
    let (c, res, m) = (find(&r, "4conv", "maml"), find(&r, "resnet12", "maml"), find(&r, "mlp-100-100", "maml"));
    let (pass, mut detail) = compare(&[
        ("4conv inf MB", c.inference_mb, 0.90, 0.05),
        ("4conv inf GMAC", c.inference_gmac, 0.72, 0.05),
        ("4conv adapt GMAC", c.adapt_gmac, 1.96, 0.05),
        ("4conv adapt MB", c.adapt_mb, 48.33, 0.20),
        ("resnet12 inf MB", res.inference_mb, 3.61, 0.10),
        ("resnet12 inf GMAC", res.inference_gmac, 62.08, 0.10),
        ("mlp adapt MB", m.adapt_mb, 3.72, 0.10),
        ("mlp adapt GMAC", m.adapt_gmac, 0.15, 0.10),
    ]);
    let e = &c.memory.bound;
    let mb = |w: f64| cost::words_to_mb(w);
    detail.push_str(&format!(
        "; 4conv breakdown MB: activation_max {:.2} weights {:.2} stored {:.2} sigma {:.2} bound {:.2} simulated {:.2}",
        mb(e.activation_max),
        mb(e.weights),
        mb(e.stored),
        mb(e.sigma),
        mb(e.total()),
        c.adapt_mb
    ));
    outcome(pass, detail)
}

fn resource_tables_two() -> Outcome {
    let r = cost::table_report(&cost::table2(5).unwrap()).unwrap().rows;
    let g = |model, method| {
        let row = find(&r, model, method);
        (row.adapt_gmac, row.adapt_mb)
    };
    let (mc, ac, mr, ar) = (g("4conv", "maml"), g("4conv", "anil"), g("resnet12", "maml"), g("resnet12", "anil"));
    let (pass, detail) = compare(&[
        ("maml 4conv GMAC", mc.0, 1.96, 0.10),
        ("maml 4conv MB", mc.1, 2.06, 0.10),
        ("anil 4conv GMAC", ac.0, 0.72, 0.10),
        ("anil 4conv MB", ac.1, 0.92, 0.10),
        ("maml resnet12 GMAC", mr.0, 185.42, 0.10),
        ("maml resnet12 MB", mr.1, 54.69, 0.10),
        ("anil resnet12 GMAC", ar.0, 62.08, 0.10),
        ("anil resnet12 MB", ar.1, 3.62, 0.10),
    ]);
    outcome(pass, detail)
}

fn meta_gradient_error() -> f64 {
    let spec = mlp(1, &[6], 1);
    let cfg = MetaTrainConfig { mode: Mode::MamlPlusPlus, inner_steps: 2, alpha_init: 0.05, ..Default::default() };
    let mut plan = initial_plan(&cfg, &spec, &mut Rng::new(5)).unwrap();
    plan.alpha[0][1] = 0.02;
    plan.alpha[1][0] = 0.07;
    let task = TaskStream::sinusoid(8, 5).unwrap().next_task();
    let tg = meta_gradient(&plan, &task, false, &mut RatioStats::default()).unwrap();
    let objective = |p: &AdaptPlan| {
        let opts = AdaptOptions { partial_batch: task.support.len(), ..Default::default() };
        let (w, _) = few_shot_adapt(p, &task.support, &opts)?;
        Ok(batch_loss(&p.spec, &w, &task.query)?.0)
    };
    let mut worst: f64 = 0.0;
    for l in 0..plan.params.len() {
        for j in 0..2 {
            let fd = finite_diff_oracle(
                |t: &Tensor| {
                    let mut p = plan.clone();
                    p.params[l][j] = t.clone();
                    objective(&p)
                },
                &plan.params[l][j],
                1e-6,
            )
            .unwrap();
            worst = worst.max(rel_err(&tg.params[l][j], &fd));
        }
    }
    let a0 = Tensor::from_vec(plan.alpha.iter().flatten().copied().collect());
    let fd = finite_diff_oracle(
        |t: &Tensor| {
            let mut p = plan.clone();
            for (dst, v) in p.alpha.iter_mut().flatten().zip(t.data()) {
                *dst = *v;
            }
            objective(&p)
        },
        &a0,
        1e-7,
    )
    .unwrap();
    let got = Tensor::from_vec(tg.alpha.iter().flatten().copied().collect());
    worst.max(rel_err(&got, &fd))
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let inst = instance(KINDS[i % KINDS.len()], &mut rng);
        let fd = inst.fd_grads(1e-5);
        for got in [inst.graph_grads(), inst.kernel_grads()] {
            for (a, b) in got.iter().zip(&fd) {
                worst = worst.max(rel_err(a, b));
            }
        }
    }
    let meta = meta_gradient_error();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && meta <= 1e-4 && secs < 60.0,
        format!("layer max rel err {worst:.2e} (<= 1e-5), K=2 meta-gradient rel err {meta:.2e} (<= 1e-4), {secs:.1}s"),
    )
}

fn masked_equivalence() -> Outcome {
    let mut rng = Rng::new(21);
    let (mut worst, mut layers_checked): (f64, usize) = (0.0, 0);
    for _ in 0..50 {
        let spec = random_network(&mut rng);
        let shapes = spec.shapes().unwrap();
        let b = 1 + rng.below(3);
        for (i, l) in spec.layers.iter().enumerate() {
            let Some((ci, co)) = layers::mask_channels(l) else { continue };
            let mut xs = vec![b];
            xs.extend(shapes[i].dims());
            let mut ys = vec![b];
            ys.extend(shapes[i + 1].dims());
            let x = Tensor::randn(&xs, 1.0, &mut rng);
            let x = if matches!(l, LayerSpec::FullyConnected { .. }) { x.reshape(&[b, ci]).unwrap() } else { x };
            let gy = Tensor::randn(&ys, 1.0, &mut rng);
            let mask = ChannelMask::new(scores(ci, &mut rng), scores(co, &mut rng)).unwrap();
            let st = StoredInput::capture(&x, &mask.fw).unwrap();
            let got = match l {
                LayerSpec::Conv2d { .. } => layers::conv_weight_grad_masked(l, &st, &gy, &mask).unwrap(),
                LayerSpec::FullyConnected { .. } => layers::fc_weight_grad_masked(&st, &gy, &mask).unwrap(),
                _ => layers::group_norm_weight_grad_masked(&st, &gy, &mask).unwrap(),
            };
            let [w, bias] = dense_then_mask(l, &x, &gy, &mask);
            worst = worst.max(max_rel(&got.w, &w)).max(max_rel(&got.b, &bias));
            layers_checked += 1;
        }
    }
    outcome(worst <= 1e-12, format!("{layers_checked} layers on 50 networks, max rel diff {worst:.2e} (<= 1e-12)"))
}

fn accumulation_equivalence() -> Outcome {
    let spec = small_gn_net();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let p = plan(&spec, Mode::MamlPlusPlus, 3, seed);
        let s = regression_batch(&spec, 7, &mut rng);
        let (full, _) = few_shot_adapt(&p, &s, &AdaptOptions { partial_batch: 7, ..Default::default() }).unwrap();
        for b in [1, 2, 3] {
            let (part, _) = few_shot_adapt(&p, &s, &AdaptOptions { partial_batch: b, ..Default::default() }).unwrap();
            for (x, y) in part.iter().flatten().zip(full.iter().flatten()) {
                worst = worst.max(max_rel(x, y));
            }
        }
    }
    outcome(worst <= 1e-9, format!("group-norm network, b in 1,2,3 vs 7, max rel diff {worst:.2e} (<= 1e-9)"))
}

/// Random attended sessions on small networks; returns `(sessions, mismatches)`.
fn random_sessions() -> (usize, Vec<String>) {
    let mut rng = Rng::new(2);
    let specs = [small_gn_net(), mlp(4, &[8, 6], 3), NetworkSpec::preset("4conv", 5).unwrap()];
    let mut bad = Vec::new();
    let n = 30;
    for i in 0..n {
        let spec = &specs[i % specs.len()];
        let mut p = plan(spec, Mode::PMeta, 1 + i % 3, i as u64);
        perturb_attention(&mut p, &mut rng);
        p.rho_fw = rng.range(0.0, 0.6);
        p.rho_bw = rng.range(0.0, 0.4);
        for a in p.alpha.iter_mut().flatten() {
            if rng.uniform() < 0.3 {
                *a = 0.0;
            }
        }
        let samples = if i % specs.len() == 2 { 2 } else { 2 + rng.below(6) };
        let s = class_batch(spec, samples, &mut rng);
        let b = 1 + rng.below(4);
        let (_, rep) = few_shot_adapt(&p, &s, &AdaptOptions { partial_batch: b, ..Default::default() }).unwrap();
        bad.extend(mismatches(&p, &rep));
    }
    (n, bad)
}

struct Efficacy {
    pmeta: TrainOutcome,
    baseline: TrainOutcome,
    secs: f64,
}

fn sinusoid_config(mode: Mode) -> MetaTrainConfig {
    MetaTrainConfig {
        mode,
        inner_steps: 1,
        task_batch: 4,
        tasks_per_epoch: 1000,
        epochs: 300,
        val_every: 10,
        val_tasks: 50,
        lambda: 0.001,
        rho_fw: 0.3,
        alpha_lr: 1e-3,
        first_order: false,
        ..Default::default()
    }
}

fn train_sinusoid(mode: Mode) -> TrainOutcome {
    let spec = NetworkSpec::preset("sinusoid", 1).unwrap();
    let mut stream = TaskStream::sinusoid(1, 5).unwrap();
    let val = TaskStream::sinusoid(2, 5).unwrap().take(50);
    meta_train(&sinusoid_config(mode), &spec, &mut stream, &val).unwrap()
}

fn start_efficacy() -> thread::JoinHandle<Efficacy> {
    thread::spawn(|| {
        let t = Instant::now();
        let base = thread::spawn(|| train_sinusoid(Mode::MamlPlusPlus));
        let pmeta = train_sinusoid(Mode::PMeta);
        let baseline = base.join().expect("baseline training");
        Efficacy { pmeta, baseline, secs: t.elapsed().as_secs_f64() }
    })
}

/// Mean peak stored words per sample over adaptation sessions at b = 1,
/// plus any counter mismatches seen on the way.
fn stored_words(p: &AdaptPlan, tasks: &[Task]) -> (f64, Vec<String>) {
    let mut total = 0usize;
    let mut bad = Vec::new();
    for t in tasks {
        let (_, rep) = few_shot_adapt(p, &t.support, &AdaptOptions::default()).unwrap();
        total += rep.measure().0;
        bad.extend(mismatches(p, &rep));
    }
    (total as f64 / tasks.len() as f64, bad)
}

fn efficacy(e: &Efficacy, test: &[Task]) -> (Outcome, Vec<String>) {
    let pm = evaluate(&e.pmeta.plan, test).unwrap();
    let base = evaluate(&e.baseline.plan, test).unwrap();
    let (words, mut bad) = stored_words(&e.pmeta.plan, test);
    let (base_words, base_bad) = stored_words(&e.baseline.plan, test);
    bad.extend(base_bad);
    let dense: usize = e.pmeta.plan.input_words().iter().sum();
    let ratio = words / dense as f64;
    let pass = pm.improved >= 0.95 && pm.post_loss <= 1.2 * base.post_loss && ratio <= 0.7 && e.secs <= 600.0;
    let detail = format!(
        "improved {:.1}% of {} tasks (>= 95%), post MSE {:.4} vs maml++ {:.4} (pre {:.4}, <= 1.2x), \
         stored words {:.2} vs dense {dense} (maml++ {:.2}) = {:.1}% (<= 70%), best epochs {}/{}, {:.0}s",
        100.0 * pm.improved,
        test.len(),
        pm.post_loss,
        base.post_loss,
        pm.pre_loss,
        words,
        base_words,
        100.0 * ratio,
        e.pmeta.best_epoch,
        e.baseline.best_epoch,
        e.secs
    );
    (outcome(pass, detail), bad)
}

fn mode_equivalence() -> Outcome {
    let spec = mlp(1, &[8, 8], 1);
    let run = |cfg: &MetaTrainConfig| {
        let mut stream = TaskStream::sinusoid(1, 5).unwrap();
        let val = TaskStream::sinusoid(2, 5).unwrap().take(3);
        meta_train(cfg, &spec, &mut stream, &val).unwrap()
    };
    let base_cfg =
        MetaTrainConfig { mode: Mode::MamlPlusPlus, inner_steps: 2, task_batch: 2, epochs: 5, tasks_per_epoch: 4, val_tasks: 3, seed: 7, ..Default::default() };
    let cfg = MetaTrainConfig { mode: Mode::PMeta, attention: false, lambda: 0.0, rho_fw: 0.0, rho_bw: 0.0, ..base_cfg.clone() };
    let (a, b) = (run(&base_cfg), run(&cfg));
    let bits = |o: &TrainOutcome| -> Vec<u64> {
        let mut v: Vec<u64> = o.plan.params.iter().flatten().flat_map(|t| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
        v.extend(o.plan.alpha.iter().flatten().map(|x| x.to_bits()));
        v.extend(o.metrics.iter().flat_map(|m| [m.query_loss.to_bits(), m.val_metric.to_bits(), m.alpha_sparsity.to_bits()]));
        v
    };
    let same = bits(&a) == bits(&b) && a.metrics.len() == 5 && a.best_epoch == b.best_epoch;
    outcome(same, format!("5 epochs, {} compared words, identical: {same}", bits(&a).len()))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Literal walk over the ascending order, dropping mass until it reaches rho.
fn clip_reference(pi: &[f64], rho: f64) -> Vec<f64> {
    let c = pi.len();
    let mut order: Vec<usize> = (0..c).collect();
    for i in 1..c {
        let mut j = i;
        while j > 0 && pi[order[j - 1]] > pi[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let (mut dropped, mut mass) = (0, 0.0);
    if rho > 0.0 {
        for &i in &order {
            if dropped == c - 1 {
                break;
            }
            mass += pi[i];
            dropped += 1;
            if mass >= rho {
                break;
            }
        }
    }
    let mut out = pi.to_vec();
    for &i in &order[..dropped] {
        out[i] = 0.0;
    }
    let kept: f64 = out.iter().sum();
    out.iter().map(|v| v / kept * c as f64).collect()
}

fn clip_properties() -> Outcome {
    let mut rng = Rng::new(99);
    let mut failures = Vec::new();
    for case in 0..10_000 {
        let c = 1 + rng.below(64);
        let scale = rng.range(0.1, 8.0);
        let z: Vec<f64> = (0..c).map(|_| rng.normal() * scale).collect();
        let pi = softmax(&z);
        let (r1, r2) = (rng.uniform() * 0.999, rng.uniform() * 0.999);
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let a = clip_normalize(&pi, lo).unwrap();
        let b = clip_normalize(&pi, hi).unwrap();
        let ok = [&a, &b].iter().all(|v| v.iter().all(|x| *x >= 0.0) && (v.iter().sum::<f64>() - c as f64).abs() <= 1e-9)
            && a.iter().zip(&b).all(|(x, y)| *x != 0.0 || *y == 0.0)
            && [(&a, lo), (&b, hi)].iter().all(|(got, rho)| {
                let want = clip_reference(&pi, *rho);
                got.iter().zip(&want).all(|(x, y)| (*x == 0.0) == (*y == 0.0) && (x - y).abs() <= 1e-12 * c as f64)
            });
        if !ok {
            failures.push(case);
        }
    }
    outcome(failures.is_empty(), format!("10000 cases, {} failures {:?}", failures.len(), &failures[..failures.len().min(5)]))
}

fn main() {
    let slow = start_efficacy();
    let mut results = vec![
        (1, resource_tables_one()),
        (2, resource_tables_two()),
        (3, gradient_correctness()),
        (4, masked_equivalence()),
        (5, accumulation_equivalence()),
    ];
    let (sessions, mut bad) = random_sessions();
    let eight = mode_equivalence();
    let nine = clip_properties();

    let e = slow.join().expect("efficacy training");
    let test = TaskStream::sinusoid(3, 5).unwrap().take(200);
    let (seven, more_bad) = efficacy(&e, &test);
    bad.extend(more_bad);
    let six = outcome(
        bad.is_empty(),
        format!("{} sessions, {} mismatches{}", sessions + 2 * test.len(), bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
    results.extend([(6, six), (7, seven), (8, eight), (9, nine)]);

    for (n, r) in &results {
        println!("criterion {n}: {} {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, r)| !r.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
