//! Measured-versus-formula reports for adaptation sessions and plan summaries.

use std::fmt::Write as _;

use crate::cost::{self, CostQuery, Scenario};
use crate::error::Result;
use crate::layers::mask_channels;
use crate::plan::AdaptPlan;
use crate::runtime::SessionReport;

/// One trainable layer of one partial batch: counters next to the formula.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub step: usize,
    pub partial: usize,
    pub slot: usize,
    pub kind: &'static str,
    pub samples: usize,
    pub nnz_fw: usize,
    pub nnz_bw: usize,
    pub stored_measured: usize,
    pub stored_predicted: usize,
    pub macs_measured: u64,
    pub macs_predicted: u64,
}

impl LayerCheck {
    /// Exact agreement; group-norm MACs are not held to the formula.
    pub fn exact(&self) -> bool {
        self.stored_measured == self.stored_predicted && (self.kind == "group_norm" || self.macs_measured == self.macs_predicted)
    }
}

pub const CHECK_HEADER: &str =
    "step,partial,layer,kind,samples,nnz_fw,nnz_bw,stored_measured,stored_formula,wgrad_macs_measured,wgrad_macs_formula";

pub fn session_checks(plan: &AdaptPlan, report: &SessionReport) -> Result<Vec<LayerCheck>> {
    let trainable = plan.spec.trainable();
    let mut out = Vec::new();
    for s in &report.steps {
        for (p, part) in s.partials.iter().enumerate() {
            for (t, &on) in s.active.iter().enumerate() {
                if !on {
                    continue;
                }
                let mut only = vec![false; s.active.len()];
                only[t] = true;
                out.push(LayerCheck {
                    step: s.step,
                    partial: p,
                    slot: t,
                    kind: plan.spec.layers[trainable[t]].kind(),
                    samples: part.samples,
                    nnz_fw: part.nnz_fw[t],
                    nnz_bw: part.nnz_bw[t],
                    stored_measured: part.layer_words[t],
                    stored_predicted: cost::stored_words_realized(&plan.spec, &only, &part.nnz_fw, part.samples)?,
                    macs_measured: part.weight_macs[t],
                    macs_predicted: cost::weight_grad_macs_realized(&plan.spec, t, part.nnz_fw[t], part.nnz_bw[t], part.samples)?,
                });
            }
        }
    }
    Ok(out)
}

/// Cost query for the realized session: the step masks it ran with, forward
/// ratios from the union of stored channels and the largest backward ratio.
pub fn session_query(plan: &AdaptPlan, report: &SessionReport, batch: usize) -> CostQuery {
    let trainable = plan.spec.trainable();
    let n = trainable.len();
    let mut mu_fw = vec![0.0f64; n];
    let mut mu_bw = vec![0.0f64; n];
    for s in &report.steps {
        for t in (0..n).filter(|&t| s.active[t]) {
            let (ci, co) = mask_channels(&plan.spec.layers[trainable[t]]).expect("trainable");
            let mut union: Vec<usize> = s.partials.iter().flat_map(|p| p.fw_support[t].iter().copied()).collect();
            union.sort_unstable();
            union.dedup();
            mu_fw[t] = mu_fw[t].max(union.len() as f64 / ci as f64);
            let bw = s.partials.iter().map(|p| p.nnz_bw[t]).max().unwrap_or(0);
            mu_bw[t] = mu_bw[t].max(bw as f64 / co as f64);
        }
    }
    let alpha_hat = (0..n).map(|t| report.steps.iter().map(|s| s.active[t]).collect()).collect();
    CostQuery { spec: plan.spec.clone(), batch, alpha_hat, mu_fw, mu_bw }
}

/// Per-step counters and formula values as CSV, then the per-layer checks.
pub fn session_csv(plan: &AdaptPlan, report: &SessionReport) -> Result<String> {
    let mem = cost::adapt_peak_memory(&session_query(plan, report, report.partial_batch.min(report.support_size)))?;
    let macs = cost::adapt_macs(&session_query(plan, report, report.support_size))?;
    let mut s = String::from(
        "step,l_min,peak_stored_words,union_stored_words,sigma_words,attention_words,forward_macs,input_grad_macs,weight_grad_macs,attention_macs,bound_words,stored_term_words,simulated_words,formula_macs\n",
    );
    for (k, st) in report.steps.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{:.1}",
            st.step,
            st.l_min.map_or(String::from("none"), |l| l.to_string()),
            st.peak_stored_words,
            st.union_stored_words,
            st.sigma_words,
            st.attention_words,
            st.forward_macs,
            st.input_grad_macs,
            st.weight_grad_macs,
            st.attention_macs,
            mem.bound.total(),
            mem.stored_term,
            mem.simulated,
            macs.per_step[k].total()
        );
    }
    s.push('\n');
    s.push_str(CHECK_HEADER);
    s.push('\n');
    for c in session_checks(plan, report)? {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.step,
            c.partial,
            c.slot,
            c.kind,
            c.samples,
            c.nnz_fw,
            c.nnz_bw,
            c.stored_measured,
            c.stored_predicted,
            c.macs_measured,
            c.macs_predicted
        );
    }
    Ok(s)
}

/// Resource-table row for a plan, with ratios from a session when given.
pub fn plan_scenario(model: &str, plan: &AdaptPlan, session: Option<&SessionReport>, mac_batch: usize) -> Result<Scenario> {
    let q = match session {
        Some(r) => session_query(plan, r, 1),
        None => {
            let n = plan.alpha.len();
            CostQuery {
                spec: plan.spec.clone(),
                batch: 1,
                alpha_hat: plan.alpha_mask(),
                mu_fw: vec![1.0; n],
                mu_bw: vec![1.0; n],
            }
        }
    };
    Ok(Scenario {
        model: model.to_string(),
        method: "pmeta".into(),
        setting: if session.is_some() { "realized".into() } else { "plan".into() },
        spec: plan.spec.clone(),
        inference_mem_batch: 1,
        inference_mac_batch: mac_batch,
        adapt_mem_batch: 1,
        adapt_mac_batch: mac_batch,
        alpha_hat: q.alpha_hat,
        mu_fw: q.mu_fw,
        mu_bw: q.mu_bw,
    })
}

/// Human-readable plan summary.
pub fn plan_summary(plan: &AdaptPlan) -> String {
    let mut s = String::new();
    let trainable = plan.spec.trainable();
    let _ = writeln!(s, "layers {} trainable {} steps {}", plan.spec.layers.len(), trainable.len(), plan.inner_steps());
    let _ = writeln!(s, "rho_fw {} rho_bw {} alpha_sparsity {:.4}", plan.rho_fw, plan.rho_bw, plan.alpha_sparsity());
    let words = plan.input_words();
    for (t, &i) in trainable.iter().enumerate() {
        let alpha: Vec<String> = plan.alpha[t].iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            s,
            "{t}: {} input_words={} attention={} alpha=[{}]",
            plan.spec.layers[i],
            words[t],
            plan.attention[t].is_some(),
            alpha.join(", ")
        );
    }
    s
}

