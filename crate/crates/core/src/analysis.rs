//! One-call analysis of a dataset: every requested effect, the combined test
//! and each weight on its own, with asymptotic and permutation p-values.

use serde::Serialize;

use crate::counting::build_processes;
use crate::linalg::{contrast, Effect};
use crate::permutation::{run_with_engine, PermutationMode, PermutationPlan};
use crate::statistic::{chi2_sf, covariance, wald, z_vector, Engine};
use crate::survdata::{validate, FactorialLayout, GroupSummary, SurvivalDataset};
use crate::weights::WeightSet;
use crate::{Result, TIE_CONVENTION};

/// Label of the row that combines all weights.
pub const COMBINED: &str = "Comb";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub statistic: f64,
    pub df: usize,
    pub p_asymptotic: f64,
    pub p_permutation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationSummary {
    pub mode: PermutationMode,
    pub replicates: usize,
    pub seed: u64,
    /// Critical value of the combined statistic at the requested level.
    pub quantile: f64,
    pub degenerate_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectReport {
    pub effect: String,
    pub label: String,
    pub rank: usize,
    /// Combined row first when more than one weight is used.
    pub methods: Vec<MethodResult>,
    pub permutation: Option<PermutationSummary>,
    pub warnings: Vec<String>,
}

impl EffectReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub version: String,
    pub tie_convention: String,
    pub seed: Option<u64>,
    #[serde(rename = "B")]
    pub replicates: Option<usize>,
    pub alpha: f64,
    pub weights: Vec<String>,
    pub n: usize,
    pub groups: Vec<GroupSummary>,
    pub effects: Vec<EffectReport>,
    pub warnings: Vec<String>,
}

/// All main effects followed by all interactions, lowest order first; a single
/// factor (or none) gives the one-way hypothesis.
pub fn default_effects(layout: Option<&FactorialLayout>) -> Vec<Effect> {
    let names: Vec<String> = match layout {
        Some(l) if l.factors().len() > 1 => l.factors().iter().map(|f| f.name.clone()).collect(),
        _ => return vec![Effect::OneWay],
    };
    let mut effects: Vec<Effect> = names.iter().cloned().map(Effect::Main).collect();
    let p = names.len();
    for order in 2..=p {
        let mut subsets: Vec<Vec<usize>> = (0u32..1 << p)
            .filter(|m| m.count_ones() as usize == order)
            .map(|m| (0..p).filter(|i| m & (1 << i) != 0).collect())
            .collect();
        subsets.sort();
        for s in subsets {
            effects.push(Effect::Interaction(
                s.iter().map(|&i| names[i].clone()).collect(),
            ));
        }
    }
    effects
}

pub fn analyze_effect(
    ds: &SurvivalDataset,
    effect: &Effect,
    ws: &WeightSet,
    plan: Option<&PermutationPlan>,
) -> Result<EffectReport> {
    let spec = contrast(ds.layout(), ds.k(), effect)?;
    let sp = build_processes(ds);
    let mut warnings = Vec::new();
    let combined = wald(&z_vector(&sp, ws), &covariance(&sp, ws), &spec);
    if combined.degenerate {
        warnings.push(format!(
            "estimated covariance is rank deficient for {}; the statistic uses its pseudoinverse",
            effect.label()
        ));
    }
    let mut methods = vec![MethodResult {
        method: if ws.len() > 1 {
            COMBINED.to_string()
        } else {
            ws.weights()[0].label().to_string()
        },
        statistic: combined.value,
        df: combined.df,
        p_asymptotic: chi2_sf(combined.value, combined.df),
        p_permutation: None,
    }];
    if ws.len() > 1 {
        for w in ws.weights() {
            let single = WeightSet::unchecked(vec![w.clone()]);
            let s = wald(&z_vector(&sp, &single), &covariance(&sp, &single), &spec);
            methods.push(MethodResult {
                method: w.label().to_string(),
                statistic: s.value,
                df: s.df,
                p_asymptotic: chi2_sf(s.value, s.df),
                p_permutation: None,
            });
        }
    }
    let permutation = match plan {
        Some(plan) => {
            let engine = Engine::from_pooled(sp.pooled.clone(), ds.k(), &spec, ws);
            let r = run_with_engine(&engine, &ds.labels(), plan)?;
            methods[0].p_permutation = Some(r.p_value);
            for (m, s) in methods.iter_mut().skip(1).zip(&r.single) {
                m.p_permutation = Some(s.p_value);
            }
            if r.degenerate_count > 0 {
                warnings.push(format!(
                    "{} of {} permutation replicates had a rank-deficient covariance",
                    r.degenerate_count, r.replicates
                ));
            }
            Some(PermutationSummary {
                mode: r.mode,
                replicates: r.replicates,
                seed: r.seed,
                quantile: r.quantile,
                degenerate_count: r.degenerate_count,
            })
        }
        None => None,
    };
    Ok(EffectReport {
        effect: effect.descriptor(),
        label: effect.label(),
        rank: spec.rank,
        methods,
        permutation,
        warnings,
    })
}

pub fn analyze(
    ds: &SurvivalDataset,
    effects: &[Effect],
    ws: &WeightSet,
    plan: Option<&PermutationPlan>,
    alpha: f64,
) -> Result<Report> {
    let validation = validate(ds);
    let warnings = validation.warnings().map(|i| i.message.clone()).collect();
    let effects = effects
        .iter()
        .map(|e| analyze_effect(ds, e, ws, plan))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        tie_convention: TIE_CONVENTION.to_string(),
        seed: plan.map(|p| p.seed),
        replicates: plan.map(|p| p.replicates),
        alpha,
        weights: ws.weights().iter().map(|w| w.grammar()).collect(),
        n: ds.n(),
        groups: validation.groups,
        effects,
        warnings,
    })
}

fn percent(p: f64) -> String {
    let v = 100.0 * p;
    if v < 0.1 {
        "<0.1".to_string()
    } else {
        format!("{v:.1}")
    }
}

/// Aligned text: one block per effect, methods as columns, p-values in percent.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "n = {}, weights = {}, tie convention = {}\n",
        report.n,
        report.weights.join(" "),
        report.tie_convention
    ));
    if let (Some(b), Some(seed)) = (report.replicates, report.seed) {
        out.push_str(&format!("permutation: B = {b}, seed = {seed}\n"));
    }
    out.push('\n');
    let methods: Vec<String> = report
        .effects
        .first()
        .map(|e| e.methods.iter().map(|m| m.method.clone()).collect())
        .unwrap_or_default();
    let width = report
        .effects
        .iter()
        .map(|e| e.label.len())
        .max()
        .unwrap_or(6)
        .max(6);
    out.push_str(&format!("{:<width$}  {:>6}  {:>3}", "effect", "S", "df"));
    for m in &methods {
        out.push_str(&format!("  {:>8}", format!("Asy/{m}")));
    }
    if report.replicates.is_some() {
        for m in &methods {
            out.push_str(&format!("  {:>8}", format!("Per/{m}")));
        }
    }
    out.push('\n');
    for e in &report.effects {
        let c = &e.methods[0];
        out.push_str(&format!(
            "{:<width$}  {:>6.3}  {:>3}",
            e.label, c.statistic, c.df
        ));
        for m in &e.methods {
            out.push_str(&format!("  {:>8}", percent(m.p_asymptotic)));
        }
        for m in &e.methods {
            if let Some(p) = m.p_permutation {
                out.push_str(&format!("  {:>8}", percent(p)));
            }
        }
        out.push('\n');
    }
    out.push_str("\np-values in %\n");
    for w in report
        .warnings
        .iter()
        .chain(report.effects.iter().flat_map(|e| e.warnings.iter()))
    {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}
