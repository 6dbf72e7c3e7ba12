//! Browser bindings. Every export takes plain strings and numbers and returns
//! a JSON string; errors come back as a thrown string.

use casanova::analysis::{analyze, default_effects, Report};
use casanova::cli::{PowerConfig, PowerPoint};
use casanova::linalg::{contrast, Effect};
use casanova::permutation::{permutation_test, PermutationPlan};
use casanova::survdata::{read_csv, CsvOptions, SurvivalDataset};
use casanova::weights::WeightSet;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const VETERAN_CSV: &str = include_str!("../../core/data/veteran_2x3.csv");

#[derive(Debug, Serialize)]
pub struct Curve {
    pub label: String,
    /// Step points `(t, S(t))`, starting at `(0, 1)`.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Censoring times and the survival level there, for tick marks.
    pub censored: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
pub struct Analysis {
    pub report: Report,
    pub curves: Vec<Curve>,
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub effect: String,
    pub observed: f64,
    pub p_value: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn load(csv: &str, factors: &str) -> Result<SurvivalDataset, String> {
    let cols: Vec<&str> = factors
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    read_csv(csv.as_bytes(), &CsvOptions::new("time", "status", &cols)).map_err(|e| e.to_string())
}

fn weights(spec: &str) -> Result<WeightSet, String> {
    let parts: Vec<&str> = spec.split_whitespace().collect();
    WeightSet::parse_all(&parts).map_err(|e| e.to_string())
}

/// Kaplan–Meier curve of every group.
pub fn km_curves(ds: &SurvivalDataset) -> Vec<Curve> {
    (0..ds.k())
        .map(|j| {
            let mut obs: Vec<_> = ds.observations().iter().filter(|o| o.group == j).collect();
            obs.sort_by(|a, b| a.time.total_cmp(&b.time));
            let mut at_risk = obs.len() as f64;
            let (mut times, mut survival, mut censored) = (vec![0.0], vec![1.0], Vec::new());
            let mut s = 1.0;
            let mut i = 0;
            while i < obs.len() {
                let t = obs[i].time;
                let (mut d, mut c) = (0.0, 0.0);
                while i < obs.len() && obs[i].time == t {
                    if obs[i].is_event() {
                        d += 1.0;
                    } else {
                        c += 1.0;
                    }
                    i += 1;
                }
                if d > 0.0 {
                    s *= 1.0 - d / at_risk;
                    times.push(t);
                    survival.push(s);
                }
                if c > 0.0 {
                    censored.push((t, s));
                }
                at_risk -= d + c;
            }
            Curve {
                label: ds.group_label(j),
                times,
                survival,
                censored,
            }
        })
        .collect()
}

pub fn analyze_json(
    csv: &str,
    factors: &str,
    weight_spec: &str,
    nperm: usize,
    seed: u64,
) -> Result<String, String> {
    let ds = load(csv, factors)?;
    let ws = weights(weight_spec)?;
    let plan = (nperm > 0).then(|| PermutationPlan::monte_carlo(nperm, seed));
    let report = analyze(&ds, &default_effects(ds.layout()), &ws, plan.as_ref(), 0.05)
        .map_err(|e| e.to_string())?;
    let out = Analysis {
        report,
        curves: km_curves(&ds),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

pub fn histogram_json(
    csv: &str,
    factors: &str,
    weight_spec: &str,
    effect: &str,
    nperm: usize,
    seed: u64,
    bins: usize,
) -> Result<String, String> {
    let ds = load(csv, factors)?;
    let ws = weights(weight_spec)?;
    let effect = Effect::parse(effect).map_err(|e| e.to_string())?;
    let spec = contrast(ds.layout(), ds.k(), &effect).map_err(|e| e.to_string())?;
    let mut plan = PermutationPlan::monte_carlo(nperm, seed);
    plan.keep_replicates = true;
    let res = permutation_test(&ds, &spec, &ws, &plan).map_err(|e| e.to_string())?;
    let stats = res.replicate_statistics.unwrap_or_default();
    let bins = bins.max(1);
    let top = stats
        .iter()
        .copied()
        .fold(res.observed, f64::max)
        .max(1e-12)
        * 1.02;
    let width = top / bins as f64;
    let mut counts = vec![0; bins];
    for s in &stats {
        counts[((s / width) as usize).min(bins - 1)] += 1;
    }
    let out = Histogram {
        effect: effect.label(),
        observed: res.observed,
        p_value: res.p_value,
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        counts,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Predicted power at `points` evenly spaced multiples of `θ` in `[0, max_scale]`.
pub fn power_curve_json(config: &str, max_scale: f64, points: usize) -> Result<String, String> {
    let cfg: PowerConfig = serde_json::from_str(config).map_err(|e| e.to_string())?;
    let n = points.max(2);
    let scales: Vec<f64> = (0..n)
        .map(|i| max_scale * i as f64 / (n - 1) as f64)
        .collect();
    let curve: Vec<PowerPoint> = cfg.curve(&scales).map_err(|e| e.to_string())?;
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn veteran_csv() -> String {
    VETERAN_CSV.to_string()
}

#[wasm_bindgen]
pub fn analyze_csv(
    csv: &str,
    factors: &str,
    weights: &str,
    nperm: usize,
    seed: u32,
) -> Result<String, JsValue> {
    analyze_json(csv, factors, weights, nperm, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn permutation_histogram(
    csv: &str,
    factors: &str,
    weights: &str,
    effect: &str,
    nperm: usize,
    seed: u32,
    bins: usize,
) -> Result<String, JsValue> {
    histogram_json(csv, factors, weights, effect, nperm, u64::from(seed), bins)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn power_curve(config: &str, max_scale: f64, points: usize) -> Result<String, JsValue> {
    power_curve_json(config, max_scale, points).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn veteran_analysis() {
        let out: serde_json::Value = serde_json::from_str(
            &analyze_json(VETERAN_CSV, "trt,celltype", "fh:0:0 poly:1,-2", 199, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(out["report"]["effects"].as_array().unwrap().len(), 3);
        let curves = out["curves"].as_array().unwrap();
        assert_eq!(curves.len(), 6);
        // adeno under the standard treatment has no censoring, so its curve reaches zero
        let s = curves[4]["survival"].as_array().unwrap();
        assert_eq!(s.last().unwrap().as_f64().unwrap(), 0.0);
    }

    #[test]
    fn histogram_counts_every_replicate() {
        let h: serde_json::Value = serde_json::from_str(
            &histogram_json(
                VETERAN_CSV,
                "trt,celltype",
                "fh:0:0 poly:1,-2",
                "main:trt",
                299,
                1,
                20,
            )
            .unwrap(),
        )
        .unwrap();
        let total: u64 = h["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum();
        assert_eq!(total, 299);
        assert_eq!(h["edges"].as_array().unwrap().len(), 21);
    }

    #[test]
    fn power_curve_starts_at_level() {
        let cfg = include_str!("../../core/scenarios/power_k3_local.json");
        let v: serde_json::Value =
            serde_json::from_str(&power_curve_json(cfg, 2.0, 5).unwrap()).unwrap();
        assert!((v[0]["power"].as_f64().unwrap() - 0.05).abs() < 1e-9);
        assert_eq!(v.as_array().unwrap().len(), 5);
    }

    #[test]
    fn errors_are_messages() {
        assert!(analyze_json("time,status\n1,1\n", "g", "fh:0:0", 0, 0)
            .unwrap_err()
            .contains("g"));
        assert!(analyze_json(VETERAN_CSV, "trt", "fh:0:0 fh:0:0", 0, 0).is_err());
    }
}
