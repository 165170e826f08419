//! Actor-critic comparison runs on the slippery gridworld: one training
//! run per (method, seed), aggregated learning curves per method.

use dae_core::actor_critic::{train, CriticMethod, LearningCurve, TrainConfig};
use dae_core::builders;
use dae_core::seeds::split_seed;
use rayon::prelude::*;

use crate::csvfmt;
use crate::svg::{line_chart, ChartSpec, Series};

use super::OutDir;

pub struct TrainArgs {
    pub methods: Vec<CriticMethod>,
    pub master_seed: u64,
    pub num_seeds: usize,
    pub width: usize,
    pub height: usize,
    pub slip: f64,
    pub base_config: TrainConfig,
    pub save_checkpoints: bool,
}

/// Mean and standard error of the evaluation return per method and
/// checkpoint.
#[derive(Debug, Clone)]
pub struct AggregatedCurves {
    /// (method, step, mean, stderr), sorted by method then step.
    pub rows: Vec<(String, u64, f64, f64)>,
}

impl AggregatedCurves {
    pub fn of_method(&self, method: &str) -> Vec<(u64, f64, f64)> {
        self.rows
            .iter()
            .filter(|(m, _, _, _)| m == method)
            .map(|&(_, s, mean, se)| (s, mean, se))
            .collect()
    }
}

pub fn run_train(args: &TrainArgs, out: &OutDir) -> anyhow::Result<AggregatedCurves> {
    let mdp = builders::gridworld(args.width, args.height, args.slip);

    let jobs: Vec<(usize, usize)> = (0..args.methods.len())
        .flat_map(|m| (0..args.num_seeds).map(move |s| (m, s)))
        .collect();
    let results: Vec<(usize, usize, LearningCurve, String)> = jobs
        .par_iter()
        .map(|&(m_idx, seed_idx)| {
            let mut config = args.base_config.clone();
            config.method = args.methods[m_idx];
            config.seed = split_seed(args.master_seed, &[20, seed_idx as u64]);
            let (agent, curve) = train(&mdp, &config)
                .map_err(|e| anyhow::anyhow!("method {}, seed index {seed_idx}: {e}", args.methods[m_idx]))?;
            Ok((m_idx, seed_idx, curve, agent.to_text()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    // Raw per-seed curves.
    let mut raw = String::from("method,seed_index,step,mean_return\n");
    for (m_idx, seed_idx, curve, _) in &results {
        for p in &curve.points {
            raw.push_str(&format!(
                "{},{},{},{}\n",
                args.methods[*m_idx],
                seed_idx,
                p.env_steps,
                csvfmt::float(p.mean_return)
            ));
        }
    }
    out.write("train_raw.csv", &raw)?;

    if args.save_checkpoints {
        for (m_idx, seed_idx, _, checkpoint) in &results {
            out.write(&format!("agent_{}_{seed_idx}.txt", args.methods[*m_idx]), checkpoint)?;
        }
    }

    // Aggregate per method and checkpoint over seeds.
    let mut rows: Vec<(String, u64, f64, f64)> = Vec::new();
    for (m_idx, method) in args.methods.iter().enumerate() {
        let curves: Vec<&LearningCurve> =
            results.iter().filter(|(m, _, _, _)| *m == m_idx).map(|(_, _, c, _)| c).collect();
        let checkpoints = curves.iter().map(|c| c.points.len()).min().unwrap_or(0);
        for k in 0..checkpoints {
            let step = curves[0].points[k].env_steps;
            let values: Vec<f64> = curves.iter().map(|c| c.points[k].mean_return).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            rows.push((method.to_string(), step, mean, (var / n).sqrt()));
        }
    }
    let mut csv = String::from("method,step,mean_return,stderr\n");
    for (method, step, mean, se) in &rows {
        csv.push_str(&format!("{method},{step},{},{}\n", csvfmt::float(*mean), csvfmt::float(*se)));
    }
    let csv_path = out.write("train.csv", &csv)?;

    // Chart rebuilt from the written CSV.
    let text = std::fs::read_to_string(&csv_path)?;
    let (header, parsed) = crate::csvfmt::parse(&text)
        .ok_or_else(|| anyhow::anyhow!("unreadable csv {}", csv_path.display()))?;
    anyhow::ensure!(header == ["method", "step", "mean_return", "stderr"], "unexpected header");
    let mut names: Vec<String> = Vec::new();
    for row in &parsed {
        if !names.contains(&row[0]) {
            names.push(row[0].clone());
        }
    }
    let series: Vec<Series> = names
        .iter()
        .map(|name| Series {
            name: name.clone(),
            points: parsed
                .iter()
                .filter(|r| &r[0] == name)
                .map(|r| {
                    (
                        r[1].parse::<f64>().unwrap_or(f64::NAN),
                        r[2].parse::<f64>().unwrap_or(f64::NAN),
                        r[3].parse::<f64>().unwrap_or(0.0),
                    )
                })
                .collect(),
        })
        .collect();
    let svg = line_chart(&ChartSpec {
        title: format!(
            "gridworld {}x{} slip {}: greedy return, mean +/- 1 s.e. over {} seeds",
            args.width, args.height, args.slip, args.num_seeds
        ),
        x_label: "environment steps".into(),
        y_label: "mean episode return".into(),
        log_x: false,
        reference: None,
        series,
    });
    out.write("train.svg", &svg)?;

    Ok(AggregatedCurves { rows })
}
