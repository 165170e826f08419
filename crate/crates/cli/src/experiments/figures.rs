//! Estimator-variance experiments on the two regression toys: repeated
//! seeded datasets over a sample-count grid, mean and standard deviation
//! of the fitted start-state values per estimator.

use dae_core::builders;
use dae_core::fit::{fit_batch_td0, fit_dae, fit_mc, fit_offpolicy_dae};
use dae_core::seeds::split_seed;
use dae_core::trajectory::{sample_dataset, BackupLength, Dataset};
use dae_core::transition_model::{estimate_transitions, TransitionModel};
use dae_core::{FiniteMdp, PolicyTable};
use rayon::prelude::*;

use crate::csvfmt;
use crate::svg::{line_chart, ChartSpec, Series};

use super::OutDir;

/// Default logarithmic sample-count grid, 10 to 10,000.
pub fn default_sample_grid() -> Vec<usize> {
    let mut grid: Vec<usize> = (0..=12).map(|k| (10.0 * 10f64.powf(k as f64 / 4.0)).round() as usize).collect();
    grid.dedup();
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Estimator {
    Mc,
    BatchTd0,
    Dae,
    OffDaeEmpirical,
    OffDaeOracle,
}

impl Estimator {
    fn name(&self) -> &'static str {
        match self {
            Estimator::Mc => "mc",
            Estimator::BatchTd0 => "batch-td0",
            Estimator::Dae => "dae",
            Estimator::OffDaeEmpirical => "offpolicy-dae-empirical",
            Estimator::OffDaeOracle => "offpolicy-dae-oracle",
        }
    }

    /// Fitted values for the two start states.
    fn estimate(&self, data: &Dataset, mdp: &FiniteMdp, policy: &PolicyTable) -> [Option<f64>; 2] {
        let pick = |m: &std::collections::BTreeMap<usize, f64>| [m.get(&0).copied(), m.get(&1).copied()];
        match self {
            Estimator::Mc => fit_mc(data, 1.0).map(|m| pick(&m)).unwrap_or([None, None]),
            Estimator::BatchTd0 => fit_batch_td0(data, 1.0).map(|m| pick(&m)).unwrap_or([None, None]),
            Estimator::Dae => fit_dae(data, policy, 1.0, BackupLength::Episode, None)
                .map(|r| pick(&r.tables.v))
                .unwrap_or([None, None]),
            Estimator::OffDaeEmpirical => {
                let model = estimate_transitions(data);
                fit_offpolicy_dae(data, policy, &model, 1.0, BackupLength::Episode, None)
                    .map(|r| pick(&r.tables.v))
                    .unwrap_or([None, None])
            }
            Estimator::OffDaeOracle => {
                let model = TransitionModel::oracle(mdp);
                fit_offpolicy_dae(data, policy, &model, 1.0, BackupLength::Episode, None)
                    .map(|r| pick(&r.tables.v))
                    .unwrap_or([None, None])
            }
        }
    }
}

pub struct FigureArgs {
    pub master_seed: u64,
    pub num_seeds: usize,
    pub samples: Vec<usize>,
}

/// Aggregated cell of the output table.
#[derive(Debug, Clone)]
pub struct FigureRow {
    pub estimator: &'static str,
    pub samples: usize,
    pub state: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub fn run_fig3(args: &FigureArgs, out: &OutDir) -> anyhow::Result<()> {
    let mdp = builders::fig3();
    let policy = builders::fig3_uniform();
    run_figure(&mdp, &policy, &[Estimator::Mc, Estimator::BatchTd0, Estimator::Dae], 0.5, "fig3", args, out)
}

pub fn run_fig4(args: &FigureArgs, out: &OutDir) -> anyhow::Result<()> {
    let mdp = builders::fig4();
    let policy = builders::fig4_uniform();
    run_figure(
        &mdp,
        &policy,
        &[Estimator::Dae, Estimator::OffDaeEmpirical, Estimator::OffDaeOracle],
        1.0,
        "fig4",
        args,
        out,
    )
}

fn run_figure(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    estimators: &[Estimator],
    reference: f64,
    prefix: &str,
    args: &FigureArgs,
    out: &OutDir,
) -> anyhow::Result<()> {
    let rows = figure_rows(mdp, policy, estimators, args);
    let mut csv = String::from("estimator,samples,state,mean,std,n_seeds\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.estimator,
            r.samples,
            r.state,
            csvfmt::float(r.mean),
            csvfmt::float(r.std),
            r.n_seeds
        ));
    }
    let csv_path = out.write(&format!("{prefix}.csv"), &csv)?;

    // Charts are rebuilt from the CSV file so they are a pure function of
    // what was written.
    let parsed = parse_figure_csv(&std::fs::read_to_string(&csv_path)?)
        .ok_or_else(|| anyhow::anyhow!("unreadable csv {}", csv_path.display()))?;
    for state in [0usize, 1] {
        let svg = figure_chart(&parsed, state, reference, prefix);
        out.write(&format!("{prefix}_state{state}.svg"), &svg)?;
    }
    Ok(())
}

/// Runs the seeded protocol and aggregates. Estimators at the same
/// (seed, sample-count) grid point see the same dataset: the data seed is
/// derived from the seed index and grid index only.
pub fn figure_rows(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    estimators: &[Estimator],
    args: &FigureArgs,
) -> Vec<FigureRow> {
    let per_seed: Vec<Vec<Vec<[Option<f64>; 2]>>> = (0..args.num_seeds)
        .into_par_iter()
        .map(|seed_idx| {
            args.samples
                .iter()
                .enumerate()
                .map(|(count_idx, &count)| {
                    let data_seed = split_seed(args.master_seed, &[0, seed_idx as u64, count_idx as u64]);
                    let data = sample_dataset(mdp, policy, data_seed, count, 50).expect("sampling");
                    estimators.iter().map(|e| e.estimate(&data, mdp, policy)).collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    for (e_idx, estimator) in estimators.iter().enumerate() {
        for (count_idx, &count) in args.samples.iter().enumerate() {
            for state in 0..2 {
                let values: Vec<f64> = per_seed
                    .iter()
                    .filter_map(|per_count| per_count[count_idx][e_idx][state])
                    .collect();
                let n = values.len();
                let (mean, std) = if n == 0 {
                    (f64::NAN, f64::NAN)
                } else {
                    let mean = values.iter().sum::<f64>() / n as f64;
                    let var = if n > 1 {
                        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
                    } else {
                        0.0
                    };
                    (mean, var.sqrt())
                };
                rows.push(FigureRow {
                    estimator: estimator.name(),
                    samples: count,
                    state,
                    mean,
                    std,
                    n_seeds: n,
                });
            }
        }
    }
    rows
}

type ParsedFigure = Vec<(String, usize, usize, f64, f64)>;

fn parse_figure_csv(text: &str) -> Option<ParsedFigure> {
    let (header, rows) = crate::csvfmt::parse(text)?;
    if header != ["estimator", "samples", "state", "mean", "std", "n_seeds"] {
        return None;
    }
    rows.into_iter()
        .map(|r| {
            Some((
                r[0].clone(),
                r[1].parse().ok()?,
                r[2].parse().ok()?,
                r[3].parse().ok()?,
                r[4].parse().ok()?,
            ))
        })
        .collect()
}

fn figure_chart(parsed: &ParsedFigure, state: usize, reference: f64, prefix: &str) -> String {
    let mut names: Vec<String> = Vec::new();
    for (name, _, st, _, _) in parsed {
        if *st == state && !names.contains(name) {
            names.push(name.clone());
        }
    }
    let series: Vec<Series> = names
        .iter()
        .map(|name| Series {
            name: name.clone(),
            points: parsed
                .iter()
                .filter(|(n, _, st, mean, _)| n == name && *st == state && mean.is_finite())
                .map(|&(_, samples, _, mean, std)| (samples as f64, mean, std))
                .collect(),
        })
        .collect();
    line_chart(&ChartSpec {
        title: format!("{prefix}: estimated value of state {state}"),
        x_label: "trajectories".into(),
        y_label: format!("V({state})"),
        log_x: true,
        reference: Some(reference),
        series,
    })
}
