//! Closed-form versus solver comparison of the off-policy bias on the
//! two-state counterexample, over a grid of behavior/target
//! probabilities.

use dae_core::analysis::counterexample_closed_form;
use dae_core::builders;
use dae_core::fit::{fit_dae_windows, population_windows};
use dae_core::trajectory::BackupLength;

use crate::csvfmt;

use super::OutDir;

pub const AGREEMENT_TOL: f64 = 1e-8;

pub struct CounterexampleArgs {
    /// Grid step for both probabilities; the behavior grid stays strictly
    /// inside (0, 1).
    pub grid_step: f64,
}

pub struct CounterexampleOutcome {
    pub pass: bool,
    pub worst_disagreement: f64,
}

pub fn run_counterexample(args: &CounterexampleArgs, out: &OutDir) -> anyhow::Result<CounterexampleOutcome> {
    let step = args.grid_step;
    if !(step > 0.0 && step < 0.5) {
        anyhow::bail!("grid step {step} outside (0, 0.5)");
    }
    let mdp = builders::counterexample();
    let mut grid = Vec::new();
    let mut p = step;
    while p < 1.0 - step / 2.0 {
        grid.push(p);
        p += step;
    }

    let mut csv = String::from("mu_u,pi_u,v_star,v_solver,a_star_u,a_star_d,v_pi,bias,disagreement\n");
    let mut worst = 0.0f64;
    for &mu_u in &grid {
        let behavior = builders::counterexample_policy(mu_u)?;
        let windows = population_windows(&mdp, &behavior, BackupLength::Episode)?;
        for &pi_u in &grid {
            let closed = counterexample_closed_form(mu_u, pi_u)?;
            let target = builders::counterexample_policy(pi_u)?;
            let report = fit_dae_windows(&windows, &target, 1.0, None)?;
            let v_solver = report.tables.v[&0];
            let disagreement = (v_solver - closed.v_star)
                .abs()
                .max((report.tables.a[&(1, 0)] - closed.a_star_u).abs())
                .max((report.tables.a[&(1, 1)] - closed.a_star_d).abs());
            worst = worst.max(disagreement);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                csvfmt::float(mu_u),
                csvfmt::float(pi_u),
                csvfmt::float(closed.v_star),
                csvfmt::float(v_solver),
                csvfmt::float(closed.a_star_u),
                csvfmt::float(closed.a_star_d),
                csvfmt::float(closed.v_pi),
                csvfmt::float(closed.bias),
                csvfmt::float(disagreement),
            ));
        }
    }
    out.write("counterexample.csv", &csv)?;
    let pass = worst < AGREEMENT_TOL;
    println!(
        "{} counterexample closed-form vs solver: worst disagreement {:.3e} (tol {AGREEMENT_TOL:.0e})",
        if pass { "PASS" } else { "FAIL" },
        worst
    );
    Ok(CounterexampleOutcome { pass, worst_disagreement: worst })
}
