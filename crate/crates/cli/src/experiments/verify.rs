//! Batch verification driver: runs the analysis checks over many random
//! instances and reports one PASS/FAIL line per check plus a CSV of
//! per-instance errors.

use dae_core::analysis::{
    decomposition_residual, hierarchy_check, policy_improvement_check, verify_theorem1,
};
use dae_core::builders;
use dae_core::dp;
use dae_core::fit::DecompositionTables;
use dae_core::seeds::split_seed;
use dae_core::trajectory::{sample_dataset, sample_trajectory, BackupLength};
use dae_core::PolicyTable;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::csvfmt;

use super::OutDir;

pub const THEOREM_TOL: f64 = 1e-8;
pub const RESIDUAL_TOL: f64 = 1e-9;
pub const IMPROVEMENT_TOL: f64 = 1e-9;
pub const HIERARCHY_TOL: f64 = 1e-12;

const LAYER_POOL: [&[usize]; 6] = [&[2, 2, 1], &[1, 2, 2], &[3, 2], &[2, 3], &[1, 1, 1, 1, 1], &[2, 2]];

pub struct VerifyArgs {
    pub master_seed: u64,
    pub instances: usize,
    /// Perturb the advantage table by 1e-3 in the decomposition check, to
    /// confirm the harness detects faults.
    pub inject_fault: bool,
}

#[derive(Debug, Clone)]
struct CheckRecord {
    check: &'static str,
    instance: usize,
    backup: String,
    value: f64,
    threshold: f64,
    status: &'static str,
}

pub struct VerifyOutcome {
    pub pass: bool,
}

pub fn run_verify(args: &VerifyArgs, out: &OutDir) -> anyhow::Result<VerifyOutcome> {
    let records: Vec<CheckRecord> = (0..args.instances)
        .into_par_iter()
        .map(|i| instance_records(args, i))
        .collect::<anyhow::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut csv = String::from("check,instance,backup,value,threshold,status\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.check,
            r.instance,
            r.backup,
            csvfmt::float(r.value),
            csvfmt::float(r.threshold),
            r.status
        ));
    }
    out.write("verify.csv", &csv)?;

    let mut pass = true;
    for check in ["theorem1", "decomposition", "policy-improvement", "hierarchy"] {
        let of_check: Vec<&CheckRecord> = records.iter().filter(|r| r.check == check).collect();
        let worst = of_check.iter().map(|r| r.value).fold(0.0f64, f64::max);
        let failed = of_check.iter().filter(|r| r.status == "FAIL").count();
        let status = if failed == 0 { "PASS" } else { "FAIL" };
        pass &= failed == 0;
        println!(
            "{status} {check}: {} records, {failed} failures, worst error {worst:.3e} (tol {:.0e})",
            of_check.len(),
            of_check.first().map(|r| r.threshold).unwrap_or(0.0)
        );
    }

    // One deliberately non-explorative instance: reported, never failed.
    let mdp = builders::fig3();
    let behavior = PolicyTable::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0])?;
    let target = builders::fig3_uniform();
    let report = verify_theorem1(&mdp, &behavior, &target, BackupLength::Episode, THEOREM_TOL)?;
    println!(
        "SKIP non-explorative example: {} unreached transitions {:?}, unique={}",
        report.unreached.len(),
        report.unreached,
        report.unique
    );

    Ok(VerifyOutcome { pass })
}

fn instance_records(args: &VerifyArgs, instance: usize) -> anyhow::Result<Vec<CheckRecord>> {
    let i = instance as u64;
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(args.master_seed, &[40, i]));

    // Population minimizer recovery, finite backups on a cyclic instance.
    let num_states = 3 + (instance % 4);
    let num_actions = 2 + (instance % 2);
    let mdp = builders::random_mdp(split_seed(args.master_seed, &[41, i]), num_states, num_actions);
    let behavior = builders::uniform_policy(&mdp);
    let target = builders::random_policy(split_seed(args.master_seed, &[42, i]), &mdp);
    for n in [0usize, 1, 2] {
        let report = verify_theorem1(&mdp, &behavior, &target, BackupLength::Steps(n), THEOREM_TOL)?;
        let value = report.max_error_v.max(report.max_error_a).max(report.max_error_b);
        records.push(CheckRecord {
            check: "theorem1",
            instance,
            backup: n.to_string(),
            value,
            threshold: THEOREM_TOL,
            status: if report.passed { "PASS" } else { "FAIL" },
        });
    }

    // Episode-length backup on a layered instance with an exact horizon.
    let widths = LAYER_POOL[instance % LAYER_POOL.len()];
    let layered = builders::layered_random_mdp(split_seed(args.master_seed, &[43, i]), widths, num_actions);
    let layered_target = builders::random_policy(split_seed(args.master_seed, &[44, i]), &layered);
    let report = verify_theorem1(
        &layered,
        &builders::uniform_policy(&layered),
        &layered_target,
        BackupLength::Episode,
        THEOREM_TOL,
    )?;
    records.push(CheckRecord {
        check: "theorem1",
        instance,
        backup: "episode".into(),
        value: report.max_error_v.max(report.max_error_a).max(report.max_error_b),
        threshold: THEOREM_TOL,
        status: if report.passed { "PASS" } else { "FAIL" },
    });

    // Return decomposition with exact tables (optionally perturbed).
    let policy = builders::random_policy(split_seed(args.master_seed, &[45, i]), &mdp);
    let values = dp::policy_evaluation_exact(&mdp, &policy)?;
    let mut advantage = dp::advantage_exact(&mdp, &policy)?;
    if args.inject_fault {
        advantage.iter_mut().for_each(|a| *a += 1e-3);
    }
    let nature = dp::nature_advantage_exact(&mdp, &policy)?;
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let traj = sample_trajectory(&mdp, &policy, split_seed(args.master_seed, &[46, i, k]), 400)?;
        worst = worst.max(decomposition_residual(&traj, &values, &advantage, &nature, mdp.discount())?.abs());
    }
    records.push(CheckRecord {
        check: "decomposition",
        instance,
        backup: "episode".into(),
        value: worst,
        threshold: RESIDUAL_TOL,
        status: if worst < RESIDUAL_TOL { "PASS" } else { "FAIL" },
    });

    // Policy improvement lemma.
    let mu = builders::random_policy(split_seed(args.master_seed, &[47, i]), &mdp);
    let residual = policy_improvement_check(&mdp, &mu, &target)?;
    records.push(CheckRecord {
        check: "policy-improvement",
        instance,
        backup: "-".into(),
        value: residual,
        threshold: IMPROVEMENT_TOL,
        status: if residual < IMPROVEMENT_TOL { "PASS" } else { "FAIL" },
    });

    // Hierarchy collapse identities on random tables.
    let mut tables = DecompositionTables::default();
    for s in 0..mdp.num_states() {
        tables.v.insert(s, rng.random_range(-1.0..1.0));
        for a in 0..mdp.num_actions() {
            tables.a.insert((s, a), rng.random_range(-1.0..1.0));
            for s2 in 0..mdp.num_states() {
                tables.b.insert(s, a, s2, rng.random_range(-1.0..1.0));
            }
        }
    }
    let data = sample_dataset(&mdp, &behavior, split_seed(args.master_seed, &[48, i]), 20, 50)?;
    let bootstrap: Vec<f64> = (0..mdp.num_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let deviation = hierarchy_check(&tables, &data, Some(&bootstrap), mdp.discount(), BackupLength::Steps(3))?;
    records.push(CheckRecord {
        check: "hierarchy",
        instance,
        backup: "3".into(),
        value: deviation,
        threshold: HIERARCHY_TOL,
        status: if deviation <= HIERARCHY_TOL { "PASS" } else { "FAIL" },
    });

    Ok(records)
}
