use dae_core::{builders, dp};
fn main() {
    for slip in [0.0, 0.2] {
        let mdp = builders::gridworld(5, 5, slip);
        let (pol, v) = dp::policy_iteration(&mdp).unwrap();
        // Undiscounted expected episode length under the optimal policy ~ -return
        let uniform = builders::uniform_policy(&mdp);
        let v_uni = dp::policy_evaluation_exact(&mdp, &uniform).unwrap();
        println!("slip {slip}: V*(start) disc = {:.3}, V_uniform(start) disc = {:.3}", v[0], v_uni[0]);
        let _ = pol;
    }
}
