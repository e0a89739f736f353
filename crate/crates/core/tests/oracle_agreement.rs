mod common;

use common::{random_config, rules};
use dissensus::analysis::{exhaustive_oracle, OracleOptions};
use dissensus::protocol::DeltaKind;
use dissensus::{run, Termination};

/// Every consensus the simulator reaches on a small system is one the
/// exhaustive search also reaches.
#[test]
fn simulated_consensus_is_reachable_in_the_oracle() {
    let mut checked = 0;
    for seed in 0..24u64 {
        let rule = rules(seed as usize);
        let n = 2 + seed % 3;
        let upper = if n == 4 { 4 } else { 4 + seed % 2 };
        let chi = n + seed % (n * (upper - 2) + 1);
        let Some(mut c) = random_config(
            n,
            seed % 2,
            chi,
            upper,
            rule,
            DeltaKind::Unit,
            seed % 2 == 1,
            seed,
        ) else {
            continue;
        };
        c.max_ticks = 5_000;
        let oracle = exhaustive_oracle(&c, OracleOptions::default()).unwrap();
        assert!(oracle.passed(), "seed {seed}: {oracle}");
        for s in 0..4 {
            c.seed = seed * 100 + s;
            let t = run(&c).unwrap();
            if let Termination::Consensus { value } = t.termination {
                let agents = t.final_states.len();
                assert!(
                    oracle
                        .consensus
                        .iter()
                        .any(|k| (k.agents, k.value) == (agents, value)),
                    "seed {seed}/{s}: ({agents}, {value}) not in oracle consensus set"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 10, "only {checked} consensus runs");
}
