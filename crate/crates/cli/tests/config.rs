use dissensus::events::{DeathRuleKind, DuplicationRuleKind, JStarPolicy, SplitPolicy};
use dissensus::protocol::{DeltaKind, SchedulerKind};
use dissensus::{AgentId, Edge};
use dissensus_cli::spec::DEFAULT_MAX_TICKS;
use dissensus_cli::{parse_config, parse_script, EmitKind, Overrides, SpecError};

fn parse(text: &str) -> Result<dissensus_cli::ExperimentSpec, SpecError> {
    parse_config(text, &Overrides::default())
}

fn e(a: u64, b: u64) -> Edge {
    Edge::new(AgentId(a), AgentId(b)).unwrap()
}

const MINIMAL: &str = "version = 1\n[system]\nupper = 8\nstates = [4, 6]\nedges = [[1, 2]]\n";

#[test]
fn minimal_config_gets_defaults() {
    let spec = parse(MINIMAL).unwrap();
    let c = &spec.base;
    assert_eq!(c.upper, 8);
    assert_eq!(c.states.values().copied().collect::<Vec<_>>(), vec![4, 6]);
    assert_eq!(c.edges, vec![e(1, 2)]);
    assert_eq!(c.delta, DeltaKind::Unit);
    assert_eq!(c.scheduler, SchedulerKind::RoundRobin);
    assert_eq!(c.death, DeathRuleKind::Star(JStarPolicy::MaxState));
    assert_eq!(c.duplication, DuplicationRuleKind::Partition);
    assert_eq!(c.split, SplitPolicy::Half);
    assert_eq!(c.seed, 0);
    assert_eq!(c.max_ticks, DEFAULT_MAX_TICKS);
    assert!(spec.cells.is_empty());
    assert!(!spec.has_sweep());
    assert_eq!(spec.output.dir, std::path::PathBuf::from("out"));
    assert!(spec.output.wants(EmitKind::Trace) && spec.output.wants(EmitKind::Report));
    assert!(!spec.output.wants(EmitKind::Frames));
}

#[test]
fn upper_one_is_rejected_at_its_key() {
    let err =
        parse("version = 1\n[system]\nupper = 1\nstates = [1, 1]\nedges = [[1, 2]]\n").unwrap_err();
    assert_eq!(err.path, "system.upper");
    assert!(err.msg.contains("split_state requires B >= 2"), "{err}");
}

#[test]
fn duplicate_edges_are_rejected() {
    let err = parse(
        "version = 1\n[system]\nupper = 5\nstates = [1, 1, 1]\nedges = [[1, 2], [2, 3], [2, 1]]\n",
    )
    .unwrap_err();
    assert_eq!(err.path, "system.edges[2]");
    assert!(err.msg.contains("duplicate edge (1, 2)"), "{err}");
}

#[test]
fn structural_errors_name_their_key() {
    let cases = [
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2]]\nextra = 1\n", "system.extra"),
        ("version = 1\n[system]\nupper = \"5\"\nstates = [1, 1]\nedges = [[1, 2]]\n", "system.upper"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2]]\n[rules]\ndelta = \"big\"\n", "rules.delta"),
        ("version = 3\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2]]\n", "version"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 9]\nedges = [[1, 2]]\n", "system.states"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1, 1]\nedges = [[1, 2]]\n", "system.edges"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 3]]\n", "system.edges[0]"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 1]]\n", "system.edges[0]"),
        ("version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2]]\n[rules]\nscheduler = \"scripted\"\n", "rules.script"),
        ("version = 1\n[system]\nupper = 6\nstates = [1, 1]\nedges = [[1, 2]]\n[rules]\nalpha = 2\n", "rules.alpha"),
        ("version = 1\n[system]\nupper = 5\nchi = 8\nagents = 4\nshape = \"random\"\n", "system.random_edges"),
    ];
    for (text, path) in cases {
        let err = parse(text).unwrap_err();
        assert!(err.path.starts_with(path), "expected {path}, got {err}");
    }
}

#[test]
fn generated_systems_depend_on_the_seed() {
    let text = "version = 1\n[system]\nupper = 7\nchi = 30\nagents = 6\nshape = \"random\"\nrandom_edges = 8\n";
    let a = parse(text).unwrap().base;
    let b = parse_config(
        text,
        &Overrides {
            seed: Some(5),
            ..Overrides::default()
        },
    )
    .unwrap()
    .base;
    assert_eq!(a.chi(), 30);
    assert_eq!(a.edges.len(), 8);
    assert_eq!(b.seed, 5);
    assert!(a.states != b.states || a.edges != b.edges);
    assert_eq!(a, parse(text).unwrap().base);
}

#[test]
fn named_shapes() {
    let text = "version = 1\n[system]\nupper = 7\nchi = 24\nagents = 6\nshape = \"hole\"\n";
    let c = parse(text).unwrap().base;
    assert_eq!(c.edges.len(), 6);
    let text = text.replace("hole", "complete");
    assert_eq!(parse(&text).unwrap().base.edges.len(), 15);
}

#[test]
fn sweep_expands_in_row_order() {
    let text = format!(
        "{MINIMAL}[sweep]\nseeds = {{ start = 10, count = 2 }}\nupper = [8, 9]\nrules = [\"partition+star\", \"full+clique\"]\n"
    );
    let spec = parse(&text).unwrap();
    let keys: Vec<_> = spec
        .cells
        .iter()
        .map(|c| (c.upper, c.rules.to_string(), c.seed))
        .collect();
    assert_eq!(keys.len(), 8);
    assert_eq!(keys[0], (8, "partition+star".to_string(), 10));
    assert_eq!(keys[1], (8, "partition+star".to_string(), 11));
    assert_eq!(keys[2], (8, "full+clique".to_string(), 10));
    assert_eq!(keys[7], (9, "full+clique".to_string(), 11));
    assert!(spec
        .cells
        .iter()
        .enumerate()
        .all(|(i, c)| c.index == i && c.config.seed == c.seed));
    assert_eq!(spec.cells[7].config.death, DeathRuleKind::Clique);
}

#[test]
fn invalid_sweep_cells_are_rejected_at_parse_time() {
    // State 6 is out of range once B drops to 5.
    let text = format!("{MINIMAL}[sweep]\nupper = [8, 5]\n");
    let err = parse(&text).unwrap_err();
    assert_eq!(err.path, "system.states");
    assert!(err.msg.contains("sweep cell 1"), "{err}");

    let text = format!("{MINIMAL}[sweep]\nupper = [8, 1]\n");
    assert_eq!(parse(&text).unwrap_err().path, "sweep.upper[1]");

    let text = format!("{MINIMAL}[sweep]\nrules = [\"partition+star\", \"nope\"]\n");
    assert_eq!(parse(&text).unwrap_err().path, "sweep.rules[1]");

    // chi = 10 does not fit on 3 agents with B = 4.
    let text = "version = 1\n[system]\nupper = 8\nchi = 10\nagents = 3\nshape = \"chain\"\n[sweep]\nupper = [8, 4]\n";
    assert_eq!(parse(text).unwrap_err().path, "system.chi");
}

#[test]
fn overrides_take_precedence() {
    let ov = Overrides {
        out: Some("elsewhere".into()),
        seed: Some(3),
        max_ticks: Some(77),
        emit: Some(vec![EmitKind::Frames]),
        script: Some(vec![[1, 2], [2, 1]]),
    };
    let spec = parse_config(MINIMAL, &ov).unwrap();
    assert_eq!(spec.base.seed, 3);
    assert_eq!(spec.base.max_ticks, 77);
    assert_eq!(
        spec.base.scheduler,
        SchedulerKind::Scripted(vec![e(1, 2), e(1, 2)])
    );
    assert_eq!(spec.output.dir, std::path::PathBuf::from("elsewhere"));
    assert_eq!(
        spec.output.emit.iter().copied().collect::<Vec<_>>(),
        vec![EmitKind::Frames]
    );
}

#[test]
fn hash_ignores_output_placement_only() {
    let a = parse(MINIMAL).unwrap().hash;
    let b = parse(&format!("{MINIMAL}[output]\ndir = \"x\"\n"))
        .unwrap()
        .hash;
    let c = parse(&MINIMAL.replace("[4, 6]", "[5, 5]")).unwrap().hash;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn script_files() {
    let s = parse_script("# schedule\n1 2\n2,3\n\n3-1  # back\n").unwrap();
    assert_eq!(s, vec![[1, 2], [2, 3], [3, 1]]);
    let err = parse_script("1 2\n1 2 3\n").unwrap_err();
    assert_eq!(err.path, "script line 2");
    assert!(parse_script("a b\n").is_err());
}
