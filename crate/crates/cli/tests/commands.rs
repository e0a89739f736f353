use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dissensus::trace_io::read_trace;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dissensus"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn exec(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().expect("binary runs");
    (
        status.code().expect("exit code"),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn example_run_writes_outputs_with_provenance() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("nested/out");
    let (code, stdout, stderr) = exec(
        bin()
            .args(["run", "--config"])
            .arg(configs().join("example.toml"))
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(
        stdout.starts_with("Consensus at value 5 after 2 events"),
        "{stdout}"
    );
    assert!(stdout.contains("n = 2"));
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let t = read_trace(&trace, None).unwrap();
    let hash = t.config.hash();
    for name in ["trace.jsonl", "snapshots.jsonl", "frames.csv", "report.txt"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.contains(&hash) && first.contains("dissensus 0.1.0"),
            "{name}: {first}"
        );
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.trim_end().ends_with("RESULT pass"), "{report}");
}

#[test]
fn emit_flag_selects_outputs() {
    let tmp = TempDir::new().unwrap();
    let (code, _, stderr) = exec(
        bin()
            .args(["run", "--emit", "frames,svg", "--config"])
            .arg(configs().join("example.toml"))
            .arg("--out")
            .arg(tmp.path()),
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(tmp.path().join("frames.csv").exists());
    assert!(!tmp.path().join("trace.jsonl").exists());
    let svgs = fs::read_dir(tmp.path().join("frames")).unwrap().count();
    assert_eq!(svgs, 3);
}

#[test]
fn hole_run_keeps_its_shape() {
    let tmp = TempDir::new().unwrap();
    let (code, stdout, stderr) = exec(
        bin()
            .args(["run", "--emit", "report", "--config"])
            .arg(configs().join("hole6.toml"))
            .arg("--out")
            .arg(tmp.path()),
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("held throughout: hole"), "{stdout}");
    let report = fs::read_to_string(tmp.path().join("report.txt")).unwrap();
    assert!(report.contains("PASS shape-invariance:hole"), "{report}");
}

#[test]
fn verify_fresh_and_tampered_traces() {
    let tmp = TempDir::new().unwrap();
    let (code, ..) = exec(
        bin()
            .args(["run", "--config"])
            .arg(configs().join("hole6.toml"))
            .arg("--out")
            .arg(tmp.path()),
    );
    assert_eq!(code, 0);
    let trace = tmp.path().join("trace.jsonl");
    let (code, stdout, _) = exec(
        bin()
            .args(["verify", "--trace"])
            .arg(&trace)
            .arg("--snapshots")
            .arg(tmp.path().join("snapshots.jsonl")),
    );
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("PASS final-state") && stdout.contains("PASS snapshot-agreement"));

    // Inflate one recorded post-gossip state.
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines.iter().position(|l| l.contains("\"gossip\"")).unwrap();
    let (head, tail) = lines[i].split_once("\"hi_state\":").unwrap();
    let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
    let bumped: u64 = digits.parse::<u64>().unwrap() + 1;
    lines[i] = format!("{head}\"hi_state\":{bumped}{}", &tail[digits.len()..]);
    let bad = write(tmp.path(), "tampered.jsonl", &(lines.join("\n") + "\n"));
    let (code, stdout, _) = exec(bin().args(["verify", "--trace"]).arg(&bad));
    assert_eq!(code, 1, "{stdout}");
    assert!(
        stdout.contains("first failing invariant `conservation`"),
        "{stdout}"
    );

    // Truncation loses the end record.
    let cut = write(
        tmp.path(),
        "cut.jsonl",
        &lines[..lines.len() - 1].join("\n"),
    );
    let (code, _, stderr) = exec(bin().args(["verify", "--trace"]).arg(&cut));
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn verify_from_config_with_oracle() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "tiny.toml",
        "version = 1\n[system]\nupper = 4\nstates = [2, 2, 3]\nedges = [[1, 2], [2, 3]]\n[run]\nmax_epochs = 30\nmax_ticks = 2000\n",
    );
    let (code, stdout, stderr) = exec(bin().args(["verify", "--oracle", "--config"]).arg(&cfg));
    assert_eq!(code, 0, "{stdout}{stderr}");
    assert!(
        stdout.contains("oracle:") && stdout.contains("0 violations"),
        "{stdout}"
    );

    let cfg = write(
        tmp.path(),
        "maxdelta.toml",
        "version = 1\n[system]\nupper = 4\nstates = [2, 3]\nedges = [[1, 2]]\n[rules]\ndelta = \"max\"\n",
    );
    let (code, _, stderr) = exec(bin().args(["verify", "--oracle", "--config"]).arg(&cfg));
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("unit steps"), "{stderr}");
}

#[test]
fn script_file_drives_the_schedule() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "pair.toml",
        "version = 1\n[system]\nupper = 8\nstates = [4, 6]\nedges = [[1, 2]]\n[rules]\nduplication = \"full\"\n",
    );
    let script = write(tmp.path(), "s.txt", "1 2\n1 2\n# the children\n1 3\n1 4\n");
    let (code, stdout, stderr) = exec(
        bin()
            .args(["run", "--emit", "trace", "--config"])
            .arg(&cfg)
            .arg("--script")
            .arg(&script)
            .arg("--out")
            .arg(tmp.path().join("o")),
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(
        stdout.starts_with("Consensus at value 5 after 2 events"),
        "{stdout}"
    );
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (
            "version = 1\n[system]\nupper = 1\nstates = [1, 1]\nedges = [[1, 2]]\n",
            "system.upper",
        ),
        (
            "version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2], [2, 1]]\n",
            "duplicate edge",
        ),
        (
            "version = 1\n[system]\nupper = 5\nstates = [1, 1]\nedges = [[1, 2]]\nspeed = 2\n",
            "system.speed",
        ),
    ];
    for (i, (text, needle)) in cases.into_iter().enumerate() {
        let cfg = write(tmp.path(), &format!("c{i}.toml"), text);
        let (code, _, stderr) = exec(
            bin()
                .args(["run", "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(tmp.path()),
        );
        assert_eq!(code, 2, "{stderr}");
        assert!(stderr.contains(needle), "{stderr}");
    }
    let (code, _, _) = exec(
        bin()
            .args(["run", "--config"])
            .arg(tmp.path().join("missing.toml")),
    );
    assert_eq!(code, 2);
    let (code, _, _) = exec(
        bin()
            .args(["sweep", "--config"])
            .arg(configs().join("example.toml"))
            .arg("--out")
            .arg(tmp.path()),
    );
    assert_eq!(code, 2);
}

fn sweep(cfg: &Path, out: &Path) -> (i32, String) {
    let (code, stdout, stderr) = exec(
        bin()
            .args(["sweep", "--config"])
            .arg(cfg)
            .arg("--out")
            .arg(out),
    );
    assert_eq!(code, 0, "{stdout}{stderr}");
    (code, fs::read_to_string(out.join("sweep.csv")).unwrap())
}

fn column<'a>(csv: &'a str, name: &str) -> Vec<&'a str> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap()).collect()
}

#[test]
fn upper_sweep_reports_lower_bounds_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "s.toml",
        "version = 1\n[system]\nupper = 4\nchi = 10\nagents = 5\nshape = \"chain\"\n[run]\nmax_ticks = 5000\n[sweep]\nupper = [4, 6, 8]\n",
    );
    let (_, a) = sweep(&cfg, &tmp.path().join("a"));
    let (_, b) = sweep(&cfg, &tmp.path().join("b"));
    assert_eq!(a, b);
    assert_eq!(column(&a, "upper"), vec!["4", "6", "8"]);
    assert_eq!(column(&a, "lower_bound"), vec!["3", "2", "2"]);
    for (lb, min) in column(&a, "lower_bound").iter().zip(column(&a, "min_n")) {
        assert!(lb.parse::<u64>().unwrap() <= min.parse().unwrap());
    }
    assert!(a.starts_with("# dissensus 0.1.0 spec="));
}

#[test]
fn hole_sweep_over_100_seeds_is_shape_invariant() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "h.toml",
        "version = 1\n[system]\nupper = 7\nchi = 24\nagents = 6\nshape = \"hole\"\n[rules]\nscheduler = \"random\"\n[run]\nmax_epochs = 100\n[sweep]\nseeds = { count = 100 }\n",
    );
    let (_, csv) = sweep(&cfg, tmp.path());
    let held = column(&csv, "shape_held");
    assert_eq!(held.len(), 100);
    assert!(
        held.iter().all(|h| h.split('+').any(|f| f == "hole")),
        "{held:?}"
    );
    assert!(column(&csv, "invariants").iter().all(|s| *s == "pass"));
}

#[test]
fn rule_sweep_reports_density_per_rule_set() {
    let tmp = TempDir::new().unwrap();
    let (_, csv) = sweep(&configs().join("sweep-rules.toml"), tmp.path());
    let rules = column(&csv, "rules");
    let trend = column(&csv, "density_trend");
    assert_eq!(rules.len(), 20);
    for (r, t) in rules.iter().zip(&trend) {
        let want = if *r == "partition+star" {
            "pass"
        } else {
            "skipped"
        };
        assert_eq!(*t, want, "{r}");
    }
    assert!(column(&csv, "final_density")
        .iter()
        .all(|d| d.parse::<f64>().is_ok()));
}
