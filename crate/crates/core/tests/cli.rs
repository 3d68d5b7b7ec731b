use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pihte"))
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_reports_chain_widths() {
    let o = run(&["analyze", "--estimand-file", &fixture("chain7.est"), "--graph", &fixture("chain7.graph")]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["depth"], 1);
    assert_eq!(v["levels"][0]["hw"], 1);
    assert_eq!(v["levels"][0]["w"], 6);
}

#[test]
fn simulate_then_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("napkin.csv");
    let cbn = dir.path().join("napkin.json");
    let data_s = data.display().to_string();
    let o = run(&[
        "simulate",
        "--graph",
        &fixture("napkin.graph"),
        "--rows",
        "500",
        "--seed",
        "4",
        "--out",
        &data_s,
        "--save-cbn",
        &cbn.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next().unwrap(), "W,R,X,Y");
    assert_eq!(text.lines().count(), 501);

    // Sampling again from the saved network reproduces the file.
    let again = run(&["simulate", "--cbn", &cbn.display().to_string(), "--rows", "500", "--seed", "4"]);
    assert_eq!(stdout(&again), text);

    let o = run(&[
        "estimate",
        "--graph",
        &fixture("napkin.graph"),
        "--data",
        &data_s,
        "--estimand-file",
        &fixture("napkin.est"),
        "--format",
        "csv",
        "--do",
        "X=0",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("R,X,Y,p"));
    // Each (R, X=0) slice sums to one over Y.
    let mut sums = [0.0f64; 2];
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[1], "0");
        sums[f[0].parse::<usize>().unwrap()] += f[3].parse::<f64>().unwrap();
    }
    for s in sums {
        assert!(s == 0.0 || (s - 1.0).abs() < 1e-12, "{s}");
    }
}

#[test]
fn sequential_flag_gives_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv").display().to_string();
    assert!(run(&["simulate", "--graph", &fixture("cone_cloud.graph"), "--rows", "300", "--out", &data])
        .status
        .success());
    let base = [
        "estimate",
        "--graph",
        &fixture("cone_cloud.graph"),
        "--data",
        &data,
        "--estimand-file",
        &fixture("cone_cloud.est"),
        "--format",
        "csv",
    ];
    let a = run(&base);
    let mut seq = vec!["--sequential"];
    seq.extend(base);
    let b = run(&seq);
    assert!(a.status.success() && b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn bench_prints_metrics_rows() {
    let o = run(&[
        "bench",
        "--graph",
        &fixture("chain7.graph"),
        "--estimand-file",
        &fixture("chain7.est"),
        "--sizes",
        "50,100",
        "--dist",
        "uniform",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "samples,time,max_table_size,t,density");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("50,"));
}

#[test]
fn oracle_command_passes() {
    let o = run(&["oracle", "--count", "10", "--seed", "5", "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 11);
}

#[test]
fn exit_codes() {
    // Malformed estimand.
    let o = run(&["analyze", "--estimand", "sum[X](P(X)"]);
    assert_eq!(o.status.code(), Some(2));
    // Unknown distribution family.
    let o = run(&["simulate", "--graph", &fixture("napkin.graph"), "--rows", "5", "--dist", "zipf"]);
    assert_eq!(o.status.code(), Some(2));
    // Table cap.
    let o = bin()
        .args([
            "bench",
            "--graph",
            &fixture("chain7.graph"),
            "--estimand-file",
            &fixture("chain7.est"),
            "--sizes",
            "200",
        ])
        .env("PIHTE_MAX_ENTRIES", "5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
    // A denominator that vanishes where the numerator does not.
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.graph");
    let data = dir.path().join("d.csv");
    std::fs::write(&graph, "var A 2\nvar B 2\n").unwrap();
    std::fs::write(&data, "A,B\n0,0\n0,1\n1,1\n").unwrap();
    let o = run(&[
        "estimate",
        "--graph",
        &graph.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--estimand",
        "P(A) / P(A|B)",
        "--raw",
        "--do",
        "B=0",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
