use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use hdsel::cli::{export_csv, ingest_csv, Cli, ColumnRoles, RunConfig};
use hdsel::pipeline::run_pipeline;
use hdsel::sim::{generate_dgp, SimConfig};
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_hdsel");

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn dgp_csv(dir: &Path) -> (std::path::PathBuf, hdsel::data::SelectionDataset) {
    let (ds, _, _) = generate_dgp(&SimConfig { rho: 0.9, seed: 3, ..SimConfig::default() }, 0).unwrap();
    let path = dir.join("dgp.csv");
    export_csv(&ds, &path).unwrap();
    (path, ds)
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn flags(args: &[&str]) -> hdsel::cli::Flags {
    let mut full = vec!["hdsel"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap().flags
}

#[test]
fn toy_file_is_parsed() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "toy.csv", "y1,y2,w1,w2,x1\n1,0.5,1,2,3\n0,,4,5,6\n1,-1.25,7,8,9\n");
    let (ds, summary) = ingest_csv(&path, &ColumnRoles::default()).unwrap();
    assert_eq!((ds.n(), ds.n_selected(), ds.d(), ds.p()), (3, 2, 2, 1));
    assert_eq!(ds.selected_rows(), &[0, 2]);
    assert_eq!(ds.y2().as_slice(), &[0.5, -1.25]);
    assert_eq!(ds.x().as_slice(), &[3.0, 9.0]);
    assert_eq!(ds.w().row(1).iter().copied().collect::<Vec<_>>(), vec![4.0, 5.0]);
    assert_eq!(summary.w_columns, vec!["w1", "w2"]);
    assert!(summary.dropped_y2.is_empty());
}

#[test]
fn custom_roles_and_conflicts() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "roles.csv", "sel,out,a,b,c\n1,2,1,2,3\n1,3,2,1,0\n");
    let roles = ColumnRoles { y1: "sel".into(), y2: "out".into(), w: vec!["a".into(), "b".into()], x: vec!["c".into()] };
    let (ds, _) = ingest_csv(&path, &roles).unwrap();
    assert_eq!((ds.d(), ds.p()), (2, 1));
    let clash = ColumnRoles { w: vec!["a".into(), "c".into()], ..roles.clone() };
    assert!(ingest_csv(&path, &clash).is_err());
    let missing = ColumnRoles { x: vec!["z*".into()], ..roles };
    assert!(ingest_csv(&path, &missing).unwrap_err().to_string().contains("z*"));
}

#[test]
fn bad_cells_name_line_and_column() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "bad.csv", "y1,y2,w1,x1\n1,0.5,1,3\n1,0.1,abc,3\n");
    let msg = ingest_csv(&path, &ColumnRoles::default()).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("'w1'") && msg.contains("abc"), "{msg}");

    let path = write(dir.path(), "y1.csv", "y1,y2,w1,x1\n2,0.5,1,3\n");
    assert!(ingest_csv(&path, &ColumnRoles::default()).unwrap_err().to_string().contains("line 2"));

    let path = write(dir.path(), "inf.csv", "y1,y2,w1,x1\n1,inf,1,3\n");
    assert!(ingest_csv(&path, &ColumnRoles::default()).is_err());

    let path = write(dir.path(), "empty.csv", "y1,y2,w1,x1\n");
    assert!(ingest_csv(&path, &ColumnRoles::default()).is_err());
}

#[test]
fn missing_outcome_rules() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "miss.csv", "y1,y2,w1,x1\n1,,1,3\n0,,2,2\n");
    let msg = ingest_csv(&path, &ColumnRoles::default()).unwrap_err().to_string();
    assert!(msg.contains("line 2") && msg.contains("y2"), "{msg}");

    let path = write(dir.path(), "extra.csv", "y1,y2,w1,x1\n1,1.0,1,3\n0,7.5,2,2\n1,2.0,0,1\n");
    let (ds, summary) = ingest_csv(&path, &ColumnRoles::default()).unwrap();
    assert_eq!(ds.y2().as_slice(), &[1.0, 2.0]);
    assert_eq!(summary.dropped_y2, vec![1]);
}

#[test]
fn export_ingest_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = dgp_csv(dir.path());
    let (back, _) = ingest_csv(&path, &ColumnRoles::default()).unwrap();
    assert_eq!(back.w(), ds.w());
    assert_eq!(back.y1(), ds.y1());
    assert_eq!(back.x(), ds.x());
    assert_eq!(back.y2(), ds.y2());
    let cfg = RunConfig { bootstrap: 0, re_dirs: 0, ..RunConfig::default() };
    let a = run_pipeline(&ds, &cfg.pipeline()).unwrap();
    let b = run_pipeline(&back, &cfg.pipeline()).unwrap();
    assert_eq!(a.beta, b.beta);
}

#[test]
fn simulate_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let outs: Vec<_> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("sim{k}.json"));
            let o = run(&["simulate", "--reps", "3", "--seed", "11", "--output", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            (fs::read(&out).unwrap(), o.stdout)
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let text = String::from_utf8(outs[0].1.clone()).unwrap();
    assert_eq!(text.lines().count(), 8);
    let report: Value = serde_json::from_slice(&outs[0].0).unwrap();
    assert_eq!(report["config"]["seed"], 11);
    assert_eq!(report["result"]["table"]["columns"].as_array().unwrap().len(), 8);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--input", dir.path().join("absent.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    assert_eq!(run(&["fit"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--C", "0"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(2));
    let cfg = write(dir.path(), "bad.toml", "no_such_key = 1\n");
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--reps", "1", "--rho", "1.5"]).status.code(), Some(2));

    let dup = write(dir.path(), "dup.csv", "y1,y2,w1,w2,x1,x2\n1,1,0.1,1,1,1\n1,2,0.9,-1,2,2\n0,,-1.2,0.3,0,0\n1,0.5,0.4,-0.5,3,3\n0,,-0.8,0.2,0,0\n1,1.5,1.1,0.7,4,4\n0,,0.3,-0.9,0,0\n");
    let o = run(&["heckman", "--input", dup.to_str().unwrap(), "--bootstrap", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_report_matches_library() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = dgp_csv(dir.path());
    let out = dir.path().join("fit.json");
    let o = run(&["fit", "--input", path.to_str().unwrap(), "--bootstrap", "20", "--lambda3", "0.3", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("lambda3 = 0.3"), "{stderr}");
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let fit = &report["result"]["fit"];
    assert_eq!(fit["lambda3"].as_f64().unwrap(), 0.3);
    assert_eq!(report["config"]["lambda3"].as_f64().unwrap(), 0.3);

    let cfg = RunConfig::from_sources(&flags(&["fit", "--bootstrap", "20", "--lambda3", "0.3"])).unwrap();
    let lib = run_pipeline(&ds, &cfg.pipeline()).unwrap();
    let beta: Vec<f64> = fit["beta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(beta.len(), lib.beta.len());
    for (a, b) in beta.iter().zip(&lib.beta) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
    let se: Vec<f64> = fit["post_lasso"]["se"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (a, b) in se.iter().zip(&lib.post_lasso.se) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("lambda3 = 0.300000"));
}

#[test]
fn config_precedence() {
    let dir = TempDir::new().unwrap();
    let file = write(dir.path(), "run.toml", "seed = 5\nlipschitz = 2.0\nbootstrap = 7\nrhos = [0.5]\n\n[sim]\nn = 120\n");
    let f = file.to_str().unwrap();
    let cfg = RunConfig::from_sources(&flags(&["simulate", "--config", f])).unwrap();
    assert_eq!((cfg.seed, cfg.lipschitz, cfg.bootstrap, cfg.sim.n), (5, 2.0, 7, 120));
    assert_eq!(cfg.rhos, vec![0.5]);
    assert_eq!(cfg.sim.seed, 5);

    let cfg = RunConfig::from_sources(&flags(&["simulate", "--config", f, "--seed", "9", "--lipschitz-L", "0.5", "--n", "200", "--rho", "0,-0.3"])).unwrap();
    assert_eq!((cfg.seed, cfg.lipschitz, cfg.sim.lipschitz, cfg.bootstrap, cfg.sim.n), (9, 0.5, 0.5, 7, 200));
    assert_eq!(cfg.rhos, vec![0.0, -0.3]);
    assert_eq!(cfg.sim.seed, 9);

    let d = RunConfig::from_sources(&flags(&["simulate"])).unwrap();
    assert_eq!((d.seed, d.lipschitz, d.bootstrap), (1, 1.0, 200));

    let o = run(&["simulate", "--config", f, "--reps", "1", "--seed", "9"]);
    assert!(o.status.success());
    let echoed = String::from_utf8_lossy(&o.stderr);
    assert!(echoed.contains("seed = 9") && echoed.contains("lipschitz = 2.0"), "{echoed}");
}
