use std::path::Path;
use std::process::{Command, Output};

use stabcode_cli::config::{Config, Grid};

fn stabcode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabcode")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn assign_prints_one_row_per_central_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[assign]\nr = 3\nk = 2\ntable = \"solved\"\n");
    let o = stabcode(&["assign", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "b,a1,a2,row_cost,total_cost");
    assert_eq!(lines.len(), 10);
    let reference = stabcode::mdc::published(3, 2).unwrap().cost();
    let suffix = format!(",{reference}");
    assert!(lines[1..].iter().all(|l| l.ends_with(&suffix)), "total cost equals the published table's");
}

#[test]
fn unknown_key_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[assign]\nr = 3\nwidth = 2\n");
    let out = dir.path().join("out.csv");
    let o = stabcode(&["assign", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
    assert!(!out.exists());
}

#[test]
fn bad_grid_flag_is_a_config_error() {
    let o = stabcode(&["stability", "--grid", "0.5:0.1:0.1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = stabcode(&["tables", "histogram"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inadmissible_step_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[design]\nconstruction = \"md\"\nk = 2\nk_prime = 1\nr = 3\ndelta = 3.0\n");
    let o = stabcode(&["design", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).is_empty());
}

#[test]
fn design_accepts_the_two_description_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[design]\nconstruction = \"md\"\nk = 2\nk_prime = 1\nr = 3\ndelta = 1.33\n");
    let o = stabcode(&["design", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    let get = |key: &str| -> String {
        text.lines().find_map(|l| l.strip_prefix(&format!("{key},"))).unwrap().to_string()
    };
    assert_eq!(get("accepted"), "true");
    let snr: f64 = get("snr_k_prime").parse().unwrap();
    assert!((snr - 42.5).abs() < 0.5, "snr {snr}");
}

#[test]
fn total_loss_diverges_with_exit_four_and_keeps_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulate]\nhorizon = 5000\nwarmup = 10\ncodes = [\"md21\"]\n");
    let out = dir.path().join("sim.csv");
    let o = stabcode(&["simulate", "--config", &cfg, "--grid", "1:1:0.1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn simulate_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulate]\nhorizon = 20000\ncodes = [\"md32\"]\n");
    let run = |seed: &str| stdout(&stabcode(&["simulate", "--config", &cfg, "--grid", "0:0.1:0.05", "--seed", seed]));
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn out_file_holds_the_full_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stab.csv");
    let o = stabcode(&["stability", "--grid", "0:0.1:0.05", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    // Six default codes, three grid points each.
    assert_eq!(text.lines().count(), 1 + 6 * 3);
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1, "no temporary files left behind");
}

#[test]
fn grid_parsing() {
    let g = Grid::parse("0:0.2:0.02").unwrap();
    assert_eq!(g.0.len(), 11);
    assert_eq!(g.0[3], 0.06);
    assert_eq!(g.0[10], 0.2);
    assert!(Grid::parse("0:1").is_err());
    assert!(Grid::parse("0:2:0.5").is_err());
    assert!(Grid::parse("0:1:0").is_err());
}

#[test]
fn grid_accepts_a_list() {
    let cfg: Config = toml::from_str("[stability]\ngrid = [0.0, 0.37, 0.4]\n").unwrap();
    assert_eq!(cfg.stability.grid.0, vec![0.0, 0.37, 0.4]);
    assert!(toml::from_str::<Config>("[stability]\ngrid = [0.0, 1.5]\n").map(|c| c.validate()).unwrap().is_err());
}

#[test]
fn shipped_config_matches_the_defaults_where_it_should() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let shipped = Config::load(Some(&p)).unwrap();
    let defaults = Config::default();
    assert_eq!(shipped.codes, defaults.codes);
    assert_eq!(shipped.loop_, defaults.loop_);
    assert_eq!(shipped.simulate, defaults.simulate);
}
