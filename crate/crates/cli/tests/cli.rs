use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("FEDSIM_THREADS", t),
        None => cmd.env_remove("FEDSIM_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "algorithm": "fedmrur",
  "rounds": 6,
  "num_clients": 20,
  "participation_ratio": 0.25,
  "per_class": 40,
  "test_per_class": 10
}"#;

#[test]
fn selftest_passes_and_lists_batteries() {
    let out = fedsim(&["selftest"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let passes = text.lines().filter(|l| l.starts_with("PASS")).count();
    assert!(passes >= 4, "{text}");
    assert!(text.contains("hyperbolic"));
}

#[test]
fn help_lists_defaults() {
    let out = fedsim(&["--help"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("participation_ratio"));
    assert!(text.contains("0.005"));
}

#[test]
fn run_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let mut csvs = Vec::new();
    for (i, threads) in ["1", "8", "1"].iter().enumerate() {
        let csv = dir.path().join(format!("m{i}.csv"));
        let set = format!("output_path={}", csv.display());
        let out = fedsim(&["run", "--config", &config, "--set", &set], Some(threads));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(fs::read(&csv).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let text = String::from_utf8(csvs.swap_remove(0)).unwrap();
    assert!(text.starts_with(
        "round,train_loss,test_accuracy,test_loss,global_update_norm,d_t,mean_pairwise_cosine,effective_eta_l\n"
    ));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn unknown_key_is_reported_with_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "{\n  \"alpa\": 0.1\n}");
    let out = fedsim(&["run", "--config", &config], None);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("unknown key: alpa"), "{err}");
}

#[test]
fn out_of_range_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"participation_ratio": 1.5}"#);
    let out = fedsim(&["run", "--config", &config], None);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("participation_ratio"));
}

#[test]
fn compare_writes_one_csv_per_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let set = format!("output_path={}", dir.path().join("cmp.csv").display());
    let out = fedsim(
        &["compare", "--config", &config, "--algorithms", "fedavg,fedmrur", "--set", &set],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cmp_fedavg.csv").exists());
    assert!(dir.path().join("cmp_fedmrur.csv").exists());
}

#[test]
fn partition_inspect_covers_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = fedsim(&["partition-inspect", "--config", &config], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    let total: usize = rows
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 400);
}

#[test]
fn plot_renders_svg_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let csv = dir.path().join("m.csv");
    let set = format!("output_path={}", csv.display());
    assert!(fedsim(&["run", "--config", &config, "--set", &set], None).status.success());
    let svg = dir.path().join("m.svg");
    let out = fedsim(
        &[
            "plot",
            csv.to_str().unwrap(),
            "--out",
            svg.to_str().unwrap(),
            "--columns",
            "train_loss,global_update_norm",
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains("viewBox=\"0 0 800 500\""));
}
