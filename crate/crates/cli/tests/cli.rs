use std::path::Path;
use std::process::{Command, Output};

fn evonas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evonas")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evolve_without_data_names_the_key() {
    let o = evonas(&["evolve"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim(), "error: missing required key 'data.path'");
}

#[test]
fn bad_flags_and_keys_fail_on_one_line() {
    let o = evonas(&["evolve", "--frobnicate"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));

    let o = evonas(&["evolve", "--set", "search.kernel=3"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim(), "error: unknown key 'search.kernel'");
}

#[test]
fn gradcheck_exit_code_follows_threshold() {
    let o = evonas(&["gradcheck", "--networks", "4", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evonas(&["gradcheck", "--networks", "2", "--threshold", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: max relative error"));
}

#[test]
fn sweep_writes_a_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(
        &grid,
        "in_channels = 3\nout_channels = 4, 8\nkernel = 1, 3\nstride = 1, 2\nbatch_size = 2\nsize = 12\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = evonas(&["sweep", "--grid-file", path(&grid), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(out.join("prior.csv").is_file());
}

#[test]
fn generated_data_feeds_timing_and_predict_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.pset");
    let o = evonas(&[
        "gen-data",
        "--pos",
        "10",
        "--neg",
        "30",
        "--h",
        "24",
        "--w",
        "24",
        "--out",
        path(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = evonas_core::data::load_patchset(&data).unwrap();
    assert_eq!(set.len(), 40);

    let out = dir.path().join("timing");
    let o = evonas(&[
        "bench-timing",
        "--data",
        path(&data),
        "--count",
        "30",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["epoch_times.csv", "histogram.csv", "timing.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let o = evonas(&[
        "predict",
        "--model",
        path(&dir.path().join("none.mndl")),
        "--data",
        path(&data),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("none.mndl"));
}
