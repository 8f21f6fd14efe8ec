//! End-to-end determinism check for the pipeline binary: the same config and
//! seed must produce byte-identical run directories across two executions,
//! through the simulate -> ingest -> analyze chain. Run directory names carry
//! a wall-clock stamp, so each invocation pins `--run-dir`; file contents
//! never embed timestamps.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn rtprop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rtprop"))
}

/// Maps file name to contents for every regular file directly in `dir`.
fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        assert!(entry.file_type().unwrap().is_file(), "unexpected subdirectory {:?}", entry.path());
        out.insert(
            entry.file_name().into_string().unwrap(),
            std::fs::read(entry.path()).unwrap(),
        );
    }
    out
}

/// Compares two run directories; Ok carries the number of matching files.
fn compare_dirs(d1: &Path, d2: &Path) -> Result<usize, String> {
    let (a, b) = (dir_bytes(d1), dir_bytes(d2));
    let names: Vec<_> = a.keys().cloned().collect();
    if names != b.keys().cloned().collect::<Vec<_>>() {
        return Err(format!(
            "file sets differ: {names:?} vs {:?}",
            b.keys().collect::<Vec<_>>()
        ));
    }
    for name in &names {
        if a[name] != b[name] {
            return Err(format!("{name} differs between {d1:?} and {d2:?}"));
        }
    }
    Ok(names.len())
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

#[test]
fn c09_identical_config_and_seed_reproduce_run_directories_byte_for_byte() {
    let start = Instant::now();
    let base = tempfile::tempdir().unwrap();
    let cfg_path = base.path().join("pipeline.toml");
    std::fs::write(
        &cfg_path,
        "seed = 4242\n\
         \n\
         [simulate]\n\
         n_students = 12\n\
         n_skills = 4\n\
         mean_obs_per_student = 24.0\n\
         \n\
         [analysis]\n\
         min_obs_per_slice = 2\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap().to_owned();

    // Two independent simulations of the same config and seed.
    let sim1 = base.path().join("sim1");
    let sim2 = base.path().join("sim2");
    for dir in [&sim1, &sim2] {
        run_ok(rtprop()
            .args(["simulate", "--config", &cfg, "--run-dir"])
            .arg(dir));
    }

    // Two ingest passes over the same raw transaction log.
    let raw = sim1.join("transactions.csv");
    let ing1 = base.path().join("ing1");
    let ing2 = base.path().join("ing2");
    for dir in [&ing1, &ing2] {
        run_ok(rtprop()
            .args(["ingest", "--config", &cfg, "--input"])
            .arg(&raw)
            .arg("--run-dir")
            .arg(dir));
    }

    // Two analysis passes over the same step table.
    let steps = ing1.join("steps.csv");
    let an1 = base.path().join("an1");
    let an2 = base.path().join("an2");
    for dir in [&an1, &an2] {
        run_ok(rtprop()
            .args(["analyze", "--config", &cfg, "--steps"])
            .arg(&steps)
            .arg("--run-dir")
            .arg(dir));
    }

    let result = compare_dirs(&sim1, &sim2)
        .and_then(|n| compare_dirs(&ing1, &ing2).map(|m| n + m))
        .and_then(|n| compare_dirs(&an1, &an2).map(|m| n + m));

    let elapsed = start.elapsed().as_secs_f64();
    match &result {
        Ok(n) => println!(
            "criterion 9: PASS ({elapsed:.2}s) simulate + ingest + analyze rerun byte-identical, {n} files compared"
        ),
        Err(why) => println!("criterion 9: FAIL ({elapsed:.2}s) {why}"),
    }
    result.unwrap();
}
