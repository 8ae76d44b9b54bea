//! End-to-end checks of the binary: exit codes, artifact provenance,
//! reproducibility of outputs.

use std::process::Command;

fn nslab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nslab"))
}

#[test]
fn unknown_command_prints_usage_and_fails() {
    let out = nslab().arg("warp-drive").output().unwrap();
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage") || text.contains("usage"), "{text}");
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[noise]\nb0 = 0.0\n").unwrap();
    let out = nslab()
        .args(["--config", cfg.to_str().unwrap(), "basis"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("non-degeneracy"), "{text}");
}

#[test]
fn missing_config_file_exits_with_code_2() {
    let out = nslab()
        .args(["--config", "/nonexistent/lab.toml", "basis"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_zero_forcing_dissipates_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[physics]\nk_max = 3\ndt = 0.01\n[noise]\nj = 8\n").unwrap();
    let out = nslab()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            dir.path().join("o").to_str().unwrap(),
            "simulate",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let index =
        std::fs::read_to_string(dir.path().join("o").join("simulate_index.csv")).unwrap();
    assert!(index.starts_with("# config_digest = "));
    assert!(index.lines().nth(1).unwrap().starts_with("# seed = 9"));
    // energy column strictly decreasing
    let energies: Vec<f64> = index
        .lines()
        .skip(3)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(energies.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn tv_check_and_ot_oracle_pass() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["tv-check", "ot-oracle"] {
        let out = nslab()
            .args(["--out", dir.path().to_str().unwrap(), cmd])
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
    }
}

#[test]
fn outputs_are_bit_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[physics]\nk_max = 3\n[noise]\nj = 8\n").unwrap();
    let run = |sub: &str| -> Vec<u8> {
        let out_dir = tempfile::tempdir().unwrap();
        let st = nslab()
            .args([
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "77",
                "--out",
                out_dir.path().to_str().unwrap(),
                sub,
            ])
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(out_dir.path().join("basis.csv")).unwrap()
    };
    assert_eq!(run("basis"), run("basis"));
}
