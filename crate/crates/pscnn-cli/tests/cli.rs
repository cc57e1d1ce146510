//! End-to-end checks of the command-line surface: exit codes, file
//! formats, and the fused/unfused switch.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pscnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pscnn"))
        .current_dir(dir)
        .args(args)
        .env_remove("PSCNN_SEED")
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const MODEL: &str = r#"
input_len = 24

[weights]
source = "random"
seed = 3

[[layer]]
type = "conv1d"
c_in = 4
c_out = 10
k = 3
fused_pool_window = 2

[[layer]]
type = "dense"
in_features = 10
out_features = 12
"#;

#[test]
fn compile_run_compare_flow() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MODEL).unwrap();

    let out = pscnn(dir.path(), &["compile", "m.toml", "-o", "m.pscnn"]);
    assert_exit(&out, 0);

    let out = pscnn(
        dir.path(),
        &[
            "run",
            "m.pscnn",
            "--random-input",
            "5",
            "--stats",
            "fused.json",
        ],
    );
    assert_exit(&out, 0);
    let fused: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fused.json")).unwrap()).unwrap();
    assert!(fused["cycles"].as_u64().unwrap() > 0);
    assert_eq!(fused["variant"], "fused");
    // GOPS x latency recovers the MAC count.
    let gops = fused["gops"].as_f64().unwrap();
    let latency = fused["latency_s"].as_f64().unwrap();
    let macs = fused["macs"].as_u64().unwrap() as f64;
    assert!((gops * 1e9 * latency - macs).abs() / macs < 1e-6);

    let out = pscnn(
        dir.path(),
        &[
            "run",
            "m.pscnn",
            "--random-input",
            "5",
            "--unfused",
            "--stats",
            "unfused.json",
        ],
    );
    assert_exit(&out, 0);
    let unfused: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("unfused.json")).unwrap())
            .unwrap();
    assert!(
        unfused["cycles"].as_u64().unwrap() > fused["cycles"].as_u64().unwrap(),
        "separate pooling must cost more cycles"
    );

    let out = pscnn(dir.path(), &["compare", "m.pscnn", "--random-input", "5"]);
    assert_exit(&out, 0);
    let out = pscnn(
        dir.path(),
        &["compare", "m.pscnn", "--random-input", "5", "--unfused"],
    );
    assert_exit(&out, 0);

    // Heavy variation makes the simulator diverge from the reference.
    let out = pscnn(
        dir.path(),
        &[
            "compare",
            "m.pscnn",
            "--random-input",
            "5",
            "--sigma",
            "50",
            "--seed",
            "1",
        ],
    );
    assert_exit(&out, 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("position"), "{err}");
}

#[test]
fn energy_table_flow() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MODEL).unwrap();
    assert_exit(
        &pscnn(dir.path(), &["compile", "m.toml", "-o", "m.pscnn"]),
        0,
    );

    fs::write(
        dir.path().join("zero.json"),
        r#"{"sense_event_uj":0,"sram_read_uj":0,"sram_write_uj":0,"wrep_row_uj":0,"active_bank_cycle_uj":0,"gated_bank_cycle_uj":0}"#,
    )
    .unwrap();
    let out = pscnn(
        dir.path(),
        &[
            "run",
            "m.pscnn",
            "--cost-table",
            "zero.json",
            "--stats",
            "s.json",
        ],
    );
    assert_exit(&out, 0);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(doc["modeled_energy_uj"].as_f64().unwrap(), 0.0);

    // A table missing an entry is a validation error.
    fs::write(dir.path().join("bad.json"), r#"{"sense_event_uj":1}"#).unwrap();
    let out = pscnn(dir.path(), &["run", "m.pscnn", "--cost-table", "bad.json"]);
    assert_exit(&out, 2);
}

#[test]
fn asm_disasm_and_raw_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p.s"),
        "PTR ifm_bank=0 ofm_bank=1\nMAC n_out=4 wl_count=8\nHALT\n",
    )
    .unwrap();
    assert_exit(&pscnn(dir.path(), &["asm", "p.s", "-o", "p.bin"]), 0);
    let bin = fs::read(dir.path().join("p.bin")).unwrap();
    assert_eq!(bin.len(), 12);

    let out = pscnn(dir.path(), &["disasm", "p.bin"]);
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("MAC mode=conv n_out=4"));
    assert!(text.trim_end().ends_with("HALT"));

    // A HALT-only binary runs as a raw program: zero cycles.
    fs::write(dir.path().join("halt.bin"), 0xE000_0000u32.to_le_bytes()).unwrap();
    let out = pscnn(dir.path(), &["run", "halt.bin"]);
    assert_exit(&out, 0);
    let doc: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(doc["cycles"].as_u64(), Some(0));
    assert_eq!(doc["variant"], "raw");

    // Out-of-range operand: validation error with the line number.
    fs::write(dir.path().join("bad.s"), "MAC n_out=2000\n").unwrap();
    let out = pscnn(dir.path(), &["asm", "bad.s", "-o", "x.bin"]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn margin_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = pscnn(
        dir.path(),
        &[
            "margin",
            "--sigma-grid",
            "0",
            "--trials",
            "500",
            "--rows",
            "16",
        ],
    );
    assert_exit(&out, 0);
    let table: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(table[0]["twm_rate"].as_f64(), Some(0.0));
    assert_eq!(table[0]["bwm_rate"].as_f64(), Some(0.0));

    let out = pscnn(
        dir.path(),
        &[
            "margin",
            "--mode",
            "twm",
            "--sigma-grid",
            "0,1",
            "--trials",
            "200",
        ],
    );
    assert_exit(&out, 0);
    let table: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(table[1].get("bwm_rate").is_none());
}

#[test]
fn seed_env_fallback_changes_noisy_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MODEL).unwrap();
    assert_exit(
        &pscnn(dir.path(), &["compile", "m.toml", "-o", "m.pscnn"]),
        0,
    );
    let run_with_env = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_pscnn"))
            .current_dir(dir.path())
            .args(["run", "m.pscnn", "--random-input", "1", "--sigma", "2"])
            .env("PSCNN_SEED", seed)
            .output()
            .unwrap();
        assert_exit(&out, 0);
        let doc: serde_json::Value =
            serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
        doc["seed"].as_u64().unwrap()
    };
    assert_eq!(run_with_env("11"), 11);
    assert_eq!(run_with_env("12"), 12);
}

#[test]
fn exit_codes_for_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown flag: usage.
    assert_exit(&pscnn(dir.path(), &["run", "--bogus"]), 1);
    // Missing file: usage/IO.
    assert_exit(&pscnn(dir.path(), &["run", "nope.pscnn"]), 1);
    // Invalid model: validation.
    fs::write(
        dir.path().join("bad.toml"),
        "input_len = 4\n[[layer]]\ntype = \"conv1d\"\nc_in = 400\nc_out = 8\nk = 3\n",
    )
    .unwrap();
    let out = pscnn(dir.path(), &["compile", "bad.toml", "-o", "x.pscnn"]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("1024"));
    // Help exits 0.
    assert_exit(&pscnn(dir.path(), &["--help"]), 0);
}
