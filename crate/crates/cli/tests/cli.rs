use std::process::{Command, Output};

use ep_cli::report::{read_csv, SUMMARY_OP};

fn epsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epsim")).args(args).output().expect("spawn epsim")
}

fn ok(args: &[&str]) -> Output {
    let out = epsim(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn same_seed_same_csv() {
    let args = ["run", "--seed", "7", "--iters", "3"];
    let a = ok(&args).stdout;
    let b = ok(&args).stdout;
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, ok(&["run", "--seed", "8", "--iters", "3"]).stdout);
}

#[test]
fn csv_has_one_row_per_rank_and_op_plus_summary() {
    let out = ok(&["run", "--ranks", "4", "--iters", "2", "--send-only", "--layout", "legacy"]);
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 4 + 1);
    let summary = rows.last().unwrap();
    assert_eq!((summary.op.as_str(), summary.rank), (SUMMARY_OP, -1));
    assert_eq!(summary.bytes_put, rows[..rows.len() - 1].iter().map(|r| r.bytes_put).sum::<u64>());
    assert!(rows.iter().all(|r| r.algorithm == "ll"));
}

#[test]
fn ht_deduplicates_inter_node_traffic() {
    let out = ok(&["run", "--mode", "ht", "--ranks", "8", "--ranks-per-node", "4", "--experts", "32", "--topk", "4", "--tokens", "16"]);
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    let inter: u64 = rows.iter().filter(|r| r.op == "dispatch").map(|r| r.inter_node_msgs).sum();
    assert!(inter > 0 && inter < 8 * 16 * 4, "inter_node_msgs {inter}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("inter_node_msgs={inter} dedup_oracle={inter}")), "{stderr}");
}

#[test]
fn output_and_trace_files() {
    let dir = std::env::temp_dir().join(format!("epsim-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (csv, trace) = (dir.join("stats.csv"), dir.join("trace.csv"));
    let out = ok(&["run", "--dtype", "fp8", "--output", csv.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert!(out.stdout.is_empty());
    assert!(!read_csv(std::fs::File::open(&csv).unwrap()).unwrap().is_empty());
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 1);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = std::env::temp_dir().join(format!("epsim-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cfg.json");
    let cfg = ep_core::EpConfig { num_ranks: 2, ranks_per_node: 2, num_experts: 4, top_k: 2, hidden: 16, max_tokens_per_rank: 4, ..Default::default() };
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let rows = read_csv(ok(&["run", "--config", path.to_str().unwrap(), "--mode", "ht"]).stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 2 * 2 + 1);
    assert!(rows.iter().all(|r| r.algorithm == "ht"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn footprint_ratios() {
    let out = String::from_utf8(ok(&["footprint"]).stdout).unwrap();
    assert!(out.contains("formula_ratio   14.2222"), "{out}");
    let out = String::from_utf8(ok(&["footprint", "--experts", "8", "--ranks", "8", "--topk", "8", "--hidden", "64", "--tokens", "4", "--allocate"]).stdout).unwrap();
    assert!(out.contains("formula_ratio   1.0000"), "{out}");
    assert!(out.contains("allocated_ratio"), "{out}");
}

#[test]
fn verify_subset() {
    let out = ok(&["verify", "--mode", "ll", "--layout", "optimized", "--hidden", "8"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("cases="), "{text}");
    assert!(!text.contains("counterexample"));
}

#[test]
fn bad_arguments_exit_2() {
    for args in [
        &["run", "--topk", "99"][..],
        &["run", "--ranks", "3", "--ranks-per-node", "2"],
        &["run", "--mode", "ht", "--send-only"],
        &["run", "--dtype", "f64"],
        &["footprint", "--ranks", "0"],
        &["frobnicate"],
    ] {
        assert_eq!(epsim(args).status.code(), Some(2), "{args:?}");
    }
}
