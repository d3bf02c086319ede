use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SYNTH: &str = "vocab=256,d=32,layers=2,heads=4,max-seq=512,seed=3";

fn frspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frspec"))
        .args(args)
        .output()
        .expect("spawn frspec")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn freq_ranks_by_count_then_id() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("s.txt");
    let out = dir.path().join("r.txt");
    std::fs::write(&input, "0 0 3 1").unwrap();
    let o = frspec(&["freq", "--input", p(&input), "--text", "--vocab-size", "4", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "0\n1\n3\n2\n");
    let text = stdout(&o);
    assert!(text.contains("coverage 25% 1 0.500000"), "{text}");
    assert!(text.contains("coverage 50% 2 0.750000"), "{text}");
    assert!(text.contains("coverage 75% 3 1.000000"), "{text}");
}

#[test]
fn freq_reads_binary_streams_and_checks_headers() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("z.frtk");
    let out = dir.path().join("r.txt");
    let o = frspec(&["zipf", "--vocab-size", "64", "--len", "5000", "--seed", "2", "--out", p(&stream)]);
    assert!(o.status.success(), "{o:?}");
    let o = frspec(&["freq", "--input", p(&stream), "--vocab-size", "64", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let ranked = std::fs::read_to_string(&out).unwrap();
    assert_eq!(ranked.lines().count(), 64);
    assert_eq!(ranked.lines().next(), Some("0"));

    let o = frspec(&["freq", "--input", p(&stream), "--vocab-size", "65", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    // binary file read as text, and text read as binary
    let o = frspec(&["freq", "--input", p(&out), "--vocab-size", "64", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("--input") && stderr.lines().count() == 1, "{stderr}");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let o = frspec(&["gen", "--synth", SYNTH, "--prompt-ids", "1,2", "--mode", "spec", "--fr-size", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frspec(&["gen", "--synth", SYNTH, "--prompt-ids", "1,2", "--fr-size", "8"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frspec(&["gen", "--synth", SYNTH, "--prompt-ids", "1", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frspec(&["gen", "--synth", "vocab=256,depth=3", "--prompt-ids", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frspec(&["gen", "--synth", SYNTH, "--prompt-ids", "999"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frspec(&["gen", "--model", "/no/such/checkpoint", "--prompt-ids", "1"]);
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("/no/such/checkpoint"), "{stderr}");
}

fn gen_tokens(args: &[&str]) -> Vec<u64> {
    let o = frspec(args);
    assert!(o.status.success(), "{o:?}");
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    v["tokens"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect()
}

#[test]
fn greedy_spec_matches_vanilla_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.frsm");
    let ranked = dir.path().join("r.txt");
    let ids: Vec<String> = (0..256).rev().map(|i| i.to_string()).collect();
    std::fs::write(&ranked, ids.join("\n") + "\n").unwrap();
    assert!(frspec(&["init", "--synth", SYNTH, "--out", p(&ckpt)]).status.success());

    let base = ["--prompt-ids", "5 6 7", "--max-new", "40", "--beam-width", "4", "--depth", "4", "--draft-tokens", "16"];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = vec!["gen"];
        v.extend_from_slice(extra);
        v.extend_from_slice(&base);
        gen_tokens(&v)
    };
    let vanilla = with(&["--synth", SYNTH, "--mode", "vanilla"]);
    assert_eq!(vanilla.len(), 40);
    assert_eq!(with(&["--synth", SYNTH, "--mode", "spec"]), vanilla);
    assert_eq!(with(&["--model", p(&ckpt), "--mode", "spec"]), vanilla);
    assert_eq!(
        with(&["--synth", SYNTH, "--fr-vocab", p(&ranked), "--fr-size", "32"]),
        vanilla
    );
}

fn strip_wall_clock(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for key in ["tokens_per_second", "tokens_per_second_runs", "wall_seconds", "per_component_times", "median_seconds", "total_seconds", "shares", "lm_head_softmax_share", "other_warning"] {
                m.remove(key);
            }
            m.values_mut().for_each(strip_wall_clock);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

fn run_stripped(args: &[&str]) -> Vec<Value> {
    let o = frspec(args);
    assert!(o.status.success(), "{o:?}");
    stdout(&o)
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            strip_wall_clock(&mut v);
            v
        })
        .collect()
}

#[test]
fn bench_is_reproducible_apart_from_clocks() {
    let args = [
        "bench", "--synth", SYNTH, "--grid", "fr-sizes=full,128,64", "--num-prompts", "4",
        "--prompt-len", "6", "--max-new", "24", "--corpus-prompts", "4", "--corpus-tokens", "32",
        "--beam-width", "4", "--depth", "4", "--draft-tokens", "16", "--repeat", "2",
        "--temperature", "0.7", "--seed", "9",
    ];
    let a = run_stripped(&args);
    let b = run_stripped(&args);
    assert_eq!(a, b);
    let rows = a[0]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["fr_size"], 256);
    assert_eq!(rows[0]["ratio_to_full_vocab"], 1.0);
}

#[test]
fn bench_reads_prompt_files_and_reports_lossless_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts.txt");
    std::fs::write(&prompts, "# two prompts\n1 2 3\n\n40,41\n").unwrap();
    let o = frspec(&[
        "bench", "--synth", SYNTH, "--grid", "fr-sizes=full,32", "--prompts", p(&prompts),
        "--max-new", "16", "--corpus-prompts", "2", "--corpus-tokens", "16",
        "--beam-width", "3", "--depth", "3", "--draft-tokens", "9",
    ]);
    assert!(o.status.success(), "{o:?}");
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["config"]["prompts"], 2);
    for row in v["rows"].as_array().unwrap() {
        assert_eq!(row["matches_vanilla"], true);
        assert!(row["tokens_per_second"].as_f64().unwrap() > 0.0);
        for key in ["embedding", "transformer_layer", "lm_head", "softmax", "tree_ops", "verification", "other"] {
            assert!(row["per_component_times"][key].is_number(), "{key}");
        }
    }

    std::fs::write(&prompts, "1 2 x\n").unwrap();
    let o = frspec(&["bench", "--synth", SYNTH, "--prompts", p(&prompts)]);
    assert_eq!(o.status.code(), Some(3));
    let o = frspec(&["bench", "--synth", SYNTH, "--grid", "fr-sizes=0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn profile_emits_normalized_shares() {
    let o = frspec(&["profile", "--vocab-sizes", "512,2048", "--d", "32", "--repeat", "10", "--depth", "3", "--beam-width", "4", "--draft-tokens", "12"]);
    assert!(o.status.success(), "{o:?}");
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for v in &lines {
        let sum: f64 = v["shares"].as_object().unwrap().values().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(v["repetitions"], 10);
    }
    let o = frspec(&["profile", "--vocab-sizes", "512", "--d", "32", "--repeat", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_and_freq_are_byte_identical_across_runs() {
    let args = ["gen", "--synth", SYNTH, "--prompt-ids", "9", "--temperature", "1", "--seed", "4", "--max-new", "20"];
    assert_eq!(run_stripped(&args), run_stripped(&args));
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("z.txt");
    assert!(frspec(&["zipf", "--vocab-size", "32", "--len", "300", "--text", "--out", p(&stream)]).status.success());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = frspec(&["freq", "--input", p(&stream), "--text", "--vocab-size", "32", "--out", p(&out)]);
        (o.stdout, std::fs::read(out).unwrap())
    };
    assert_eq!(run("a.txt"), run("b.txt"));
}
