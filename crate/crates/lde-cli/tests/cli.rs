//! End-to-end tests of the `lde` binary: every subcommand, the exit-code
//! contract, config layering, and byte-level determinism of the whole
//! pipeline. All runs use relative paths inside a per-test temp directory
//! so reruns are comparable byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lde_core::eval::{EvalItem, EvalReport};
use lde_core::verify::reference_evaluate;

fn lde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lde"))
        .current_dir(dir)
        .env_remove("LDE_LOG")
        .args(args)
        .output()
        .expect("spawn lde")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lde(dir, args);
    assert!(
        out.status.success(),
        "lde {args:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

fn fails(dir: &Path, args: &[&str], want_code: i32) -> String {
    let out = lde(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(want_code),
        "lde {args:?} should exit {want_code}\nstdout:\n{}\nstderr:\n{stderr}",
        String::from_utf8_lossy(&out.stdout),
    );
    stderr
}

/// Small two-domain 32px setup so train/embed runs finish in seconds.
const TINY_CONFIG: &str = "\
[gen]
num_domains = 2
ids_per_domain = 4
imgs_per_id = 6
size = 32

[[gen.styles]]
hue = 20.0
gamma = 1.0
noise = 0.01

[[gen.styles]]
hue = 200.0
gamma = 0.8
noise = 0.02

[model]
height = 32
width = 32
widths = [4, 4, 8, 8]
attention_ratio = 2

[train]
p = 2
k_inst = 2
iters = 6
checkpoint_every = 4
";

fn write_tiny_config(dir: &Path) {
    fs::write(dir.join("cfg.toml"), TINY_CONFIG).unwrap();
}

/// Sorted (relative path, bytes) pairs for a whole directory tree.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn assert_trees_identical(a: &Path, b: &Path) {
    let ta = tree_bytes(a);
    let tb = tree_bytes(b);
    let names_a: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    let names_b: Vec<&str> = tb.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names_a, names_b, "different file sets");
    for ((name, bytes_a), (_, bytes_b)) in ta.iter().zip(&tb) {
        assert_eq!(bytes_a, bytes_b, "file '{name}' differs between runs");
    }
}

fn manifest_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

// ---- gen ----

#[test]
fn gen_default_config_renders_1800_images_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["gen", "--seed", "7", "--out", "a"]);
    assert!(stdout.contains("generated 1800 images across 90 identities in 3 domains"), "{stdout}");
    assert_eq!(manifest_lines(&tmp.path().join("a/manifest.jsonl")), 1800);
    assert!(tmp.path().join("a/resolved_config.toml").is_file());

    ok(tmp.path(), &["gen", "--seed", "7", "--out", "b"]);
    assert_trees_identical(&tmp.path().join("a"), &tmp.path().join("b"));
}

#[test]
fn gen_rejects_a_single_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = fails(tmp.path(), &["gen", "--set", "gen.num_domains=1", "--out", "x"], 1);
    assert!(stderr.contains("num_domains") && stderr.contains("2"), "{stderr}");
    assert!(!tmp.path().join("x").exists(), "failed gen must not leave outputs");
}

#[test]
fn set_overrides_are_applied_and_reflected_in_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(
        tmp.path(),
        &[
            "gen",
            "--set",
            "gen.ids_per_domain=2",
            "--set",
            "gen.imgs_per_id=3",
            "--out",
            "small",
        ],
    );
    assert!(stdout.contains("generated 18 images"), "{stdout}");
    let snapshot = fs::read_to_string(tmp.path().join("small/resolved_config.toml")).unwrap();
    assert!(snapshot.contains("command = \"gen\""), "{snapshot}");
    assert!(snapshot.contains("ids_per_domain = 2"), "{snapshot}");
    assert!(snapshot.contains("imgs_per_id = 3"), "{snapshot}");

    let stderr = fails(tmp.path(), &["gen", "--set", "gen.bogus=1", "--out", "y"], 1);
    assert!(stderr.contains("unknown config key 'gen.bogus'"), "{stderr}");
    let stderr = fails(tmp.path(), &["gen", "--set", "gen.size=tiny", "--out", "y"], 1);
    assert!(stderr.contains("expects integer"), "{stderr}");
    let stderr = fails(tmp.path(), &["gen", "--config", "missing.toml", "--out", "y"], 1);
    assert!(stderr.contains("missing.toml"), "{stderr}");
}

#[test]
fn lde_log_env_var_controls_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let quiet = lde(
        tmp.path(),
        &["gen", "--set", "gen.ids_per_domain=2", "--set", "gen.imgs_per_id=3", "--out", "q"],
    );
    assert!(quiet.status.success());
    assert!(quiet.stderr.is_empty(), "default runs are quiet on stderr");

    let noisy = Command::new(env!("CARGO_BIN_EXE_lde"))
        .current_dir(tmp.path())
        .env("LDE_LOG", "info")
        .args(["gen", "--set", "gen.ids_per_domain=2", "--set", "gen.imgs_per_id=3", "--out", "v"])
        .output()
        .unwrap();
    assert!(noisy.status.success());
    let stderr = String::from_utf8_lossy(&noisy.stderr);
    assert!(stderr.contains("INFO") && stderr.contains("rendering"), "{stderr}");
}

// ---- split ----

#[test]
fn split_open_scene_reports_disjoint_scenes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny_config(tmp.path());
    ok(tmp.path(), &["gen", "--config", "cfg.toml", "--out", "data"]);

    let stdout = ok(
        tmp.path(),
        &[
            "split",
            "--config",
            "cfg.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--protocol",
            "open_scene",
            "--out",
            "s1",
        ],
    );
    assert!(stdout.contains("open_scene:"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s1/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["protocol"], "open_scene");
    let scenes = |side: &str| -> Vec<i64> {
        summary["scenes"][side].as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect()
    };
    let train = scenes("train");
    let test = scenes("test");
    assert!(!train.is_empty() && !test.is_empty());
    assert!(train.iter().all(|s| !test.contains(s)), "train {train:?} vs test {test:?}");

    ok(
        tmp.path(),
        &[
            "split",
            "--config",
            "cfg.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--protocol",
            "open_scene",
            "--out",
            "s2",
        ],
    );
    assert_trees_identical(&tmp.path().join("s1"), &tmp.path().join("s2"));
}

#[test]
fn split_day_night_on_a_day_only_manifest_fails_with_protocol_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for pid in 0..4 {
        for (cam, scene) in [(0, 0), (1, 0), (2, 1), (3, 1)] {
            lines.push_str(&format!(
                "{{\"path\":\"images/p{pid}_c{cam}.png\",\"pid\":{pid},\"cam\":{cam},\
                 \"scene\":{scene},\"ts\":0,\"tod\":\"day\"}}\n"
            ));
        }
    }
    fs::write(tmp.path().join("day_only.jsonl"), lines).unwrap();
    let stderr = fails(
        tmp.path(),
        &[
            "split",
            "--manifest",
            "day_only.jsonl",
            "--protocol",
            "day_night",
            "--out",
            "s",
        ],
        1,
    );
    assert!(stderr.contains("night"), "{stderr}");

    let stderr = fails(
        tmp.path(),
        &["split", "--manifest", "day_only.jsonl", "--protocol", "dusk", "--out", "s"],
        1,
    );
    assert!(stderr.contains("unknown protocol 'dusk'"), "{stderr}");
}

// ---- train ----

#[test]
fn train_lambda_zero_zeroes_the_trace_column_and_resume_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny_config(tmp.path());
    ok(tmp.path(), &["gen", "--config", "cfg.toml", "--out", "data"]);
    ok(
        tmp.path(),
        &[
            "split",
            "--config",
            "cfg.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--protocol",
            "close_scene",
            "--out",
            "split",
        ],
    );

    let stdout = ok(
        tmp.path(),
        &[
            "train", "--config", "cfg.toml", "--data", "data", "--split", "split", "--lambda",
            "0", "--out", "run",
        ],
    );
    assert!(stdout.contains("trained to iteration 6"), "{stdout}");

    let snapshot = fs::read_to_string(tmp.path().join("run/resolved_config.toml")).unwrap();
    assert!(snapshot.contains("lambda = 0.0"), "{snapshot}");
    // The classifier head is derived from the split: 4 of 8 identities train.
    assert!(snapshot.contains("classes = 4"), "{snapshot}");

    let log = fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "iteration,lr,ce,trace_term,triplet,total");
    assert_eq!(rows.len(), 7, "header + 6 iterations:\n{log}");
    for row in &rows[1..] {
        let trace: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(trace, 0.0, "trace_term must be exactly zero at lambda 0: {row}");
    }
    assert!(tmp.path().join("run/model.ckpt").is_file());
    assert!(tmp.path().join("run/checkpoint.ckpt").is_file(), "rolling checkpoint at iter 4");

    // Resume from the rolling iteration-4 checkpoint; iterations 5 and 6
    // must reproduce the uninterrupted run exactly.
    let stdout = ok(
        tmp.path(),
        &["train", "--data", "data", "--split", "split", "--resume", "run/checkpoint.ckpt", "--out", "resumed"],
    );
    assert!(stdout.contains("trained to iteration 6"), "{stdout}");
    let resumed = fs::read_to_string(tmp.path().join("resumed/train_log.csv")).unwrap();
    let resumed_rows: Vec<&str> = resumed.lines().collect();
    assert_eq!(resumed_rows.len(), 3, "header + iterations 5..6:\n{resumed}");
    assert_eq!(resumed_rows[1], rows[5], "iteration 5 diverged after resume");
    assert_eq!(resumed_rows[2], rows[6], "iteration 6 diverged after resume");
}

// ---- embed / eval ----

#[test]
fn embed_eval_roundtrip_with_missing_image_and_corrupt_checkpoint_errors() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny_config(tmp.path());
    ok(tmp.path(), &["gen", "--config", "cfg.toml", "--out", "data"]);
    ok(
        tmp.path(),
        &[
            "split",
            "--config",
            "cfg.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--protocol",
            "close_scene",
            "--out",
            "split",
        ],
    );
    ok(
        tmp.path(),
        &[
            "train", "--config", "cfg.toml", "--set", "train.iters=2", "--set",
            "train.checkpoint_every=0", "--data", "data", "--split", "split", "--out", "run",
        ],
    );

    // N records in, N rows out; reruns byte-identical.
    let stdout = ok(
        tmp.path(),
        &[
            "embed", "--checkpoint", "run/model.ckpt", "--manifest", "data/manifest.jsonl",
            "--data", "data", "--out", "emb1",
        ],
    );
    assert!(stdout.contains("embedded 48 records"), "{stdout}");
    assert_eq!(manifest_lines(&tmp.path().join("emb1/embeddings.jsonl")), 48);
    ok(
        tmp.path(),
        &[
            "embed", "--checkpoint", "run/model.ckpt", "--manifest", "data/manifest.jsonl",
            "--data", "data", "--out", "emb2",
        ],
    );
    assert_eq!(
        fs::read(tmp.path().join("emb1/embeddings.jsonl")).unwrap(),
        fs::read(tmp.path().join("emb2/embeddings.jsonl")).unwrap(),
        "embedding export must be byte-stable"
    );

    let stdout = ok(
        tmp.path(),
        &[
            "eval", "--embeddings", "emb1/embeddings.jsonl", "--query", "split/query.jsonl",
            "--gallery", "split/gallery.jsonl", "--out", "report",
        ],
    );
    assert!(stdout.contains("mAP"), "{stdout}");
    let report: EvalReport = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("report/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report.map >= 0.0 && report.map <= 1.0);
    assert!(report.num_queries > 0);
    let csv = fs::read_to_string(tmp.path().join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("mAP,r1,r5,r10,num_queries,num_dropped\n"), "{csv}");

    // Missing image files are listed by path.
    fs::write(
        tmp.path().join("ghost.jsonl"),
        "{\"path\":\"images/ghost.png\",\"pid\":0,\"cam\":0,\"scene\":0,\"ts\":0,\"tod\":\"day\"}\n",
    )
    .unwrap();
    let stderr = fails(
        tmp.path(),
        &[
            "embed", "--checkpoint", "run/model.ckpt", "--manifest", "ghost.jsonl", "--data",
            "data", "--out", "embx",
        ],
        1,
    );
    assert!(stderr.contains("missing") && stderr.contains("images/ghost.png"), "{stderr}");

    // A truncated checkpoint fails naming the unreadable tensor.
    let mut bytes = fs::read(tmp.path().join("run/model.ckpt")).unwrap();
    bytes.truncate(bytes.len() - 16);
    fs::write(tmp.path().join("bad.ckpt"), bytes).unwrap();
    let stderr = fails(
        tmp.path(),
        &[
            "embed", "--checkpoint", "bad.ckpt", "--manifest", "data/manifest.jsonl", "--data",
            "data", "--out", "embx",
        ],
        2,
    );
    assert!(stderr.contains("tensor '"), "{stderr}");
}

#[test]
fn eval_fixtures_match_the_exhaustive_oracle_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_line = |path: &str, pid: usize, cam: usize| {
        format!("{{\"path\":\"{path}\",\"pid\":{pid},\"cam\":{cam},\"scene\":0,\"ts\":0,\"tod\":\"day\"}}\n")
    };
    let emb_line = |path: &str, emb: &[f64]| {
        format!("{{\"path\":\"{path}\",\"embedding\":{}}}\n", serde_json::to_string(emb).unwrap())
    };
    let e1 = [1.0, 0.1, 0.0];
    let e2 = [0.0, 1.0, 0.1];
    let e3 = [0.1, 0.0, 1.0];

    // Perfect retrieval: each query's cross-camera twin sits at rank 1.
    fs::write(
        tmp.path().join("query.jsonl"),
        manifest_line("q1", 1, 0) + &manifest_line("q2", 2, 0),
    )
    .unwrap();
    fs::write(
        tmp.path().join("gallery.jsonl"),
        manifest_line("g1", 1, 1) + &manifest_line("g2", 2, 1),
    )
    .unwrap();
    fs::write(
        tmp.path().join("emb.jsonl"),
        emb_line("q1", &e1) + &emb_line("q2", &e2) + &emb_line("g1", &e1) + &emb_line("g2", &e2),
    )
    .unwrap();
    let stdout = ok(
        tmp.path(),
        &[
            "eval", "--embeddings", "emb.jsonl", "--query", "query.jsonl", "--gallery",
            "gallery.jsonl", "--out", "perfect",
        ],
    );
    assert!(stdout.contains("mAP 1.0000"), "{stdout}");
    let report: EvalReport = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("perfect/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.cmc.r1, 1.0);
    assert_eq!(report.num_dropped, 0);

    // A query identity absent from the gallery is dropped, not scored; the
    // whole report must equal the brute-force reference exactly.
    fs::write(
        tmp.path().join("query3.jsonl"),
        manifest_line("q1", 1, 0) + &manifest_line("q2", 2, 0) + &manifest_line("q3", 3, 0),
    )
    .unwrap();
    fs::write(
        tmp.path().join("emb3.jsonl"),
        emb_line("q1", &e1)
            + &emb_line("q2", &e2)
            + &emb_line("q3", &e3)
            + &emb_line("g1", &e1)
            + &emb_line("g2", &e2),
    )
    .unwrap();
    ok(
        tmp.path(),
        &[
            "eval", "--embeddings", "emb3.jsonl", "--query", "query3.jsonl", "--gallery",
            "gallery.jsonl", "--out", "dropped",
        ],
    );
    let report: EvalReport = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("dropped/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.num_dropped, 1);
    assert_eq!(report.num_queries, 2);

    let item = |pid: usize, cam: usize, emb: &[f64]| EvalItem { pid, cam, emb: emb.to_vec() };
    let queries = vec![item(1, 0, &e1), item(2, 0, &e2), item(3, 0, &e3)];
    let gallery = vec![item(1, 1, &e1), item(2, 1, &e2)];
    let oracle = reference_evaluate(&queries, &gallery).expect("fixture is evaluable");
    assert_eq!(report, oracle, "CLI report must equal the exhaustive reference");
}

// ---- verify ----

#[test]
fn verify_quick_passes_and_injected_fault_fails_the_mc_check() {
    let tmp = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let stdout = ok(tmp.path(), &["verify", "--level", "quick", "--out", "v"]);
    let elapsed = t0.elapsed().as_secs_f64();
    for check in [
        "lambda-zero-equivalence",
        "mc-analytic-consistency",
        "first-order-cancellation",
        "hessian-trace-vs-fd",
        "model-grad-vs-fd",
        "decoupling-identities",
        "covariance-chunking",
        "split-invariants",
        "eval-vs-bruteforce",
    ] {
        assert!(stdout.contains(check), "missing check '{check}' in:\n{stdout}");
    }
    assert!(stdout.contains("all 9 checks passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(tmp.path().join("v/verify_report.txt").is_file());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4) as f64;
    assert!(
        elapsed * cores / 4.0 < 60.0,
        "quick level took {elapsed:.1}s ({:.1}s at 4 cores)",
        elapsed * cores / 4.0
    );

    let out = lde(
        tmp.path(),
        &["verify", "--level", "quick", "--inject-fault", "trace-sign", "--out", "vf"],
    );
    assert_eq!(out.status.code(), Some(2), "fault-injected verify must fail");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let fail_row = stdout
        .lines()
        .find(|l| l.starts_with("mc-analytic-consistency"))
        .expect("table has the mc row");
    assert!(fail_row.contains("FAIL"), "{stdout}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("1 verification check(s) failed"), "{stderr}");

    let stderr = fails(tmp.path(), &["verify", "--level", "medium", "--out", "v2"], 1);
    assert!(stderr.contains("unknown verify level 'medium'"), "{stderr}");
    let stderr =
        fails(tmp.path(), &["verify", "--inject-fault", "off-by-one", "--out", "v3"], 1);
    assert!(stderr.contains("unknown fault 'off-by-one'"), "{stderr}");
}

// ---- whole pipeline determinism ----

#[test]
fn full_pipeline_reruns_are_byte_identical() {
    let run = |root: &Path| -> String {
        write_tiny_config(root);
        let mut stdout = String::new();
        stdout += &ok(root, &["gen", "--config", "cfg.toml", "--out", "dataset"]);
        stdout += &ok(
            root,
            &[
                "split",
                "--config",
                "cfg.toml",
                "--manifest",
                "dataset/manifest.jsonl",
                "--protocol",
                "close_scene",
                "--out",
                "split",
            ],
        );
        stdout += &ok(
            root,
            &[
                "train", "--config", "cfg.toml", "--set", "train.iters=4", "--data", "dataset",
                "--split", "split", "--out", "run",
            ],
        );
        stdout += &ok(
            root,
            &[
                "embed", "--checkpoint", "run/model.ckpt", "--manifest",
                "dataset/manifest.jsonl", "--data", "dataset", "--out", "emb",
            ],
        );
        stdout += &ok(
            root,
            &[
                "eval", "--embeddings", "emb/embeddings.jsonl", "--query", "split/query.jsonl",
                "--gallery", "split/gallery.jsonl", "--out", "report",
            ],
        );
        stdout
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout_a = run(a.path());
    let stdout_b = run(b.path());
    assert_eq!(stdout_a, stdout_b, "pipeline stdout must be reproducible");
    assert!(a.path().join("report/report.json").is_file());
    assert_trees_identical(a.path(), b.path());
}

// ---- argument plumbing ----

#[test]
fn help_version_and_bad_usage_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lde(tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "split", "train", "embed", "eval", "verify"] {
        assert!(help.contains(sub), "{help}");
    }

    let out = lde(tmp.path(), &["--version"]);
    assert_eq!(out.status.code(), Some(0));

    let out = lde(tmp.path(), &["gen", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1), "usage errors are validation errors");

    let out = lde(tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = lde(tmp.path(), &["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
}
