use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dmsconv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsconv"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn assert_code(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

const SPEC: &str = "\
num_languages = 3
utterances_per_language = 16
holdout_per_language = 6
frames_min = 60
frames_max = 90
channels = 8
noise_level = 0.5
seed = 3
";

const MODEL: &str = "\
[model]
variant = \"global-local-ms\"
input_dim = 8
num_classes = 3
tdnn_channels = 32
tdnn_context = 2
bottleneck = 32
growth = 16
block_sizes = [2, 2]
wide_context_layers = 2
wide_context = 2
narrow_context = 1
dynamic_layers = 2
reduction = 2
embedding_dim = 64
mean_norm_window_frames = 50
";

fn run_config(max_steps: u64, extra_train: &str) -> String {
    format!(
        "{MODEL}
[train]
max_steps = {max_steps}
languages_per_batch = 3
segment_len_min_frames = 40
segment_len_max_frames = 60
log_every_steps = 5
checkpoint_every_steps = 10
{extra_train}

[paths]
train_data = \"corpus/train.dmsf\"
checkpoint = \"run/model.dmsc\"
"
    )
}

/// A temp dir holding `spec.toml` and a generated corpus under `corpus/`.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    let o = dmsconv(
        dir.path(),
        &["generate", "--spec", "spec.toml", "--out", "corpus"],
    );
    assert_code(&o, 0);
    dir
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn generate_writes_corpus_and_prints_manifest() {
    let dir = workspace();
    for f in ["train.dmsf", "test.dmsf", "manifest.toml"] {
        assert!(dir.path().join("corpus").join(f).exists(), "{f}");
    }
    let o = dmsconv(
        dir.path(),
        &["generate", "--spec", "spec.toml", "--out", "again"],
    );
    assert_code(&o, 0);
    assert!(stdout(&o).contains("sha256"));
    assert!(stdout(&o).contains("30 utterances"));
}

#[test]
fn generate_is_reproducible_and_seed_sensitive() {
    let dir = workspace();
    let run = |out: &str, seed: Option<&str>| {
        let mut args = vec!["generate", "--spec", "spec.toml", "--out", out];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert_code(&dmsconv(dir.path(), &args), 0);
        std::fs::read(dir.path().join(out).join("train.dmsf")).unwrap()
    };
    let a = run("a", None);
    assert_eq!(a, run("b", None));
    assert_eq!(
        a,
        std::fs::read(dir.path().join("corpus/train.dmsf")).unwrap()
    );
    assert_ne!(a, run("c", Some("4")));
}

#[test]
fn generate_missing_spec_exits_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmsconv(
        dir.path(),
        &["generate", "--spec", "absent.toml", "--out", "x"],
    );
    assert_code(&o, 2);
    assert!(stderr(&o).contains("absent.toml"), "{}", stderr(&o));
}

#[test]
fn generate_bad_spec_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.toml", "num_languages = 1\n");
    assert_code(
        &dmsconv(
            dir.path(),
            &["generate", "--spec", "spec.toml", "--out", "x"],
        ),
        2,
    );
}

#[test]
fn train_writes_checkpoint_loss_csv_and_summary() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(20, ""));
    let o = dmsconv(dir.path(), &["train", "--config", "run.toml"]);
    assert_code(&o, 0);
    let summary = stdout(&o);
    assert!(summary.contains("step 20"), "{summary}");
    assert!(summary.contains("last loss"), "{summary}");
    assert!(summary.contains("lr 1.000e-2"), "{summary}");
    assert!(dir.path().join("run/model.dmsc").exists());
    let csv = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    let steps: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(csv.lines().next(), Some("step,lr,loss"));
    assert_eq!(steps, vec![0, 5, 10, 15, 19]);
}

#[test]
fn train_variant_flag_selects_each_variant() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(2, ""));
    for v in ["dtdnn-baseline", "dkconv", "local-ms", "global-local-ms"] {
        assert_code(
            &dmsconv(
                dir.path(),
                &["train", "--config", "run.toml", "--variant", v],
            ),
            0,
        );
        let o = dmsconv(dir.path(), &["inspect", "run/model.dmsc"]);
        assert_code(&o, 0);
        assert!(
            stdout(&o).starts_with(&format!("checkpoint, variant {v}\n")),
            "{}",
            stdout(&o)
        );
    }
    let o = dmsconv(
        dir.path(),
        &["train", "--config", "run.toml", "--variant", "resnet"],
    );
    assert_code(&o, 2);
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let straight = workspace();
    write(straight.path(), "run.toml", &run_config(30, ""));
    assert_code(
        &dmsconv(straight.path(), &["train", "--config", "run.toml"]),
        0,
    );

    let split = workspace();
    write(split.path(), "first.toml", &run_config(20, ""));
    write(split.path(), "run.toml", &run_config(30, ""));
    assert_code(
        &dmsconv(split.path(), &["train", "--config", "first.toml"]),
        0,
    );
    let o = dmsconv(split.path(), &["train", "--config", "run.toml", "--resume"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("step 30"), "{}", stdout(&o));

    for f in ["run/model.dmsc", "run/loss.csv"] {
        let a = std::fs::read(straight.path().join(f)).unwrap();
        let b = std::fs::read(split.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn resume_with_a_different_model_exits_two() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(10, ""));
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    let o = dmsconv(
        dir.path(),
        &[
            "train",
            "--config",
            "run.toml",
            "--variant",
            "dkconv",
            "--resume",
        ],
    );
    assert_code(&o, 2);
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(10, ""));
    let bytes = |seed: &str| {
        let o = dmsconv(
            dir.path(),
            &["train", "--config", "run.toml", "--seed", seed],
        );
        assert_code(&o, 0);
        (
            std::fs::read(dir.path().join("run/model.dmsc")).unwrap(),
            stdout(&o),
        )
    };
    let a = bytes("5");
    assert_eq!(a, bytes("5"));
    assert_ne!(a.0, bytes("6").0);
}

#[test]
fn train_config_errors_exit_two() {
    let dir = workspace();
    write(
        dir.path(),
        "typo.toml",
        &run_config(5, "learning_rate = 0.1"),
    );
    let o = dmsconv(dir.path(), &["train", "--config", "typo.toml"]);
    assert_code(&o, 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    write(
        dir.path(),
        "wide.toml",
        &run_config(5, "").replace("input_dim = 8", "input_dim = 9"),
    );
    assert_code(&dmsconv(dir.path(), &["train", "--config", "wide.toml"]), 2);

    let o = dmsconv(dir.path(), &["train", "--config", "missing.toml"]);
    assert_code(&o, 2);
}

#[test]
fn divergence_exits_three() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(50, "lr = 1e300"));
    let o = dmsconv(dir.path(), &["train", "--config", "run.toml"]);
    assert_code(&o, 3);
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn report_value(report: &str, key: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with(key)).unwrap();
    line.split_whitespace()
        .last()
        .unwrap()
        .trim_end_matches('%')
        .parse()
        .unwrap()
}

#[test]
fn trained_model_separates_the_languages() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(120, ""));
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    let o = dmsconv(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            "run/model.dmsc",
            "--data",
            "corpus/test.dmsf",
            "--scores-out",
            "run/scores.csv",
            "--report-out",
            "run/report.toml",
        ],
    );
    assert_code(&o, 0);
    let report = stdout(&o);
    assert!(report_value(&report, "Cavg") < 0.05, "{report}");
    let pair_rows = report.lines().filter(|l| l.starts_with("lang")).count();
    assert_eq!(pair_rows, 3 * 2);
    assert!(std::fs::read_to_string(dir.path().join("run/report.toml"))
        .unwrap()
        .contains("cavg"));

    let o = dmsconv(dir.path(), &["evaluate", "--scores", "run/scores.csv"]);
    assert_code(&o, 0);
    assert_eq!(stdout(&o), report);

    let o = dmsconv(
        dir.path(),
        &[
            "evaluate",
            "--scores",
            "run/scores.csv",
            "--subset",
            "lang0,lang2",
        ],
    );
    assert_code(&o, 0);
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("lang")).count(),
        2
    );
    let o = dmsconv(
        dir.path(),
        &[
            "evaluate",
            "--scores",
            "run/scores.csv",
            "--subset",
            "lang7",
        ],
    );
    assert_code(&o, 2);
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "spec.toml",
        &SPEC.replace("holdout_per_language = 6", "holdout_per_language = 14"),
    );
    assert_code(
        &dmsconv(
            dir.path(),
            &["generate", "--spec", "spec.toml", "--out", "corpus"],
        ),
        0,
    );
    // One step at a vanishing learning rate leaves the initial weights.
    write(
        dir.path(),
        "run.toml",
        &run_config(1, "lr = 1e-12\nlr_floor = 1e-13"),
    );
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    let o = dmsconv(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            "run/model.dmsc",
            "--data",
            "corpus/test.dmsf",
        ],
    );
    assert_code(&o, 0);
    let eer = report_value(&stdout(&o), "EER");
    assert!(eer > 25.0, "{}", stdout(&o));
}

#[test]
fn score_writes_rows_that_sum_to_one() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(5, ""));
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    let o = dmsconv(
        dir.path(),
        &[
            "score",
            "--checkpoint",
            "run/model.dmsc",
            "--data",
            "corpus/test.dmsf",
            "--out",
            "s.csv",
        ],
    );
    assert_code(&o, 0);
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("truth,lang0,lang1,lang2"));
    assert_eq!(csv.lines().count(), 1 + 18);
    for line in csv.lines().skip(1) {
        let total: f64 = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn evaluate_dimension_mismatch_exits_two() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(2, ""));
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    write(
        dir.path(),
        "narrow.toml",
        &SPEC.replace("channels = 8", "channels = 6"),
    );
    assert_code(
        &dmsconv(
            dir.path(),
            &["generate", "--spec", "narrow.toml", "--out", "narrow"],
        ),
        0,
    );
    let o = dmsconv(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            "run/model.dmsc",
            "--data",
            "narrow/test.dmsf",
        ],
    );
    assert_code(&o, 2);
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn evaluate_needs_a_source() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&dmsconv(dir.path(), &["evaluate"]), 2);
    assert_code(
        &dmsconv(dir.path(), &["evaluate", "--checkpoint", "x.dmsc"]),
        2,
    );
}

#[test]
fn count_params_lists_the_four_variants_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmsconv(dir.path(), &["count-params", "--csv"]);
    assert_code(&o, 0);
    let rows: Vec<(String, u64)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let (v, n) = l.split_once(',').unwrap();
            (v.to_string(), n.parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(
        names,
        ["dtdnn-baseline", "dkconv", "local-ms", "global-local-ms"]
    );
    let n: Vec<u64> = rows.iter().map(|r| r.1).collect();
    assert!(n[2] < n[3] && n[3] < n[0] && n[0] < n[1], "{n:?}");
}

#[test]
fn count_params_csv_rows_are_layers_summing_to_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dmsconv(
        dir.path(),
        &["count-params", "--variant", "local-ms", "--csv"],
    );
    let table = dmsconv(dir.path(), &["count-params", "--variant", "local-ms"]);
    assert_code(&csv, 0);
    assert_code(&table, 0);
    let csv = stdout(&csv);
    let table = stdout(&table);
    let layers: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    // Table: header, one line per layer, total.
    assert_eq!(layers.len(), table.lines().count() - 2);
    let total: u64 = table
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(layers.iter().sum::<u64>(), total);

    write(dir.path(), "run.toml", &run_config(1, ""));
    let o = dmsconv(dir.path(), &["count-params", "--config", "run.toml"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("total (global-local-ms)"));
    write(dir.path(), "bad.toml", "[model]\nscales = 3\n");
    assert_code(
        &dmsconv(dir.path(), &["count-params", "--config", "bad.toml"]),
        2,
    );
}

fn gradcheck_groups(out: &str, variant: &str) -> Vec<String> {
    out.lines()
        .filter(|l| l.starts_with(variant))
        .map(|l| l.split_whitespace().nth(2).unwrap().to_string())
        .collect()
}

#[test]
fn gradcheck_passes_and_lists_each_group_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmsconv(dir.path(), &["gradcheck"]);
    assert_code(&o, 0);
    let out = stdout(&o);
    assert!(!out.contains("FAIL"));
    for v in ["dtdnn-baseline", "dkconv", "local-ms", "global-local-ms"] {
        let mut groups = gradcheck_groups(&out, v);
        assert!(groups.len() > 10, "{v}");
        assert_eq!(groups.first().map(String::as_str), Some("tdnn.conv.weight"));
        assert_eq!(groups.last().map(String::as_str), Some("head.weight"));
        let n = groups.len();
        groups.sort();
        groups.dedup();
        assert_eq!(groups.len(), n, "{v}: duplicate group");
    }
}

#[test]
fn gradcheck_names_a_corrupted_group() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmsconv(
        dir.path(),
        &[
            "gradcheck",
            "--variant",
            "local-ms",
            "--inject-fault",
            "tdnn.conv.weight",
        ],
    );
    assert_code(&o, 3);
    let out = stdout(&o);
    let failed: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("tdnn.conv.weight"));
    let o = dmsconv(
        dir.path(),
        &[
            "gradcheck",
            "--variant",
            "local-ms",
            "--inject-fault",
            "nope",
        ],
    );
    assert_code(&o, 2);
}

#[test]
fn inspect_describes_files_and_rejects_others() {
    let dir = workspace();
    let o = dmsconv(dir.path(), &["inspect", "corpus/test.dmsf"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("18 utterances"));
    assert!(stdout(&o).contains("per label   [6, 6, 6]"));
    write(dir.path(), "junk.bin", "not a file format");
    assert_code(&dmsconv(dir.path(), &["inspect", "junk.bin"]), 2);
}

#[test]
fn threads_flag_does_not_change_scores() {
    let dir = workspace();
    write(dir.path(), "run.toml", &run_config(5, ""));
    assert_code(&dmsconv(dir.path(), &["train", "--config", "run.toml"]), 0);
    let scores = |threads: &str, out: &str| {
        let o = dmsconv(
            dir.path(),
            &[
                "--threads",
                threads,
                "score",
                "--checkpoint",
                "run/model.dmsc",
                "--data",
                "corpus/test.dmsf",
                "--out",
                out,
            ],
        );
        assert_code(&o, 0);
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(scores("1", "a.csv"), scores("3", "b.csv"));
    assert_code(&dmsconv(dir.path(), &["--threads", "0", "count-params"]), 2);
}
