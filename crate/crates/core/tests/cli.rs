use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use binomark::binoculars::{binoculars_score, ScoreConfig};
use binomark::data::{synthetic, TokenSeq};
use binomark::evaluation::{detection_report, read_scatter, DetectionReport};
use binomark::model::load_checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_binomark"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binomark")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn config_json(corpus: &Path) -> String {
    serde_json::json!({
        "seed": 3,
        "model": {"context_len": 32, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32},
        "performer": {"rank": 2, "alpha": 4.0},
        "observer": {"rank": 2, "alpha": 8.0},
        "pretrain": {"steps": 20, "batch_size": 4, "warmup_steps": 2},
        "training": {"steps": 4, "batch_size": 2, "gen_len": 8, "gen_prompt_max": 8},
        "sampler": {"max_new_tokens": 8},
        "protocol": {"prompt_len": 8},
        "gradcheck": {"trials": 3},
        "corpus": corpus,
    })
    .to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    base: PathBuf,
    trained: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus.txt");
        fs::write(&corpus, synthetic::generate(1, 20_000)).unwrap();
        let config = root.join("config.json");
        fs::write(&config, config_json(&corpus)).unwrap();
        let pre = root.join("pre");
        let o = run(&[
            "pretrain",
            "--config",
            config.to_str().unwrap(),
            "--out",
            pre.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let base = pre.join("base.bin");
        let tr = root.join("train");
        let o = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--base",
            base.to_str().unwrap(),
            "--out",
            tr.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture {
            trained: tr.join("final.bin"),
            _dir: dir,
            root,
            config,
            base,
        }
    })
}

fn out_dir(name: &str) -> PathBuf {
    fixture().root.join(name)
}

fn cfg() -> &'static str {
    fixture().config.to_str().unwrap()
}

#[test]
fn pretrain_outputs_and_determinism() {
    let f = fixture();
    let pre = f.base.parent().unwrap();
    let losses = fs::read_to_string(pre.join("pretrain_loss.csv")).unwrap();
    let rows: Vec<f64> = losses
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.last().unwrap() < rows.first().unwrap());
    assert!(pre.join("resolved_config.json").exists());
    let again = out_dir("pre_again");
    let o = run(&[
        "pretrain",
        "--config",
        cfg(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for name in ["pretrain_loss.csv", "base.bin"] {
        assert_eq!(
            fs::read(pre.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
    let resolved = |dir: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("resolved_config.json")).unwrap())
                .unwrap();
        v.as_object_mut().unwrap().remove("out_dir");
        v
    };
    assert_eq!(resolved(pre), resolved(&again));
}

#[test]
fn train_outputs_and_determinism() {
    let f = fixture();
    let tr = f.trained.parent().unwrap();
    let metrics = fs::read_to_string(tr.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("step,task_loss,b_real,b_gen,barrier,total,skipped")
    );
    assert_eq!(metrics.lines().count(), 5);
    let again = out_dir("train_again");
    let o = run(&[
        "train",
        "--config",
        cfg(),
        "--base",
        f.base.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(tr.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(&f.trained).unwrap(),
        fs::read(again.join("final.bin")).unwrap()
    );
}

#[test]
fn train_without_base_fails() {
    let o = run(&[
        "train",
        "--config",
        cfg(),
        "--out",
        out_dir("nobase").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let missing = out_dir("does_not_exist.bin");
    let o = run(&[
        "train",
        "--config",
        cfg(),
        "--base",
        missing.to_str().unwrap(),
        "--out",
        out_dir("nobase2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    let bad = out_dir("bad.json");
    fs::write(&bad, r#"{"training": {"lamda": 1}}"#).unwrap();
    assert_eq!(
        code(&run(&["gradcheck", "--config", bad.to_str().unwrap()])),
        1
    );
    let pairing = out_dir("pairing.json");
    fs::write(&pairing, r#"{"training": {"barrier": "none"}}"#).unwrap();
    assert_eq!(
        code(&run(&["gradcheck", "--config", pairing.to_str().unwrap()])),
        1
    );
    assert_eq!(code(&run(&["--help"])), 0);
}

fn score_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn score_matches_library() {
    let f = fixture();
    let input = out_dir("score_input.txt");
    fs::write(
        &input,
        "the river was calm that day\nthe river was calm that day\nzq\n",
    )
    .unwrap();
    let out = out_dir("score");
    let o = run(&[
        "score",
        "--config",
        cfg(),
        "--checkpoint",
        f.trained.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = score_rows(&out.join("scores.csv"));
    assert_eq!(
        rows[0],
        ["id", "log_ppl", "log_xppl", "score", "len", "error"]
    );
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1][1..], rows[2][1..]);
    let model = load_checkpoint(&f.trained).unwrap();
    let s = TokenSeq::real(
        b"the river was calm that day"
            .iter()
            .map(|&b| b as u32)
            .collect(),
    )
    .unwrap();
    let b = binoculars_score(&model, &s, &ScoreConfig::default()).unwrap();
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), b.score);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), b.log_ppl);
    assert_eq!(rows[1][4], "27");
}

#[test]
fn score_empty_input_is_header_only() {
    let f = fixture();
    let input = out_dir("empty.txt");
    fs::write(&input, "").unwrap();
    let out = out_dir("score_empty");
    let o = run(&[
        "score",
        "--config",
        cfg(),
        "--checkpoint",
        f.trained.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(out.join("scores.csv")).unwrap(),
        "id,log_ppl,log_xppl,score,len,error\n"
    );
}

#[test]
fn score_flags_unscorable_rows() {
    let f = fixture();
    let input = out_dir("short.txt");
    fs::write(&input, "a\nlonger line\n").unwrap();
    let out = out_dir("score_short");
    let o = run(&[
        "score",
        "--config",
        cfg(),
        "--checkpoint",
        f.trained.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let rows = score_rows(&out.join("scores.csv"));
    assert_eq!(rows[1][5], "too_short");
    assert_eq!(rows[2][5], "");
}

#[test]
fn eval_generate_matches_library_and_is_deterministic() {
    let f = fixture();
    let run_eval = |name: &str| {
        let out = out_dir(name);
        let o = run(&[
            "eval",
            "--config",
            cfg(),
            "--checkpoint",
            f.trained.to_str().unwrap(),
            "--generate",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let out = run_eval("eval");
    let report: DetectionReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for v in [
        report.roc_auc,
        report.pr_auc,
        report.accuracy,
        report.f1,
        report.tpr_at_fpr,
    ] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(report.n_human > 0 && report.n_machine > 0);
    let samples = read_scatter(&out.join("scatter.csv")).unwrap();
    assert_eq!(
        detection_report(&samples, report.target_fpr).unwrap(),
        report
    );
    let again = run_eval("eval_again");
    for name in ["report.json", "scatter.csv", "roc_curve.csv"] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn eval_requires_a_machine_side() {
    let f = fixture();
    let o = run(&[
        "eval",
        "--config",
        cfg(),
        "--checkpoint",
        f.trained.to_str().unwrap(),
        "--out",
        out_dir("eval_bad").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn calibrate_perfect_separation() {
    let scatter = out_dir("perfect.csv");
    fs::write(
        &scatter,
        "source_id,label,score\na,machine,0.9\nb,machine,0.8\nc,human,0.4\nd,human,0.6\n",
    )
    .unwrap();
    let out = out_dir("calibrate");
    let o = run(&[
        "calibrate",
        "--scatter",
        scatter.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(v["best_f1"], 1.0);
    assert_eq!(v["best_accuracy"], 1.0);
    assert_eq!(v["fpr_thresholds"].as_array().unwrap().len(), 3);
}

#[test]
fn generate_writes_one_line_per_prompt() {
    let f = fixture();
    let input = out_dir("prompts.txt");
    fs::write(&input, "once upon\n\nthe market\n").unwrap();
    let out = out_dir("generate");
    let o = run(&[
        "generate",
        "--config",
        cfg(),
        "--checkpoint",
        f.trained.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("generations.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["id"], 2);
    assert_eq!(lines[0]["prompt"], "once upon");
}

#[test]
fn gradcheck_passes_and_catches_sign_flip() {
    let out = out_dir("gradcheck");
    let o = run(&[
        "gradcheck",
        "--config",
        cfg(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("PASS matmul")));
    assert!(stdout.contains("max_rel_err"));
    let bad = run(&[
        "gradcheck",
        "--config",
        cfg(),
        "--out",
        out.to_str().unwrap(),
        "--inject-sign-flip",
    ]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
