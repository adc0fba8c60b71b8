use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::config::{
    sub_seed, RunConfig, SEED_GRADCHECK, SEED_INIT, SEED_OBSERVER, SEED_PERFORMER, SEED_SPLIT,
};
use super::{EXIT_OK, EXIT_RUNTIME};
use crate::binoculars::{cross_perplexity, log_perplexity, score_from_logits, Numerator};
use crate::data::{detokenize, load_corpus, read_lines, Corpus, TokenSeq};
use crate::evaluation::{
    best_accuracy_threshold, best_f1_threshold, detection_report, detection_samples,
    export_scatter, pr_auc, read_scatter, roc_auc, threshold_at_fpr, Label, ScoredSample,
};
use crate::generation::{generate as sample, SamplerConfig};
use crate::model::{init_model, load_checkpoint, Role, TransformerLM};
use crate::numerics::gradcheck::{faulty_case, op_suite, run_suite};
use crate::training::{pretrain as run_pretrain, train as run_train};
use crate::{rng, Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Validates, creates the output directory and records the resolved configuration.
fn prepare(cfg: RunConfig) -> Result<RunConfig> {
    let cfg = cfg.resolve();
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;
    Ok(cfg)
}

fn corpus_splits(cfg: &RunConfig, path: &Path) -> Result<(Corpus, Corpus)> {
    load_corpus(
        path,
        cfg.model.context_len,
        cfg.eval_fraction,
        sub_seed(cfg.seed, SEED_SPLIT),
    )
}

/// Non-blank lines as byte sequences of at most `max_len` tokens, keyed by line number.
fn read_documents(path: &Path, max_len: usize) -> Result<Vec<(usize, TokenSeq)>> {
    read_lines(path)?
        .into_iter()
        .map(|(id, line)| {
            let mut tokens: Vec<u32> = line.bytes().map(u32::from).collect();
            if tokens.len() > max_len {
                log::warn!("line {id}: truncating {} tokens to {max_len}", tokens.len());
                tokens.truncate(max_len);
            }
            Ok((id, TokenSeq::real(tokens)?))
        })
        .collect()
}

/// Loads a checkpoint whose model configuration replaces the configured one.
fn load_model(cfg: &mut RunConfig, path: &Path) -> Result<TransformerLM> {
    let model = load_checkpoint(path)?;
    if *model.config() != cfg.model {
        log::info!("using the model configuration stored in {}", path.display());
        cfg.model = model.config().clone();
    }
    Ok(model)
}

pub fn pretrain(cfg: RunConfig) -> Result<i32> {
    let cfg = prepare(cfg)?;
    let corpus = cfg.require(&cfg.corpus, "corpus")?;
    let (train, _) = corpus_splits(&cfg, corpus)?;
    let mut model = init_model(&cfg.model, sub_seed(cfg.seed, SEED_INIT))?;
    let out = run_pretrain(&mut model, &train, &cfg.pretrain, Some(&cfg.out_dir))?;
    if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
        log::info!("pretrain loss {first:.4} -> {last:.4}");
    }
    Ok(EXIT_OK)
}

pub fn train(mut cfg: RunConfig) -> Result<i32> {
    let base = cfg
        .require(&cfg.base_checkpoint, "base_checkpoint")?
        .to_path_buf();
    cfg.require(&cfg.corpus, "corpus")?;
    cfg.clone().resolve().validate()?;
    let mut model = load_model(&mut cfg, &base)?;
    let cfg = prepare(cfg)?;
    let (train, _) = corpus_splits(&cfg, cfg.corpus.as_deref().expect("checked above"))?;
    if model.adapter(Role::Performer).is_none() {
        model.attach_adapter(
            &cfg.performer,
            Role::Performer,
            sub_seed(cfg.seed, SEED_PERFORMER),
        )?;
    }
    if model.adapter(Role::Observer).is_none() {
        model.attach_adapter(
            &cfg.observer,
            Role::Observer,
            sub_seed(cfg.seed, SEED_OBSERVER),
        )?;
    }
    let out = run_train(&mut model, &train, &cfg.training, Some(&cfg.out_dir))?;
    if let Some(last) = out.history.last() {
        log::info!(
            "trained {} steps: task {:.4} b_real {:.4} b_gen {:.4}; skipped {} of {}",
            out.history.len(),
            last.task_loss,
            last.b_real,
            last.b_gen,
            out.skipped,
            out.seen
        );
    }
    Ok(EXIT_OK)
}

/// Loads the checkpoint named by `checkpoint`, then validates and records the configuration.
fn with_checkpoint(mut cfg: RunConfig) -> Result<(RunConfig, TransformerLM)> {
    let path = cfg.require(&cfg.checkpoint, "checkpoint")?.to_path_buf();
    cfg.clone().resolve().validate()?;
    let model = load_model(&mut cfg, &path)?;
    Ok((prepare(cfg)?, model))
}

#[derive(Serialize)]
struct Generation {
    id: usize,
    prompt: String,
    continuation: String,
}

pub fn generate(cfg: RunConfig) -> Result<i32> {
    cfg.require(&cfg.input, "input")?;
    let (cfg, model) = with_checkpoint(cfg)?;
    model.require_adapter(Role::Performer)?;
    let max_prompt = cfg.model.context_len - cfg.sampler.max_new_tokens;
    let docs = read_documents(cfg.input.as_deref().expect("checked above"), max_prompt)?;
    let path = cfg.out_dir.join("generations.jsonl");
    let mut out = Vec::new();
    for (id, prompt) in docs {
        let sampler = SamplerConfig {
            seed: rng::derive_seed(cfg.sampler.seed, &[id as u64]),
            ..cfg.sampler.clone()
        };
        let s = sample(&model, Some(Role::Performer), &prompt, &sampler)?;
        let g = Generation {
            id,
            prompt: String::from_utf8_lossy(&detokenize(prompt.tokens())).into_owned(),
            continuation: String::from_utf8_lossy(&detokenize(&s.tokens()[prompt.len()..]))
                .into_owned(),
        };
        serde_json::to_writer(&mut out, &g)?;
        out.push(b'\n');
    }
    write_file(&path, &out)?;
    Ok(EXIT_OK)
}

pub const SCORE_HEADER: [&str; 6] = ["id", "log_ppl", "log_xppl", "score", "len", "error"];

pub fn score(cfg: RunConfig) -> Result<i32> {
    cfg.require(&cfg.input, "input")?;
    let (cfg, model) = with_checkpoint(cfg)?;
    model.require_adapter(Role::Performer)?;
    model.require_adapter(Role::Observer)?;
    let docs = read_documents(
        cfg.input.as_deref().expect("checked above"),
        cfg.model.context_len,
    )?;
    let path = cfg.out_dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SCORE_HEADER)?;
    let mut flagged = 0;
    for (id, s) in docs {
        let len = s.len().to_string();
        if s.scored_positions().is_empty() {
            flagged += 1;
            w.write_record([&id.to_string(), "", "", "", &len, "too_short"])?;
            continue;
        }
        let obs = model.logits(Some(Role::Observer), s.tokens())?;
        let perf = model.logits(Some(Role::Performer), s.tokens())?;
        match score_from_logits(&obs, &perf, &s, &cfg.protocol.score) {
            Ok(b) => w.write_record([
                id.to_string(),
                b.log_ppl.to_string(),
                b.log_xppl.to_string(),
                b.score.to_string(),
                len,
                String::new(),
            ])?,
            Err(Error::DegenerateDenominator { .. }) => {
                flagged += 1;
                let numerator = match cfg.protocol.score.numerator {
                    Numerator::Observer => &obs,
                    Numerator::Performer => &perf,
                };
                w.write_record([
                    id.to_string(),
                    log_perplexity(numerator, &s)?.to_string(),
                    cross_perplexity(&obs, &perf, &s)?.to_string(),
                    String::new(),
                    len,
                    "degenerate_denominator".into(),
                ])?;
            }
            Err(e) => return Err(e),
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if flagged > 0 {
        log::warn!("{flagged} rows flagged in {}", path.display());
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn score_documents(
    model: &TransformerLM,
    docs: &[(usize, TokenSeq)],
    label: Label,
    cfg: &RunConfig,
) -> Result<Vec<ScoredSample>> {
    let name = match label {
        Label::Human => "human",
        Label::Machine => "machine",
    };
    docs.iter()
        .map(|(id, s)| {
            let b = crate::binoculars::binoculars_score(model, s, &cfg.protocol.score)?;
            Ok(ScoredSample::new(format!("{name}:{id}"), label, b.score))
        })
        .collect()
}

fn write_curve(path: &Path, header: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn eval(cfg: RunConfig) -> Result<i32> {
    if cfg.human.is_none() && cfg.corpus.is_none() {
        return Err(Error::Config(
            "`eval` needs `human` or a `corpus` to take the eval split from".into(),
        ));
    }
    if !cfg.generate_machine && cfg.machine.is_none() {
        return Err(Error::Config(
            "`eval` needs `machine` or `generate_machine`".into(),
        ));
    }
    let (cfg, model) = with_checkpoint(cfg)?;
    model.require_adapter(Role::Performer)?;
    model.require_adapter(Role::Observer)?;
    let ctx = cfg.model.context_len;
    let human: Vec<(usize, TokenSeq)> = match (&cfg.human, &cfg.corpus) {
        (Some(p), _) => read_documents(p, ctx)?,
        (None, Some(c)) => corpus_splits(&cfg, c)?
            .1
            .sequences
            .into_iter()
            .enumerate()
            .collect(),
        (None, None) => unreachable!("checked above"),
    };
    if human.is_empty() {
        return Err(Error::Empty("no human documents".into()));
    }
    let samples = if cfg.generate_machine {
        let seqs: Vec<TokenSeq> = human.iter().map(|(_, s)| s.clone()).collect();
        detection_samples(&model, &seqs, &cfg.protocol)?
    } else {
        let machine = read_documents(cfg.machine.as_deref().expect("checked above"), ctx)?;
        if machine.is_empty() {
            return Err(Error::Empty("no machine documents".into()));
        }
        let mut s = score_documents(&model, &human, Label::Human, &cfg)?;
        s.extend(score_documents(&model, &machine, Label::Machine, &cfg)?);
        s
    };
    let report = detection_report(&samples, cfg.target_fpr)?;
    export_scatter(&samples, &cfg.out_dir.join("scatter.csv"))?;
    write_curve(
        &cfg.out_dir.join("roc_curve.csv"),
        ["fpr", "tpr"],
        &roc_auc(&samples)?.0,
    )?;
    write_curve(
        &cfg.out_dir.join("pr_curve.csv"),
        ["recall", "precision"],
        &pr_auc(&samples)?.0,
    )?;
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct FprThreshold {
    target_fpr: f64,
    threshold: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct Calibration {
    best_f1_threshold: f64,
    best_f1: f64,
    best_accuracy_threshold: f64,
    best_accuracy: f64,
    fpr_thresholds: Vec<FprThreshold>,
}

pub fn calibrate(cfg: RunConfig) -> Result<i32> {
    cfg.require(&cfg.scatter, "scatter")?;
    let cfg = prepare(cfg)?;
    let samples = read_scatter(cfg.scatter.as_deref().expect("checked above"))?;
    let (best_f1_threshold, best_f1) = best_f1_threshold(&samples)?;
    let (best_accuracy_threshold, best_accuracy) = best_accuracy_threshold(&samples)?;
    let fpr_thresholds = cfg
        .fpr_targets
        .iter()
        .map(|&target_fpr| {
            let (threshold, tpr) = threshold_at_fpr(&samples, target_fpr)?;
            Ok(FprThreshold {
                target_fpr,
                threshold,
                tpr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = Calibration {
        best_f1_threshold,
        best_f1,
        best_accuracy_threshold,
        best_accuracy,
        fpr_thresholds,
    };
    write_json(&cfg.out_dir.join("calibration.json"), &c)?;
    println!("{}", serde_json::to_string(&c)?);
    Ok(EXIT_OK)
}

pub fn gradcheck(cfg: RunConfig, inject_sign_flip: bool) -> Result<i32> {
    if cfg!(feature = "f32") {
        return Err(Error::Config(
            "gradcheck needs the default 64-bit build".into(),
        ));
    }
    let cfg = prepare(cfg)?;
    let mut cases = op_suite();
    if inject_sign_flip {
        cases.push(faulty_case());
    }
    let g = &cfg.gradcheck;
    let mut r = rng::stream(sub_seed(cfg.seed, SEED_GRADCHECK), &[]);
    let report = run_suite(
        &cases,
        g.trials,
        g.eps as crate::Real,
        g.tolerance as crate::Real,
        &mut r,
    );
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for c in &report.cases {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            lock,
            "{verdict} {:<24} max_rel_err {:.3e}",
            c.name, c.max_relative_error
        );
    }
    let _ = writeln!(
        lock,
        "{}",
        if report.passed {
            "gradcheck passed"
        } else {
            "gradcheck FAILED"
        }
    );
    write_json(&cfg.out_dir.join("gradcheck.json"), &report)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_RUNTIME })
}
