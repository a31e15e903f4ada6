//! Subcommand implementations. Each writes its reports under the report
//! directory and returns the threshold checks that failed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use gradsae::checkpoint::{lm_checkpoint, lm_from_checkpoint, sae_checkpoint, sae_from_checkpoint, Checkpoint};
use gradsae::datagen::{corpus_stats, generate_corpus, read_corpus, split_by_group, write_corpus, Lexicon, QAGroup, Vocab};
use gradsae::influence::{write_influence_dump, KSpec, Method, ValueMode};
use gradsae::metrics::{overlap_stats, ExampleSelections};
use gradsae::numcore::Matrix;
use gradsae::perturb::{
    encode_examples, filter_correct, prepare_all, run_perturbation, score_decode, EvalExample, PerturbReport, Prepared,
    SetKind, DECODE_MAX_LEN,
};
use gradsae::sae::{activation_stats, train_sae, SAEParams};
use gradsae::steer::{build_steer_pairs, run_local_steering, SteerOutcome};
use gradsae::toylm::{train_lm, LMExample, LMParams};
use gradsae::{Error, Result};

use crate::config::RunConfig;

/// A threshold that was not met.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub check: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub reports: Vec<PathBuf>,
    pub failures: Vec<Failure>,
}

impl Outcome {
    fn check(&mut self, ok: bool, check: &str, detail: String) {
        if !ok {
            self.failures.push(Failure { check: check.into(), detail });
        }
    }

    fn merge(&mut self, other: Outcome) {
        self.reports.extend(other.reports);
        self.failures.extend(other.failures);
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn write_report(cfg: &RunConfig, name: &str, body: &str) -> Result<PathBuf> {
    let dir = cfg.reports();
    fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    fs::write(&path, body)?;
    log(format!("wrote {}", path.display()));
    Ok(path)
}

fn missing(path: &Path, what: &str, hint: &str) -> impl FnOnce(Error) -> Error {
    let msg = format!("cannot read {what} {}", path.display());
    let hint = hint.to_owned();
    move |e| Error::Experiment(format!("{msg}: {e}; run `gradsae {hint}` first"))
}

/// Runs `f` on a worker pool of `cfg.threads` threads.
pub fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    pool.install(f)
}

pub fn gen_data(cfg: &RunConfig) -> Result<Outcome> {
    let groups = generate_corpus(&cfg.corpus, &Lexicon::default())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.corpus_path();
    write_corpus(&path, &groups)?;
    log(format!("wrote {}", path.display()));
    let table = corpus_stats(&groups)?.to_table();
    print!("{table}");
    let mut body = cfg.report_header().iter().map(|h| format!("# {h}\n")).collect::<String>();
    body.push_str(&table);
    Ok(Outcome { reports: vec![write_report(cfg, "corpus_stats.tsv", &body)?], failures: vec![] })
}

pub struct Corpus {
    pub train: Vec<QAGroup>,
    pub valid: Vec<QAGroup>,
    pub vocab: Vocab,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.corpus_path();
    let groups = read_corpus(&path).map_err(missing(&path, "corpus", "gen-data"))?;
    let vocab = Vocab::from_groups(&groups)?;
    let (train, valid) = split_by_group(&groups, cfg.valid_groups);
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config(format!(
            "{} groups cannot be split with valid_groups = {}",
            groups.len(),
            cfg.valid_groups
        )));
    }
    Ok(Corpus { train, valid, vocab })
}

/// Fraction of examples the model answers exactly, optionally through an SAE.
pub fn greedy_accuracy(lm: &LMParams, sae: Option<&SAEParams>, vocab: &Vocab, examples: &[EvalExample]) -> Result<f64> {
    use rayon::prelude::*;
    let hits: Vec<f64> = examples
        .par_iter()
        .map(|e| {
            let out = lm.greedy_decode(&e.prompt, DECODE_MAX_LEN, vocab.eos(), sae)?;
            Ok(score_decode(&out, vocab, &e.gold).1)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<f64>() / hits.len().max(1) as f64)
}

fn stacked_hidden(lm: &LMParams, seqs: &[LMExample]) -> Result<Matrix> {
    let parts = seqs.iter().map(|s| lm.hidden(&s.ids)).collect::<Result<Vec<_>>>()?;
    let cols = parts.first().map_or(0, Matrix::cols);
    let rows = parts.iter().map(Matrix::rows).sum();
    Matrix::from_vec(rows, cols, parts.into_iter().flat_map(Matrix::into_vec).collect())
}

const TRAIN_ACCURACY_SAMPLE: usize = 500;

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let vocab = &corpus.vocab;
    let mut lm_cfg = cfg.lm.clone();
    lm_cfg.vocab_size = vocab.len();
    lm_cfg.hook_layer = cfg.hook_layers[0];
    let seqs = corpus.train.iter().map(|g| vocab.encode_group(g)).collect::<Result<Vec<_>>>()?;
    let valid_seqs = corpus.valid.iter().map(|g| vocab.encode_group(g)).collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let every = (cfg.lm_train.steps / 10).max(1);
    let lm = train_lm(&seqs, &lm_cfg, &cfg.lm_train, |p| {
        if p.step % every == 0 || p.step + 1 == cfg.lm_train.steps {
            log(format!("lm step {:>5} loss {:.4} ({:.0}s)", p.step, p.loss, t0.elapsed().as_secs_f64()));
        }
    })?;
    lm_checkpoint(&lm, vocab).save(&cfg.lm_path())?;
    log(format!("wrote {}", cfg.lm_path().display()));

    let valid = encode_examples(&corpus.valid, vocab)?;
    let train_eval = encode_examples(&corpus.train, vocab)?;
    let train_eval = &train_eval[..train_eval.len().min(TRAIN_ACCURACY_SAMPLE)];
    let valid_acc = greedy_accuracy(&lm, None, vocab, &valid)?;
    let train_acc = greedy_accuracy(&lm, None, vocab, train_eval)?;
    let mut out = Outcome::default();
    let th = &cfg.thresholds;
    let mut body = cfg.report_header().iter().map(|h| format!("# {h}\n")).collect::<String>();
    body.push_str("metric\tlayer\tvalue\n");
    let _ = writeln!(body, "lm_valid_greedy_em\t-\t{valid_acc:.4}");
    let _ = writeln!(body, "lm_train_greedy_em\t-\t{train_acc:.4}");
    out.check(
        valid_acc >= th.min_valid_accuracy,
        "lm_valid_accuracy",
        format!("{valid_acc:.4} < {}", th.min_valid_accuracy),
    );
    out.check(
        train_acc >= th.min_train_accuracy,
        "lm_train_accuracy",
        format!("{train_acc:.4} < {}", th.min_train_accuracy),
    );

    for &layer in &cfg.hook_layers {
        let lm_l = lm.with_hook_layer(layer)?;
        let acts = stacked_hidden(&lm_l, &seqs)?;
        let held_out = stacked_hidden(&lm_l, &valid_seqs)?;
        let t = Instant::now();
        let sae = train_sae(&acts, &cfg.sae)?;
        log(format!("sae layer {layer} trained on {} rows ({:.0}s)", acts.rows(), t.elapsed().as_secs_f64()));
        sae_checkpoint(&sae, layer).save(&cfg.sae_path(layer))?;
        log(format!("wrote {}", cfg.sae_path(layer).display()));
        let err = sae.relative_error(&held_out)?;
        let active = sae.mean_active(&held_out)?;
        let spliced = greedy_accuracy(&lm_l, Some(&sae), vocab, &valid)?;
        let _ = writeln!(body, "sae_heldout_relative_error\t{layer}\t{err:.4}");
        let _ = writeln!(body, "sae_mean_active_latents\t{layer}\t{active:.2}");
        let _ = writeln!(body, "spliced_valid_greedy_em\t{layer}\t{spliced:.4}");
        out.check(
            err <= th.max_sae_error,
            &format!("sae_error_l{layer}"),
            format!("{err:.4} > {}", th.max_sae_error),
        );
    }
    print!("{body}");
    out.reports.push(write_report(cfg, "train.tsv", &body)?);
    Ok(out)
}

pub struct Models {
    pub lm: LMParams,
    pub sae: SAEParams,
    pub vocab: Vocab,
}

/// The LM hooked at `cfg.layer` and that layer's SAE.
pub fn load_models(cfg: &RunConfig) -> Result<Models> {
    let lm_path = cfg.lm_path();
    let (lm, vocab) = lm_from_checkpoint(&Checkpoint::load(&lm_path).map_err(missing(&lm_path, "checkpoint", "train"))?)?;
    let sae_path = cfg.sae_path(cfg.layer);
    let (sae, layer) = sae_from_checkpoint(&Checkpoint::load(&sae_path).map_err(missing(&sae_path, "checkpoint", "train"))?)?;
    if layer != cfg.layer {
        return Err(Error::Checkpoint(format!(
            "{} was trained at layer {layer}, expected {}",
            sae_path.display(),
            cfg.layer
        )));
    }
    Ok(Models { lm: lm.with_hook_layer(layer)?, sae, vocab })
}

/// Held-out examples the spliced model answers exactly, with their influences.
pub struct EvalSet {
    pub models: Models,
    pub total: usize,
    pub prepared: Vec<Prepared>,
}

pub fn eval_set(cfg: &RunConfig) -> Result<EvalSet> {
    let corpus = load_corpus(cfg)?;
    let models = load_models(cfg)?;
    if models.vocab != corpus.vocab {
        return Err(Error::Checkpoint("LM vocabulary does not match the corpus; rerun `gradsae train`".into()));
    }
    let examples = encode_examples(&corpus.valid, &models.vocab)?;
    let filtered = filter_correct(&examples, &models.lm, &models.sae, &models.vocab)
        .map_err(|e| Error::Experiment(format!("{e}; rerun `gradsae train`")))?;
    log(format!("{} of {} held-out examples answered exactly by the spliced model", filtered.len(), examples.len()));
    let prepared = prepare_all(&filtered, &models.lm, &models.sae)?;
    Ok(EvalSet { models, total: examples.len(), prepared })
}

/// K values resolved for ordering checks: half-K is placed at its mean over examples.
fn effective_k(k: KSpec, prepared: &[Prepared]) -> f64 {
    match k {
        KSpec::Fixed(k) => k as f64,
        KSpec::HalfNonzero => {
            let ks: Vec<f64> = prepared
                .iter()
                .map(|p| gradsae::sae::half_k(p.h.row_nonzero(p.h.rows() - 1)) as f64)
                .collect();
            ks.iter().sum::<f64>() / ks.len().max(1) as f64
        }
    }
}

pub const CHECK_KS: [KSpec; 2] = [KSpec::Fixed(10), KSpec::HalfNonzero];

pub fn perturbation_checks(cfg: &RunConfig, r: &PerturbReport, prepared: &[Prepared], out: &mut Outcome) {
    let th = &cfg.thresholds;
    out.check(
        prepared.len() >= th.min_filtered,
        "filtered_size",
        format!("{} < {}", prepared.len(), th.min_filtered),
    );
    out.check(
        r.untouched.em == 100.0,
        "perturb_untouched_em",
        format!("{:.2} != 100", r.untouched.em),
    );
    let f1 = |m, kind, k| r.cell(m, kind, k).map(|c| c.f1);
    for k in CHECK_KS {
        let cells = (
            f1(Method::GradSae, SetKind::TopK, k),
            f1(Method::Baseline, SetKind::TopK, k),
            f1(Method::GradSae, SetKind::BottomK, k),
            f1(Method::Baseline, SetKind::BottomK, k),
        );
        let (Some(gt), Some(bt), Some(gb), Some(bb)) = cells else {
            continue;
        };
        out.check(gt < bt, "perturb_topk_order", format!("K={k}: gradsae {gt:.2} >= baseline {bt:.2}"));
        out.check(
            bt < gb.min(bb),
            "perturb_top_below_bottom",
            format!("K={k}: baseline top {bt:.2} >= bottom min {:.2}", gb.min(bb)),
        );
        for (name, v) in [("gradsae", gb), ("baseline", bb)] {
            out.check(
                v >= th.min_bottomk_f1,
                "perturb_bottomk_f1",
                format!("K={k}: {name} {v:.2} < {}", th.min_bottomk_f1),
            );
        }
    }
    let mut series: Vec<(f64, f64)> = r
        .k_grid
        .iter()
        .filter_map(|&k| f1(Method::GradSae, SetKind::TopK, k).map(|v| (effective_k(k, prepared), v)))
        .collect();
    series.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in series.windows(2) {
        out.check(
            w[1].1 <= w[0].1,
            "perturb_gradsae_monotone",
            format!("F1 rises from {:.2} at K={:.1} to {:.2} at K={:.1}", w[0].1, w[0].0, w[1].1, w[1].0),
        );
    }
}

pub fn perturb(cfg: &RunConfig) -> Result<Outcome> {
    let set = eval_set(cfg)?;
    let m = &set.models;
    let report = run_perturbation(&set.prepared, &m.lm, &m.sae, &m.vocab, &cfg.methods, &cfg.k_grid)?;
    let mut header = cfg.report_header();
    header.push(format!("filtered={} of {}", set.prepared.len(), set.total));
    let body = report.to_tsv(&header);
    print!("{body}");
    let mut out = Outcome::default();
    out.reports.push(write_report(cfg, &format!("perturb_l{}.tsv", cfg.layer), &body)?);
    perturbation_checks(cfg, &report, &set.prepared, &mut out);
    Ok(out)
}

pub fn steering_checks(cfg: &RunConfig, s: &SteerOutcome, out: &mut Outcome) {
    let r = &s.report;
    out.check(
        r.untouched.em == 0.0 && r.untouched.f1 == 0.0,
        "steer_untouched_zero",
        format!("EM {:.2} F1 {:.2}", r.untouched.em, r.untouched.f1),
    );
    out.check(r.untouched.n > 0, "steer_pairs", "no steering pair retained".into());
    let f1 = |m, kind, k| r.cell(m, kind, k).map(|c| c.f1);
    let k10 = KSpec::Fixed(10);
    if let (Some(g), Some(b)) = (f1(Method::GradSae, SetKind::TopK, k10), f1(Method::Baseline, SetKind::TopK, k10)) {
        out.check(g > b, "steer_topk_order", format!("K=10: gradsae {g:.2} <= baseline {b:.2}"));
    }
    for &m in &r.methods {
        for &k in &r.k_grid {
            if let Some(v) = f1(m, SetKind::BottomK, k) {
                out.check(
                    v < cfg.thresholds.max_steer_bottomk_f1,
                    "steer_bottomk_f1",
                    format!("{m} K={k}: {v:.2} >= {}", cfg.thresholds.max_steer_bottomk_f1),
                );
            }
        }
    }
}

pub fn steer(cfg: &RunConfig) -> Result<Outcome> {
    let set = eval_set(cfg)?;
    let m = &set.models;
    let (pairs, pairing) = build_steer_pairs(&set.prepared, cfg.seed);
    let s = run_local_steering(
        &set.prepared,
        &pairs,
        &m.lm,
        &m.sae,
        &m.vocab,
        &cfg.methods,
        &cfg.k_grid,
        cfg.value_mode,
    )?;
    let mut header = cfg.report_header();
    header.push(format!(
        "pairs={} dropped_nonzero_unsteered={} skipped_no_donor={} bottomk_changed={:.4} values={}",
        pairs.len(),
        s.dropped,
        pairing.skipped.len(),
        s.bottomk_changed,
        match cfg.value_mode {
            ValueMode::Mean => "mean",
            ValueMode::LastToken => "last",
        }
    ));
    let body = s.report.to_tsv(&header);
    print!("{body}");
    let mut out = Outcome::default();
    out.reports.push(write_report(cfg, &format!("steer_l{}.tsv", cfg.layer), &body)?);
    steering_checks(cfg, &s, &mut out);
    Ok(out)
}

pub fn stats(cfg: &RunConfig) -> Result<Outcome> {
    let set = eval_set(cfg)?;
    let m = &set.models;
    let prompts: Vec<_> = set.prepared.iter().map(|p| p.example.prompt.clone()).collect();
    let act = activation_stats(&prompts, &m.lm, &m.sae)?;
    let mut selections = Vec::with_capacity(set.prepared.len());
    let mut dump = Vec::new();
    for p in &set.prepared {
        let pick = |method| match p.select(method, KSpec::HalfNonzero, ValueMode::Mean) {
            Ok(s) => Ok(Some((s.z_high.into_iter().collect(), s.z_low.into_iter().collect()))),
            Err(Error::EmptySelection) => Ok(None),
            Err(e) => Err(e),
        };
        selections.push(ExampleSelections {
            group: p.example.group_id.clone(),
            baseline: pick(Method::Baseline)?,
            gradsae: pick(Method::GradSae)?,
        });
        for method in Method::ALL {
            write_influence_dump(&mut dump, &p.example.id, p.influence(method))?;
        }
    }
    let overlap = overlap_stats(&selections);
    let mut header = cfg.report_header();
    header.push(format!("filtered={} of {}", set.prepared.len(), set.total));
    let body = overlap.to_tsv(&header, act.mean_nonzero, act.mean_half_k);
    print!("{body}");
    let mut out = Outcome::default();
    out.reports.push(write_report(cfg, &format!("overlap_l{}.tsv", cfg.layer), &body)?);
    let dump_path = cfg.reports().join(format!("influence_l{}.jsonl", cfg.layer));
    fs::write(&dump_path, dump)?;
    out.reports.push(dump_path);
    for (name, v) in [("cross_topk", overlap.cross_top), ("cross_bottomk", overlap.cross_bottom)] {
        out.check((0.0..=100.0).contains(&v), "overlap_range", format!("{name} {v}"));
    }
    out.check(overlap.cross_examples > 0, "overlap_examples", "no example had both selections".into());
    Ok(out)
}

/// gen-data, train, perturb, steer and stats in order.
pub fn run_all(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = gen_data(cfg)?;
    for step in [train, perturb, steer, stats] {
        out.merge(step(cfg)?);
    }
    Ok(out)
}
