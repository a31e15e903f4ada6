//! Masking experiment: zero the most or least influential latents and measure
//! how much spliced greedy answers degrade.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::datagen::{QAGroup, Vocab};
use crate::influence::{
    aggregate, baseline_influence, grad_influence, select, InfluenceVector, KSpec, LatentSelection, Method,
    ValueMode,
};
use crate::metrics::{exact_match, token_f1};
use crate::numcore::Matrix;
use crate::sae::SAEParams;
use crate::toylm::{AnswerScorer, LMParams, TokenSeq};
use crate::{Error, Result};

/// Enough room for any synthetic answer plus its end token.
pub const DECODE_MAX_LEN: usize = 8;

pub const DEFAULT_K_GRID: [KSpec; 5] = [
    KSpec::Fixed(1),
    KSpec::Fixed(10),
    KSpec::Fixed(20),
    KSpec::Fixed(30),
    KSpec::HalfNonzero,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetKind {
    TopK,
    BottomK,
}

impl SetKind {
    pub const ALL: [SetKind; 2] = [SetKind::TopK, SetKind::BottomK];

    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::TopK => "topk",
            SetKind::BottomK => "bottomk",
        }
    }

    pub fn pick(self, s: &LatentSelection) -> &[usize] {
        match self {
            SetKind::TopK => &s.z_high,
            SetKind::BottomK => &s.z_low,
        }
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A QA example encoded for the LM.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    pub id: String,
    pub group_id: String,
    pub gold: String,
    pub prompt: TokenSeq,
    /// Answer ids followed by the end token.
    pub target: Vec<u32>,
}

/// Encodes every example; ids are `<group>/<question index>`.
pub fn encode_examples(groups: &[QAGroup], vocab: &Vocab) -> Result<Vec<EvalExample>> {
    let mut out = Vec::new();
    for g in groups {
        for (i, ex) in g.examples.iter().enumerate() {
            let (prompt, target) = vocab.encode_example(ex)?;
            out.push(EvalExample {
                id: format!("{}/{i}", g.group_id),
                group_id: g.group_id.clone(),
                gold: ex.answer.clone(),
                prompt,
                target,
            });
        }
    }
    Ok(out)
}

/// Decoded answer text and its EM/F1 against `gold`.
pub fn score_decode(out: &TokenSeq, vocab: &Vocab, gold: &str) -> (String, f64, f64) {
    let text = vocab.decode(out.answer_ids());
    let (em, f1) = (exact_match(&text, gold), token_f1(&text, gold));
    (text, em, f1)
}

/// Examples whose spliced greedy decode already matches the gold answer exactly.
pub fn filter_correct(
    examples: &[EvalExample],
    lm: &LMParams,
    sae: &SAEParams,
    vocab: &Vocab,
) -> Result<Vec<EvalExample>> {
    let keep: Vec<bool> = examples
        .par_iter()
        .map(|e| {
            let out = lm.greedy_decode(&e.prompt, DECODE_MAX_LEN, vocab.eos(), Some(sae))?;
            Ok(score_decode(&out, vocab, &e.gold).1 == 1.0)
        })
        .collect::<Result<_>>()?;
    let kept: Vec<EvalExample> = examples.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e.clone()).collect();
    if kept.is_empty() {
        return Err(Error::Experiment(
            "no example is answered correctly by the spliced model; retrain the LM or SAE".into(),
        ));
    }
    Ok(kept)
}

/// Copy of `h` with the listed columns zero in every row.
pub fn mask_latents(h: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let mut out = h.clone();
    mask_in_place(&mut out, indices)?;
    Ok(out)
}

pub(crate) fn mask_in_place(h: &mut Matrix, indices: &[usize]) -> Result<()> {
    if let Some(&bad) = indices.iter().find(|&&c| c >= h.cols()) {
        return Err(Error::Index { index: bad, limit: h.cols() });
    }
    for r in 0..h.rows() {
        let row = h.row_mut(r);
        for &c in indices {
            row[c] = 0.0;
        }
    }
    Ok(())
}

/// Prompt latents and both influence vectors for one example.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: EvalExample,
    pub h: Matrix,
    pub gradsae: InfluenceVector,
    pub baseline: InfluenceVector,
}

impl Prepared {
    pub fn influence(&self, method: Method) -> &InfluenceVector {
        match method {
            Method::GradSae => &self.gradsae,
            Method::Baseline => &self.baseline,
        }
    }

    /// `Err(EmptySelection)` is the caller's cue to skip the example.
    pub fn select(&self, method: Method, k: KSpec, mode: ValueMode) -> Result<LatentSelection> {
        select(self.influence(method), k, &self.h, mode)
    }
}

pub fn prepare(example: &EvalExample, lm: &LMParams, sae: &SAEParams) -> Result<Prepared> {
    let scorer = AnswerScorer::new(lm, sae, example.prompt.prompt_ids(), &example.target)?;
    let h = scorer.prompt_latents();
    let gradsae = aggregate(&grad_influence(&scorer)?)?;
    let baseline = baseline_influence(&h)?;
    Ok(Prepared { example: example.clone(), h, gradsae, baseline })
}

pub fn prepare_all(examples: &[EvalExample], lm: &LMParams, sae: &SAEParams) -> Result<Vec<Prepared>> {
    examples.par_iter().map(|e| prepare(e, lm, sae)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreCell {
    /// Mean EM ×100 over scored examples.
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub skipped: usize,
}

#[derive(Default)]
struct Accum {
    em: f64,
    f1: f64,
    n: usize,
    skipped: usize,
}

impl Accum {
    fn add(&mut self, outcome: Option<(f64, f64)>) {
        match outcome {
            Some((em, f1)) => {
                self.em += em;
                self.f1 += f1;
                self.n += 1;
            }
            None => self.skipped += 1,
        }
    }

    fn finish(&self) -> ScoreCell {
        let d = self.n.max(1) as f64;
        ScoreCell { em: 100.0 * self.em / d, f1: 100.0 * self.f1 / d, n: self.n, skipped: self.skipped }
    }
}

pub type CellKey = (Method, SetKind, KSpec);

/// EM/F1 per cell for one item; `None` when the selection was empty.
pub(crate) type ItemOutcomes = Vec<(CellKey, Option<(f64, f64)>)>;

/// Table of intervention scores: rows method × set kind, columns K × {EM, F1}.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionReport {
    pub title: String,
    pub k_grid: Vec<KSpec>,
    pub methods: Vec<Method>,
    /// Score of the unmodified spliced model on the same examples.
    pub untouched: ScoreCell,
    pub cells: Vec<(CellKey, ScoreCell)>,
}

pub type PerturbReport = InterventionReport;

impl InterventionReport {
    pub fn cell(&self, method: Method, kind: SetKind, k: KSpec) -> Option<&ScoreCell> {
        self.cells.iter().find(|(key, _)| *key == (method, kind, k)).map(|(_, c)| c)
    }

    /// TSV with `header` lines emitted as `#` comments first.
    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        let _ = writeln!(out, "# {} examples={}", self.title, self.untouched.n);
        out.push_str("method\tset\tw/o_task_EM\tw/o_task_F1");
        for k in &self.k_grid {
            let _ = write!(out, "\tK={k}_EM\tK={k}_F1\tK={k}_n");
        }
        out.push_str("\tskipped\n");
        for &m in &self.methods {
            for kind in SetKind::ALL {
                let _ = write!(out, "{m}\t{kind}\t{:.2}\t{:.2}", self.untouched.em, self.untouched.f1);
                let mut skipped = 0;
                for &k in &self.k_grid {
                    let c = self.cell(m, kind, k).copied().unwrap_or_default();
                    skipped = skipped.max(c.skipped);
                    let _ = write!(out, "\t{:.2}\t{:.2}\t{}", c.em, c.f1, c.n);
                }
                let _ = writeln!(out, "\t{skipped}");
            }
        }
        out
    }
}

pub(crate) fn collect_report(
    title: &str,
    methods: &[Method],
    k_grid: &[KSpec],
    untouched: impl Iterator<Item = (f64, f64)>,
    per_item: Vec<ItemOutcomes>,
) -> InterventionReport {
    let mut base = Accum::default();
    for o in untouched {
        base.add(Some(o));
    }
    let mut acc: BTreeMap<CellKey, Accum> = BTreeMap::new();
    for item in per_item {
        for (key, outcome) in item {
            acc.entry(key).or_default().add(outcome);
        }
    }
    let mut cells = Vec::new();
    for &m in methods {
        for kind in SetKind::ALL {
            for &k in k_grid {
                let c = acc.get(&(m, kind, k)).map(Accum::finish).unwrap_or_default();
                cells.push(((m, kind, k), c));
            }
        }
    }
    InterventionReport {
        title: title.to_owned(),
        k_grid: k_grid.to_vec(),
        methods: methods.to_vec(),
        untouched: base.finish(),
        cells,
    }
}

/// Masks each selection at every decoding step and scores against the gold answer.
pub fn run_perturbation(
    prepared: &[Prepared],
    lm: &LMParams,
    sae: &SAEParams,
    vocab: &Vocab,
    methods: &[Method],
    k_grid: &[KSpec],
) -> Result<PerturbReport> {
    let per_item: Vec<(f64, f64, ItemOutcomes)> = prepared
        .par_iter()
        .map(|p| {
            let ex = &p.example;
            let plain = lm.greedy_decode(&ex.prompt, DECODE_MAX_LEN, vocab.eos(), Some(sae))?;
            let (_, em0, f10) = score_decode(&plain, vocab, &ex.gold);
            let mut rows = Vec::new();
            for &m in methods {
                for &k in k_grid {
                    let sel = match p.select(m, k, ValueMode::Mean) {
                        Ok(s) => Some(s),
                        Err(Error::EmptySelection) => None,
                        Err(e) => return Err(e),
                    };
                    for kind in SetKind::ALL {
                        let outcome = match &sel {
                            None => None,
                            Some(s) => {
                                let idx = kind.pick(s);
                                let out = lm.greedy_decode_edited(&ex.prompt, DECODE_MAX_LEN, vocab.eos(), sae, &|h| {
                                    mask_in_place(h, idx)
                                })?;
                                let (_, em, f1) = score_decode(&out, vocab, &ex.gold);
                                Some((em, f1))
                            }
                        };
                        rows.push(((m, kind, k), outcome));
                    }
                }
            }
            Ok((em0, f10, rows))
        })
        .collect::<Result<_>>()?;
    let untouched: Vec<(f64, f64)> = per_item.iter().map(|(e, f, _)| (*e, *f)).collect();
    let rows = per_item.into_iter().map(|(_, _, r)| r).collect();
    Ok(collect_report("perturbation", methods, k_grid, untouched.into_iter(), rows))
}
