//! Local steering: replace an example's own top latents with those of another
//! question on the same context and check whether the answer follows.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::Vocab;
use crate::influence::{KSpec, Method, ValueMode};
use crate::numcore::Matrix;
use crate::perturb::{collect_report, score_decode, ItemOutcomes, InterventionReport, Prepared, SetKind, DECODE_MAX_LEN};
use crate::sae::SAEParams;
use crate::toylm::LMParams;
use crate::{Error, Result};

pub type SteerReport = InterventionReport;

/// Indices into the prepared example list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SteerPair {
    pub target: usize,
    pub donor: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairingLog {
    /// Example ids with no other question on their context.
    pub skipped: Vec<String>,
}

/// One pair per example whose context has another question; the donor is drawn uniformly.
pub fn build_steer_pairs(examples: &[Prepared], seed: u64) -> (Vec<SteerPair>, PairingLog) {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in examples.iter().enumerate() {
        by_group.entry(&p.example.group_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut log = PairingLog::default();
    for (i, p) in examples.iter().enumerate() {
        let donors: Vec<usize> = by_group[p.example.group_id.as_str()]
            .iter()
            .copied()
            .filter(|&j| j != i && examples[j].example.prompt.ids != p.example.prompt.ids)
            .collect();
        match donors.choose(&mut rng) {
            Some(&donor) => pairs.push(SteerPair { target: i, donor }),
            None => log.skipped.push(p.example.id.clone()),
        }
    }
    (pairs, log)
}

/// Zeroes `own_high` in every row, then overwrites `donor_high` columns with `donor_values`.
pub fn inject_latents(h: &Matrix, own_high: &[usize], donor_high: &[usize], donor_values: &[f64]) -> Result<Matrix> {
    let mut out = h.clone();
    inject_in_place(&mut out, own_high, donor_high, donor_values)?;
    Ok(out)
}

fn inject_in_place(h: &mut Matrix, own_high: &[usize], donor_high: &[usize], donor_values: &[f64]) -> Result<()> {
    if donor_high.len() != donor_values.len() {
        return Err(Error::Input(format!(
            "{} donor latents but {} values",
            donor_high.len(),
            donor_values.len()
        )));
    }
    if let Some(&bad) = own_high.iter().chain(donor_high).find(|&&c| c >= h.cols()) {
        return Err(Error::Index { index: bad, limit: h.cols() });
    }
    for r in 0..h.rows() {
        let row = h.row_mut(r);
        for &c in own_high {
            row[c] = 0.0;
        }
        for (&c, &v) in donor_high.iter().zip(donor_values) {
            row[c] = v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteerOutcome {
    pub report: SteerReport,
    /// Pairs whose unsteered output already overlapped the donor answer.
    pub dropped: usize,
    /// Fraction of BottomK interventions that changed the greedy output.
    pub bottomk_changed: f64,
}

/// Steers every retained pair for each method, set kind and K; target and donor share K.
#[allow(clippy::too_many_arguments)]
pub fn run_local_steering(
    prepared: &[Prepared],
    pairs: &[SteerPair],
    lm: &LMParams,
    sae: &SAEParams,
    vocab: &Vocab,
    methods: &[Method],
    k_grid: &[KSpec],
    mode: ValueMode,
) -> Result<SteerOutcome> {
    type Row = Option<((f64, f64), ItemOutcomes, (usize, usize))>;
    let rows: Vec<Row> = pairs
        .par_iter()
        .map(|pair| {
            let (t, d) = (&prepared[pair.target], &prepared[pair.donor]);
            let donor_gold = &d.example.gold;
            let plain = lm.greedy_decode(&t.example.prompt, DECODE_MAX_LEN, vocab.eos(), Some(sae))?;
            let (plain_text, em0, f10) = score_decode(&plain, vocab, donor_gold);
            if em0 != 0.0 || f10 != 0.0 {
                return Ok(None);
            }
            let mut cells = Vec::new();
            let mut changed = (0usize, 0usize);
            for &m in methods {
                for &k in k_grid {
                    let sels = match (t.select(m, k, mode), d.select(m, k, mode)) {
                        (Ok(a), Ok(b)) => Some((a, b)),
                        (Err(Error::EmptySelection), _) | (_, Err(Error::EmptySelection)) => None,
                        (Err(e), _) | (_, Err(e)) => return Err(e),
                    };
                    for kind in SetKind::ALL {
                        let outcome = match &sels {
                            None => None,
                            Some((own, donor)) => {
                                let own_idx = kind.pick(own);
                                let donor_idx = kind.pick(donor);
                                let values: Vec<f64> = donor_idx.iter().map(|c| donor.values[c]).collect();
                                let out = lm.greedy_decode_edited(
                                    &t.example.prompt,
                                    DECODE_MAX_LEN,
                                    vocab.eos(),
                                    sae,
                                    &|h| inject_in_place(h, own_idx, donor_idx, &values),
                                )?;
                                let (text, em, f1) = score_decode(&out, vocab, donor_gold);
                                if kind == SetKind::BottomK {
                                    changed.1 += 1;
                                    changed.0 += usize::from(text != plain_text);
                                }
                                Some((em, f1))
                            }
                        };
                        cells.push(((m, kind, k), outcome));
                    }
                }
            }
            Ok(Some(((em0, f10), cells, changed)))
        })
        .collect::<Result<_>>()?;
    let dropped = rows.iter().filter(|r| r.is_none()).count();
    let kept: Vec<_> = rows.into_iter().flatten().collect();
    let (changed, total) = kept.iter().fold((0, 0), |acc, r| (acc.0 + r.2 .0, acc.1 + r.2 .1));
    let untouched: Vec<(f64, f64)> = kept.iter().map(|r| r.0).collect();
    let report = collect_report(
        "local steering",
        methods,
        k_grid,
        untouched.into_iter(),
        kept.into_iter().map(|r| r.1).collect(),
    );
    Ok(SteerOutcome {
        report,
        dropped,
        bottomk_changed: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
    })
}
