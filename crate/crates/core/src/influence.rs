//! Latent influence scores, the exact-ablation oracle, and Top-K/Bottom-K selection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::numcore::Matrix;
use crate::sae::half_k;
use crate::toylm::AnswerScorer;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    GradSae,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Baseline, Method::GradSae];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradSae => "gradsae",
            Method::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradsae" => Ok(Method::GradSae),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!("unknown method {other:?} (gradsae | baseline)"))),
        }
    }
}

/// Per-token latent influences G (N×C).
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMatrix(pub Matrix);

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceVector {
    pub g: Vec<f64>,
    pub method: Method,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum KSpec {
    Fixed(usize),
    /// Half the active latents of the last prompt token, rounded up, at least 1.
    HalfNonzero,
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Fixed(k) => write!(f, "{k}"),
            KSpec::HalfNonzero => f.write_str("50%"),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half" | "50%" => Ok(KSpec::HalfNonzero),
            _ => s
                .parse()
                .ok()
                .filter(|&k| k > 0)
                .map(KSpec::Fixed)
                .ok_or_else(|| Error::Config(format!("bad K {s:?} (positive count or half)"))),
        }
    }
}

/// Which activation scalar accompanies a selected latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueMode {
    Mean,
    LastToken,
}

impl FromStr for ValueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ValueMode::Mean),
            "last" => Ok(ValueMode::LastToken),
            other => Err(Error::Config(format!("unknown value mode {other:?} (mean | last)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSelection {
    pub z_high: Vec<usize>,
    pub z_low: Vec<usize>,
    pub k: usize,
    /// Activation value for every latent in z_high ∪ z_low.
    pub values: BTreeMap<usize, f64>,
}

/// G = (∂objective/∂H) ⊙ H at the reference latents.
pub fn grad_influence(scorer: &AnswerScorer<'_>) -> Result<InfluenceMatrix> {
    let h = scorer.prompt_latents();
    let (_, grad) = scorer.value_and_grad(&h)?;
    Ok(InfluenceMatrix(influence_from_grad(&grad, &h)?))
}

/// Elementwise grad ⊙ H with exact zeros wherever H is zero.
pub fn influence_from_grad(grad: &Matrix, h: &Matrix) -> Result<Matrix> {
    if grad.shape() != h.shape() {
        return Err(Error::Shape { op: "influence", left: grad.shape(), right: h.shape() });
    }
    let data = grad
        .data()
        .iter()
        .zip(h.data())
        .map(|(&d, &a)| if a == 0.0 { 0.0 } else { d * a })
        .collect();
    Matrix::from_vec(h.rows(), h.cols(), data)
}

/// objective(H) − objective(H with entry (n, c) zeroed).
pub fn exact_ablation(scorer: &AnswerScorer<'_>, h: &Matrix, n: usize, c: usize) -> Result<f64> {
    check_entry(h, n, c)?;
    if h.get(n, c) == 0.0 {
        return Ok(0.0);
    }
    let mut ablated = h.clone();
    ablated.set(n, c, 0.0);
    Ok(scorer.value(h)? - scorer.value(&ablated)?)
}

/// objective(H) − objective(H with latent c zeroed at every token).
pub fn column_ablation(scorer: &AnswerScorer<'_>, h: &Matrix, c: usize) -> Result<f64> {
    check_entry(h, 0, c)?;
    let mut ablated = h.clone();
    for n in 0..h.rows() {
        ablated.set(n, c, 0.0);
    }
    Ok(scorer.value(h)? - scorer.value(&ablated)?)
}

fn check_entry(h: &Matrix, n: usize, c: usize) -> Result<()> {
    if n >= h.rows() {
        return Err(Error::Index { index: n, limit: h.rows() });
    }
    if c >= h.cols() {
        return Err(Error::Index { index: c, limit: h.cols() });
    }
    Ok(())
}

pub const DEFAULT_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq)]
pub struct TaylorReport {
    pub median_ratio: f64,
    /// error(s/2)/error(s) for every sample and consecutive scale pair.
    pub ratios: Vec<f64>,
    /// Ratios forced to 0 because error(s) was at roundoff level.
    pub linear: usize,
    /// Fraction of samples where the full ablation Δ and g agree in sign.
    pub sign_agreement: f64,
}

/// First-order check: for each sampled entry and scale s, compares
/// f(H) − f(H with H[n,c]·(1−s)) against g[n,c]·s and reports how the error
/// shrinks as s halves (≈ 0.25 for a smooth f).
pub fn taylor_convergence(
    f: impl Fn(&Matrix) -> Result<f64>,
    h: &Matrix,
    g: &Matrix,
    samples: &[(usize, usize)],
    scales: &[f64],
) -> Result<TaylorReport> {
    if samples.is_empty() || scales.len() < 2 {
        return Err(Error::Input("taylor convergence needs samples and at least two scales".into()));
    }
    let base = f(h)?;
    let mut ratios = Vec::new();
    let mut linear = 0;
    let mut agree = 0;
    for &(n, c) in samples {
        check_entry(h, n, c)?;
        if h.get(n, c) <= 0.0 {
            return Err(Error::Input(format!("sample ({n}, {c}) is not an active entry")));
        }
        let gnc = g.get(n, c);
        let mut errors = Vec::with_capacity(scales.len());
        for (i, &s) in scales.iter().enumerate() {
            let mut moved = h.clone();
            moved.set(n, c, h.get(n, c) * (1.0 - s));
            let delta = base - f(&moved)?;
            if i == 0 && (delta > 0.0) == (gnc > 0.0) {
                agree += 1;
            }
            errors.push(((delta - gnc * s).abs(), base.abs().max(delta.abs())));
        }
        for w in errors.windows(2) {
            let (e, magnitude) = w[0];
            if e <= 1e-11 * (1.0 + magnitude) {
                ratios.push(0.0);
                linear += 1;
            } else {
                ratios.push(w[1].0 / e);
            }
        }
    }
    Ok(TaylorReport {
        median_ratio: median(&ratios),
        ratios,
        linear,
        sign_agreement: agree as f64 / samples.len() as f64,
    })
}

/// Uniform draw (with replacement) of entries where H > 0.
pub fn sample_active_entries(h: &Matrix, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let active: Vec<(usize, usize)> = (0..h.rows())
        .flat_map(|n| (0..h.cols()).map(move |c| (n, c)))
        .filter(|&(n, c)| h.get(n, c) > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::Input("no active latent entries to sample".into()));
    }
    Ok((0..count).map(|_| *active.choose(rng).expect("nonempty")).collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// g_c = mean over tokens of G[n, c].
pub fn aggregate(g: &InfluenceMatrix) -> Result<InfluenceVector> {
    nonempty(&g.0)?;
    Ok(InfluenceVector { g: g.0.column_means(), method: Method::GradSae })
}

/// g_c = mean over tokens of H[n, c].
pub fn baseline_influence(h: &Matrix) -> Result<InfluenceVector> {
    nonempty(h)?;
    Ok(InfluenceVector { g: h.column_means(), method: Method::Baseline })
}

fn nonempty(m: &Matrix) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::Input("influence needs at least one token row".into()));
    }
    Ok(())
}

/// Top-k and bottom-k of the strictly positive entries of `g` under the order
/// (g descending, index ascending); `z_low` lists the smallest first.
pub fn select(g: &InfluenceVector, k_spec: KSpec, h: &Matrix, mode: ValueMode) -> Result<LatentSelection> {
    if g.g.len() != h.cols() || h.rows() == 0 {
        return Err(Error::Shape { op: "select", left: (1, g.g.len()), right: h.shape() });
    }
    let mut nz: Vec<usize> = (0..g.g.len()).filter(|&c| g.g[c] > 0.0).collect();
    if nz.is_empty() {
        return Err(Error::EmptySelection);
    }
    let k = match k_spec {
        KSpec::Fixed(k) => k,
        KSpec::HalfNonzero => half_k(h.row_nonzero(h.rows() - 1)),
    };
    let take = k.min(nz.len());
    // one total order for both ends keeps the two sets disjoint under ties
    nz.sort_by(|&a, &b| g.g[b].total_cmp(&g.g[a]).then(a.cmp(&b)));
    let z_high = nz[..take].to_vec();
    let z_low: Vec<usize> = nz.iter().rev().take(take).copied().collect();
    let n = h.rows() as f64;
    let value = |c: usize| match mode {
        ValueMode::Mean => (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / n,
        ValueMode::LastToken => h.get(h.rows() - 1, c),
    };
    let values = z_high.iter().chain(&z_low).map(|&c| (c, value(c))).collect();
    Ok(LatentSelection { z_high, z_low, k, values })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let m = (x.len() - 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - m) * (b - m);
        sxx += (a - m) * (a - m);
        syy += (b - m) * (b - m);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    example_id: &'a str,
    method: &'static str,
    latent_id: usize,
    g_c: f64,
}

/// One JSON line per nonzero latent score.
pub fn write_influence_dump(out: &mut impl Write, example_id: &str, v: &InfluenceVector) -> Result<()> {
    for (c, &g) in v.g.iter().enumerate() {
        if g != 0.0 {
            let rec = DumpRecord { example_id, method: v.method.as_str(), latent_id: c, g_c: g };
            serde_json::to_writer(&mut *out, &rec).map_err(|e| Error::Input(e.to_string()))?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
