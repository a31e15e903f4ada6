//! A small causal transformer whose layer-`l` residual stream can be read
//! out and replaced by an SAE reconstruction.
//!
//! Architecture: learned token and position embeddings, pre-norm blocks
//! (multi-head causal attention, GELU MLP), a final layer norm and an
//! unembedding tied to the token embedding table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Segment, Tape, Var};
use crate::optim::{clip_global_norm, warmup_cosine, Adam};
use crate::sae::SAEParams;

/// Token ids with the prompt/answer boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub prompt_len: usize,
    pub answer_len: usize,
}

impl TokenSeq {
    pub fn prompt(ids: Vec<u32>) -> Self {
        let n = ids.len();
        Self {
            ids,
            prompt_len: n,
            answer_len: 0,
        }
    }

    pub fn with_answer(prompt: &[u32], answer: &[u32]) -> Self {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(answer);
        Self {
            ids,
            prompt_len: prompt.len(),
            answer_len: answer.len(),
        }
    }

    pub fn prompt_ids(&self) -> &[u32] {
        &self.ids[..self.prompt_len]
    }

    pub fn answer_ids(&self) -> &[u32] {
        &self.ids[self.prompt_len..self.prompt_len + self.answer_len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    /// 1-based index of the block whose output is the hooked residual stream.
    pub hook_layer: usize,
    pub mlp_mult: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            dim: 64,
            layers: 2,
            heads: 4,
            context_len: 160,
            hook_layer: 1,
            mlp_mult: 4,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.vocab_size > 512 {
            return bad(format!("vocab_size {} outside 1..=512", self.vocab_size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.layers == 0 || self.hook_layer == 0 || self.hook_layer > self.layers {
            return bad(format!("hook layer {} outside 1..={}", self.hook_layer, self.layers));
        }
        if self.context_len == 0 || self.mlp_mult == 0 {
            return bad("context_len and mlp_mult must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Per-column weight of the previous position's key added to each key.
    pub k_smear: Matrix,
}

const BLOCK_LEN: usize = 13;
const BLOCK_TENSORS: [&str; BLOCK_LEN] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2", "k_smear",
];
const HEAD_TENSORS: usize = 4;

impl Block {
    fn parts(&self) -> [&Matrix; BLOCK_LEN] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g, &self.ln2_b,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.k_smear,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Matrix; BLOCK_LEN] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.k_smear,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LMParams {
    pub config: LMConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub blocks: Vec<Block>,
}

/// Parameter handles on a tape, in [`LMParams::tensors`] order.
struct Bound(Vec<Var>);

impl Bound {
    fn tok(&self) -> Var {
        self.0[0]
    }
    fn pos(&self) -> Var {
        self.0[1]
    }
    fn lnf(&self) -> (Var, Var) {
        (self.0[2], self.0[3])
    }
    fn block(&self, i: usize) -> &[Var] {
        let base = HEAD_TENSORS + BLOCK_LEN * i;
        &self.0[base..base + BLOCK_LEN]
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Learned position table starts from sinusoids so fixed offsets are linear maps.
fn sinusoidal(rows: usize, cols: usize, amplitude: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for p in 0..rows {
        for i in 0..cols / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / cols as f64);
            m.set(p, 2 * i, amplitude * (p as f64 * freq).sin());
            m.set(p, 2 * i + 1, amplitude * (p as f64 * freq).cos());
        }
    }
    m
}

fn to_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

impl LMParams {
    pub fn init(config: &LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let hidden = d * config.mlp_mult;
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / ((2 * config.layers) as f64).sqrt();
        let tok_emb = normal(config.vocab_size, d, 0.3, &mut rng);
        let pos_emb = sinusoidal(config.context_len, d, 0.5);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: Matrix::filled(1, d, 1.0),
                ln1_b: Matrix::zeros(1, d),
                wq: normal(d, d, proj, &mut rng),
                wk: normal(d, d, proj, &mut rng),
                wv: normal(d, d, proj, &mut rng),
                wo: normal(d, d, resid, &mut rng),
                ln2_g: Matrix::filled(1, d, 1.0),
                ln2_b: Matrix::zeros(1, d),
                w1: normal(d, hidden, proj, &mut rng),
                b1: Matrix::zeros(1, hidden),
                w2: normal(hidden, d, resid / 2.0, &mut rng),
                b2: Matrix::zeros(1, d),
                k_smear: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
            blocks,
        })
    }

    /// Same weights, hooked at a different block output.
    pub fn with_hook_layer(&self, hook_layer: usize) -> Result<Self> {
        let config = LMConfig { hook_layer, ..self.config.clone() };
        config.validate()?;
        Ok(Self { config, ..self.clone() })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.lnf_g, &self.lnf_b];
        for b in &self.blocks {
            out.extend(b.parts());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.lnf_g, &mut self.lnf_b];
        for b in &mut self.blocks {
            out.extend(b.parts_mut());
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["tok_emb", "pos_emb", "lnf_g", "lnf_b"].map(String::from).to_vec();
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_TENSORS.iter().map(|n| format!("block{i}.{n}")));
        }
        out
    }

    /// Rebuilds parameters from tensors in [`Self::tensor_names`] order.
    pub fn from_tensors(config: &LMConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let mut shell = Self::init(config, 0)?;
        if tensors.len() != shell.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shell.tensors().len(),
                tensors.len()
            )));
        }
        for ((slot, t), name) in shell.tensors_mut().into_iter().zip(tensors).zip(config_names(config)) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(shell)
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        Bound(
            self.tensors()
                .into_iter()
                .map(|m| if trainable { tape.var_ref(m) } else { tape.constant_ref(m) })
                .collect(),
        )
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.context_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id: bad as usize,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<'_>, p: &Bound, ids: &[usize], segs: &[Segment]) -> Result<Var> {
        let tok = tape.gather(p.tok(), ids)?;
        let positions: Vec<usize> = segs.iter().flat_map(|s| 0..s.len).collect();
        let pos = tape.gather(p.pos(), &positions)?;
        tape.add(tok, pos)
    }

    fn block(&self, tape: &mut Tape<'_>, b: &[Var], x: Var, segs: &[Segment]) -> Result<Var> {
        let h = tape.layer_norm(x, b[0], b[1])?;
        let q = tape.matmul(h, b[2])?;
        let k = tape.matmul(h, b[3])?;
        let k = tape.smear_rows(k, b[12], segs)?;
        let v = tape.matmul(h, b[4])?;
        let a = tape.causal_attention(q, k, v, self.config.heads, segs)?;
        let o = tape.matmul(a, b[5])?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, b[6], b[7])?;
        let m = tape.matmul(h, b[8])?;
        let m = tape.add_row(m, b[9])?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, b[10])?;
        let m = tape.add_row(m, b[11])?;
        tape.add(x, m)
    }

    fn unembed(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let (g, b) = p.lnf();
        let h = tape.layer_norm(x, g, b)?;
        tape.matmul_nt(h, p.tok())
    }

    fn run_blocks(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        mut x: Var,
        layers: std::ops::Range<usize>,
        segs: &[Segment],
    ) -> Result<Var> {
        for i in layers {
            x = self.block(tape, p.block(i), x, segs)?;
        }
        Ok(x)
    }

    /// Raw forward: logits for every position and the hooked residual stream Z.
    pub fn forward_with_hook(&self, x: &TokenSeq) -> Result<(Matrix, Matrix)> {
        self.check_ids(&x.ids)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let segs = [Segment {
            start: 0,
            len: x.ids.len(),
        }];
        let e = self.embed(&mut tape, &p, &to_usize(&x.ids), &segs)?;
        let l = self.config.hook_layer;
        let z = self.run_blocks(&mut tape, &p, e, 0..l, &segs)?;
        let out = self.run_blocks(&mut tape, &p, z, l..self.config.layers, &segs)?;
        let logits = self.unembed(&mut tape, &p, out)?;
        Ok((tape.value(logits).clone(), tape.value(z).clone()))
    }

    /// The hooked residual stream Z (N×D) for `ids`.
    pub fn hidden(&self, ids: &[u32]) -> Result<Matrix> {
        self.check_ids(ids)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let segs = [Segment {
            start: 0,
            len: ids.len(),
        }];
        let e = self.embed(&mut tape, &p, &to_usize(ids), &segs)?;
        let z = self.run_blocks(&mut tape, &p, e, 0..self.config.hook_layer, &segs)?;
        Ok(tape.value(z).clone())
    }

    /// Logits after replacing Z with `h·W_dec` for the `h` node on `tape`.
    pub fn spliced_logits_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        ids: &[u32],
        h: Var,
        sae: &'a SAEParams,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let (rows, cols) = tape.value(h).shape();
        if rows != ids.len() || cols != sae.latents() || sae.dim() != self.config.dim {
            return Err(Error::Shape {
                op: "forward_spliced",
                left: (rows, cols),
                right: (ids.len(), sae.latents()),
            });
        }
        let p = self.bind(tape, false);
        let w_dec = tape.constant_ref(&sae.w_dec);
        let z_hat = tape.matmul(h, w_dec)?;
        let segs = [Segment {
            start: 0,
            len: ids.len(),
        }];
        let out = self.run_blocks(tape, &p, z_hat, self.config.hook_layer..self.config.layers, &segs)?;
        self.unembed(tape, &p, out)
    }

    /// Forward pass with the layer-`l` stream replaced by `h_override·W_dec`.
    pub fn forward_spliced(&self, ids: &[u32], h_override: &Matrix, sae: &SAEParams) -> Result<Matrix> {
        let mut tape = Tape::new();
        let h = tape.constant_ref(h_override);
        let logits = self.spliced_logits_on(&mut tape, ids, h, sae)?;
        Ok(tape.value(logits).clone())
    }

    /// Reference latents `encode(Z)` for `ids`.
    pub fn latents(&self, ids: &[u32], sae: &SAEParams) -> Result<Matrix> {
        sae.encode(&self.hidden(ids)?)
    }

    /// Argmax decoding; with an SAE every step runs spliced through encode→decode.
    pub fn greedy_decode(&self, prompt: &TokenSeq, max_len: usize, eos: u32, sae: Option<&SAEParams>) -> Result<TokenSeq> {
        match sae {
            Some(sae) => self.greedy_decode_edited(prompt, max_len, eos, sae, &|_| Ok(())),
            None => self.decode_loop(prompt, max_len, eos, |ids| {
                let (logits, _) = self.forward_with_hook(&TokenSeq::prompt(ids.to_vec()))?;
                Ok(logits.row(logits.rows() - 1).to_vec())
            }),
        }
    }

    /// Spliced argmax decoding where `edit` rewrites the full latent matrix
    /// (every row, prompt and generated) before each step's decode.
    pub fn greedy_decode_edited(
        &self,
        prompt: &TokenSeq,
        max_len: usize,
        eos: u32,
        sae: &SAEParams,
        edit: &dyn Fn(&mut Matrix) -> Result<()>,
    ) -> Result<TokenSeq> {
        self.decode_loop(prompt, max_len, eos, |ids| {
            let mut h = self.latents(ids, sae)?;
            edit(&mut h)?;
            let logits = self.forward_spliced(ids, &h, sae)?;
            Ok(logits.row(logits.rows() - 1).to_vec())
        })
    }

    fn decode_loop(
        &self,
        prompt: &TokenSeq,
        max_len: usize,
        eos: u32,
        mut next_logits: impl FnMut(&[u32]) -> Result<Vec<f64>>,
    ) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be at least 1".into()));
        }
        let mut ids = prompt.prompt_ids().to_vec();
        let mut answer = Vec::new();
        for _ in 0..max_len {
            if ids.len() >= self.config.context_len {
                break;
            }
            let logits = next_logits(&ids)?;
            let next = argmax(&logits) as u32;
            if next == eos {
                break;
            }
            ids.push(next);
            answer.push(next);
        }
        Ok(TokenSeq::with_answer(prompt.prompt_ids(), &answer))
    }

    /// Teacher-forced Σ log p(answer token) with the prompt's latents replaced by
    /// `h_override` (N×C); answer positions keep their reference latents.
    pub fn objective(&self, x: &TokenSeq, y: &[u32], h_override: &Matrix, sae: &SAEParams) -> Result<f64> {
        AnswerScorer::new(self, sae, x.prompt_ids(), y)?.value(h_override)
    }
}

fn config_names(config: &LMConfig) -> Vec<String> {
    let mut out: Vec<String> = ["tok_emb", "pos_emb", "lnf_g", "lnf_b"].map(String::from).to_vec();
    for i in 0..config.layers {
        out.extend(BLOCK_TENSORS.iter().map(|n| format!("block{i}.{n}")));
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The teacher-forced answer log-probability as a function of the prompt latents.
///
/// Caches everything that does not depend on the prompt latents so repeated
/// evaluations (ablations, finite differences) only rerun the spliced suffix.
pub struct AnswerScorer<'m> {
    lm: &'m LMParams,
    sae: &'m SAEParams,
    ids: Vec<u32>,
    prompt_len: usize,
    picks: Vec<(usize, usize)>,
    reference: Matrix,
}

impl<'m> AnswerScorer<'m> {
    pub fn new(lm: &'m LMParams, sae: &'m SAEParams, prompt: &[u32], answer: &[u32]) -> Result<Self> {
        if prompt.is_empty() || answer.is_empty() {
            return Err(Error::Input("objective needs a nonempty prompt and answer".into()));
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&answer[..answer.len() - 1]);
        let n = prompt.len();
        let picks = answer.iter().enumerate().map(|(i, &t)| (n - 1 + i, t as usize)).collect();
        let reference = lm.latents(&ids, sae)?;
        Ok(Self {
            lm,
            sae,
            ids,
            prompt_len: n,
            picks,
            reference,
        })
    }

    /// Reference latents of the prompt rows, `encode(Z)`.
    pub fn prompt_latents(&self) -> Matrix {
        self.reference.slice_rows(0, self.prompt_len)
    }

    fn build<'t>(&'t self, tape: &mut Tape<'t>, h: Var) -> Result<Var> {
        let rest = tape.constant(self.reference.slice_rows(self.prompt_len, self.ids.len()));
        let full = tape.concat_rows(h, rest)?;
        let logits = self.lm.spliced_logits_on(tape, &self.ids, full, self.sae)?;
        tape.log_softmax_pick(logits, &self.picks)
    }

    fn check(&self, h: &Matrix) -> Result<()> {
        if h.shape() != (self.prompt_len, self.sae.latents()) {
            return Err(Error::Shape {
                op: "objective",
                left: h.shape(),
                right: (self.prompt_len, self.sae.latents()),
            });
        }
        Ok(())
    }

    pub fn value(&self, h: &Matrix) -> Result<f64> {
        self.check(h)?;
        let mut tape = Tape::new();
        let hv = tape.constant_ref(h);
        let out = self.build(&mut tape, hv)?;
        Ok(tape.value(out).data()[0])
    }

    /// Objective value and its gradient w.r.t. the prompt latents.
    pub fn value_and_grad(&self, h: &Matrix) -> Result<(f64, Matrix)> {
        self.check(h)?;
        let mut tape = Tape::new();
        let hv = tape.var_ref(h);
        let out = self.build(&mut tape, hv)?;
        let value = tape.value(out).data()[0];
        let mut grads = tape.backward(out)?;
        Ok((value, grads.take(hv)))
    }

    /// Builds the objective on a caller's tape, for gradient checking.
    pub fn on_tape<'t>(&'t self, tape: &mut Tape<'t>, h: Var) -> Result<Var> {
        self.check(tape.value(h))?;
        self.build(tape, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LMTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for LMTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
            warmup: 40,
            clip: 1.0,
            seed: 42,
        }
    }
}

/// A training sequence and the positions whose tokens are scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LMExample {
    pub ids: Vec<u32>,
    /// Ascending indices into `ids`, each ≥ 1; ids[t] is predicted from ids[..t].
    pub targets: Vec<usize>,
}

impl LMExample {
    /// Prompt followed by its gold continuation (answer + end token).
    pub fn single(prompt: &[u32], answer: &[u32]) -> Self {
        Self::packed(prompt, &[(&[], answer)])
    }

    /// Shared prefix, then each (question, answer) pair in order; only answer tokens are scored.
    pub fn packed(prefix: &[u32], turns: &[(&[u32], &[u32])]) -> Self {
        let mut ids = prefix.to_vec();
        let mut targets = Vec::new();
        for (q, a) in turns {
            ids.extend_from_slice(q);
            targets.extend(ids.len()..ids.len() + a.len());
            ids.extend_from_slice(a);
        }
        Self { ids, targets }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainProgress {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Mean next-token cross-entropy over scored positions of a batch; returns
/// the loss and one gradient per parameter tensor.
pub fn batch_loss_and_grads(params: &LMParams, batch: &[&LMExample]) -> Result<(f64, Vec<Matrix>)> {
    let (loss, grads) = batch_loss(params, batch, true)?;
    Ok((loss, grads.unwrap_or_default()))
}

fn batch_loss(params: &LMParams, batch: &[&LMExample], with_grads: bool) -> Result<(f64, Option<Vec<Matrix>>)> {
    let mut ids = Vec::new();
    let mut segs = Vec::with_capacity(batch.len());
    let mut picks = Vec::new();
    for ex in batch {
        if ex.targets.is_empty() || ex.targets[0] == 0 || ex.targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("training example needs ascending targets after position 0".into()));
        }
        let last = *ex.targets.last().expect("nonempty");
        if last >= ex.ids.len() {
            return Err(Error::Index { index: last, limit: ex.ids.len() });
        }
        let start = ids.len();
        ids.extend_from_slice(&ex.ids[..last]);
        params.check_ids(&ex.ids)?;
        picks.extend(ex.targets.iter().map(|&t| (start + t - 1, ex.ids[t] as usize)));
        segs.push(Segment {
            start,
            len: ids.len() - start,
        });
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, with_grads);
    let x = params.embed(&mut tape, &p, &to_usize(&ids), &segs)?;
    let x = params.run_blocks(&mut tape, &p, x, 0..params.config.layers, &segs)?;
    let logits = params.unembed(&mut tape, &p, x)?;
    let lp = tape.log_softmax_pick(logits, &picks)?;
    let loss = tape.scale(lp, -1.0 / picks.len() as f64);
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, Some(p.0.iter().map(|&v| grads.take(v)).collect())))
}

/// Trains with Adam on answer-position cross-entropy; deterministic given the seeds.
pub fn train_lm(
    corpus: &[LMExample],
    config: &LMConfig,
    tc: &LMTrainConfig,
    mut progress: impl FnMut(TrainProgress),
) -> Result<LMParams> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = LMParams::init(config, tc.seed)?;
    let mut opt = Adam::new(params.tensors().iter().map(|t| t.shape()));
    opt.beta2 = 0.98;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = batch_loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        clip_global_norm(&mut grads, tc.clip);
        let lr = warmup_cosine(step, tc.steps, tc.warmup, tc.lr, 0.05);
        opt.step(&mut params.tensors_mut(), &grads, lr);
        progress(TrainProgress { step, loss, lr });
    }
    Ok(params)
}

/// Mean cross-entropy over scored positions without updating anything.
pub fn eval_loss(params: &LMParams, examples: &[LMExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(32) {
        let refs: Vec<&LMExample> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|e| e.targets.len()).sum();
        let (loss, _) = batch_loss(params, &refs, false)?;
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests;
