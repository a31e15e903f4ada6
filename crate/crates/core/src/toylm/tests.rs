use super::*;
use crate::numcore::grad_check;

fn tiny() -> LMConfig {
    LMConfig {
        vocab_size: 8,
        dim: 8,
        layers: 2,
        heads: 2,
        context_len: 16,
        hook_layer: 1,
        mlp_mult: 2,
    }
}

fn lm() -> LMParams {
    LMParams::init(&tiny(), 3).unwrap()
}

/// `ReLU(z)·I − ReLU(−z)·I = z`, so splicing through it is lossless.
fn lossless_sae(d: usize) -> SAEParams {
    let mut enc = Matrix::zeros(d, 2 * d);
    let mut dec = Matrix::zeros(2 * d, d);
    for i in 0..d {
        enc.set(i, i, 1.0);
        enc.set(i, d + i, -1.0);
        dec.set(i, i, 1.0);
        dec.set(d + i, i, -1.0);
    }
    SAEParams::new(enc, dec).unwrap()
}

fn random_sae(d: usize, c: usize, seed: u64) -> SAEParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut draw = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let enc = draw(d, c);
    let dec = draw(c, d);
    SAEParams::new(enc, dec).unwrap()
}

#[test]
fn forward_shapes() {
    let m = lm();
    let (logits, z) = m.forward_with_hook(&TokenSeq::prompt(vec![1, 2, 3, 4, 5])).unwrap();
    assert_eq!(logits.shape(), (5, 8));
    assert_eq!(z.shape(), (5, 8));
    assert_eq!(m.hidden(&[1, 2, 3, 4, 5]).unwrap(), z);
}

#[test]
fn init_is_seeded() {
    assert_eq!(LMParams::init(&tiny(), 3).unwrap(), lm());
    assert_ne!(LMParams::init(&tiny(), 4).unwrap(), lm());
}

#[test]
fn rejects_bad_ids_and_lengths() {
    let m = lm();
    assert!(matches!(m.hidden(&[8]), Err(Error::Vocab { id: 8, vocab: 8 })));
    assert!(matches!(m.hidden(&[1; 17]), Err(Error::Length { len: 17, max: 16 })));
    assert!(m.with_hook_layer(0).is_err());
    assert!(m.with_hook_layer(3).is_err());
    assert_eq!(m.with_hook_layer(2).unwrap().config.hook_layer, 2);
}

#[test]
fn causal() {
    let m = lm();
    let (a, _) = m.forward_with_hook(&TokenSeq::prompt(vec![1, 2, 3, 4])).unwrap();
    let (b, _) = m.forward_with_hook(&TokenSeq::prompt(vec![1, 2, 3, 7])).unwrap();
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn lossless_splice_matches_plain_forward() {
    let m = lm();
    let sae = lossless_sae(8);
    let ids = [1, 5, 2, 6, 3];
    let (plain, _) = m.forward_with_hook(&TokenSeq::prompt(ids.to_vec())).unwrap();
    let spliced = m.forward_spliced(&ids, &m.latents(&ids, &sae).unwrap(), &sae).unwrap();
    assert!(plain.max_abs_diff(&spliced) < 1e-12);
    for layer in [1, 2] {
        let m = m.with_hook_layer(layer).unwrap();
        let prompt = TokenSeq::prompt(ids.to_vec());
        assert_eq!(
            m.greedy_decode(&prompt, 4, 0, None).unwrap(),
            m.greedy_decode(&prompt, 4, 0, Some(&sae)).unwrap()
        );
    }
}

#[test]
fn noop_edit_is_bitwise_identical() {
    let m = lm();
    let sae = random_sae(8, 12, 1);
    let prompt = TokenSeq::prompt(vec![2, 3, 4]);
    let a = m.greedy_decode(&prompt, 5, 0, Some(&sae)).unwrap();
    let b = m.greedy_decode_edited(&prompt, 5, 0, &sae, &|_| Ok(())).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.prompt_ids(), &[2, 3, 4]);
}

#[test]
fn zero_embeddings_give_uniform_objective() {
    let mut m = lm();
    m.tok_emb = Matrix::zeros(8, 8);
    let sae = random_sae(8, 6, 2);
    let x = TokenSeq::prompt(vec![1, 2, 3]);
    let h = m.latents(x.prompt_ids(), &sae).unwrap();
    let v = m.objective(&x, &[4, 5], &h, &sae).unwrap();
    assert!((v - 2.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12, "{v}");
}

#[test]
fn constant_logits_decode() {
    // final norm with zero gain outputs its bias at every position
    let mut m = lm();
    m.lnf_g = Matrix::zeros(1, 8);
    m.lnf_b = Matrix::row_vector(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    m.tok_emb = Matrix::zeros(8, 8);
    m.tok_emb.set(5, 3, 2.0);
    let out = m.greedy_decode(&TokenSeq::prompt(vec![1, 2]), 3, 0, None).unwrap();
    assert_eq!(out.answer_ids(), &[5, 5, 5]);
    let stop = m.greedy_decode(&TokenSeq::prompt(vec![1, 2]), 3, 5, None).unwrap();
    assert!(stop.answer_ids().is_empty());
    assert!(m.greedy_decode(&TokenSeq::prompt(vec![1]), 0, 0, None).is_err());
    // the context limit ends decoding
    let long = m.greedy_decode(&TokenSeq::prompt(vec![1; 14]), 8, 0, None).unwrap();
    assert_eq!(long.answer_len, 2);
}

#[test]
fn saturated_answer_has_near_zero_objective() {
    let mut m = lm();
    m.lnf_g = Matrix::zeros(1, 8);
    m.lnf_b = Matrix::row_vector(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    m.tok_emb = Matrix::zeros(8, 8);
    m.tok_emb.set(5, 3, 40.0);
    let sae = random_sae(8, 6, 2);
    let x = TokenSeq::prompt(vec![1, 2]);
    let h = m.latents(x.prompt_ids(), &sae).unwrap();
    let v = m.objective(&x, &[5, 5], &h, &sae).unwrap();
    assert!(v <= 0.0 && v > -1e-15, "{v}");
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let m = lm();
    let sae = random_sae(8, 10, 5);
    let scorer = AnswerScorer::new(&m, &sae, &[1, 4, 2, 6], &[3, 7]).unwrap();
    let mut h = scorer.prompt_latents();
    for v in h.data_mut() {
        *v += 0.1;
    }
    let err = grad_check(|t, x| scorer.on_tape(t, x), &h, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
    let (value, grad) = scorer.value_and_grad(&h).unwrap();
    assert_eq!(value, scorer.value(&h).unwrap());
    assert_eq!(grad.shape(), h.shape());
}

#[test]
fn scorer_rejects_bad_shapes() {
    let m = lm();
    let sae = random_sae(8, 10, 5);
    assert!(AnswerScorer::new(&m, &sae, &[], &[1]).is_err());
    assert!(AnswerScorer::new(&m, &sae, &[1], &[]).is_err());
    let s = AnswerScorer::new(&m, &sae, &[1, 2], &[3]).unwrap();
    assert!(s.value(&Matrix::zeros(3, 10)).is_err());
    assert!(s.value(&Matrix::zeros(2, 9)).is_err());
    let wrong_dim = random_sae(4, 10, 5);
    assert!(m.forward_spliced(&[1, 2], &Matrix::zeros(2, 10), &wrong_dim).is_err());
}

#[test]
fn answer_rows_use_reference_latents() {
    // the objective only sees prompt rows, so it matches a full spliced forward
    let m = lm();
    let sae = random_sae(8, 10, 9);
    let prompt = [1u32, 2, 3];
    let answer = [4u32, 5];
    let full: Vec<u32> = [1, 2, 3, 4].to_vec();
    let h_full = m.latents(&full, &sae).unwrap();
    let logits = m.forward_spliced(&full, &h_full, &sae).unwrap();
    let lp = |r: usize, t: usize| {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row[t] - mx - row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    let want = lp(2, 4) + lp(3, 5);
    let x = TokenSeq::prompt(prompt.to_vec());
    let got = m.objective(&x, &answer, &h_full.slice_rows(0, 3), &sae).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn packed_example_targets() {
    let ex = LMExample::packed(&[1, 2], &[(&[3], &[4, 0]), (&[5], &[6, 0])]);
    assert_eq!(ex.ids, vec![1, 2, 3, 4, 0, 5, 6, 0]);
    assert_eq!(ex.targets, vec![3, 4, 6, 7]);
    let single = LMExample::single(&[1, 2], &[3, 0]);
    assert_eq!(single.targets, vec![2, 3]);
}

#[test]
fn batch_loss_validates_targets() {
    let m = lm();
    let bad = [
        LMExample { ids: vec![1, 2], targets: vec![0] },
        LMExample { ids: vec![1, 2], targets: vec![] },
        LMExample { ids: vec![1, 2, 3], targets: vec![2, 1] },
        LMExample { ids: vec![1, 2], targets: vec![2] },
    ];
    for ex in &bad {
        assert!(batch_loss_and_grads(&m, &[ex]).is_err(), "{ex:?}");
    }
}

#[test]
fn untrained_loss_near_log_vocab() {
    let m = lm();
    let ex = LMExample::single(&[1, 2, 3], &[4, 5, 0]);
    let loss = eval_loss(&m, &[ex]).unwrap();
    assert!((loss - 8f64.ln()).abs() < 1.5, "{loss}");
}

fn copy_corpus() -> Vec<LMExample> {
    // answer repeats the second prompt token
    (1..7u32)
        .flat_map(|a| (1..7u32).map(move |b| LMExample::single(&[a, b, 7], &[b, 0])))
        .collect()
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let corpus = copy_corpus();
    let tc = LMTrainConfig {
        steps: 60,
        batch_size: 8,
        lr: 1e-2,
        warmup: 5,
        clip: 1.0,
        seed: 11,
    };
    let before = eval_loss(&LMParams::init(&tiny(), 11).unwrap(), &corpus).unwrap();
    let mut seen = Vec::new();
    let a = train_lm(&corpus, &tiny(), &tc, |p| seen.push(p.step)).unwrap();
    let b = train_lm(&corpus, &tiny(), &tc, |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(seen, (0..60).collect::<Vec<_>>());
    let after = eval_loss(&a, &corpus).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert!(train_lm(&[], &tiny(), &tc, |_| {}).is_err());
}

#[test]
fn tensors_roundtrip() {
    let m = lm();
    let names = m.tensor_names();
    assert_eq!(names.len(), 4 + 2 * 13);
    assert_eq!(names.last().unwrap(), "block1.k_smear");
    let copy = LMParams::from_tensors(&m.config, m.tensors().into_iter().cloned().collect()).unwrap();
    assert_eq!(copy, m);
    assert!(LMParams::from_tensors(&m.config, vec![]).is_err());
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0]), 0);
}
