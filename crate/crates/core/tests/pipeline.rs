//! Small end-to-end runs through the library: corpus, LM, SAE, influence,
//! perturbation and steering, checked for structure and determinism.

use gradsae::checkpoint::{lm_checkpoint, lm_from_checkpoint, sae_checkpoint, sae_from_checkpoint, Checkpoint};
use gradsae::datagen::{generate_corpus, CorpusConfig, Lexicon, Vocab};
use gradsae::influence::{column_ablation, grad_influence, KSpec, Method, ValueMode};
use gradsae::numcore::Matrix;
use gradsae::perturb::{encode_examples, mask_latents, prepare_all, run_perturbation, Prepared, SetKind};
use gradsae::sae::{train_sae, SAEParams, SAETrainConfig};
use gradsae::steer::{build_steer_pairs, run_local_steering};
use gradsae::toylm::{train_lm, AnswerScorer, LMConfig, LMParams, LMTrainConfig};

struct World {
    lm: LMParams,
    sae: SAEParams,
    vocab: Vocab,
    prepared: Vec<Prepared>,
}

fn world(seed: u64) -> World {
    let corpus = CorpusConfig { n_groups: 12, questions_per_group: 3, facts_per_context: 3, seed };
    let groups = generate_corpus(&corpus, &Lexicon::default()).unwrap();
    let vocab = Vocab::from_groups(&groups).unwrap();
    let cfg = LMConfig { vocab_size: vocab.len(), dim: 16, heads: 2, context_len: 64, mlp_mult: 2, ..LMConfig::default() };
    let seqs: Vec<_> = groups.iter().map(|g| vocab.encode_group(g).unwrap()).collect();
    let tc = LMTrainConfig { steps: 20, batch_size: 4, warmup: 2, seed, ..LMTrainConfig::default() };
    let lm = train_lm(&seqs, &cfg, &tc, |_| {}).unwrap();
    let parts: Vec<Matrix> = seqs.iter().map(|s| lm.hidden(&s.ids).unwrap()).collect();
    let rows = parts.iter().map(Matrix::rows).sum();
    let acts = Matrix::from_vec(rows, 16, parts.into_iter().flat_map(Matrix::into_vec).collect()).unwrap();
    let sc = SAETrainConfig { latents: 48, steps: 100, batch_size: 32, seed, ..SAETrainConfig::default() };
    let sae = train_sae(&acts, &sc).unwrap();
    let examples = encode_examples(&groups[..4], &vocab).unwrap();
    let prepared = prepare_all(&examples, &lm, &sae).unwrap();
    World { lm, sae, vocab, prepared }
}

const GRID: [KSpec; 3] = [KSpec::Fixed(1), KSpec::Fixed(4), KSpec::HalfNonzero];

#[test]
fn perturbation_report_is_deterministic_and_complete() {
    let (a, b) = (world(5), world(5));
    let run = |w: &World| {
        run_perturbation(&w.prepared, &w.lm, &w.sae, &w.vocab, &Method::ALL, &GRID)
            .unwrap()
            .to_tsv(&["seed=5".into()])
    };
    let (ta, tb) = (run(&a), run(&b));
    assert_eq!(ta, tb);
    let rows: Vec<&str> = ta.lines().filter(|l| !l.starts_with('#')).collect();
    // header plus method × set
    assert_eq!(rows.len(), 1 + 2 * 2);
    assert!(rows[0].starts_with("method\tset\tw/o_task_EM\tw/o_task_F1\tK=1_EM"));
    assert!(rows[0].contains("K=50%_F1"));
    for r in &rows[1..] {
        assert_eq!(r.split('\t').count(), rows[0].split('\t').count());
    }
}

#[test]
fn selections_are_disjoint_and_positive() {
    let w = world(6);
    for p in &w.prepared {
        for m in Method::ALL {
            for k in GRID {
                let Ok(s) = p.select(m, k, ValueMode::Mean) else { continue };
                let g = &p.influence(m).g;
                assert!(s.z_high.iter().chain(&s.z_low).all(|&c| g[c] > 0.0));
                assert!(s.z_high.iter().all(|c| !s.z_low.contains(c)) || 2 * s.k > g.iter().filter(|&&v| v > 0.0).count());
                assert_eq!(SetKind::TopK.pick(&s), s.z_high.as_slice());
            }
        }
    }
}

#[test]
fn influence_is_zero_where_latents_are_inactive() {
    let w = world(7);
    for p in &w.prepared {
        let scorer = AnswerScorer::new(&w.lm, &w.sae, p.example.prompt.prompt_ids(), &p.example.target).unwrap();
        let h = scorer.prompt_latents();
        assert_eq!(h, p.h);
        let g = grad_influence(&scorer).unwrap().0;
        for (hv, gv) in h.data().iter().zip(g.data()) {
            if *hv == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        let dead = (0..h.cols()).find(|&c| (0..h.rows()).all(|n| h.get(n, c) == 0.0));
        if let Some(c) = dead {
            assert_eq!(column_ablation(&scorer, &h, c).unwrap(), 0.0);
        }
    }
}

#[test]
fn masking_everything_matches_zero_override() {
    let w = world(8);
    let ids = w.prepared[0].example.prompt.prompt_ids();
    let h = w.lm.latents(ids, &w.sae).unwrap();
    let all: Vec<usize> = (0..h.cols()).collect();
    let masked = mask_latents(&h, &all).unwrap();
    assert_eq!(masked, Matrix::zeros(h.rows(), h.cols()));
    let a = w.lm.forward_spliced(ids, &masked, &w.sae).unwrap();
    let b = w.lm.forward_spliced(ids, &Matrix::zeros(h.rows(), h.cols()), &w.sae).unwrap();
    assert_eq!(a, b);
}

#[test]
fn steering_runs_on_same_context_pairs() {
    let w = world(9);
    let (pairs, log) = build_steer_pairs(&w.prepared, 9);
    assert!(!pairs.is_empty());
    assert_eq!(pairs.len() + log.skipped.len(), w.prepared.len());
    for p in &pairs {
        assert_eq!(w.prepared[p.target].example.group_id, w.prepared[p.donor].example.group_id);
        assert_ne!(p.target, p.donor);
    }
    let s = run_local_steering(&w.prepared, &pairs, &w.lm, &w.sae, &w.vocab, &Method::ALL, &GRID, ValueMode::Mean).unwrap();
    assert_eq!(s.report.untouched.n + s.dropped, pairs.len());
    assert_eq!(s.report.untouched.em, 0.0);
    assert!((0.0..=1.0).contains(&s.bottomk_changed));
}

#[test]
fn checkpoints_roundtrip_through_files() {
    let w = world(10);
    let dir = tempfile::tempdir().unwrap();
    let (lp, sp) = (dir.path().join("lm.ckpt"), dir.path().join("sae.ckpt"));
    lm_checkpoint(&w.lm, &w.vocab).save(&lp).unwrap();
    sae_checkpoint(&w.sae, 1).save(&sp).unwrap();
    let (lm, vocab) = lm_from_checkpoint(&Checkpoint::load(&lp).unwrap()).unwrap();
    let (sae, layer) = sae_from_checkpoint(&Checkpoint::load(&sp).unwrap()).unwrap();
    assert_eq!((lm, vocab, sae, layer), (w.lm, w.vocab, w.sae, 1));
    assert!(lm_from_checkpoint(&Checkpoint::load(&sp).unwrap()).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
}
