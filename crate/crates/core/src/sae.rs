//! Bias-free sparse autoencoder: `H = ReLU(Z·W_enc)`, `Ẑ = H·W_dec`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape};
use crate::optim::{warmup_cosine, Adam};
use crate::toylm::{LMParams, TokenSeq};

#[derive(Clone, Debug, PartialEq)]
pub struct SAEParams {
    /// D×C
    pub w_enc: Matrix,
    /// C×D
    pub w_dec: Matrix,
}

impl SAEParams {
    pub fn new(w_enc: Matrix, w_dec: Matrix) -> Result<Self> {
        if w_enc.rows() != w_dec.cols() || w_enc.cols() != w_dec.rows() {
            return Err(Error::Shape {
                op: "sae",
                left: w_enc.shape(),
                right: w_dec.shape(),
            });
        }
        Ok(Self { w_enc, w_dec })
    }

    pub fn dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn latents(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn encode(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.dim() {
            return Err(Error::Shape {
                op: "encode",
                left: z.shape(),
                right: self.w_enc.shape(),
            });
        }
        Ok(z.matmul(&self.w_enc)?.map(|x| x.max(0.0)))
    }

    pub fn decode(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.latents() {
            return Err(Error::Shape {
                op: "decode",
                left: h.shape(),
                right: self.w_dec.shape(),
            });
        }
        h.matmul(&self.w_dec)
    }

    /// ‖decode(encode(Z)) − Z‖ / ‖Z‖.
    pub fn relative_error(&self, z: &Matrix) -> Result<f64> {
        let z_hat = self.decode(&self.encode(z)?)?;
        Ok(z_hat.sub(z)?.frobenius_norm() / z.frobenius_norm().max(f64::MIN_POSITIVE))
    }

    /// Mean count of active latents per row of `z`.
    pub fn mean_active(&self, z: &Matrix) -> Result<f64> {
        let h = self.encode(z)?;
        let total: usize = (0..h.rows()).map(|r| h.row_nonzero(r)).sum();
        Ok(total as f64 / h.rows().max(1) as f64)
    }

    fn normalize_decoder(&mut self) {
        for r in 0..self.w_dec.rows() {
            let row = self.w_dec.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SAETrainConfig {
    pub latents: usize,
    /// L1 weight relative to activations rescaled to unit RMS row norm.
    pub l1_coeff: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SAETrainConfig {
    fn default() -> Self {
        Self {
            latents: 512,
            l1_coeff: 0.01,
            steps: 8000,
            batch_size: 128,
            lr: 2e-3,
            seed: 42,
        }
    }
}

/// Fits an SAE to the rows of `activations` by Adam on
/// ‖Z−Ẑ‖² + l1·‖H‖₁, renormalizing decoder rows after every step.
///
/// Rows are rescaled by one global factor so their RMS norm is 1; because the
/// encoder is bias-free and ReLU is positively homogeneous, the fitted weights
/// apply unchanged to unscaled activations.
pub fn train_sae(activations: &Matrix, cfg: &SAETrainConfig) -> Result<SAEParams> {
    let (n, d) = activations.shape();
    if n == 0 || d == 0 {
        return Err(Error::Input("no activations to train on".into()));
    }
    if cfg.l1_coeff.is_nan() || cfg.l1_coeff <= 0.0 {
        return Err(Error::Config(format!("l1_coeff must be positive, got {}", cfg.l1_coeff)));
    }
    if cfg.latents <= d {
        return Err(Error::Config(format!(
            "SAE must be overcomplete: {} latents for dimension {d}",
            cfg.latents
        )));
    }
    let rms = (activations.data().iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let data = activations.scale(1.0 / rms.max(f64::MIN_POSITIVE));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w_dec = Matrix::from_vec(
        cfg.latents,
        d,
        (0..cfg.latents * d).map(|_| normal.sample(&mut rng)).collect(),
    )?;
    let mut sae = SAEParams {
        w_enc: w_dec.transpose(),
        w_dec,
    };
    sae.normalize_decoder();
    sae.w_enc = sae.w_dec.transpose();

    let mut opt = Adam::new([sae.w_enc.shape(), sae.w_dec.shape()]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let bs = cfg.batch_size.min(n).max(1);
    for step in 0..cfg.steps {
        let mut batch = Matrix::zeros(bs, d);
        for r in 0..bs {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.row_mut(r).copy_from_slice(data.row(order[cursor]));
            cursor += 1;
        }
        let (loss, grads) = {
            let mut tape = Tape::new();
            let z = tape.constant(batch);
            let we = tape.var_ref(&sae.w_enc);
            let wd = tape.var_ref(&sae.w_dec);
            let pre = tape.matmul(z, we)?;
            let h = tape.relu(pre);
            let z_hat = tape.matmul(h, wd)?;
            let diff = tape.sub(z_hat, z)?;
            let rec = tape.sum_squares(diff);
            let l1 = tape.sum(h);
            let l1 = tape.scale(l1, cfg.l1_coeff);
            let total = tape.add(rec, l1)?;
            let loss = tape.scale(total, 1.0 / bs as f64);
            let value = tape.value(loss).data()[0];
            let mut g = tape.backward(loss)?;
            (value, [g.take(we), g.take(wd)])
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = warmup_cosine(step, cfg.steps, cfg.steps / 20, cfg.lr, 0.05);
        opt.step(&mut [&mut sae.w_enc, &mut sae.w_dec], &grads, lr);
        sae.normalize_decoder();
    }
    Ok(sae)
}

/// Sparsity summary over a dataset: mean active latents at the last prompt
/// token, and the mean of the resulting half-count K.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub mean_nonzero: f64,
    pub mean_half_k: f64,
    pub examples: usize,
}

/// `max(1, ceil(nonzero / 2))`.
pub fn half_k(nonzero: usize) -> usize {
    nonzero.div_ceil(2).max(1)
}

pub fn activation_stats(prompts: &[TokenSeq], lm: &LMParams, sae: &SAEParams) -> Result<ActivationStats> {
    if prompts.is_empty() {
        return Err(Error::Input("activation statistics need at least one example".into()));
    }
    let counts = prompts
        .iter()
        .map(|p| {
            let h = lm.latents(p.prompt_ids(), sae)?;
            Ok(h.row_nonzero(h.rows() - 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_from_counts(&counts))
}

pub fn stats_from_counts(counts: &[usize]) -> ActivationStats {
    let n = counts.len().max(1) as f64;
    ActivationStats {
        mean_nonzero: counts.iter().sum::<usize>() as f64 / n,
        mean_half_k: counts.iter().map(|&c| half_k(c) as f64).sum::<f64>() / n,
        examples: counts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> SAEParams {
        SAEParams::new(
            Matrix::from_rows(&[[1.0, -1.0], [0.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[[0.5, 0.5], [1.0, -1.0]]).unwrap(),
        )
        .unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encode_examples() {
        let sae = toy();
        assert_eq!(sae.encode(&Matrix::zeros(3, 2)).unwrap(), Matrix::zeros(3, 2));
        let h = sae.encode(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(h.data(), &[1.0, 0.0]);
        assert!(sae.encode(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn decode_examples() {
        let sae = toy();
        assert_eq!(sae.decode(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let h = Matrix::from_rows(&[[0.0, 3.0]]).unwrap();
        assert_eq!(sae.decode(&h).unwrap().data(), &[3.0, -3.0]);
        assert!(sae.decode(&Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn encode_is_nonnegative() {
        let enc = random(4, 16, 1);
        let sae = SAEParams::new(enc.clone(), enc.transpose()).unwrap();
        let h = sae.encode(&random(30, 4, 2)).unwrap();
        assert!(h.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn decode_is_linear() {
        let sae = SAEParams::new(random(4, 16, 3), random(16, 4, 4)).unwrap();
        let (h1, h2) = (random(5, 16, 5), random(5, 16, 6));
        let (a, b) = (0.7, -1.3);
        let mixed = h1.scale(a).add(&h2.scale(b)).unwrap();
        let lhs = sae.decode(&mixed).unwrap();
        let rhs = sae.decode(&h1).unwrap().scale(a).add(&sae.decode(&h2).unwrap().scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn zeroing_a_column_is_a_rank_one_update() {
        let sae = SAEParams::new(random(4, 16, 7), random(16, 4, 8)).unwrap();
        let h = sae.encode(&random(6, 4, 9)).unwrap();
        let c = (0..16).find(|&c| (0..6).any(|r| h.get(r, c) > 0.0)).unwrap();
        let mut masked = h.clone();
        (0..6).for_each(|r| masked.set(r, c, 0.0));
        let delta = sae.decode(&masked).unwrap().sub(&sae.decode(&h).unwrap()).unwrap();
        for r in 0..6 {
            for j in 0..4 {
                let expected = -h.get(r, c) * sae.w_dec.get(c, j);
                assert!((delta.get(r, j) - expected).abs() < 1e-12);
            }
        }
    }

    fn sparse_data(seed: u64) -> Matrix {
        // rows are sparse nonnegative combinations of 12 fixed directions
        let dirs = random(12, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut out = Matrix::zeros(400, 8);
        for r in 0..400 {
            for _ in 0..2 {
                let k = rng.random_range(0..12);
                let w = rng.random_range(0.5..2.0);
                for (o, d) in out.row_mut(r).iter_mut().zip(dirs.row(k)) {
                    *o += w * d;
                }
            }
        }
        out
    }

    fn quick(l1: f64) -> SAETrainConfig {
        SAETrainConfig {
            latents: 32,
            l1_coeff: l1,
            steps: 400,
            batch_size: 64,
            lr: 5e-3,
            seed: 42,
        }
    }

    #[test]
    fn training_reconstructs_and_keeps_unit_decoder_rows() {
        let data = sparse_data(10);
        let sae = train_sae(&data, &quick(0.01)).unwrap();
        assert!(sae.relative_error(&data).unwrap() < 0.3);
        for r in 0..sae.latents() {
            let n: f64 = sae.w_dec.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = sparse_data(11);
        let cfg = SAETrainConfig { steps: 50, ..quick(0.01) };
        assert_eq!(train_sae(&data, &cfg).unwrap(), train_sae(&data, &cfg).unwrap());
    }

    #[test]
    fn stronger_l1_means_fewer_active_latents() {
        let data = sparse_data(12);
        let active: Vec<f64> = [0.003, 0.03, 0.3]
            .iter()
            .map(|&l1| train_sae(&data, &quick(l1)).unwrap().mean_active(&data).unwrap())
            .collect();
        assert!(active[0] > active[1] && active[1] > active[2], "{active:?}");
    }

    #[test]
    fn training_rejects_bad_config() {
        let data = sparse_data(13);
        assert!(train_sae(&data, &quick(0.0)).is_err());
        assert!(train_sae(&data, &SAETrainConfig { latents: 8, ..quick(0.1) }).is_err());
        assert!(train_sae(&Matrix::zeros(0, 8), &quick(0.1)).is_err());
    }

    #[test]
    fn half_k_rounds_up() {
        assert_eq!(half_k(10), 5);
        assert_eq!(half_k(7), 4);
        assert_eq!(half_k(0), 1);
        let s = stats_from_counts(&[0, 0]);
        assert_eq!(s.mean_nonzero, 0.0);
        let s = stats_from_counts(&[10, 7]);
        assert_eq!((s.mean_nonzero, s.mean_half_k), (8.5, 4.5));
    }
}
