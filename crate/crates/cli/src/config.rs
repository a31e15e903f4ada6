//! Run configuration: a `key = value` text file plus overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gradsae::datagen::CorpusConfig;
use gradsae::influence::{KSpec, Method, ValueMode};
use gradsae::sae::SAETrainConfig;
use gradsae::toylm::{LMConfig, LMTrainConfig};
use gradsae::{Error, Result};

pub const REPORT_DIR_ENV: &str = "GRADSAE_REPORT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds {
    pub min_valid_accuracy: f64,
    pub min_train_accuracy: f64,
    pub max_sae_error: f64,
    pub min_filtered: usize,
    pub min_bottomk_f1: f64,
    pub max_steer_bottomk_f1: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_valid_accuracy: 0.9,
            min_train_accuracy: 0.95,
            max_sae_error: 0.15,
            min_filtered: 300,
            min_bottomk_f1: 95.0,
            max_steer_bottomk_f1: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub valid_groups: usize,
    pub lm: LMConfig,
    pub lm_train: LMTrainConfig,
    pub hook_layers: Vec<usize>,
    /// Hook layer used by perturb, steer and stats.
    pub layer: usize,
    pub sae: SAETrainConfig,
    pub k_grid: Vec<KSpec>,
    pub methods: Vec<Method>,
    pub value_mode: ValueMode,
    pub threads: usize,
    pub out_dir: PathBuf,
    /// Empty means `<out_dir>/reports`.
    pub report_dir: PathBuf,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            valid_groups: 100,
            lm: LMConfig::default(),
            lm_train: LMTrainConfig::default(),
            hook_layers: vec![1, 2],
            layer: 1,
            sae: SAETrainConfig::default(),
            k_grid: gradsae::perturb::DEFAULT_K_GRID.to_vec(),
            methods: Method::ALL.to_vec(),
            value_mode: ValueMode::Mean,
            threads: 1,
            out_dir: PathBuf::from("run"),
            report_dir: PathBuf::new(),
            thresholds: Thresholds::default(),
        };
        cfg.apply_seed();
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let out: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("{key} needs at least one entry")));
    }
    Ok(out)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Propagates `seed` to every seeded stage.
    fn apply_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.lm_train.seed = self.seed;
        self.sae.seed = self.seed;
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.apply_seed();
            }
            "n_groups" => self.corpus.n_groups = parse(key, v)?,
            "questions_per_group" => self.corpus.questions_per_group = parse(key, v)?,
            "facts_per_context" => self.corpus.facts_per_context = parse(key, v)?,
            "valid_groups" => self.valid_groups = parse(key, v)?,
            "dim" => self.lm.dim = parse(key, v)?,
            "layers" => self.lm.layers = parse(key, v)?,
            "heads" => self.lm.heads = parse(key, v)?,
            "context_len" => self.lm.context_len = parse(key, v)?,
            "mlp_mult" => self.lm.mlp_mult = parse(key, v)?,
            "lm_steps" => self.lm_train.steps = parse(key, v)?,
            "lm_batch" => self.lm_train.batch_size = parse(key, v)?,
            "lm_lr" => self.lm_train.lr = parse(key, v)?,
            "lm_warmup" => self.lm_train.warmup = parse(key, v)?,
            "hook_layers" => self.hook_layers = parse_list(key, v, |s| parse(key, s))?,
            "layer" => self.layer = parse(key, v)?,
            "sae_latents" => self.sae.latents = parse(key, v)?,
            "sae_l1" => self.sae.l1_coeff = parse(key, v)?,
            "sae_steps" => self.sae.steps = parse(key, v)?,
            "sae_batch" => self.sae.batch_size = parse(key, v)?,
            "sae_lr" => self.sae.lr = parse(key, v)?,
            "k_grid" => self.k_grid = parse_list(key, v, str::parse)?,
            "methods" => self.methods = parse_list(key, v, str::parse)?,
            "value_mode" => self.value_mode = v.parse()?,
            "threads" => self.threads = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "report_dir" => self.report_dir = PathBuf::from(v),
            "min_valid_accuracy" => self.thresholds.min_valid_accuracy = parse(key, v)?,
            "min_train_accuracy" => self.thresholds.min_train_accuracy = parse(key, v)?,
            "max_sae_error" => self.thresholds.max_sae_error = parse(key, v)?,
            "min_filtered" => self.thresholds.min_filtered = parse(key, v)?,
            "min_bottomk_f1" => self.thresholds.min_bottomk_f1 = parse(key, v)?,
            "max_steer_bottomk_f1" => self.thresholds.max_steer_bottomk_f1 = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut lm = self.lm.clone();
        for &l in &self.hook_layers {
            lm.hook_layer = l;
            lm.validate()?;
        }
        if !self.hook_layers.contains(&self.layer) {
            return Err(Error::Config(format!(
                "layer {} is not among hook_layers {}",
                self.layer,
                join(&self.hook_layers)
            )));
        }
        if self.valid_groups == 0 || self.valid_groups >= self.corpus.n_groups {
            return Err(Error::Config(format!(
                "valid_groups must be in 1..{}, got {}",
                self.corpus.n_groups, self.valid_groups
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Settings that influence results, one `key = value` per line; paths and
    /// the thread count are left out.
    pub fn experiment_text(&self) -> String {
        let t = &self.thresholds;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("n_groups", self.corpus.n_groups.to_string());
        put("questions_per_group", self.corpus.questions_per_group.to_string());
        put("facts_per_context", self.corpus.facts_per_context.to_string());
        put("valid_groups", self.valid_groups.to_string());
        put("dim", self.lm.dim.to_string());
        put("layers", self.lm.layers.to_string());
        put("heads", self.lm.heads.to_string());
        put("context_len", self.lm.context_len.to_string());
        put("mlp_mult", self.lm.mlp_mult.to_string());
        put("lm_steps", self.lm_train.steps.to_string());
        put("lm_batch", self.lm_train.batch_size.to_string());
        put("lm_lr", self.lm_train.lr.to_string());
        put("lm_warmup", self.lm_train.warmup.to_string());
        put("hook_layers", join(&self.hook_layers));
        put("layer", self.layer.to_string());
        put("sae_latents", self.sae.latents.to_string());
        put("sae_l1", self.sae.l1_coeff.to_string());
        put("sae_steps", self.sae.steps.to_string());
        put("sae_batch", self.sae.batch_size.to_string());
        put("sae_lr", self.sae.lr.to_string());
        put("k_grid", join(&self.k_grid.iter().map(|k| k.to_string()).collect::<Vec<_>>()).replace("50%", "half"));
        put("methods", join(&self.methods));
        put(
            "value_mode",
            match self.value_mode {
                ValueMode::Mean => "mean".into(),
                ValueMode::LastToken => "last".into(),
            },
        );
        put("min_valid_accuracy", t.min_valid_accuracy.to_string());
        put("min_train_accuracy", t.min_train_accuracy.to_string());
        put("max_sae_error", t.max_sae_error.to_string());
        put("min_filtered", t.min_filtered.to_string());
        put("min_bottomk_f1", t.min_bottomk_f1.to_string());
        put("max_steer_bottomk_f1", t.max_steer_bottomk_f1.to_string());
        s
    }

    /// Full config including paths; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = self.experiment_text();
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if !self.report_dir.as_os_str().is_empty() {
            let _ = writeln!(s, "report_dir = {}", self.report_dir.display());
        }
        s
    }

    /// FNV-1a over [`Self::experiment_text`], as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.experiment_text().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn report_header(&self) -> Vec<String> {
        vec![format!("config_hash={} seed={} layer={}", self.hash(), self.seed, self.layer)]
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.out_dir.join("corpus.jsonl")
    }

    pub fn lm_path(&self) -> PathBuf {
        self.out_dir.join("lm.ckpt")
    }

    pub fn sae_path(&self, layer: usize) -> PathBuf {
        self.out_dir.join(format!("sae_l{layer}.ckpt"))
    }

    /// The environment override wins over the config value.
    pub fn reports(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(REPORT_DIR_ENV).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        if self.report_dir.as_os_str().is_empty() {
            self.out_dir.join("reports")
        } else {
            self.report_dir.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("k_grid", "10,half").unwrap();
        cfg.set("methods", "gradsae").unwrap();
        cfg.set("out_dir", "/tmp/x").unwrap();
        cfg.set("value_mode", "last").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn seed_reaches_every_stage() {
        let cfg = RunConfig::from_text("seed = 7 # comment\n\n").unwrap();
        assert_eq!((cfg.corpus.seed, cfg.lm_train.seed, cfg.sae.seed), (7, 7, 7));
    }

    #[test]
    fn hash_ignores_paths_and_threads() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("out_dir", "elsewhere").unwrap();
        b.set("threads", "4").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "43").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_lines_name_the_line() {
        let err = RunConfig::from_text("seed = 1\nnonsense\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(RunConfig::from_text("wat = 3").is_err());
        assert!(RunConfig::from_text("layer = 3").is_err());
        assert!(RunConfig::from_text("k_grid = 0").is_err());
    }
}
