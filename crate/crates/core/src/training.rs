//! Per-example SGD with a per-epoch halving learning rate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Vocabulary, MAX_TARGET_TOKENS};
use crate::decoder::CacheKind;
use crate::error::{Error, Result};
use crate::numcore::{checkpoint, SeededRng};
use crate::parser::{ModelConfig, Parser};

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 0;
/// RNG stream for per-epoch shuffles.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplier applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub init_range: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 30,
            lr0: 0.5,
            lr_decay: 0.5,
            init_range: 1.0,
            seed: 13,
            clip: Some(5.0),
            max_len: MAX_TARGET_TOKENS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.model.hidden == 0 {
            return bad("hidden must be > 0");
        }
        if self.model.embed == 0 {
            return bad("embed must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.init_range > 0.0) {
            return bad("init_range must be > 0");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return bad("clip must be > 0 or off");
        }
        if self.max_len == 0 {
            return bad("max_len must be > 0");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "hidden" | "d" => self.model.hidden = num(key, value)?,
            "embed" => self.model.embed = num(key, value)?,
            "cache_fn" => self.model.cache = value.parse::<CacheKind>()?,
            "double_gate" => self.model.double_gate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr0 = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "init_range" => self.init_range = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "clip" => {
                self.clip = match value {
                    "off" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "max_len" => self.max_len = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "config".into(),
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "embed = {}", m.embed);
        let _ = writeln!(s, "cache_fn = {}", m.cache);
        let _ = writeln!(s, "double_gate = {}", m.double_gate);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr0);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "init_range = {}", self.init_range);
        let _ = writeln!(s, "seed = {}", self.seed);
        match self.clip {
            Some(c) => {
                let _ = writeln!(s, "clip = {c}");
            }
            None => s.push_str("clip = off\n"),
        }
        let _ = writeln!(s, "max_len = {}", self.max_len);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub unreachable_steps: Vec<usize>,
    pub wall_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Builds a parser for `corpus`'s vocabularies and draws its initial weights.
pub fn init_params(corpus: &Corpus, config: &TrainConfig) -> Result<Parser> {
    config.validate()?;
    let mut parser = Parser::new(
        config.model,
        corpus.src_vocab.clone(),
        corpus.tgt_vocab.clone(),
    )?;
    let mut rng = SeededRng::new(config.seed, INIT_STREAM);
    parser.init_uniform(config.init_range, &mut rng);
    Ok(parser)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<(Parser, TrainReport)> {
    train_with(corpus, config, None, |_| {})
}

/// Trains from a fresh initialization, writing `epoch-NN.ckpt` and
/// `final.ckpt` into `checkpoint_dir` when given.
pub fn train_with(
    corpus: &Corpus,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Parser, TrainReport)> {
    let parser = init_params(corpus, config)?;
    continue_training(parser, corpus, config, checkpoint_dir, on_epoch)
}

pub fn continue_training(
    mut parser: Parser,
    corpus: &Corpus,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Parser, TrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let timer = Timer::start();
    let shuffle_rng = SeededRng::new(config.seed, SHUFFLE_STREAM);
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(config.epochs),
        learning_rates: Vec::with_capacity(config.epochs),
        unreachable_steps: Vec::with_capacity(config.epochs),
        wall_seconds: 0.0,
        final_checkpoint: None,
    };

    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        shuffle_rng.fork(epoch as u64).shuffle(&mut order);

        let mut total = 0.0;
        let mut unreachable = 0;
        for &idx in &order {
            let out = match parser.example_loss(&corpus.examples[idx]) {
                Ok(out) => out,
                // Weights already blown up by an earlier step.
                Err(e @ Error::NonFinite { .. }) => {
                    log::warn!("{e}");
                    return Err(Error::Diverged {
                        epoch,
                        example: idx,
                    });
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    example: idx,
                });
            }
            let mut grads = out.grads;
            if let Some(max) = config.clip {
                grads.clip_global_norm(max);
            }
            parser.params.sgd_step(&grads, lr);
            total += out.loss;
            unreachable += out.stats.unreachable;
        }

        let mean_loss = total / corpus.len() as f64;
        report.epoch_loss.push(mean_loss);
        report.learning_rates.push(lr);
        report.unreachable_steps.push(unreachable);
        log::info!("epoch {epoch:>3}  lr {lr:.6e}  mean loss {mean_loss:.6}");
        on_epoch(&EpochSummary {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&dir.join(format!("epoch-{epoch:02}.ckpt")), &parser.params)?;
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        checkpoint::save(&path, &parser.params)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_seconds = timer.elapsed();
    Ok((parser, report))
}

pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const MODEL_CKPT_FILE: &str = "final.ckpt";

/// Writes everything needed to rebuild `parser`: config, both vocabularies
/// and the weights.
pub fn save_model(dir: &Path, parser: &Parser, config: &TrainConfig) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut cfg = config.clone();
    cfg.model = parser.config;
    write(MODEL_CONFIG_FILE, cfg.to_text())?;
    write(SRC_VOCAB_FILE, parser.src_vocab.to_lines())?;
    write(TGT_VOCAB_FILE, parser.tgt_vocab.to_lines())?;
    checkpoint::save(&dir.join(MODEL_CKPT_FILE), &parser.params)
}

/// Inverse of [`save_model`]. `checkpoint` overrides the weight file, e.g.
/// to load an intermediate epoch.
pub fn load_model(dir: &Path, checkpoint_file: Option<&Path>) -> Result<(Parser, TrainConfig)> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let config = TrainConfig::parse(&read(MODEL_CONFIG_FILE)?)?;
    let src = Vocabulary::from_lines(&read(SRC_VOCAB_FILE)?)?;
    let tgt = Vocabulary::from_lines(&read(TGT_VOCAB_FILE)?)?;
    let mut parser = Parser::new(config.model, src, tgt)?;
    let ckpt = checkpoint_file.map_or_else(|| dir.join(MODEL_CKPT_FILE), Path::to_path_buf);
    checkpoint::load_into(&ckpt, &mut parser.params)?;
    Ok((parser, config))
}

struct Timer {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Timer {
    fn start() -> Self {
        Timer {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}
