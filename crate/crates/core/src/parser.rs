//! Full encoder-decoder parser: parameters, vocabularies, teacher-forced
//! loss and greedy decoding.

use serde::{Deserialize, Serialize};

use crate::data::{Example, Vocabulary, BOS};
use crate::decoder::{
    gold_indices, greedy_decode, step_loss, CacheKind, Decoded, Decoder, JointDistribution,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numcore::{Gradients, Graph, NodeId, ParamSet, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub cache: CacheKind,
    /// Apply the outer reset gate to F6 as well as its internal mix.
    pub double_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 200,
            embed: 100,
            cache: CacheKind::F1,
            double_gate: true,
        }
    }
}

/// Per-example bookkeeping from a teacher-forced pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossStats {
    pub steps: usize,
    /// Steps whose gold token had no write, copy or cache route.
    pub unreachable: usize,
    /// Target-vocabulary index fed to the decoder at each step.
    pub decoder_inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExampleLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub stats: LossStats,
}

#[derive(Debug, Clone)]
pub struct Parser {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Parser {
    /// Zero-initialized model; cache tensors exist iff `config.cache` is on.
    pub fn new(config: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        if config.hidden == 0 || config.embed == 0 {
            return Err(Error::Config("hidden and embedding sizes must be positive".into()));
        }
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, src_vocab.len(), config.embed, config.hidden);
        let mut decoder = Decoder::new(&mut params, tgt_vocab.len(), config.embed, config.hidden);
        if config.cache.is_enabled() {
            decoder.add_cache(&mut params, src_vocab.len());
        }
        Ok(Parser {
            config,
            params,
            encoder,
            decoder,
            src_vocab,
            tgt_vocab,
        })
    }

    /// Draws every weight and bias i.i.d. from `U[−range, range]`, in
    /// parameter creation order.
    pub fn init_uniform(&mut self, range: f64, rng: &mut SeededRng) {
        for id in self.params.ids().collect::<Vec<_>>() {
            for v in self.params.get_mut(id).values_mut() {
                *v = rng.uniform(-range, range);
            }
        }
    }

    pub fn has_cache_params(&self) -> bool {
        self.decoder.cache.is_some()
    }

    /// Same parameters, different cache function. Enabling a cache needs
    /// cache tensors to be present.
    pub fn with_cache_kind(&self, kind: CacheKind) -> Result<Parser> {
        if kind.is_enabled() && !self.has_cache_params() {
            return Err(Error::Config(format!(
                "cannot select {kind}: model was built without cache parameters"
            )));
        }
        let mut p = self.clone();
        p.config.cache = kind;
        Ok(p)
    }

    /// Copy-only model: cache tensors removed, cache segment off.
    pub fn without_cache_params(&self) -> Parser {
        let mut p = self.clone();
        if let Some(cache) = p.decoder.cache.take() {
            let keep = cache.w_h.index();
            let mut params = ParamSet::new();
            for (id, name, t) in self.params.iter() {
                if id.index() < keep {
                    params.add(name, t.clone());
                }
            }
            p.params = params;
        }
        p.config.cache = CacheKind::Off;
        p
    }

    /// Teacher-forced loss graph: the decoder is fed the gold prefix and
    /// the step losses are summed.
    pub fn loss_graph(&self, g: &mut Graph, ex: &Example) -> Result<(NodeId, LossStats)> {
        let enc = self.encoder.encode(g, &ex.x)?;
        let layout = self.decoder.layout(self.config.cache, ex.x.len(), g);
        let mut stats = LossStats::default();
        let mut state = enc.s0;
        let mut prev = BOS;
        let mut total: Option<NodeId> = None;
        for (j, &gold) in ex.y.iter().enumerate() {
            stats.decoder_inputs.push(prev);
            let step = self.decoder.step(
                g,
                self.config.cache,
                self.config.double_gate,
                &enc,
                state,
                prev,
            )?;
            let (targets, reachable) = gold_indices(
                &layout,
                gold,
                &ex.y_surface[j],
                &ex.copy_matrix[j],
                &self.src_vocab,
            );
            if !reachable {
                stats.unreachable += 1;
            }
            let l = step_loss(g, step.logits, &targets)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
            state = step.state;
            prev = gold;
            stats.steps += 1;
        }
        let total = total.ok_or_else(|| Error::Empty("target sequence".into()))?;
        Ok((total, stats))
    }

    /// Loss and gradients under `params` (which must share this model's layout).
    pub fn loss_with(&self, params: &ParamSet, ex: &Example) -> Result<ExampleLoss> {
        let mut g = Graph::new(params);
        let (loss, stats) = self.loss_graph(&mut g, ex)?;
        Ok(ExampleLoss {
            loss: g.scalar(loss),
            grads: g.backward(loss)?,
            stats,
        })
    }

    pub fn loss_value_with(&self, params: &ParamSet, ex: &Example) -> Result<f64> {
        let mut g = Graph::new(params);
        let (loss, _) = self.loss_graph(&mut g, ex)?;
        Ok(g.scalar(loss))
    }

    pub fn example_loss(&self, ex: &Example) -> Result<ExampleLoss> {
        self.loss_with(&self.params, ex)
    }

    /// Teacher-forced joint distributions, one per target position.
    pub fn step_distributions(&self, ex: &Example) -> Result<Vec<JointDistribution>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encoder.encode(&mut g, &ex.x)?;
        let layout = self.decoder.layout(self.config.cache, ex.x.len(), &g);
        let mut state = enc.s0;
        let mut prev = BOS;
        let mut out = Vec::with_capacity(ex.y.len());
        for &gold in &ex.y {
            let step = self.decoder.step(
                &mut g,
                self.config.cache,
                self.config.double_gate,
                &enc,
                state,
                prev,
            )?;
            out.push(JointDistribution::from_logits(g.value(step.logits).to_vec(), layout)?);
            state = step.state;
            prev = gold;
        }
        Ok(out)
    }

    /// Greedy decode of a tokenized utterance.
    pub fn decode(&self, source: &[String], max_len: usize) -> Result<Decoded> {
        let x: Vec<usize> = source.iter().map(|t| self.src_vocab.index_or_unk(t)).collect();
        let mut g = Graph::new(&self.params);
        let enc = self.encoder.encode(&mut g, &x)?;
        greedy_decode(
            &mut g,
            &self.decoder,
            self.config.cache,
            self.config.double_gate,
            &enc,
            source,
            &self.src_vocab,
            &self.tgt_vocab,
            max_len,
        )
    }
}
