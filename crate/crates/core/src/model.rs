//! A small pre-norm decoder-only transformer over bytes. The base weights
//! are random and frozen; adapters on the attention projections and the
//! feed-forward matrices are the only trainable surface, together with the
//! routers and the personality table.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::corpus::DialogueRecord;
use crate::error::{dim, Error, Result};
use crate::lora::{adapted_forward, AdaptedLayer, AdaptedMatrix, AdapterConfig};
use crate::persona::TraitId;
use crate::routing::{
    route_graph, weighting_matrix, weights_graph, ExpertWeighting, PersonalityTable, Router, WeightingMatrix,
};
use crate::tensor::Tensor;
use crate::tokenizer::{encode_dialogue, trait_tag, TokenSeq, VOCAB_SIZE};

/// Initial standard deviation of every router gate.
pub const ROUTER_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub context_len: usize,
    /// Seed of the frozen backbone. Kept apart from the training seed so
    /// that runs with different seeds adapt the same base model.
    pub base_seed: u64,
    pub adapter: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            context_len: 256,
            base_seed: 0,
            adapter: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 8 {
            return Err(Error::Config(format!("context_len {} < 8", self.context_len)));
        }
        self.adapter.validate()
    }

    /// `(d_in, d_out)` of every adapted matrix, block by block.
    pub fn adapted_dims(&self) -> Vec<(usize, usize)> {
        let d = self.d_model;
        let f = d * self.ffn_mult;
        let mut out = Vec::new();
        for _ in 0..self.n_layers {
            for m in AdaptedMatrix::ALL {
                if self.adapter.adapted.contains(&m) {
                    out.push(match m {
                        AdaptedMatrix::FfnUp => (d, f),
                        AdaptedMatrix::FfnDown => (f, d),
                        _ => (d, d),
                    });
                }
            }
        }
        out
    }
}

/// Training regime: the routed mixture, one shared adapter with a textual
/// trait tag, or an independent adapter per trait.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Moe,
    SingleLora,
    PerTraitLora,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Moe => "moe",
            Baseline::SingleLora => "single_lora",
            Baseline::PerTraitLora => "per_trait_lora",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Baseline::Moe),
            "single_lora" => Ok(Baseline::SingleLora),
            "per_trait_lora" => Ok(Baseline::PerTraitLora),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Linear {
    Frozen(Tensor),
    /// `slot` is the trainable index of `a`; `b_t` follows it.
    Adapted { layer: AdaptedLayer, slot: usize },
}

impl Linear {
    fn weight(&self) -> &Tensor {
        match self {
            Linear::Frozen(w) => w,
            Linear::Adapted { layer, .. } => layer.weight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// q, k, v, o, ffn_up, ffn_down
    linears: [Linear; 6],
}

const LINEAR_NAMES: [&str; 6] = ["q", "k", "v", "o", "ffn_up", "ffn_down"];

fn adapted_kind(i: usize) -> Option<AdaptedMatrix> {
    match i {
        0 => Some(AdaptedMatrix::Query),
        1 => Some(AdaptedMatrix::Key),
        2 => Some(AdaptedMatrix::Value),
        4 => Some(AdaptedMatrix::FfnUp),
        5 => Some(AdaptedMatrix::FfnDown),
        _ => None,
    }
}

/// A trainable tensor's place in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Graph leaf standing for (part of) a trainable tensor: the gradient of
/// `var` belongs at `offset..` of slot `slot`.
#[derive(Debug, Clone, Copy)]
pub struct SlotVar {
    pub slot: usize,
    pub offset: usize,
    pub var: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    baseline: Baseline,
    tok_emb: Tensor,
    pos_emb: Tensor,
    lm_head: Tensor,
    blocks: Vec<Block>,
    routers: Vec<Router>,
    table: Option<PersonalityTable>,
}

impl Model {
    /// Builds the frozen backbone from `config.base_seed` and fresh
    /// adapters, routers and personality vectors from `seed`.
    pub fn new(config: ModelConfig, baseline: Baseline, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let ac = &config.adapter;
        let (experts, rank) = match baseline {
            Baseline::Moe => (ac.num_experts, ac.expert_rank()),
            Baseline::SingleLora => (1, ac.total_rank),
            Baseline::PerTraitLora => (ac.trait_count, ac.total_rank),
        };
        let scale = ac.scale();

        let mut base_rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let tok_emb = Tensor::randn(&[VOCAB_SIZE, d], 1.0, &mut base_rng);
        let pos_emb = Tensor::randn(&[config.context_len, d], 0.3, &mut base_rng);
        let lm_head = Tensor::randn(&[VOCAB_SIZE, d], 2.0 * inv(d), &mut base_rng);

        let mut slot = 0;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let shapes = [(d, d), (d, d), (d, d), (d, d), (f, d), (d, f)];
            let mut linears = Vec::with_capacity(6);
            for (i, &(out, inp)) in shapes.iter().enumerate() {
                let w = Tensor::randn(&[out, inp], inv(inp), &mut base_rng);
                let adapted = adapted_kind(i).is_some_and(|k| ac.adapted.contains(&k));
                if adapted {
                    let layer = AdaptedLayer::new(w, experts, rank, scale, &mut rng)?;
                    linears.push(Linear::Adapted { layer, slot });
                    slot += 2;
                } else {
                    linears.push(Linear::Frozen(w));
                }
            }
            blocks.push(Block { linears: linears.try_into().expect("six linears") });
        }

        let (routers, table) = if baseline == Baseline::Moe {
            let n_adapted = config.adapted_dims().len();
            let n_routers = if ac.shared_router { 1 } else { n_adapted };
            let routers = (0..n_routers)
                .map(|_| Router::random(ac.personality_dim, ac.num_experts, ROUTER_INIT_STD, &mut rng))
                .collect();
            (routers, Some(PersonalityTable::random(ac.trait_count, ac.personality_dim, &mut rng)))
        } else {
            (Vec::new(), None)
        };

        Ok(Self { config, baseline, tok_emb, pos_emb, lm_head, blocks, routers, table })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn baseline(&self) -> Baseline {
        self.baseline
    }

    pub fn routers(&self) -> &[Router] {
        &self.routers
    }

    pub fn personality_table(&self) -> Option<&PersonalityTable> {
        self.table.as_ref()
    }

    pub fn trait_count(&self) -> usize {
        self.config.adapter.trait_count
    }

    /// Adapted layers in block order (q, k, v, ffn_up, ffn_down).
    pub fn adapted_layers(&self) -> Vec<&AdaptedLayer> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears.iter())
            .filter_map(|l| match l {
                Linear::Adapted { layer, .. } => Some(layer),
                Linear::Frozen(_) => None,
            })
            .collect()
    }

    /// Every tensor with its name and whether it is trainable. Trainable
    /// tensors appear in slot order.
    pub fn named_tensors(&self) -> Vec<(String, bool, &Tensor)> {
        let mut out: Vec<(String, bool, &Tensor)> = vec![
            ("tok_emb".into(), false, &self.tok_emb),
            ("pos_emb".into(), false, &self.pos_emb),
            ("lm_head".into(), false, &self.lm_head),
        ];
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, lin) in block.linears.iter().enumerate() {
                let name = format!("blocks.{bi}.{}", LINEAR_NAMES[li]);
                out.push((format!("{name}.weight"), false, lin.weight()));
                if let Linear::Adapted { layer, .. } = lin {
                    out.push((format!("{name}.a"), true, layer.stacked_a()));
                    out.push((format!("{name}.b_t"), true, layer.stacked_b_t()));
                }
            }
        }
        for (j, r) in self.routers.iter().enumerate() {
            out.push((format!("routers.{j}.gate"), true, r.gate()));
        }
        if let Some(t) = &self.table {
            out.push(("personality".into(), true, t.vectors()));
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, bool, &mut Tensor)> {
        let mut out: Vec<(String, bool, &mut Tensor)> = vec![
            ("tok_emb".into(), false, &mut self.tok_emb),
            ("pos_emb".into(), false, &mut self.pos_emb),
            ("lm_head".into(), false, &mut self.lm_head),
        ];
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, lin) in block.linears.iter_mut().enumerate() {
                let name = format!("blocks.{bi}.{}", LINEAR_NAMES[li]);
                match lin {
                    Linear::Frozen(w) => out.push((format!("{name}.weight"), false, w)),
                    Linear::Adapted { layer, .. } => {
                        let (w, a, b_t) = layer.tensors_mut();
                        out.push((format!("{name}.weight"), false, w));
                        out.push((format!("{name}.a"), true, a));
                        out.push((format!("{name}.b_t"), true, b_t));
                    }
                }
            }
        }
        for (j, r) in self.routers.iter_mut().enumerate() {
            out.push((format!("routers.{j}.gate"), true, r.gate_mut()));
        }
        if let Some(t) = &mut self.table {
            out.push(("personality".into(), true, t.vectors_mut()));
        }
        out
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, tr, _)| *tr)
            .map(|(name, _, t)| ParamInfo { name, shape: t.shape().to_vec() })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().filter(|(_, tr, _)| *tr).map(|(_, _, t)| t.data()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, tr, _)| *tr)
            .map(|(_, _, t)| t.data_mut())
            .collect()
    }

    /// Trainable parameter count, split into adapter factors and routing
    /// (routers plus personality table).
    pub fn trainable_counts(&self) -> (usize, usize) {
        let adapters = self.adapted_layers().iter().map(|l| l.stacked_a().len() + l.stacked_b_t().len()).sum();
        let routing = self.routers.iter().map(|r| r.gate().len()).sum::<usize>()
            + self.table.as_ref().map_or(0, |t| t.vectors().len());
        (adapters, routing)
    }

    /// SHA-256 over every frozen tensor's bit pattern, in name order.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, trainable, t) in self.named_tensors() {
            if trainable {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    fn router_index(&self, adapted_index: usize) -> usize {
        if self.config.adapter.shared_router {
            0
        } else {
            adapted_index
        }
    }

    fn check_trait(&self, t: TraitId) -> Result<usize> {
        let i = t.index();
        match self.baseline {
            Baseline::SingleLora => Ok(i),
            _ if i < self.trait_count() => Ok(i),
            _ => Err(Error::UnknownTrait(format!(
                "{t} is not among the {} traits of this model",
                self.trait_count()
            ))),
        }
    }

    /// Per-adapted-layer expert weights for a trait. The single-adapter
    /// baseline always reports `[1]`; the per-trait baseline reports a
    /// one-hot over the trait adapters.
    pub fn route(&self, t: TraitId) -> Result<Vec<ExpertWeighting>> {
        let i = self.check_trait(t)?;
        let n = self.adapted_layers().len();
        match self.baseline {
            Baseline::Moe => {
                let table = self.table.as_ref().expect("moe has a table");
                (0..n).map(|l| crate::routing::route(t, table, &self.routers[self.router_index(l)])).collect()
            }
            Baseline::SingleLora => Ok(vec![ExpertWeighting::uniform(1); n]),
            Baseline::PerTraitLora => (0..n).map(|_| ExpertWeighting::one_hot(self.trait_count(), i)).collect(),
        }
    }

    /// Weighting matrix of every router (one per adapted layer, or a single
    /// one when the router is shared). Empty for the baselines.
    pub fn weighting_matrices(&self) -> Result<Vec<WeightingMatrix>> {
        match &self.table {
            Some(table) => self.routers.iter().map(|r| weighting_matrix(table, r)).collect(),
            None => Ok(Vec::new()),
        }
    }

    /// Tokens for a dialogue conditioned on `t` (the single-adapter
    /// baseline gets `t`'s textual tag), cut to `max_len` and the context
    /// length.
    pub fn prepare(&self, record: &DialogueRecord, t: TraitId, max_len: usize) -> TokenSeq {
        let tag = (self.baseline == Baseline::SingleLora).then(|| trait_tag(t));
        let mut seq = encode_dialogue(record, tag.as_deref());
        seq.truncate(max_len.min(self.config.context_len));
        seq
    }

    /// Builds the forward pass on `g`, returning `[T, vocab]` logits and
    /// the trainable leaves it used.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ids: &[usize],
        t: TraitId,
        trainable: bool,
    ) -> Result<(Var, Vec<SlotVar>)> {
        let trait_index = self.check_trait(t)?;
        let len = ids.len();
        if len == 0 {
            return Err(dim("forward", "empty token sequence"));
        }
        if len > self.config.context_len {
            return Err(dim(
                "forward",
                format!("sequence of {len} tokens exceeds context length {}", self.config.context_len),
            ));
        }
        let mut slots = Vec::new();
        let n_adapted = self.adapted_layers().len();

        // Routing weights per router.
        let mut weights: Vec<Option<Var>> = vec![None; self.routers.len()];
        if let Some(table) = &self.table {
            let tv = g.leaf(table.vectors(), trainable);
            let base = 2 * n_adapted + self.routers.len();
            slots.push(SlotVar { slot: base, offset: 0, var: tv });
            for (j, r) in self.routers.iter().enumerate() {
                let gv = g.leaf(r.gate(), trainable);
                slots.push(SlotVar { slot: 2 * n_adapted + j, offset: 0, var: gv });
                weights[j] = Some(route_graph(g, tv, gv, trait_index)?);
            }
        }

        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let tok = g.leaf(&self.tok_emb, false);
        let pos = g.leaf(&self.pos_emb, false);
        let e = g.embedding(tok, ids)?;
        let p = g.slice_rows(pos, 0, len)?;
        let mut x = g.add(e, p)?;

        let mut adapted_index = 0;
        for block in &self.blocks {
            let mut apply = |g: &mut Graph<'a>, li: usize, h: Var, slots: &mut Vec<SlotVar>| -> Result<Var> {
                match &block.linears[li] {
                    Linear::Frozen(w) => {
                        let wv = g.leaf(w, false);
                        g.matmul_nt(h, wv)
                    }
                    Linear::Adapted { layer, slot } => {
                        let (vars, w, offset_rows) = match self.baseline {
                            Baseline::Moe => {
                                let r = self.router_index(adapted_index);
                                (layer.bind(g, trainable), weights[r], 0)
                            }
                            Baseline::SingleLora => (layer.bind(g, trainable), None, 0),
                            Baseline::PerTraitLora => (
                                layer.bind_block(g, trait_index, trainable)?,
                                None,
                                trait_index * layer.expert_rank(),
                            ),
                        };
                        adapted_index += 1;
                        slots.push(SlotVar { slot: *slot, offset: offset_rows * layer.d_in(), var: vars.a });
                        slots.push(SlotVar { slot: slot + 1, offset: offset_rows * layer.d_out(), var: vars.b_t });
                        adapted_forward(g, h, &vars, w, layer.scale())
                    }
                }
            };

            let h = g.layer_norm(x);
            let q = apply(g, 0, h, &mut slots)?;
            let k = apply(g, 1, h, &mut slots)?;
            let v = apply(g, 2, h, &mut slots)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = g.causal_softmax(scores)?;
                outs.push(g.matmul(att, vh)?);
            }
            let cat = g.concat_cols(&outs)?;
            let o = apply(g, 3, cat, &mut slots)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x);
            let up = apply(g, 4, h, &mut slots)?;
            let up = g.gelu(up);
            let down = apply(g, 5, up, &mut slots)?;
            x = g.add(x, down)?;
        }
        let h = g.layer_norm(x);
        let head = g.leaf(&self.lm_head, false);
        let logits = g.matmul_nt(h, head)?;
        Ok((logits, slots))
    }

    /// Logits `[T, vocab]` for a token sequence under a trait.
    pub fn forward(&self, ids: &[usize], t: TraitId) -> Result<Tensor> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, ids, t, false)?;
        Ok(g.tensor(logits))
    }

    /// Per-router regularizer nodes: `(psl, aux)` for every router, built on
    /// the routing parameters alone.
    pub fn regularizer_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        trainable: bool,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<SlotVar>)> {
        let Some(table) = &self.table else {
            return Ok((Vec::new(), Vec::new(), Vec::new()));
        };
        let n_adapted = self.adapted_layers().len();
        let tv = g.leaf(table.vectors(), trainable);
        let mut slots = vec![SlotVar { slot: 2 * n_adapted + self.routers.len(), offset: 0, var: tv }];
        let mut psl = Vec::new();
        let mut aux = Vec::new();
        for (j, r) in self.routers.iter().enumerate() {
            let gv = g.leaf(r.gate(), trainable);
            slots.push(SlotVar { slot: 2 * n_adapted + j, offset: 0, var: gv });
            let omega = weights_graph(g, tv, gv)?;
            psl.push(crate::objectives::specialization_loss_graph(g, omega)?);
            aux.push(crate::objectives::auxiliary_balance_loss_graph(g, omega)?);
        }
        Ok((psl, aux, slots))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::encode;

    fn tiny(baseline: Baseline) -> Model {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            context_len: 32,
            base_seed: 3,
            adapter: AdapterConfig { num_experts: 4, total_rank: 8, ..Default::default() },
        };
        Model::new(config, baseline, 7).unwrap()
    }

    #[test]
    fn fresh_adapters_ignore_trait() {
        let m = tiny(Baseline::Moe);
        let ids = encode("hello").ids;
        let a = m.forward(&ids, TraitId::from_index(0).unwrap()).unwrap();
        for t in TraitId::all() {
            assert_eq!(m.forward(&ids, t).unwrap(), a);
        }
        assert_eq!(a.shape(), &[ids.len(), VOCAB_SIZE]);
    }

    #[test]
    fn causal_prefix_is_stable() {
        let mut m = tiny(Baseline::Moe);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in m.params_mut() {
            for v in p.iter_mut() {
                *v += 0.1 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
            }
        }
        let t = TraitId::from_index(3).unwrap();
        let ids = encode("abcdef").ids;
        let full = m.forward(&ids, t).unwrap();
        let mut changed = ids.clone();
        *changed.last_mut().unwrap() = 99;
        let other = m.forward(&changed, t).unwrap();
        let prefix = m.forward(&ids[..4], t).unwrap();
        for r in 0..ids.len() - 1 {
            for c in 0..VOCAB_SIZE {
                assert!((full.get2(r, c) - other.get2(r, c)).abs() <= 1e-10);
                if r < 4 {
                    assert!((full.get2(r, c) - prefix.get2(r, c)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn sequence_longer_than_context_is_rejected() {
        let m = tiny(Baseline::Moe);
        let ids = vec![1; 33];
        assert!(m.forward(&ids, TraitId::from_index(0).unwrap()).is_err());
    }

    #[test]
    fn trainable_counts_by_regime() {
        let moe = tiny(Baseline::Moe);
        let single = tiny(Baseline::SingleLora);
        let per = tiny(Baseline::PerTraitLora);
        assert_eq!(moe.trainable_counts().0, single.trainable_counts().0);
        assert_eq!(per.trainable_counts().0, 10 * single.trainable_counts().0);
        assert_eq!(single.trainable_counts().1, 0);
        assert_eq!(moe.params().len(), moe.param_info().len());
        // Same base regardless of regime and training seed.
        assert_eq!(moe.base_checksum(), single.base_checksum());
    }
}
