//! Low-rank adapted dense layers: a single LoRA update and the mixture of
//! LoRA experts that shares the same total rank.
//!
//! Conventions: the frozen weight is `[d_out, d_in]` and maps `h ↦ W·h`.
//! Expert `j` owns `A_j: [ρ, d_in]` and `B_j: [d_out, ρ]` with `ρ = r / N`,
//! and the layer output is
//!
//! ```text
//! O = W·h + (α / r) · Σ_j ω_j · B_j · A_j · h
//! ```
//!
//! Storage stacks the experts: `a` holds every `A_j` as a contiguous row
//! block and `b_t` holds every `B_jᵀ` the same way, so a whole mixture is
//! two matrix products with the expert weights applied to the rank slice
//! in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim, Error, Result};
use crate::routing::ExpertWeighting;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for every `A_j`.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Which dense matrices of a transformer block carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptedMatrix {
    Query,
    Key,
    Value,
    FfnUp,
    FfnDown,
}

impl AdaptedMatrix {
    pub const ALL: [AdaptedMatrix; 5] = [
        AdaptedMatrix::Query,
        AdaptedMatrix::Key,
        AdaptedMatrix::Value,
        AdaptedMatrix::FfnUp,
        AdaptedMatrix::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptedMatrix::Query => "q",
            AdaptedMatrix::Key => "k",
            AdaptedMatrix::Value => "v",
            AdaptedMatrix::FfnUp => "ffn_up",
            AdaptedMatrix::FfnDown => "ffn_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub num_experts: usize,
    pub total_rank: usize,
    pub alpha: f64,
    pub psl_weight: f64,
    pub personality_dim: usize,
    pub trait_count: usize,
    pub adapted: Vec<AdaptedMatrix>,
    /// One router for every adapted layer instead of one per layer.
    pub shared_router: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            total_rank: 64,
            alpha: 64.0,
            psl_weight: 0.1,
            personality_dim: 16,
            trait_count: 10,
            adapted: AdaptedMatrix::ALL.to_vec(),
            shared_router: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_experts == 0 || self.total_rank == 0 {
            return fail("num_experts and total_rank must be positive".into());
        }
        if !self.total_rank.is_multiple_of(self.num_experts) {
            return fail(format!(
                "total rank {} is not divisible by {} experts",
                self.total_rank, self.num_experts
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.psl_weight >= 0.0 && self.psl_weight.is_finite()) {
            return fail(format!("psl weight must be >= 0, got {}", self.psl_weight));
        }
        if self.personality_dim == 0 || self.trait_count == 0 {
            return fail("personality_dim and trait_count must be >= 1".into());
        }
        if self.adapted.is_empty() {
            return fail("no adapted matrices selected".into());
        }
        Ok(())
    }

    /// Per-expert rank `ρ = r / N`.
    pub fn expert_rank(&self) -> usize {
        self.total_rank / self.num_experts
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.total_rank as f64
    }
}

/// A single expert's pair of low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// `[ρ, d_in]`
    pub a: Tensor,
    /// `[d_out, ρ]`
    pub b: Tensor,
}

/// A frozen dense layer with a bank of low-rank experts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    weight: Tensor,
    a: Tensor,
    b_t: Tensor,
    num_experts: usize,
    expert_rank: usize,
    scale: f64,
}

impl AdaptedLayer {
    /// Fresh experts over a frozen weight: `A` Gaussian, `B` zero.
    pub fn new(
        weight: Tensor,
        num_experts: usize,
        expert_rank: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(dim("adapted_layer", format!("weight shape {:?}", weight.shape())));
        }
        if num_experts == 0 || expert_rank == 0 {
            return Err(Error::Config("experts and rank must be positive".into()));
        }
        let (d_out, d_in) = weight.dims2();
        let total = num_experts * expert_rank;
        Ok(Self {
            a: Tensor::randn(&[total, d_in], LORA_A_INIT_STD, rng),
            b_t: Tensor::zeros(&[total, d_out]),
            weight,
            num_experts,
            expert_rank,
            scale,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn expert_rank(&self) -> usize {
        self.expert_rank
    }

    /// The `α / r` factor applied to the summed expert outputs.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn stacked_a(&self) -> &Tensor {
        &self.a
    }

    pub fn stacked_b_t(&self) -> &Tensor {
        &self.b_t
    }

    pub(crate) fn tensors_mut(&mut self) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.a, &mut self.b_t)
    }

    pub fn expert(&self, j: usize) -> LoraExpert {
        let rho = self.expert_rank;
        let rows = j * rho..(j + 1) * rho;
        let a = Tensor::new(
            vec![rho, self.d_in()],
            self.a.data()[rows.start * self.d_in()..rows.end * self.d_in()].to_vec(),
        )
        .unwrap();
        let bt = Tensor::new(
            vec![rho, self.d_out()],
            self.b_t.data()[rows.start * self.d_out()..rows.end * self.d_out()].to_vec(),
        )
        .unwrap();
        LoraExpert { a, b: bt.transpose() }
    }

    pub fn set_expert(&mut self, j: usize, expert: &LoraExpert) -> Result<()> {
        let rho = self.expert_rank;
        if j >= self.num_experts
            || expert.a.shape() != [rho, self.d_in()]
            || expert.b.shape() != [self.d_out(), rho]
        {
            return Err(dim("set_expert", format!("expert {j} shape mismatch")));
        }
        let (d_in, d_out) = (self.d_in(), self.d_out());
        self.a.data_mut()[j * rho * d_in..(j + 1) * rho * d_in].copy_from_slice(expert.a.data());
        let bt = expert.b.transpose();
        self.b_t.data_mut()[j * rho * d_out..(j + 1) * rho * d_out].copy_from_slice(bt.data());
        Ok(())
    }

    /// `W·h` alone.
    pub fn base_forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        Ok(matvec(&self.weight, h))
    }

    /// Expert `j`'s unscaled contribution `B_j · A_j · h`.
    pub fn expert_forward(&self, j: usize, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        let e = self.expert(j);
        Ok(matvec(&e.b, &matvec(&e.a, h)))
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.d_in() {
            return Err(dim("adapted_layer", format!("input {} vs d_in {}", h.len(), self.d_in())));
        }
        Ok(())
    }

    /// Binds the layer's tensors as graph leaves. Only the adapter factors
    /// can require gradients; the base weight never does.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> LayerVars {
        LayerVars {
            weight: g.leaf(&self.weight, false),
            a: g.leaf(&self.a, trainable),
            b_t: g.leaf(&self.b_t, trainable),
        }
    }

    /// Binds only expert block `j` (used when each trait owns its own adapter).
    pub fn bind_block<'a>(&'a self, g: &mut Graph<'a>, j: usize, trainable: bool) -> Result<LayerVars> {
        if j >= self.num_experts {
            return Err(dim("bind_block", format!("block {j} of {}", self.num_experts)));
        }
        let rho = self.expert_rank;
        let (d_in, d_out) = (self.d_in(), self.d_out());
        Ok(LayerVars {
            weight: g.leaf(&self.weight, false),
            a: g.leaf_slice(
                &self.a.data()[j * rho * d_in..(j + 1) * rho * d_in],
                vec![rho, d_in],
                trainable,
            )?,
            b_t: g.leaf_slice(
                &self.b_t.data()[j * rho * d_out..(j + 1) * rho * d_out],
                vec![rho, d_out],
                trainable,
            )?,
        })
    }
}

/// Graph handles for one adapted layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub a: Var,
    pub b_t: Var,
}

/// Batched adapted forward on the graph: `x: [T, d_in] -> [T, d_out]`.
/// `weights` is a length-`N` node scaling each expert's rank slice;
/// `None` means every bound expert contributes with weight one.
pub fn adapted_forward(
    g: &mut Graph<'_>,
    x: Var,
    vars: &LayerVars,
    weights: Option<Var>,
    scale: f64,
) -> Result<Var> {
    let base = g.matmul_nt(x, vars.weight)?;
    let low = g.matmul_nt(x, vars.a)?;
    let low = match weights {
        Some(w) => g.scale_col_blocks(low, w)?,
        None => low,
    };
    let delta = g.matmul(low, vars.b_t)?;
    let delta = g.scale(delta, scale);
    g.add(base, delta)
}

/// Single-adapter forward `O = W·h + (α/r)·B·A·h`; the layer must hold
/// exactly one expert.
pub fn lora_forward(h: &[f64], layer: &AdaptedLayer) -> Result<Vec<f64>> {
    if layer.num_experts() != 1 {
        return Err(Error::Config(format!(
            "lora_forward needs one expert, layer has {}",
            layer.num_experts()
        )));
    }
    let mut out = layer.base_forward(h)?;
    for (o, d) in out.iter_mut().zip(layer.expert_forward(0, h)?) {
        *o += layer.scale() * d;
    }
    Ok(out)
}

/// Mixture forward `O = W·h + (α/r)·Σ_j ω_j·B_j·A_j·h`.
pub fn moe_lora_forward(h: &[f64], layer: &AdaptedLayer, omega: &ExpertWeighting) -> Result<Vec<f64>> {
    let w = omega.as_slice();
    if w.len() != layer.num_experts() {
        return Err(Error::InvalidWeighting(format!(
            "{} weights for {} experts",
            w.len(),
            layer.num_experts()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf_slice(h, vec![1, h.len()], false)?;
    let vars = layer.bind(&mut g, false);
    let wv = g.leaf_slice(w, vec![w.len()], false)?;
    let out = adapted_forward(&mut g, x, &vars, Some(wv), layer.scale())?;
    Ok(g.value(out).to_vec())
}

/// Builds the adapted layers for a set of frozen weights. `A` is drawn from
/// `N(0, 0.02²)` and `B` is zero, deterministically under `seed`; the
/// weights themselves are moved in untouched.
pub fn init_adapter(config: &AdapterConfig, weights: Vec<Tensor>, seed: u64) -> Result<Vec<AdaptedLayer>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weights
        .into_iter()
        .map(|w| {
            AdaptedLayer::new(w, config.num_experts, config.expert_rank(), config.scale(), &mut rng)
        })
        .collect()
}

/// Trainable expert parameters, `Σ_layers N·(ρ·d_in + d_out·ρ)`. Router and
/// personality-table parameters are not included.
pub fn trainable_param_count(config: &AdapterConfig, layer_dims: &[(usize, usize)]) -> usize {
    let rho = config.expert_rank();
    layer_dims
        .iter()
        .map(|&(d_in, d_out)| config.num_experts * (rho * d_in + d_out * rho))
        .sum()
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (r, c) = m.dims2();
    (0..r)
        .map(|i| m.data()[i * c..(i + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
