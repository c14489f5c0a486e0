//! LoRA adapter algebra: per-site low-rank deltas, dense fusion of several
//! tasks' adapters, and similarity-weighted expert mixtures.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::continual::Strategy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{axpy, Matrix, SeededRng};

/// Standard deviation of the Gaussian used for a fresh adapter's `A`.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Tolerance on the expert weights of a mixture summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// The six linear layers inside a transformer block that carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Ff1,
    Ff2,
}

impl SiteKind {
    pub const ALL: [SiteKind; 6] =
        [SiteKind::AttnQ, SiteKind::AttnK, SiteKind::AttnV, SiteKind::AttnO, SiteKind::Ff1, SiteKind::Ff2];

    pub const COUNT: usize = 6;

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::AttnQ => "attn_q",
            SiteKind::AttnK => "attn_k",
            SiteKind::AttnV => "attn_v",
            SiteKind::AttnO => "attn_o",
            SiteKind::Ff1 => "ff_1",
            SiteKind::Ff2 => "ff_2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(d_in, d_out)` of the frozen weight at this site.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            SiteKind::AttnQ | SiteKind::AttnK | SiteKind::AttnV | SiteKind::AttnO => (cfg.d_model, cfg.d_model),
            SiteKind::Ff1 => (cfg.d_model, cfg.d_ff),
            SiteKind::Ff2 => (cfg.d_ff, cfg.d_model),
        }
    }
}

/// A linear site: block index plus layer kind. Displays as `block{i}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub block: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn new(block: usize, kind: SiteKind) -> Self {
        Self { block, kind }
    }

    /// Dense position of this site in a block-major site list.
    pub fn index(self) -> usize {
        self.block * SiteKind::COUNT + self.kind.index()
    }

    pub fn all(n_blocks: usize) -> impl Iterator<Item = Site> {
        (0..n_blocks).flat_map(|b| SiteKind::ALL.into_iter().map(move |k| Site::new(b, k)))
    }

    pub fn in_block(block: usize) -> impl Iterator<Item = Site> {
        SiteKind::ALL.into_iter().map(move |k| Site::new(block, k))
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad site name `{s}`"));
        let rest = s.strip_prefix("block").ok_or_else(bad)?;
        let (block, kind) = rest.split_once('.').ok_or_else(bad)?;
        let block = block.parse().map_err(|_| bad())?;
        let kind = SiteKind::ALL.into_iter().find(|k| k.as_str() == kind).ok_or_else(bad)?;
        Ok(Site::new(block, kind))
    }
}

/// Low-rank delta `scaling · B A` at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub site: Site,
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
    pub scaling: f64,
}

impl LoraAdapter {
    /// `A` Gaussian, `B` zero: the initial delta is exactly zero.
    pub fn fresh(site: Site, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d_in, d_out) = site.kind.dims(cfg);
        Self {
            site,
            a: Matrix::random_normal(cfg.lora_rank, d_in, LORA_A_INIT_STD, rng),
            b: Matrix::zeros(d_out, cfg.lora_rank),
            scaling: cfg.lora_scaling(),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.as_slice().len() + self.b.as_slice().len()
    }

    /// Dense `scaling · B A`, shaped like the frozen weight (`d_out × d_in`).
    pub fn dense_delta(&self) -> Matrix {
        let mut delta = self.b.matmul(&self.a).expect("adapter factors are conformable");
        delta.scale(self.scaling);
        delta
    }

    /// Row-batched form of [`adapter_delta`]: `out += weight · scaling · (h Aᵀ) Bᵀ`
    /// where `h` holds one input per row.
    pub fn accumulate_rows(&self, h: &Matrix, weight: f64, out: &mut Matrix) -> Result<()> {
        if h.cols() != self.d_in() || out.cols() != self.d_out() || out.rows() != h.rows() {
            return Err(Error::Config(format!(
                "adapter at {} expects {}→{}, got input {:?} output {:?}",
                self.site,
                self.d_in(),
                self.d_out(),
                h.shape(),
                out.shape()
            )));
        }
        let u = h.matmul_t(&self.a)?;
        let v = u.matmul_t(&self.b)?;
        out.add_scaled(weight * self.scaling, &v)
    }

    fn check_shape(&self, cfg: &ModelConfig) -> Result<()> {
        let (d_in, d_out) = self.site.kind.dims(cfg);
        if self.a.shape() != (cfg.lora_rank, d_in) || self.b.shape() != (d_out, cfg.lora_rank) {
            return Err(Error::Config(format!(
                "adapter at {} has A {:?} B {:?}, model expects A ({}, {d_in}) B ({d_out}, {})",
                self.site,
                self.a.shape(),
                self.b.shape(),
                cfg.lora_rank,
                cfg.lora_rank
            )));
        }
        Ok(())
    }
}

/// `scaling · B (A h)` for a single input vector.
pub fn adapter_delta(adapter: &LoraAdapter, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != adapter.d_in() {
        return Err(Error::Contract(format!(
            "adapter at {} takes inputs of length {}, got {}",
            adapter.site,
            adapter.d_in(),
            h.len()
        )));
    }
    let u = adapter.a.matvec(h)?;
    let mut out = adapter.b.matvec(&u)?;
    out.iter_mut().for_each(|v| *v *= adapter.scaling);
    Ok(out)
}

/// `Σ_i d_i · adapter_delta(expert_i, h)`.
pub fn mixture_output(experts: &[&LoraAdapter], weights: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if experts.is_empty() || experts.len() != weights.len() {
        return Err(Error::Contract(format!(
            "mixture needs one weight per expert, got {} experts and {} weights",
            experts.len(),
            weights.len()
        )));
    }
    check_weight_sum(weights)?;
    let mut out = vec![0.0; experts[0].d_out()];
    for (expert, &w) in experts.iter().zip(weights) {
        let delta = adapter_delta(expert, h)?;
        if delta.len() != out.len() {
            return Err(Error::Contract("experts disagree on output width".into()));
        }
        axpy(w, &delta, &mut out);
    }
    Ok(out)
}

fn check_weight_sum(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Contract(format!("expert weights must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Every adapter learned for one task, one per linear site, block-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapterSet {
    pub task: String,
    adapters: Vec<LoraAdapter>,
}

impl TaskAdapterSet {
    pub fn fresh(task: impl Into<String>, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let adapters = Site::all(cfg.n_blocks).map(|site| LoraAdapter::fresh(site, cfg, rng)).collect();
        Self { task: task.into(), adapters }
    }

    /// Builds a set from adapters in any order; every site of the model
    /// must be covered exactly once.
    pub fn from_adapters(task: impl Into<String>, cfg: &ModelConfig, adapters: Vec<LoraAdapter>) -> Result<Self> {
        let n_sites = cfg.n_blocks * SiteKind::COUNT;
        let mut slots: Vec<Option<LoraAdapter>> = vec![None; n_sites];
        for adapter in adapters {
            adapter.check_shape(cfg)?;
            let idx = adapter.site.index();
            if adapter.site.block >= cfg.n_blocks || slots[idx].is_some() {
                return Err(Error::Config(format!("duplicate or out-of-range adapter site {}", adapter.site)));
            }
            slots[idx] = Some(adapter);
        }
        let adapters = slots
            .into_iter()
            .enumerate()
            .map(|(i, slot)| {
                slot.ok_or_else(|| {
                    Error::Config(format!(
                        "adapter set misses site {}",
                        Site::new(i / SiteKind::COUNT, SiteKind::ALL[i % SiteKind::COUNT])
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task: task.into(), adapters })
    }

    pub fn get(&self, site: Site) -> &LoraAdapter {
        &self.adapters[site.index()]
    }

    pub fn get_mut(&mut self, site: Site) -> &mut LoraAdapter {
        &mut self.adapters[site.index()]
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn block(&self, block: usize) -> &[LoraAdapter] {
        &self.adapters[block * SiteKind::COUNT..(block + 1) * SiteKind::COUNT]
    }

    pub fn n_blocks(&self) -> usize {
        self.adapters.len() / SiteKind::COUNT
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::parameter_count).sum()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.adapters.len() != cfg.n_blocks * SiteKind::COUNT {
            return Err(Error::Config(format!(
                "adapter set covers {} sites, model has {}",
                self.adapters.len(),
                cfg.n_blocks * SiteKind::COUNT
            )));
        }
        self.adapters.iter().try_for_each(|a| a.check_shape(cfg))
    }

    /// SHA-256 over every factor, in site order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for adapter in &self.adapters {
            hasher.update(adapter.site.to_string().as_bytes());
            for v in adapter.a.as_slice().iter().chain(adapter.b.as_slice()).chain([&adapter.scaling]) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Dense per-site deltas `ΔW = Σ_i ε_i · scaling_i · B_i A_i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergedDelta {
    deltas: BTreeMap<Site, Matrix>,
    /// Rank of the fused factors, kept for parameter accounting.
    pub rank: usize,
}

impl MergedDelta {
    pub fn get(&self, site: Site) -> Option<&Matrix> {
        self.deltas.get(&site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.deltas.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &Matrix)> {
        self.deltas.iter()
    }

    pub fn insert(&mut self, site: Site, delta: Matrix) {
        self.deltas.insert(site, delta);
    }

    pub fn covers_block(&self, block: usize) -> bool {
        Site::in_block(block).all(|s| self.deltas.contains_key(&s))
    }

    pub fn dense_parameter_count(&self) -> usize {
        self.deltas.values().map(|m| m.as_slice().len()).sum()
    }

    /// Size of one rank-`rank` adapter at each of `block`'s sites.
    pub fn low_rank_equivalent(&self, block: usize) -> usize {
        Site::in_block(block)
            .filter_map(|s| self.deltas.get(&s))
            .map(|m| self.rank * (m.rows() + m.cols()))
            .sum()
    }
}

/// Fuses several tasks' adapters into one dense delta per requested site.
pub fn merge_adapters(sets: &[&TaskAdapterSet], coefficients: &[f64], sites: &[Site]) -> Result<MergedDelta> {
    if sets.is_empty() || sets.len() != coefficients.len() {
        return Err(Error::Contract(format!(
            "merge needs one coefficient per adapter set, got {} sets and {} coefficients",
            sets.len(),
            coefficients.len()
        )));
    }
    let n_blocks = sets[0].n_blocks();
    if sets.iter().any(|s| s.n_blocks() != n_blocks) {
        return Err(Error::Config("adapter sets cover different numbers of blocks".into()));
    }
    let mut merged = MergedDelta { rank: sets[0].adapters()[0].rank(), ..MergedDelta::default() };
    for &site in sites {
        if site.block >= n_blocks {
            return Err(Error::Config(format!("site {site} is not covered by the adapter sets")));
        }
        let first = sets[0].get(site);
        let mut delta = Matrix::zeros(first.d_out(), first.d_in());
        for (set, &eps) in sets.iter().zip(coefficients) {
            let adapter = set.get(site);
            if adapter.d_in() != first.d_in() || adapter.d_out() != first.d_out() {
                return Err(Error::Config(format!("adapter shapes disagree at {site}")));
            }
            if eps != 0.0 {
                delta.add_scaled(eps, &adapter.dense_delta())?;
            }
        }
        merged.insert(site, delta);
    }
    Ok(merged)
}

/// Source of per-site deltas consulted by the forward pass.
pub trait AdapterSource {
    /// Adds this source's delta for `site` to `out`, one input per row of `h`.
    fn accumulate(&self, site: Site, h: &Matrix, out: &mut Matrix) -> Result<()>;

    /// Verifies that the source matches the model's sites and shapes.
    fn check(&self, cfg: &ModelConfig) -> Result<()>;
}

/// The frozen base model with no adapters at all.
pub struct NoAdapters;

impl AdapterSource for NoAdapters {
    fn accumulate(&self, _: Site, _: &Matrix, _: &mut Matrix) -> Result<()> {
        Ok(())
    }

    fn check(&self, _: &ModelConfig) -> Result<()> {
        Ok(())
    }
}

impl AdapterSource for TaskAdapterSet {
    fn accumulate(&self, site: Site, h: &Matrix, out: &mut Matrix) -> Result<()> {
        self.get(site).accumulate_rows(h, 1.0, out)
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        TaskAdapterSet::check(self, cfg)
    }
}

/// What one block carries at inference time.
#[derive(Debug, Clone)]
pub enum BlockAdapters {
    Base,
    /// Dense fused delta; the shared value covers this block's sites.
    Merged(Arc<MergedDelta>),
    /// Weighted sum of several tasks' adapters at this block.
    Mixture { experts: Vec<Arc<TaskAdapterSet>>, weights: Vec<f64> },
}

/// Per-block adapter layout for one inference input.
#[derive(Debug, Clone)]
pub struct ComposedAdapters {
    pub strategy: Strategy,
    blocks: Vec<BlockAdapters>,
}

impl ComposedAdapters {
    pub fn new(strategy: Strategy, blocks: Vec<BlockAdapters>) -> Result<Self> {
        for (i, block) in blocks.iter().enumerate() {
            match block {
                BlockAdapters::Base => {}
                BlockAdapters::Merged(delta) => {
                    if !delta.covers_block(i) {
                        return Err(Error::Config(format!("merged delta does not cover block {i}")));
                    }
                }
                BlockAdapters::Mixture { experts, weights } => {
                    if experts.is_empty() || experts.len() != weights.len() {
                        return Err(Error::Contract(format!(
                            "block {i}: {} experts with {} weights",
                            experts.len(),
                            weights.len()
                        )));
                    }
                    check_weight_sum(weights)?;
                }
            }
        }
        Ok(Self { strategy, blocks })
    }

    pub fn empty(strategy: Strategy, n_blocks: usize) -> Self {
        Self { strategy, blocks: vec![BlockAdapters::Base; n_blocks] }
    }

    pub fn blocks(&self) -> &[BlockAdapters] {
        &self.blocks
    }

    pub fn top_block(&self) -> Option<&BlockAdapters> {
        self.blocks.last()
    }

    /// Counted loaded parameters per block.
    pub fn parameter_counts(&self) -> Vec<BlockParameterCount> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(block, layout)| match layout {
                BlockAdapters::Base => BlockParameterCount { block, ..Default::default() },
                BlockAdapters::Merged(delta) => {
                    let dense: usize = Site::in_block(block)
                        .filter_map(|s| delta.get(s))
                        .map(|m| m.as_slice().len())
                        .sum();
                    BlockParameterCount {
                        block,
                        kind: "merged",
                        adapter_modules: SiteKind::COUNT,
                        adapter_equivalent_parameters: delta.low_rank_equivalent(block),
                        materialized_parameters: dense,
                    }
                }
                BlockAdapters::Mixture { experts, .. } => {
                    let per_expert: usize = experts[0].block(block).iter().map(LoraAdapter::parameter_count).sum();
                    BlockParameterCount {
                        block,
                        kind: "mixture",
                        adapter_modules: experts.len() * SiteKind::COUNT,
                        adapter_equivalent_parameters: experts.len() * per_expert,
                        materialized_parameters: experts.len() * per_expert,
                    }
                }
            })
            .collect()
    }
}

/// Parameters a composition keeps loaded at one block.
///
/// `adapter_equivalent_parameters` counts a fused block as one adapter set's
/// worth of low-rank factors, the accounting under which fusion costs the
/// same as a single task; `materialized_parameters` counts the floats this
/// crate actually stores (dense deltas for fused blocks).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BlockParameterCount {
    pub block: usize,
    pub kind: &'static str,
    pub adapter_modules: usize,
    pub adapter_equivalent_parameters: usize,
    pub materialized_parameters: usize,
}

impl AdapterSource for ComposedAdapters {
    fn accumulate(&self, site: Site, h: &Matrix, out: &mut Matrix) -> Result<()> {
        match &self.blocks[site.block] {
            BlockAdapters::Base => Ok(()),
            BlockAdapters::Merged(delta) => {
                let dw = delta
                    .get(site)
                    .ok_or_else(|| Error::Config(format!("merged delta misses site {site}")))?;
                let add = h.matmul_t(dw)?;
                out.add_assign(&add)
            }
            BlockAdapters::Mixture { experts, weights } => {
                for (expert, &w) in experts.iter().zip(weights) {
                    if w != 0.0 {
                        expert.get(site).accumulate_rows(h, w, out)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.blocks.len() != cfg.n_blocks {
            return Err(Error::Config(format!(
                "composition has {} blocks, model has {}",
                self.blocks.len(),
                cfg.n_blocks
            )));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockAdapters::Base => {}
                BlockAdapters::Merged(delta) => {
                    for site in Site::in_block(i) {
                        let (d_in, d_out) = site.kind.dims(cfg);
                        match delta.get(site) {
                            Some(m) if m.shape() == (d_out, d_in) => {}
                            _ => return Err(Error::Config(format!("merged delta at {site} does not match the model"))),
                        }
                    }
                }
                BlockAdapters::Mixture { experts, .. } => {
                    for expert in experts {
                        expert.check(cfg)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 8, d_ff: 12, n_heads: 2, n_blocks: 2, lora_rank: 2, ..ModelConfig::default() }
    }

    fn trained(task: &str, seed: u64) -> TaskAdapterSet {
        let cfg = cfg();
        let mut rng = SeededRng::new(seed);
        let mut set = TaskAdapterSet::fresh(task, &cfg, &mut rng);
        for adapter in set.adapters_mut() {
            adapter.b = Matrix::random_normal(adapter.b.rows(), adapter.b.cols(), 0.3, &mut rng);
        }
        set
    }

    fn manual_adapter(a: &[Vec<f64>], b: &[Vec<f64>], scaling: f64) -> LoraAdapter {
        LoraAdapter {
            site: Site::new(0, SiteKind::AttnQ),
            a: Matrix::from_rows(a).unwrap(),
            b: Matrix::from_rows(b).unwrap(),
            scaling,
        }
    }

    #[test]
    fn fresh_adapter_is_zero() {
        let cfg = cfg();
        let mut rng = SeededRng::new(1);
        let adapter = LoraAdapter::fresh(Site::new(1, SiteKind::Ff1), &cfg, &mut rng);
        let h: Vec<f64> = (0..cfg.d_model).map(|i| i as f64 - 3.0).collect();
        assert!(adapter_delta(&adapter, &h).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(adapter.scaling, cfg.lora_alpha / cfg.lora_rank as f64);
    }

    #[test]
    fn hand_computed_delta() {
        let adapter = manual_adapter(&[vec![1.0, 0.0]], &[vec![1.0], vec![0.0]], 1.0);
        assert_eq!(adapter_delta(&adapter, &[1.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(adapter_delta(&adapter, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn delta_is_linear() {
        let set = trained("t", 5);
        let adapter = set.get(Site::new(0, SiteKind::AttnV));
        let h: Vec<f64> = (0..adapter.d_in()).map(|i| (i as f64 * 0.7).sin()).collect();
        let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let one = adapter_delta(adapter, &h).unwrap();
        let two = adapter_delta(adapter, &h2).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_two_rank_one_adapters() {
        // [[1,0],[0,0]] and [[0,0],[0,2]] as rank-1 products.
        let cfg = ModelConfig { d_model: 2, d_ff: 2, n_heads: 1, n_blocks: 2, lora_rank: 1, lora_alpha: 1.0, ..ModelConfig::default() };
        let mut rng = SeededRng::new(0);
        let mut s1 = TaskAdapterSet::fresh("a", &cfg, &mut rng);
        let mut s2 = TaskAdapterSet::fresh("b", &cfg, &mut rng);
        let site = Site::new(0, SiteKind::AttnQ);
        *s1.get_mut(site) = LoraAdapter { site, ..manual_adapter(&[vec![1.0, 0.0]], &[vec![1.0], vec![0.0]], 1.0) };
        *s2.get_mut(site) = LoraAdapter { site, ..manual_adapter(&[vec![0.0, 1.0]], &[vec![0.0], vec![2.0]], 1.0) };
        let merged = merge_adapters(&[&s1, &s2], &[1.0, 1.0], &[site]).unwrap();
        let out = merged.get(site).unwrap().matvec(&[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn merge_singleton_and_zero() {
        let set = trained("t", 9);
        let sites: Vec<Site> = Site::all(2).collect();
        let merged = merge_adapters(&[&set], &[1.0], &sites).unwrap();
        let zero = merge_adapters(&[&set], &[0.0], &sites).unwrap();
        for site in &sites {
            let adapter = set.get(*site);
            let h: Vec<f64> = (0..adapter.d_in()).map(|i| 0.1 * i as f64 - 0.2).collect();
            let direct = adapter_delta(adapter, &h).unwrap();
            let via = merged.get(*site).unwrap().matvec(&h).unwrap();
            for (a, b) in direct.iter().zip(&via) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(zero.get(*site).unwrap().as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn merge_rejects_mismatched_inputs() {
        let set = trained("t", 1);
        assert!(matches!(merge_adapters(&[&set], &[1.0, 1.0], &[]), Err(Error::Contract(_))));
        assert!(matches!(merge_adapters(&[], &[], &[]), Err(Error::Contract(_))));
        let far = Site::new(7, SiteKind::AttnQ);
        assert!(matches!(merge_adapters(&[&set], &[1.0], &[far]), Err(Error::Config(_))));
    }

    #[test]
    fn mixture_examples() {
        let e1 = manual_adapter(&[vec![1.0, 0.0]], &[vec![1.0], vec![0.0]], 1.0);
        let e2 = manual_adapter(&[vec![0.0, 1.0]], &[vec![0.0], vec![2.0]], 1.0);
        let h = [1.0, 1.0];
        let out = mixture_output(&[&e1, &e2], &[0.7, 0.3], &h).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15 && (out[1] - 0.6).abs() < 1e-15);
        assert_eq!(mixture_output(&[&e1, &e2], &[0.0, 1.0], &h).unwrap(), adapter_delta(&e2, &h).unwrap());
        let same = mixture_output(&[&e1, &e1], &[0.25, 0.75], &h).unwrap();
        assert_eq!(same, adapter_delta(&e1, &h).unwrap());
        assert!(matches!(mixture_output(&[&e1, &e2], &[0.5, 0.6], &h), Err(Error::Contract(_))));
    }

    #[test]
    fn from_adapters_requires_full_coverage() {
        let cfg = cfg();
        let set = trained("t", 2);
        let mut adapters = set.adapters().to_vec();
        adapters.reverse();
        let rebuilt = TaskAdapterSet::from_adapters("t", &cfg, adapters.clone()).unwrap();
        assert_eq!(rebuilt, set);
        adapters.pop();
        assert!(matches!(TaskAdapterSet::from_adapters("t", &cfg, adapters), Err(Error::Config(_))));
    }

    #[test]
    fn site_names_round_trip() {
        for site in Site::all(3) {
            assert_eq!(site.to_string().parse::<Site>().unwrap(), site);
        }
        assert_eq!(Site::new(2, SiteKind::Ff2).to_string(), "block2.ff_2");
        assert!("blk0.attn_q".parse::<Site>().is_err());
    }

    #[test]
    fn composition_rejects_bad_weights() {
        let set = Arc::new(trained("t", 3));
        let bad = ComposedAdapters::new(
            Strategy::HiDe,
            vec![BlockAdapters::Base, BlockAdapters::Mixture { experts: vec![set.clone()], weights: vec![0.9] }],
        );
        assert!(matches!(bad, Err(Error::Contract(_))));
        let ok = ComposedAdapters::new(
            Strategy::HiDe,
            vec![BlockAdapters::Base, BlockAdapters::Mixture { experts: vec![set], weights: vec![1.0] }],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn checksum_tracks_contents() {
        let mut set = trained("t", 4);
        let before = set.checksum();
        assert_eq!(before, set.clone().checksum());
        set.adapters_mut()[0].a[(0, 0)] += 1e-9;
        assert_ne!(before, set.checksum());
    }
}
