//! Turns calibration statistics into an allocation plan: per-sublayer
//! compression ratios from input/output cosine similarity, then per-matrix
//! retained ranks from an energy-balanced budget solver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::EnergyProfile;
use crate::linalg::Matrix;

/// Columns whose input or output norm falls below this are skipped when
/// averaging cosine similarities.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocateError {
    #[error("input and output batches must share a shape")]
    ShapeMismatch,
    #[error("empty calibration batch")]
    EmptyBatch,
    #[error("every column was degenerate (norm below {DEGENERATE_NORM:e})")]
    AllDegenerateColumns,
    #[error("need at least 2 non-skipped sublayers, got {0}")]
    TooFewSublayers(usize),
    #[error("skipped sublayers leave effective target {0:.4} outside [0, 1)")]
    InfeasibleTarget(f64),
    #[error("per-rank costs differ within one sublayer: {0} vs {1}")]
    HeterogeneousRankCost(usize, usize),
    #[error("budget {budget} below the floor-rank total {floor_total}")]
    InfeasibleBudget { budget: u64, floor_total: u64 },
    #[error("rank search space {0} exceeds the brute-force limit")]
    SearchSpaceTooLarge(u128),
    #[error("missing profile or dims for matrix '{0}'")]
    MissingMatrix(String),
    #[error("invalid allocation config: {0}")]
    InvalidConfig(String),
}

/// One MHA or FFN block inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    Mha,
    Ffn,
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SublayerKind::Mha => f.write_str("mha"),
            SublayerKind::Ffn => f.write_str("ffn"),
        }
    }
}

/// Identifies one sublayer, e.g. `L3.ffn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SublayerId {
    pub layer: usize,
    pub kind: SublayerKind,
}

impl SublayerId {
    pub fn mha(layer: usize) -> Self {
        Self {
            layer,
            kind: SublayerKind::Mha,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            kind: SublayerKind::Ffn,
        }
    }
}

impl fmt::Display for SublayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

impl FromStr for SublayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix('L')
            .ok_or_else(|| format!("sublayer id '{s}' must look like L<layer>.<mha|ffn>"))?;
        let (layer, kind) = rest
            .split_once('.')
            .ok_or_else(|| format!("sublayer id '{s}' must look like L<layer>.<mha|ffn>"))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| format!("bad layer index in '{s}'"))?;
        let kind = match kind {
            "mha" => SublayerKind::Mha,
            "ffn" => SublayerKind::Ffn,
            other => return Err(format!("unknown sublayer kind '{other}'")),
        };
        Ok(SublayerId { layer, kind })
    }
}

impl Serialize for SublayerId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SublayerId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named spectrum families stored alongside raw calibration statistics so
/// that rank allocation can run without re-touching the model weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    Pca,
    Afm,
    Svd,
    Asvd,
    Awsvd,
}

impl SpectrumKind {
    pub const ALL: [SpectrumKind; 5] = [
        SpectrumKind::Pca,
        SpectrumKind::Afm,
        SpectrumKind::Svd,
        SpectrumKind::Asvd,
        SpectrumKind::Awsvd,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SpectrumKind::Pca => "pca",
            SpectrumKind::Afm => "afm",
            SpectrumKind::Svd => "svd",
            SpectrumKind::Asvd => "asvd",
            SpectrumKind::Awsvd => "awsvd",
        }
    }
}

/// Per-matrix calibration statistics accumulated during the stats pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixStats {
    pub d_in: usize,
    pub d_out: usize,
    /// Accumulated output Gram `Y Y^T`.
    pub gram_y: Matrix,
    /// Accumulated input Gram `X X^T`; lets reports measure reconstruction
    /// loss on the calibration batch without storing activations.
    pub gram_x: Matrix,
    /// Mean output vector.
    pub mean_y: Vec<f64>,
    /// Sum of inputs per channel (for bias-aware loss measurement).
    pub sum_x: Vec<f64>,
    /// Mean absolute input per channel.
    pub scale_abs: Vec<f64>,
    /// Euclidean norm of inputs per channel.
    pub scale_l2: Vec<f64>,
    pub token_count: u64,
    /// Precomputed energy spectra, one per backend family.
    pub spectra: BTreeMap<SpectrumKind, Vec<f64>>,
}

/// Importance and per-matrix statistics for one sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerStats {
    pub id: SublayerId,
    /// Mean token-wise cosine similarity between sublayer input and output.
    pub importance: f64,
    /// Columns excluded from the importance mean for near-zero norms.
    pub degenerate_columns: u64,
    /// Dense parameter count of the sublayer's decomposable matrices.
    pub param_count: u64,
    pub matrices: BTreeMap<String, MatrixStats>,
    /// Stacked `[Yq; Yk]` output Gram, captured for joint factorization.
    pub joint_qk_gram: Option<Matrix>,
    /// Eigen spectrum of the stacked Gram.
    pub joint_spectrum: Option<Vec<f64>>,
}

/// Allocation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    /// Global fraction of parameters to remove.
    pub target_ratio: f64,
    /// Scale applied to the importance z-scores.
    pub alpha: f64,
    /// Energy-spread reporting threshold.
    pub epsilon: f64,
    /// Lower bound on the per-matrix retained parameter fraction.
    pub rank_floor_ratio: f64,
    /// Sublayers left dense; their parameter mass is absorbed by inflating
    /// the effective target for the rest.
    pub skip_sublayers: BTreeSet<SublayerId>,
    /// Ratios are clamped into this range after allocation.
    pub clamp_range: (f64, f64),
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            target_ratio: 0.5,
            alpha: 0.35,
            epsilon: 1e-3,
            rank_floor_ratio: 0.1,
            skip_sublayers: BTreeSet::new(),
            clamp_range: (0.01, 0.95),
        }
    }
}

impl AllocationConfig {
    pub fn with_target(target_ratio: f64) -> Self {
        Self {
            target_ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AllocateError> {
        let (lo, hi) = self.clamp_range;
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(AllocateError::InvalidConfig(format!(
                "target_ratio {} outside [0, 1)",
                self.target_ratio
            )));
        }
        if self.alpha < 0.0 {
            return Err(AllocateError::InvalidConfig("alpha must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(AllocateError::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.rank_floor_ratio) {
            return Err(AllocateError::InvalidConfig(format!(
                "rank_floor_ratio {} outside [0, 1)",
                self.rank_floor_ratio
            )));
        }
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(AllocateError::InvalidConfig(format!(
                "clamp range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"
            )));
        }
        // target_ratio == 0 short-circuits to a no-op plan before clamping,
        // so the lo <= target check only applies to real targets.
        if self.target_ratio > 0.0 && !(lo <= self.target_ratio && self.target_ratio <= hi) {
            return Err(AllocateError::InvalidConfig(format!(
                "target_ratio {} outside clamp range [{lo}, {hi}]",
                self.target_ratio
            )));
        }
        Ok(())
    }
}

/// Result of the importance measurement over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceResult {
    pub value: f64,
    pub used_columns: u64,
    pub skipped_columns: u64,
}

/// Mean column-wise cosine similarity between a sublayer's input `x` and its
/// post-residual output `y`. Near-zero-norm columns are skipped and counted.
pub fn sublayer_importance(x: &Matrix, y: &Matrix) -> Result<ImportanceResult, AllocateError> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(AllocateError::ShapeMismatch);
    }
    if x.cols() == 0 {
        return Err(AllocateError::EmptyBatch);
    }
    let mut sum = 0.0;
    let mut used = 0u64;
    let mut skipped = 0u64;
    for m in 0..x.cols() {
        let mut dot = 0.0;
        let mut nx2 = 0.0;
        let mut ny2 = 0.0;
        for i in 0..x.rows() {
            let a = x.get(i, m);
            let b = y.get(i, m);
            dot += a * b;
            nx2 += a * a;
            ny2 += b * b;
        }
        if nx2.sqrt() < DEGENERATE_NORM || ny2.sqrt() < DEGENERATE_NORM {
            skipped += 1;
            continue;
        }
        // Single-sqrt form: for y identical to x the three sums coincide and
        // the ratio collapses to exactly 1.
        sum += (dot / (nx2 * ny2).sqrt()).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(AllocateError::AllDegenerateColumns);
    }
    Ok(ImportanceResult {
        value: sum / used as f64,
        used_columns: used,
        skipped_columns: skipped,
    })
}

/// A ratio pushed back into the clamp range, with the residual deviation it
/// leaves against the effective target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub sublayer: SublayerId,
    pub requested: f64,
    pub clamped_to: f64,
}

/// Outcome of the ratio allocation step.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioAllocation {
    /// Final per-sublayer ratios; skipped sublayers appear with ratio 0.
    pub ratios: BTreeMap<SublayerId, f64>,
    /// Target inflated to absorb skipped sublayers' parameters.
    pub effective_target: f64,
    /// Parameter-weighted mean of the raw z-scored ratios, before the
    /// one-shot translation onto the effective target.
    pub pre_adjustment_mean: f64,
    /// Parameter-weighted mean ratio over non-skipped sublayers, post clamp.
    pub weighted_mean: f64,
    /// Deviation of `weighted_mean` from `effective_target` (zero unless
    /// clamping engaged).
    pub target_deviation: f64,
    pub clamp_events: Vec<ClampEvent>,
    /// All importances were identical; ratios fell back to uniform.
    pub degenerate_variance: bool,
}

/// Allocates per-sublayer compression ratios from importances.
///
/// Importances are z-scored jointly over all non-skipped sublayers with
/// population variance, scaled by `alpha`, shifted to the target, corrected
/// by the parameter-weighted realized mean, and finally clamped.
/// Higher similarity means milder transformation and thus more compression.
pub fn allocate_ratios(
    importances: &BTreeMap<SublayerId, f64>,
    param_counts: &BTreeMap<SublayerId, u64>,
    cfg: &AllocationConfig,
) -> Result<RatioAllocation, AllocateError> {
    cfg.validate()?;
    let active: Vec<SublayerId> = importances
        .keys()
        .filter(|id| !cfg.skip_sublayers.contains(id))
        .copied()
        .collect();
    if active.len() < 2 {
        return Err(AllocateError::TooFewSublayers(active.len()));
    }
    for id in &active {
        if !param_counts.contains_key(id) {
            return Err(AllocateError::MissingMatrix(id.to_string()));
        }
    }

    let total_params: f64 = importances
        .keys()
        .map(|id| param_counts.get(id).copied().unwrap_or(0) as f64)
        .sum();
    let active_params: f64 = active
        .iter()
        .map(|id| param_counts[id] as f64)
        .sum();
    if active_params <= 0.0 {
        return Err(AllocateError::InfeasibleTarget(f64::INFINITY));
    }
    // Skipped sublayers remove nothing, so the rest must carry their share.
    let effective_target = cfg.target_ratio * total_params / active_params;
    if !(0.0..1.0).contains(&effective_target) {
        return Err(AllocateError::InfeasibleTarget(effective_target));
    }

    let n = active.len() as f64;
    let mean: f64 = active.iter().map(|id| importances[id]).sum::<f64>() / n;
    let var: f64 = active
        .iter()
        .map(|id| (importances[id] - mean).powi(2))
        .sum::<f64>()
        / n;
    let degenerate = var <= 0.0;
    let std = var.sqrt();

    let mut raw: BTreeMap<SublayerId, f64> = BTreeMap::new();
    for id in &active {
        let z = if degenerate {
            0.0
        } else {
            (importances[id] - mean) / std
        };
        raw.insert(*id, cfg.alpha * z + cfg.target_ratio);
    }

    // Realized parameter-weighted mean, then a one-shot uniform translation
    // onto the effective target.
    let realized: f64 = active
        .iter()
        .map(|id| raw[id] * param_counts[id] as f64)
        .sum::<f64>()
        / active_params;
    let shift = effective_target - realized;

    let (lo, hi) = cfg.clamp_range;
    let mut ratios = BTreeMap::new();
    let mut clamp_events = Vec::new();
    for id in importances.keys() {
        if cfg.skip_sublayers.contains(id) {
            ratios.insert(*id, 0.0);
            continue;
        }
        let requested = raw[id] + shift;
        let clamped = requested.clamp(lo, hi);
        if clamped != requested {
            clamp_events.push(ClampEvent {
                sublayer: *id,
                requested,
                clamped_to: clamped,
            });
        }
        ratios.insert(*id, clamped);
    }

    let weighted_mean: f64 = active
        .iter()
        .map(|id| ratios[id] * param_counts[id] as f64)
        .sum::<f64>()
        / active_params;
    Ok(RatioAllocation {
        ratios,
        effective_target,
        pre_adjustment_mean: realized,
        weighted_mean,
        target_deviation: weighted_mean - effective_target,
        clamp_events,
        degenerate_variance: degenerate,
    })
}

/// Total rank budget for a sublayer whose matrices all share a per-rank cost.
pub fn sublayer_rank_budget(
    matrix_dims: &[(usize, usize)],
    p: f64,
) -> Result<u64, AllocateError> {
    let mut cost = None;
    for &(d_in, d_out) in matrix_dims {
        let c = d_in + d_out;
        match cost {
            None => cost = Some(c),
            Some(prev) if prev != c => {
                return Err(AllocateError::HeterogeneousRankCost(prev, c));
            }
            _ => {}
        }
    }
    let mut budget = 0u64;
    for &(d_in, d_out) in matrix_dims {
        budget += crate::decompose::rank_for_ratio(d_in, d_out, p)
            .map_err(|_| AllocateError::InvalidConfig(format!("ratio {p} out of range")))?
            as u64;
    }
    Ok(budget)
}

/// Floor rank keeping at least `floor_ratio` of a matrix's parameters.
pub fn rank_floor(d_in: usize, d_out: usize, floor_ratio: f64) -> usize {
    let raw = (floor_ratio * (d_in * d_out) as f64 / (d_in + d_out) as f64).ceil() as usize;
    raw.max(1).min(d_in.min(d_out))
}

/// Solved per-matrix ranks for one sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSolution {
    pub ranks: BTreeMap<String, usize>,
    /// Shared energy level found by the binary search.
    pub tau: f64,
    /// Max minus min retained energy across the sublayer's matrices.
    pub spread: f64,
    pub spread_exceeds_epsilon: bool,
    /// Matrices whose floor rank overrode the energy level.
    pub floor_bound: Vec<String>,
}

struct RankItem<'a> {
    name: &'a str,
    profile: &'a EnergyProfile,
    floor: usize,
    r_max: usize,
    cost: u64,
}

fn collect_items<'a>(
    profiles: &'a BTreeMap<String, EnergyProfile>,
    dims: &BTreeMap<String, (usize, usize)>,
    costs: Option<&BTreeMap<String, u64>>,
    floor_ratio: f64,
) -> Result<Vec<RankItem<'a>>, AllocateError> {
    let mut items = Vec::with_capacity(profiles.len());
    for (name, profile) in profiles {
        let &(d_in, d_out) = dims
            .get(name)
            .ok_or_else(|| AllocateError::MissingMatrix(name.clone()))?;
        let r_max = d_in.min(d_out).min(profile.len());
        let floor = rank_floor(d_in, d_out, floor_ratio).min(r_max);
        let cost = match costs {
            Some(c) => *c
                .get(name)
                .ok_or_else(|| AllocateError::MissingMatrix(name.clone()))?,
            None => 1,
        };
        items.push(RankItem {
            name,
            profile,
            floor,
            r_max,
            cost,
        });
    }
    Ok(items)
}

fn ranks_at_tau(items: &[RankItem<'_>], tau: f64) -> Vec<usize> {
    items
        .iter()
        .map(|it| it.profile.min_rank_reaching(tau).clamp(it.floor, it.r_max))
        .collect()
}

fn weighted_total(items: &[RankItem<'_>], ranks: &[usize]) -> u64 {
    items
        .iter()
        .zip(ranks)
        .map(|(it, &r)| it.cost * r as u64)
        .sum()
}

/// Energy-balanced rank allocation under a shared budget, in weighted rank
/// units (`cost` per rank unit; 1 everywhere for homogeneous sublayers).
///
/// Phase 1 binary-searches the largest shared energy level whose minimal
/// ranks fit the budget; phase 2 greedily tops up the matrix with the lowest
/// retained energy while budget remains.
pub fn balanced_ranks_weighted(
    profiles: &BTreeMap<String, EnergyProfile>,
    dims: &BTreeMap<String, (usize, usize)>,
    costs: &BTreeMap<String, u64>,
    budget: u64,
    epsilon: f64,
    floor_ratio: f64,
) -> Result<RankSolution, AllocateError> {
    let items = collect_items(profiles, dims, Some(costs), floor_ratio)?;
    solve_balanced(items, budget, epsilon)
}

/// Energy-balanced rank allocation with unit costs: the budget counts ranks.
pub fn balanced_ranks(
    profiles: &BTreeMap<String, EnergyProfile>,
    dims: &BTreeMap<String, (usize, usize)>,
    budget: u64,
    epsilon: f64,
    floor_ratio: f64,
) -> Result<RankSolution, AllocateError> {
    let items = collect_items(profiles, dims, None, floor_ratio)?;
    solve_balanced(items, budget, epsilon)
}

fn solve_balanced(
    items: Vec<RankItem<'_>>,
    budget: u64,
    epsilon: f64,
) -> Result<RankSolution, AllocateError> {
    let floor_ranks: Vec<usize> = items.iter().map(|it| it.floor).collect();
    let floor_total = weighted_total(&items, &floor_ranks);
    if floor_total > budget {
        return Err(AllocateError::InfeasibleBudget {
            budget,
            floor_total,
        });
    }

    // Phase 1: run the bisection to float-grid exhaustion so the recovered
    // level is exact up to adjacent representable values.
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    if weighted_total(&items, &ranks_at_tau(&items, hi)) <= budget {
        lo = hi;
    } else {
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if weighted_total(&items, &ranks_at_tau(&items, mid)) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let tau = lo;
    let mut ranks = ranks_at_tau(&items, tau);

    // Phase 2: spend the remaining budget on the lowest-energy matrix; ties
    // go to the lexicographically smallest name.
    let mut used = weighted_total(&items, &ranks);
    loop {
        let mut pick: Option<usize> = None;
        for (idx, it) in items.iter().enumerate() {
            if ranks[idx] >= it.r_max || used + it.cost > budget {
                continue;
            }
            match pick {
                None => pick = Some(idx),
                Some(best) => {
                    let cb = items[best].profile.retained_at(ranks[best]);
                    let ci = it.profile.retained_at(ranks[idx]);
                    if ci < cb || (ci == cb && it.name < items[best].name) {
                        pick = Some(idx);
                    }
                }
            }
        }
        match pick {
            Some(idx) => {
                ranks[idx] += 1;
                used += items[idx].cost;
            }
            None => break,
        }
    }

    let retained: Vec<f64> = items
        .iter()
        .zip(&ranks)
        .map(|(it, &r)| it.profile.retained_at(r))
        .collect();
    let spread = retained
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        - retained.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor_bound = items
        .iter()
        .zip(&ranks)
        .filter(|(it, &r)| r == it.floor && it.profile.min_rank_reaching(tau) < it.floor)
        .map(|(it, _)| it.name.to_string())
        .collect();

    Ok(RankSolution {
        ranks: items
            .iter()
            .zip(&ranks)
            .map(|(it, &r)| (it.name.to_string(), r))
            .collect(),
        tau,
        spread,
        spread_exceeds_epsilon: spread > epsilon,
        floor_bound,
    })
}

/// Exhaustive oracle for the budgeted rank problem; test use only.
///
/// Maximizes the summed retained energy subject to the budget and floors,
/// breaking ties by smallest maximum rank, then lexicographic rank order.
pub fn brute_force_ranks(
    profiles: &BTreeMap<String, EnergyProfile>,
    dims: &BTreeMap<String, (usize, usize)>,
    budget: u64,
    _epsilon: f64,
    floor_ratio: f64,
) -> Result<BTreeMap<String, usize>, AllocateError> {
    let items = collect_items(profiles, dims, None, floor_ratio)?;
    let space: u128 = items.iter().map(|it| it.r_max as u128).product();
    if space > 1_000_000 {
        return Err(AllocateError::SearchSpaceTooLarge(space));
    }
    let floor_ranks: Vec<usize> = items.iter().map(|it| it.floor).collect();
    let floor_total = weighted_total(&items, &floor_ranks);
    if floor_total > budget {
        return Err(AllocateError::InfeasibleBudget {
            budget,
            floor_total,
        });
    }

    let mut current: Vec<usize> = floor_ranks.clone();
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    loop {
        let total: u64 = current.iter().map(|&r| r as u64).sum();
        if total <= budget {
            let objective: f64 = items
                .iter()
                .zip(&current)
                .map(|(it, &r)| it.profile.retained_at(r))
                .sum();
            let max_rank = *current.iter().max().unwrap();
            let better = match &best {
                None => true,
                Some((bo, bm, bv)) => {
                    objective > bo + 1e-15
                        || ((objective - bo).abs() <= 1e-15
                            && (max_rank < *bm || (max_rank == *bm && current < *bv)))
                }
            };
            if better {
                best = Some((objective, max_rank, current.clone()));
            }
        }
        // Odometer increment over [floor, r_max] per position.
        let mut pos = items.len();
        let mut advanced = false;
        while pos > 0 {
            pos -= 1;
            if current[pos] < items[pos].r_max {
                current[pos] += 1;
                for p in pos + 1..items.len() {
                    current[p] = items[p].floor;
                }
                advanced = true;
                break;
            }
            current[pos] = items[pos].floor;
        }
        if !advanced {
            break;
        }
    }
    finish_brute(best, &items)
}

fn finish_brute(
    best: Option<(f64, usize, Vec<usize>)>,
    items: &[RankItem<'_>],
) -> Result<BTreeMap<String, usize>, AllocateError> {
    let (_, _, ranks) = best.expect("floor tuple is always feasible");
    Ok(items
        .iter()
        .zip(ranks)
        .map(|(it, r)| (it.name.to_string(), r))
        .collect())
}

/// Per-matrix input to plan building: its spectrum, dimensions, and the
/// per-rank storage cost (which differs from `d_in + d_out` only for the
/// joint query/key pair, whose shared `R` factor is stored twice).
#[derive(Debug, Clone)]
pub struct MatrixAllocInput {
    pub profile: EnergyProfile,
    pub d_in: usize,
    pub d_out: usize,
    pub storage_cost_per_rank: u64,
}

impl MatrixAllocInput {
    pub fn plain(profile: EnergyProfile, d_in: usize, d_out: usize) -> Self {
        Self {
            profile,
            d_in,
            d_out,
            storage_cost_per_rank: (d_in + d_out) as u64,
        }
    }

    pub fn dense_params(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}

/// Per-sublayer input to plan building.
#[derive(Debug, Clone)]
pub struct SublayerAllocInput {
    pub importance: f64,
    pub param_count: u64,
    pub matrices: BTreeMap<String, MatrixAllocInput>,
}

/// Complete allocation: ratios, budgets, ranks, and accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub target_ratio: f64,
    pub effective_target: f64,
    pub ratios: BTreeMap<SublayerId, f64>,
    /// Per-sublayer budget in weighted rank units.
    pub budgets: BTreeMap<SublayerId, u64>,
    pub ranks: BTreeMap<SublayerId, BTreeMap<String, usize>>,
    pub retained_energy: BTreeMap<SublayerId, BTreeMap<String, f64>>,
    pub energy_spread: BTreeMap<SublayerId, f64>,
    pub spread_exceeds_epsilon: BTreeMap<SublayerId, bool>,
    pub skipped: BTreeSet<SublayerId>,
    pub clamp_events: Vec<ClampEvent>,
    /// Sublayers whose budget was raised to the floor-rank total.
    pub floor_overrides: Vec<SublayerId>,
    pub degenerate_variance: bool,
    /// Compression ratio implied by the planned ranks over the full
    /// compressed scope (skipped sublayers count as fully retained).
    pub predicted_achieved_ratio: f64,
}

impl AllocationPlan {
    /// A plan that compresses nothing.
    pub fn identity(sublayers: impl IntoIterator<Item = SublayerId>) -> Self {
        let skipped: BTreeSet<SublayerId> = sublayers.into_iter().collect();
        Self {
            target_ratio: 0.0,
            effective_target: 0.0,
            ratios: skipped.iter().map(|id| (*id, 0.0)).collect(),
            budgets: BTreeMap::new(),
            ranks: BTreeMap::new(),
            retained_energy: BTreeMap::new(),
            energy_spread: BTreeMap::new(),
            spread_exceeds_epsilon: BTreeMap::new(),
            skipped,
            clamp_events: Vec::new(),
            floor_overrides: Vec::new(),
            degenerate_variance: false,
            predicted_achieved_ratio: 0.0,
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds the full allocation plan: ratios, per-sublayer weighted budgets
/// with a largest-remainder global top-up that cancels the per-matrix floor
/// bias, and energy-balanced ranks.
pub fn build_plan(
    inputs: &BTreeMap<SublayerId, SublayerAllocInput>,
    cfg: &AllocationConfig,
) -> Result<AllocationPlan, AllocateError> {
    if cfg.target_ratio == 0.0 {
        return Ok(AllocationPlan::identity(inputs.keys().copied()));
    }
    let importances: BTreeMap<SublayerId, f64> =
        inputs.iter().map(|(id, s)| (*id, s.importance)).collect();
    let param_counts: BTreeMap<SublayerId, u64> =
        inputs.iter().map(|(id, s)| (*id, s.param_count)).collect();
    let alloc = allocate_ratios(&importances, &param_counts, cfg)?;

    struct SublayerBudget {
        id: SublayerId,
        unit: u64,
        base_units: u64,
        exact_units: f64,
        max_units: u64,
    }

    let mut budgets: Vec<SublayerBudget> = Vec::new();
    for (id, sub) in inputs {
        if cfg.skip_sublayers.contains(id) {
            continue;
        }
        let p = alloc.ratios[id];
        let unit = sub
            .matrices
            .values()
            .map(|m| m.storage_cost_per_rank)
            .fold(0, gcd);
        let mut base_units = 0u64;
        let mut exact_units = 0.0f64;
        let mut max_units = 0u64;
        for m in sub.matrices.values() {
            let per_rank = m.storage_cost_per_rank as f64;
            let exact = m.dense_params() as f64 * (1.0 - p) / per_rank;
            let r = (exact.floor() as usize).clamp(1, m.d_in.min(m.d_out));
            base_units += r as u64 * (m.storage_cost_per_rank / unit);
            exact_units += exact * (m.storage_cost_per_rank / unit) as f64;
            max_units += (m.d_in.min(m.d_out) as u64) * (m.storage_cost_per_rank / unit);
        }
        budgets.push(SublayerBudget {
            id: *id,
            unit,
            base_units,
            exact_units,
            max_units,
        });
    }

    // Largest-remainder top-up: the per-matrix floors systematically retain
    // slightly less than the real-valued target; hand the remainder back one
    // unit at a time wherever the fractional shortfall is largest.
    let mut extras: BTreeMap<SublayerId, u64> = budgets.iter().map(|b| (b.id, 0)).collect();
    let mut deficit_params: f64 = budgets
        .iter()
        .map(|b| (b.exact_units - b.base_units as f64) * b.unit as f64)
        .sum();
    loop {
        let mut pick: Option<usize> = None;
        let mut best_frac = 0.0;
        for (idx, b) in budgets.iter().enumerate() {
            let assigned = b.base_units + extras[&b.id];
            if assigned >= b.max_units {
                continue;
            }
            let frac = b.exact_units - assigned as f64;
            if pick.is_none() || frac > best_frac {
                best_frac = frac;
                pick = Some(idx);
            }
        }
        let Some(idx) = pick else { break };
        let cost = budgets[idx].unit as f64;
        if deficit_params <= cost / 2.0 {
            break;
        }
        *extras.get_mut(&budgets[idx].id).unwrap() += 1;
        deficit_params -= cost;
    }

    let mut plan_budgets = BTreeMap::new();
    let mut plan_ranks = BTreeMap::new();
    let mut plan_energy = BTreeMap::new();
    let mut plan_spread = BTreeMap::new();
    let mut plan_flag = BTreeMap::new();
    let mut floor_overrides = Vec::new();
    for b in &budgets {
        let sub = &inputs[&b.id];
        let profiles: BTreeMap<String, EnergyProfile> = sub
            .matrices
            .iter()
            .map(|(n, m)| (n.clone(), m.profile.clone()))
            .collect();
        let dims: BTreeMap<String, (usize, usize)> = sub
            .matrices
            .iter()
            .map(|(n, m)| (n.clone(), (m.d_in, m.d_out)))
            .collect();
        let costs: BTreeMap<String, u64> = sub
            .matrices
            .iter()
            .map(|(n, m)| (n.clone(), m.storage_cost_per_rank / b.unit))
            .collect();

        let mut budget_units = b.base_units + extras[&b.id];
        let floor_units: u64 = sub
            .matrices
            .iter()
            .map(|(n, m)| {
                rank_floor(m.d_in, m.d_out, cfg.rank_floor_ratio)
                    .min(m.d_in.min(m.d_out)) as u64
                    * costs[n]
            })
            .sum();
        if budget_units < floor_units {
            // The retention floor overrides the budget; deviation shows up in
            // the achieved-ratio accounting rather than failing the run.
            budget_units = floor_units;
            floor_overrides.push(b.id);
        }

        let solution = balanced_ranks_weighted(
            &profiles,
            &dims,
            &costs,
            budget_units,
            cfg.epsilon,
            cfg.rank_floor_ratio,
        )?;
        plan_budgets.insert(b.id, budget_units);
        plan_energy.insert(
            b.id,
            solution
                .ranks
                .iter()
                .map(|(n, &r)| (n.clone(), profiles[n].retained_at(r)))
                .collect::<BTreeMap<String, f64>>(),
        );
        plan_spread.insert(b.id, solution.spread);
        plan_flag.insert(b.id, solution.spread_exceeds_epsilon);
        plan_ranks.insert(b.id, solution.ranks);
    }

    // Predicted achieved ratio over the full compressed scope.
    let mut total: u64 = 0;
    let mut retained: u64 = 0;
    for (id, sub) in inputs {
        for (name, m) in &sub.matrices {
            total += m.dense_params();
            if cfg.skip_sublayers.contains(id) {
                retained += m.dense_params();
            } else {
                let r = plan_ranks[id][name] as u64;
                retained += r * m.storage_cost_per_rank;
            }
        }
    }
    let predicted_achieved_ratio = 1.0 - retained as f64 / total as f64;

    Ok(AllocationPlan {
        target_ratio: cfg.target_ratio,
        effective_target: alloc.effective_target,
        ratios: alloc.ratios,
        budgets: plan_budgets,
        ranks: plan_ranks,
        retained_energy: plan_energy,
        energy_spread: plan_spread,
        spread_exceeds_epsilon: plan_flag,
        skipped: cfg.skip_sublayers.clone(),
        clamp_events: alloc.clamp_events,
        floor_overrides,
        degenerate_variance: alloc.degenerate_variance,
        predicted_achieved_ratio,
    })
}
