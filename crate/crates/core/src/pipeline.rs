//! End-to-end orchestration: calibrate, allocate, decompose, rewrite, and
//! report. Every stage failure is tagged with the stage that produced it.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::allocate::{
    self, AllocationConfig, AllocationPlan, MatrixAllocInput, SpectrumKind, SublayerAllocInput,
    SublayerId, SublayerKind, SublayerStats,
};
use crate::decompose::{
    self, EnergyKind, EnergyProfile, Method, ScaleKind, ScaleVector,
};
use crate::harness::{
    self, CaptureState, ToyModel, WeightSlot, FFN_MATRICES, JOINT_QK, MHA_MATRICES,
};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Calibrate,
    Decompose,
    Allocate,
    Apply,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Calibrate => "calibrate",
            Stage::Decompose => "decompose",
            Stage::Allocate => "allocate",
            Stage::Apply => "apply",
            Stage::Eval => "eval",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn new(stage: Stage, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        Self {
            stage,
            source: Box::new(source),
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Fills every per-matrix spectrum family (and the joint query/key spectrum)
/// so rank allocation can run from statistics alone.
pub fn compute_spectra(
    model: &ToyModel,
    stats: &mut BTreeMap<SublayerId, SublayerStats>,
) -> Result<(), PipelineError> {
    for (id, sub) in stats.iter_mut() {
        for (name, ms) in sub.matrices.iter_mut() {
            let w = model
                .slot(id.layer, name)
                .and_then(WeightSlot::dense)
                .ok_or_else(|| {
                    PipelineError::new(
                        Stage::Decompose,
                        harness::HarnessError::PlanModelMismatch(format!(
                            "spectra need a dense slot for {id}.{name}"
                        )),
                    )
                })?;
            let mut insert = |kind: SpectrumKind, spec: Vec<f64>| {
                ms.spectra.insert(kind, spec);
            };
            insert(
                SpectrumKind::Pca,
                decompose::eigen_spectrum(&ms.gram_y).stage(Stage::Decompose)?,
            );
            insert(
                SpectrumKind::Afm,
                decompose::covariance_spectrum(&ms.gram_y, &ms.mean_y, ms.token_count)
                    .stage(Stage::Decompose)?,
            );
            insert(
                SpectrumKind::Svd,
                decompose::squared_singular_spectrum(w, None).stage(Stage::Decompose)?,
            );
            insert(
                SpectrumKind::Asvd,
                decompose::squared_singular_spectrum(
                    w,
                    Some(&ScaleVector::new(ms.scale_abs.clone(), ScaleKind::MeanAbs)),
                )
                .stage(Stage::Decompose)?,
            );
            insert(
                SpectrumKind::Awsvd,
                decompose::squared_singular_spectrum(
                    w,
                    Some(&ScaleVector::new(ms.scale_l2.clone(), ScaleKind::L2Norm)),
                )
                .stage(Stage::Decompose)?,
            );
        }
        if let Some(gram) = &sub.joint_qk_gram {
            sub.joint_spectrum =
                Some(decompose::eigen_spectrum(gram).stage(Stage::Decompose)?);
        }
    }
    Ok(())
}

fn spectrum_for(method: Method) -> SpectrumKind {
    match method {
        Method::Svd => SpectrumKind::Svd,
        Method::Asvd => SpectrumKind::Asvd,
        Method::Awsvd => SpectrumKind::Awsvd,
        Method::Pca | Method::JointQk => SpectrumKind::Pca,
        Method::Afm => SpectrumKind::Afm,
    }
}

fn energy_kind_for(method: Method) -> EnergyKind {
    match method {
        Method::Svd | Method::Asvd | Method::Awsvd => EnergyKind::SingularSquared,
        Method::Pca | Method::Afm | Method::JointQk => EnergyKind::Eigen,
    }
}

/// Assembles per-sublayer allocation inputs for a backend. Under the joint
/// method the MHA query/key pair becomes one stacked entry whose per-rank
/// storage cost covers both copies of the shared `R` factor.
pub fn alloc_inputs_for_method(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    method: Method,
) -> Result<BTreeMap<SublayerId, SublayerAllocInput>, PipelineError> {
    let kind = energy_kind_for(method);
    let family = spectrum_for(method);
    let mut inputs = BTreeMap::new();
    for (id, sub) in stats {
        let mut matrices = BTreeMap::new();
        let joint = method == Method::JointQk && id.kind == SublayerKind::Mha;
        for (name, ms) in &sub.matrices {
            if joint && (name == "wq" || name == "wk") {
                continue;
            }
            let spectrum = ms.spectra.get(&family).ok_or_else(|| {
                PipelineError::new(
                    Stage::Allocate,
                    allocate::AllocateError::MissingMatrix(format!("{id}.{name} spectrum")),
                )
            })?;
            let profile = EnergyProfile::new(spectrum, kind).stage(Stage::Decompose)?;
            matrices.insert(
                name.clone(),
                MatrixAllocInput::plain(profile, ms.d_in, ms.d_out),
            );
        }
        if joint {
            let spectrum = sub.joint_spectrum.as_ref().ok_or_else(|| {
                PipelineError::new(
                    Stage::Allocate,
                    allocate::AllocateError::MissingMatrix(format!("{id}.{JOINT_QK} spectrum")),
                )
            })?;
            let profile = EnergyProfile::new(spectrum, kind).stage(Stage::Decompose)?;
            let wq = &sub.matrices["wq"];
            let (d_in, d_out) = (wq.d_in, 2 * wq.d_out);
            matrices.insert(
                JOINT_QK.to_string(),
                MatrixAllocInput {
                    profile,
                    d_in,
                    d_out,
                    // L splits into two d x r halves, R (r x d) is stored
                    // twice, once per slot.
                    storage_cost_per_rank: (d_out + 2 * d_in) as u64,
                },
            );
        }
        inputs.insert(
            *id,
            SublayerAllocInput {
                importance: sub.importance,
                param_count: sub.param_count,
                matrices,
            },
        );
    }
    Ok(inputs)
}

/// Builds an allocation plan from calibration statistics for the backend.
pub fn build_plan_from_stats(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    cfg: &AllocationConfig,
    method: Method,
) -> Result<AllocationPlan, PipelineError> {
    let inputs = alloc_inputs_for_method(stats, method)?;
    allocate::build_plan(&inputs, cfg).stage(Stage::Allocate)
}

/// Reconstruction loss of one rewritten slot on the calibration batch,
/// evaluated through the accumulated input Gram:
/// `|W X - (L R X + b 1^T)|_F^2 = tr(D Gx D^T) - 2 b^T D sx + n |b|^2`
/// with `D = W - L R`.
fn measured_loss(
    dense: &Matrix,
    slot: &WeightSlot,
    gram_x: &Matrix,
    sum_x: &[f64],
    tokens: u64,
) -> Result<f64, PipelineError> {
    let WeightSlot::Factored(pair) = slot else {
        return Ok(0.0);
    };
    let delta = dense
        .sub(&pair.reconstruct())
        .stage(Stage::Report)?;
    let dg = delta.matmul(gram_x).stage(Stage::Report)?;
    let mut loss = 0.0;
    for i in 0..delta.rows() {
        loss += crate::linalg::dot(dg.row(i), delta.row(i));
    }
    if let Some(bias) = &pair.bias_correction {
        let dsx = delta.mul_vec(sum_x).stage(Stage::Report)?;
        let cross: f64 = bias.iter().zip(&dsx).map(|(b, d)| b * d).sum();
        let b2: f64 = bias.iter().map(|b| b * b).sum();
        loss += -2.0 * cross + tokens as f64 * b2;
    }
    Ok(loss.max(0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub rank: usize,
    pub rank_max: usize,
    pub retained_energy: f64,
    pub predicted_loss: f64,
    pub measured_loss: f64,
    pub params: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SublayerReport {
    pub importance: f64,
    pub ratio: f64,
    pub budget_units: u64,
    pub energy_spread: f64,
    pub spread_exceeds_epsilon: bool,
    pub skipped: bool,
    pub matrices: BTreeMap<String, MatrixReport>,
}

/// Per-run record of what was measured and what was allocated. The achieved
/// ratio is recomputed from the emitted model, never echoed from the plan.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub method: Method,
    pub target_ratio: f64,
    pub effective_target: f64,
    pub achieved_ratio: f64,
    pub predicted_achieved_ratio: f64,
    pub epsilon: f64,
    pub clamp_events: Vec<allocate::ClampEvent>,
    pub floor_overrides: Vec<SublayerId>,
    pub degenerate_variance: bool,
    pub sublayers: BTreeMap<SublayerId, SublayerReport>,
    /// Wall-clock time is diagnostic only and excluded from serialized
    /// reports so identical runs stay byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

fn assemble_report(
    original: &ToyModel,
    compressed: &ToyModel,
    stats: &BTreeMap<SublayerId, SublayerStats>,
    plan: &AllocationPlan,
    inputs: &BTreeMap<SublayerId, SublayerAllocInput>,
    method: Method,
    epsilon: f64,
    wall_time: Duration,
) -> Result<CompressionReport, PipelineError> {
    let mut sublayers = BTreeMap::new();
    for (id, sub) in stats {
        let skipped = plan.skipped.contains(id) || !plan.ranks.contains_key(id);
        let mut matrices = BTreeMap::new();
        if !skipped {
            let ranks = &plan.ranks[id];
            let alloc = &inputs[id];
            for (name, &rank) in ranks {
                let m = &alloc.matrices[name];
                let predicted_loss = m.profile.tail_after(rank);
                let (measured, params) = if name == JOINT_QK {
                    let ms = &sub.matrices["wq"];
                    let mut total = 0.0;
                    let mut params = 0u64;
                    for part in ["wq", "wk"] {
                        let dense = original
                            .slot(id.layer, part)
                            .and_then(WeightSlot::dense)
                            .ok_or_else(|| {
                                PipelineError::new(
                                    Stage::Report,
                                    harness::HarnessError::PlanModelMismatch(format!(
                                        "missing dense {id}.{part}"
                                    )),
                                )
                            })?;
                        let slot = compressed.slot(id.layer, part).unwrap();
                        total +=
                            measured_loss(dense, slot, &ms.gram_x, &ms.sum_x, ms.token_count)?;
                        params += slot.param_count();
                    }
                    (total, params)
                } else {
                    let ms = &sub.matrices[name];
                    let dense = original
                        .slot(id.layer, name)
                        .and_then(WeightSlot::dense)
                        .ok_or_else(|| {
                            PipelineError::new(
                                Stage::Report,
                                harness::HarnessError::PlanModelMismatch(format!(
                                    "missing dense {id}.{name}"
                                )),
                            )
                        })?;
                    let slot = compressed.slot(id.layer, name).unwrap();
                    (
                        measured_loss(dense, slot, &ms.gram_x, &ms.sum_x, ms.token_count)?,
                        slot.param_count(),
                    )
                };
                matrices.insert(
                    name.clone(),
                    MatrixReport {
                        rank,
                        rank_max: m.d_in.min(m.d_out),
                        retained_energy: m.profile.retained_at(rank),
                        predicted_loss,
                        measured_loss: measured,
                        params,
                    },
                );
            }
        }
        sublayers.insert(
            *id,
            SublayerReport {
                importance: sub.importance,
                ratio: plan.ratios.get(id).copied().unwrap_or(0.0),
                budget_units: plan.budgets.get(id).copied().unwrap_or(0),
                energy_spread: plan.energy_spread.get(id).copied().unwrap_or(0.0),
                spread_exceeds_epsilon: plan
                    .spread_exceeds_epsilon
                    .get(id)
                    .copied()
                    .unwrap_or(false),
                skipped,
                matrices,
            },
        );
    }
    Ok(CompressionReport {
        method,
        target_ratio: plan.target_ratio,
        effective_target: plan.effective_target,
        achieved_ratio: compressed.achieved_ratio(),
        predicted_achieved_ratio: plan.predicted_achieved_ratio,
        epsilon,
        clamp_events: plan.clamp_events.clone(),
        floor_overrides: plan.floor_overrides.clone(),
        degenerate_variance: plan.degenerate_variance,
        sublayers,
        wall_time,
    })
}

/// Runs the full pipeline: two-pass calibration, spectra, ratio and rank
/// allocation, slot rewriting, and report assembly. Deterministic given the
/// model seed, dataset, and config.
pub fn mgaa_compress(
    model: &ToyModel,
    calib: &[Vec<u32>],
    cfg: &AllocationConfig,
    method: Method,
) -> Result<(ToyModel, CompressionReport), PipelineError> {
    let start = Instant::now();
    cfg.validate().stage(Stage::Allocate)?;
    let mut stats = harness::collect_calibration(model, calib).stage(Stage::Calibrate)?;
    compute_spectra(model, &mut stats)?;
    let inputs = alloc_inputs_for_method(&stats, method)?;
    let plan = allocate::build_plan(&inputs, cfg).stage(Stage::Allocate)?;
    let compressed = harness::apply_plan(model, &plan, &stats, method).stage(Stage::Apply)?;
    let report = assemble_report(
        model,
        &compressed,
        &stats,
        &plan,
        &inputs,
        method,
        cfg.epsilon,
        start.elapsed(),
    )?;
    Ok((compressed, report))
}

/// Builds the uniform baseline plan: every sublayer at the target ratio,
/// every matrix at its ratio-derived rank, no balancing.
pub fn uniform_plan(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    cfg: &AllocationConfig,
    method: Method,
) -> Result<AllocationPlan, PipelineError> {
    if cfg.target_ratio == 0.0 {
        return Ok(AllocationPlan::identity(stats.keys().copied()));
    }
    let inputs = alloc_inputs_for_method(stats, method)?;
    let mut plan = AllocationPlan::identity([]);
    plan.target_ratio = cfg.target_ratio;
    plan.effective_target = cfg.target_ratio;
    plan.skipped = cfg.skip_sublayers.clone();
    let mut total = 0u64;
    let mut retained = 0u64;
    for (id, sub) in &inputs {
        if cfg.skip_sublayers.contains(id) {
            plan.ratios.insert(*id, 0.0);
            total += sub.matrices.values().map(|m| m.dense_params()).sum::<u64>();
            retained += sub.matrices.values().map(|m| m.dense_params()).sum::<u64>();
            continue;
        }
        plan.ratios.insert(*id, cfg.target_ratio);
        let mut ranks = BTreeMap::new();
        let mut energy = BTreeMap::new();
        let mut budget = 0u64;
        for (name, m) in &sub.matrices {
            let r = decompose::rank_for_ratio(m.d_in, m.d_out, cfg.target_ratio)
                .stage(Stage::Allocate)?;
            budget += r as u64;
            retained += r as u64 * m.storage_cost_per_rank;
            total += m.dense_params();
            energy.insert(name.clone(), m.profile.retained_at(r));
            ranks.insert(name.clone(), r);
        }
        let spread = energy.values().cloned().fold(f64::NEG_INFINITY, f64::max)
            - energy.values().cloned().fold(f64::INFINITY, f64::min);
        plan.budgets.insert(*id, budget);
        plan.ranks.insert(*id, ranks);
        plan.retained_energy.insert(*id, energy);
        plan.energy_spread.insert(*id, spread);
        plan.spread_exceeds_epsilon.insert(*id, spread > cfg.epsilon);
    }
    plan.predicted_achieved_ratio = 1.0 - retained as f64 / total as f64;
    Ok(plan)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    /// Relative Frobenius error of the final hidden states against the
    /// reference model, aggregated over the dataset.
    pub hidden_state_rel_error: f64,
    /// Mean per-token KL divergence of candidate logits from reference
    /// logits (the cross-entropy gap; zero iff the distributions match).
    pub mean_token_kl: f64,
}

/// Streams both models over the dataset and reports divergence metrics.
pub fn eval_model(
    candidate: &ToyModel,
    reference: &ToyModel,
    dataset: &[Vec<u32>],
) -> Result<EvalMetrics, PipelineError> {
    let a = &candidate.cfg;
    let b = &reference.cfg;
    if (a.vocab, a.hidden, a.heads, a.ffn_width, a.layers)
        != (b.vocab, b.hidden, b.heads, b.ffn_width, b.layers)
    {
        return Err(PipelineError::new(
            Stage::Eval,
            harness::HarnessError::PlanModelMismatch(
                "candidate and reference shapes differ".into(),
            ),
        ));
    }
    if dataset.is_empty() {
        return Err(PipelineError::new(Stage::Eval, harness::HarnessError::EmptyDataset));
    }

    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0u64;
    let mut cap_c = CaptureState::disabled(candidate);
    let mut cap_r = CaptureState::disabled(reference);
    for sequence in dataset {
        let out_c = harness::forward(candidate, sequence, &mut cap_c).stage(Stage::Eval)?;
        let out_r = harness::forward(reference, sequence, &mut cap_r).stage(Stage::Eval)?;
        for (c, r) in out_c
            .final_hidden
            .data()
            .iter()
            .zip(out_r.final_hidden.data())
        {
            let d = c - r;
            diff2 += d * d;
            ref2 += r * r;
        }
        let vocab = out_r.logits.rows();
        for m in 0..out_r.logits.cols() {
            let col_r: Vec<f64> = (0..vocab).map(|i| out_r.logits.get(i, m)).collect();
            let col_c: Vec<f64> = (0..vocab).map(|i| out_c.logits.get(i, m)).collect();
            kl_sum += kl_divergence(&col_r, &col_c);
            tokens += 1;
        }
    }
    Ok(EvalMetrics {
        hidden_state_rel_error: (diff2 / ref2.max(f64::MIN_POSITIVE)).sqrt(),
        mean_token_kl: kl_sum / tokens as f64,
    })
}

/// KL(softmax(ref) || softmax(cand)) from raw logits.
fn kl_divergence(ref_logits: &[f64], cand_logits: &[f64]) -> f64 {
    let lse = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    };
    let lse_r = lse(ref_logits);
    let lse_c = lse(cand_logits);
    ref_logits
        .iter()
        .zip(cand_logits)
        .map(|(&r, &c)| {
            let lp_r = r - lse_r;
            let lp_c = c - lse_c;
            lp_r.exp() * (lp_r - lp_c)
        })
        .sum::<f64>()
        .max(0.0)
}

/// Side-by-side record of adaptive versus uniform compression on the same
/// inputs.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRecord {
    pub adaptive: EvalMetrics,
    pub uniform: EvalMetrics,
    /// Minimum retained energy per sublayer under balanced ranks computed at
    /// the same per-sublayer budget the uniform ranks spend.
    pub balanced_min_energy: BTreeMap<SublayerId, f64>,
    pub uniform_min_energy: BTreeMap<SublayerId, f64>,
    /// Balanced min retained energy >= uniform's in every sublayer.
    pub dominance_holds: bool,
}

/// Runs uniform-ratio/uniform-rank compression and the full adaptive
/// pipeline on the same inputs, evaluating both against the dense model.
pub fn compare_uniform(
    model: &ToyModel,
    calib: &[Vec<u32>],
    cfg: &AllocationConfig,
    method: Method,
) -> Result<ComparisonRecord, PipelineError> {
    let mut stats = harness::collect_calibration(model, calib).stage(Stage::Calibrate)?;
    compute_spectra(model, &mut stats)?;
    let inputs = alloc_inputs_for_method(&stats, method)?;

    let (adaptive_model, uniform_model) = if cfg.target_ratio == 0.0 {
        (model.clone(), model.clone())
    } else {
        let plan = allocate::build_plan(&inputs, cfg).stage(Stage::Allocate)?;
        let uni = uniform_plan(&stats, cfg, method)?;
        (
            harness::apply_plan(model, &plan, &stats, method).stage(Stage::Apply)?,
            harness::apply_plan(model, &uni, &stats, method).stage(Stage::Apply)?,
        )
    };

    let adaptive = eval_model(&adaptive_model, model, calib)?;
    let uniform = eval_model(&uniform_model, model, calib)?;

    // Dominance check at matched budgets: balanced ranks at the uniform
    // budget can never retain less minimum energy than the uniform split.
    let mut balanced_min = BTreeMap::new();
    let mut uniform_min = BTreeMap::new();
    let mut dominance = true;
    if cfg.target_ratio > 0.0 {
        for (id, sub) in &inputs {
            if cfg.skip_sublayers.contains(id) {
                continue;
            }
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
            let mut budget = 0u64;
            let mut umin = f64::INFINITY;
            for (name, m) in &sub.matrices {
                let r = decompose::rank_for_ratio(m.d_in, m.d_out, cfg.target_ratio)
                    .stage(Stage::Allocate)?;
                budget += r as u64;
                umin = umin.min(profiles[name].retained_at(r));
            }
            let solution = allocate::balanced_ranks(&profiles, &dims, budget, cfg.epsilon, 0.0)
                .stage(Stage::Allocate)?;
            let bmin = solution
                .ranks
                .iter()
                .map(|(n, &r)| profiles[n].retained_at(r))
                .fold(f64::INFINITY, f64::min);
            if bmin < umin {
                dominance = false;
            }
            balanced_min.insert(*id, bmin);
            uniform_min.insert(*id, umin);
        }
    }

    Ok(ComparisonRecord {
        adaptive,
        uniform,
        balanced_min_energy: balanced_min,
        uniform_min_energy: uniform_min,
        dominance_holds: dominance,
    })
}

/// Desk-scale contrast of fixed-rank versus fixed-energy allocation over the
/// four attention matrices: returns the standard deviation of per-matrix
/// relative calibration losses (averaged per matrix type across layers)
/// under each scheme.
pub fn energy_dispersion(
    model: &ToyModel,
    calib: &[Vec<u32>],
    p: f64,
) -> Result<(f64, f64), PipelineError> {
    let mut stats = harness::collect_calibration(model, calib).stage(Stage::Calibrate)?;
    compute_spectra(model, &mut stats)?;

    let mut fixed_rank_ratio: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut fixed_energy_ratio: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, sub) in &stats {
        if id.kind != SublayerKind::Mha {
            continue;
        }
        let profiles: BTreeMap<String, EnergyProfile> = sub
            .matrices
            .iter()
            .map(|(n, m)| {
                EnergyProfile::new(&m.spectra[&SpectrumKind::Pca], EnergyKind::Eigen)
                    .map(|p| (n.clone(), p))
            })
            .collect::<Result<_, _>>()
            .stage(Stage::Decompose)?;
        let dims: BTreeMap<String, (usize, usize)> = sub
            .matrices
            .iter()
            .map(|(n, m)| (n.clone(), (m.d_in, m.d_out)))
            .collect();

        let d = model.cfg.hidden;
        let r_uniform = decompose::rank_for_ratio(d, d, p).stage(Stage::Allocate)?;
        let budget = (r_uniform * sub.matrices.len()) as u64;
        let balanced = allocate::balanced_ranks(&profiles, &dims, budget, 1e-3, 0.0)
            .stage(Stage::Allocate)?;

        for name in MHA_MATRICES {
            let ms = &sub.matrices[name];
            let w = model
                .slot(id.layer, name)
                .and_then(WeightSlot::dense)
                .expect("dense toy model");
            let total_energy = ms.gram_y.trace();
            let measure = |rank: usize| -> Result<f64, PipelineError> {
                let (pair, _, _) =
                    decompose::pca_decompose(w, &ms.gram_y, rank).stage(Stage::Decompose)?;
                let loss = measured_loss(
                    w,
                    &WeightSlot::Factored(pair),
                    &ms.gram_x,
                    &ms.sum_x,
                    ms.token_count,
                )?;
                Ok(loss / total_energy.max(f64::MIN_POSITIVE))
            };
            fixed_rank_ratio
                .entry(name)
                .or_default()
                .push(measure(r_uniform)?);
            fixed_energy_ratio
                .entry(name)
                .or_default()
                .push(measure(balanced.ranks[name])?);
        }
    }

    let std_of = |per_type: &BTreeMap<&str, Vec<f64>>| {
        let means: Vec<f64> = per_type
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
    };
    Ok((std_of(&fixed_energy_ratio), std_of(&fixed_rank_ratio)))
}

/// Keys of every matrix entry expected in a plan for this method.
pub fn plan_matrix_names(kind: SublayerKind, method: Method) -> Vec<&'static str> {
    match (kind, method) {
        (SublayerKind::Mha, Method::JointQk) => vec![JOINT_QK, "wv", "wo"],
        (SublayerKind::Mha, _) => MHA_MATRICES.to_vec(),
        (SublayerKind::Ffn, _) => FFN_MATRICES.to_vec(),
    }
}
