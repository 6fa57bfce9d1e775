//! Naming conventions layered on the tensor container for models and
//! calibration statistics.
//!
//! Model tensors: `meta.config` (vocab, hidden, heads, ffn_width, layers,
//! norm_eps, seed-bits), `embed`, per layer `layers.{i}.attn_norm`,
//! `layers.{i}.ffn_norm` and the seven projections, `final_norm`, `head`.
//! A factored slot `name` is stored as `name.L`, `name.R`, and optionally
//! `name.bias`; `meta.method` records the backend that produced it.

use std::collections::BTreeMap;
use std::path::Path;

use super::container::{Tensor, TensorContainer};
use super::IoError;
use crate::allocate::{MatrixStats, SpectrumKind, SublayerId, SublayerKind, SublayerStats};
use crate::decompose::{FactorPair, Method};
use crate::harness::{LayerWeights, ToyModel, ToyModelConfig, WeightSlot};

const META_CONFIG: &str = "meta.config";
const META_METHOD: &str = "meta.method";

fn method_code(m: Method) -> f64 {
    match m {
        Method::Svd => 0.0,
        Method::Asvd => 1.0,
        Method::Awsvd => 2.0,
        Method::Pca => 3.0,
        Method::Afm => 4.0,
        Method::JointQk => 5.0,
    }
}

fn method_from_code(code: f64) -> Result<Method, IoError> {
    Ok(match code as i64 {
        0 => Method::Svd,
        1 => Method::Asvd,
        2 => Method::Awsvd,
        3 => Method::Pca,
        4 => Method::Afm,
        5 => Method::JointQk,
        other => {
            return Err(IoError::BadTensor {
                name: META_METHOD.to_string(),
                reason: format!("unknown method code {other}"),
            })
        }
    })
}

fn push_slot(container: &mut TensorContainer, name: &str, slot: &WeightSlot) {
    match slot {
        WeightSlot::Dense(m) => container.push(name, Tensor::from_matrix(m)),
        WeightSlot::Factored(f) => {
            container.push(format!("{name}.L"), Tensor::from_matrix(&f.l));
            container.push(format!("{name}.R"), Tensor::from_matrix(&f.r_mat));
            if let Some(bias) = &f.bias_correction {
                container.push(format!("{name}.bias"), Tensor::vector(bias));
            }
        }
    }
}

fn read_slot(
    container: &TensorContainer,
    name: &str,
    method: Option<Method>,
) -> Result<WeightSlot, IoError> {
    let dense = container.get(name);
    let l = container.get(&format!("{name}.L"));
    match (dense, l) {
        (Some(t), None) => Ok(WeightSlot::Dense(t.to_matrix(name)?)),
        (None, Some(l)) => {
            let r = container.require(&format!("{name}.R"))?;
            let bias = container
                .get(&format!("{name}.bias"))
                .map(|t| t.values());
            let pair = FactorPair::new(
                l.to_matrix(&format!("{name}.L"))?,
                r.to_matrix(&format!("{name}.R"))?,
                bias,
                method.unwrap_or(Method::Svd),
            )
            .map_err(|e| IoError::BadTensor {
                name: name.to_string(),
                reason: e.to_string(),
            })?;
            Ok(WeightSlot::Factored(pair))
        }
        (Some(_), Some(_)) => Err(IoError::BadTensor {
            name: name.to_string(),
            reason: "both dense and factored tensors present".into(),
        }),
        (None, None) => Err(IoError::MissingTensor {
            name: name.to_string(),
        }),
    }
}

pub fn model_to_container(model: &ToyModel) -> TensorContainer {
    let mut c = TensorContainer::new();
    let cfg = &model.cfg;
    c.push(
        META_CONFIG,
        Tensor::vector(&[
            cfg.vocab as f64,
            cfg.hidden as f64,
            cfg.heads as f64,
            cfg.ffn_width as f64,
            cfg.layers as f64,
            cfg.norm_eps,
            f64::from_bits(cfg.seed),
        ]),
    );
    let mut method = None;
    for layer in &model.layers {
        for name in crate::harness::MHA_MATRICES
            .iter()
            .chain(crate::harness::FFN_MATRICES.iter())
        {
            if let WeightSlot::Factored(f) = layer.slot(name).unwrap() {
                method = Some(f.method);
            }
        }
    }
    if let Some(m) = method {
        c.push(META_METHOD, Tensor::scalar(method_code(m)));
    }
    c.push("embed", Tensor::from_matrix(&model.embed));
    for (i, layer) in model.layers.iter().enumerate() {
        c.push(format!("layers.{i}.attn_norm"), Tensor::vector(&layer.attn_norm));
        c.push(format!("layers.{i}.ffn_norm"), Tensor::vector(&layer.ffn_norm));
        for name in crate::harness::MHA_MATRICES
            .iter()
            .chain(crate::harness::FFN_MATRICES.iter())
        {
            push_slot(&mut c, &format!("layers.{i}.{name}"), layer.slot(name).unwrap());
        }
    }
    c.push("final_norm", Tensor::vector(&model.final_norm));
    c.push("head", Tensor::from_matrix(&model.head));
    c
}

pub fn model_from_container(c: &TensorContainer) -> Result<ToyModel, IoError> {
    let meta = c.require(META_CONFIG)?.values();
    if meta.len() != 7 {
        return Err(IoError::BadTensor {
            name: META_CONFIG.to_string(),
            reason: format!("expected 7 values, found {}", meta.len()),
        });
    }
    let cfg = ToyModelConfig {
        vocab: meta[0] as usize,
        hidden: meta[1] as usize,
        heads: meta[2] as usize,
        ffn_width: meta[3] as usize,
        layers: meta[4] as usize,
        norm_eps: meta[5],
        seed: meta[6].to_bits(),
    };
    cfg.validate().map_err(|e| IoError::BadTensor {
        name: META_CONFIG.to_string(),
        reason: e.to_string(),
    })?;
    let method = match c.get(META_METHOD) {
        Some(t) => Some(method_from_code(t.to_scalar(META_METHOD)?)?),
        None => None,
    };

    let vector = |name: &str, len: usize| -> Result<Vec<f64>, IoError> {
        let v = c.require(name)?.values();
        if v.len() != len {
            return Err(IoError::BadTensor {
                name: name.to_string(),
                reason: format!("expected {len} values, found {}", v.len()),
            });
        }
        Ok(v)
    };

    let embed = c.require("embed")?.to_matrix("embed")?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let slot = |name: &str| read_slot(c, &format!("layers.{i}.{name}"), method);
        layers.push(LayerWeights {
            attn_norm: vector(&format!("layers.{i}.attn_norm"), cfg.hidden)?,
            ffn_norm: vector(&format!("layers.{i}.ffn_norm"), cfg.hidden)?,
            wq: slot("wq")?,
            wk: slot("wk")?,
            wv: slot("wv")?,
            wo: slot("wo")?,
            wg: slot("wg")?,
            wu: slot("wu")?,
            wd: slot("wd")?,
        });
    }
    let final_norm = vector("final_norm", cfg.hidden)?;
    let head = c.require("head")?.to_matrix("head")?;

    let model = ToyModel {
        cfg,
        embed,
        layers,
        final_norm,
        head,
    };
    validate_model_shapes(&model)?;
    Ok(model)
}

fn validate_model_shapes(model: &ToyModel) -> Result<(), IoError> {
    let cfg = &model.cfg;
    let check = |name: String, dims: (usize, usize), want: (usize, usize)| {
        if dims != want {
            return Err(IoError::BadTensor {
                name,
                reason: format!("dims ({}, {}) expected ({}, {})", dims.0, dims.1, want.0, want.1),
            });
        }
        Ok(())
    };
    if model.embed.rows() != cfg.vocab || model.embed.cols() != cfg.hidden {
        return Err(IoError::BadTensor {
            name: "embed".into(),
            reason: "shape does not match config".into(),
        });
    }
    if model.head.rows() != cfg.hidden || model.head.cols() != cfg.vocab {
        return Err(IoError::BadTensor {
            name: "head".into(),
            reason: "shape does not match config".into(),
        });
    }
    for (i, layer) in model.layers.iter().enumerate() {
        for name in crate::harness::MHA_MATRICES {
            check(
                format!("layers.{i}.{name}"),
                layer.slot(name).unwrap().dims(),
                (cfg.hidden, cfg.hidden),
            )?;
        }
        check(
            format!("layers.{i}.wg"),
            layer.wg.dims(),
            (cfg.hidden, cfg.ffn_width),
        )?;
        check(
            format!("layers.{i}.wu"),
            layer.wu.dims(),
            (cfg.hidden, cfg.ffn_width),
        )?;
        check(
            format!("layers.{i}.wd"),
            layer.wd.dims(),
            (cfg.ffn_width, cfg.hidden),
        )?;
    }
    Ok(())
}

pub fn write_model(path: &Path, model: &ToyModel) -> Result<(), IoError> {
    model_to_container(model).write_to(path)
}

pub fn read_model(path: &Path) -> Result<ToyModel, IoError> {
    model_from_container(&TensorContainer::read_from(path)?)
}

pub fn stats_to_container(stats: &BTreeMap<SublayerId, SublayerStats>) -> TensorContainer {
    let mut c = TensorContainer::new();
    for (id, sub) in stats {
        c.push(format!("{id}.importance"), Tensor::scalar(sub.importance));
        c.push(
            format!("{id}.degenerate_columns"),
            Tensor::scalar(sub.degenerate_columns as f64),
        );
        c.push(
            format!("{id}.param_count"),
            Tensor::scalar(sub.param_count as f64),
        );
        for (name, m) in &sub.matrices {
            let p = format!("{id}.{name}");
            c.push(format!("{p}.gram_y"), Tensor::from_matrix(&m.gram_y));
            c.push(format!("{p}.gram_x"), Tensor::from_matrix(&m.gram_x));
            c.push(format!("{p}.mean_y"), Tensor::vector(&m.mean_y));
            c.push(format!("{p}.sum_x"), Tensor::vector(&m.sum_x));
            c.push(format!("{p}.scale_abs"), Tensor::vector(&m.scale_abs));
            c.push(format!("{p}.scale_l2"), Tensor::vector(&m.scale_l2));
            c.push(format!("{p}.token_count"), Tensor::scalar(m.token_count as f64));
            for (kind, spectrum) in &m.spectra {
                c.push(format!("{p}.spec.{}", kind.tag()), Tensor::vector(spectrum));
            }
        }
        if let Some(gram) = &sub.joint_qk_gram {
            c.push(format!("{id}.joint.gram"), Tensor::from_matrix(gram));
        }
        if let Some(spec) = &sub.joint_spectrum {
            c.push(format!("{id}.joint.spec"), Tensor::vector(spec));
        }
    }
    c
}

pub fn stats_from_container(
    c: &TensorContainer,
) -> Result<BTreeMap<SublayerId, SublayerStats>, IoError> {
    let mut ids: Vec<SublayerId> = Vec::new();
    for (name, _) in c.entries() {
        if let Some(prefix) = name.strip_suffix(".importance") {
            let id: SublayerId = prefix
                .parse()
                .map_err(|e: String| IoError::BadTensor {
                    name: name.clone(),
                    reason: e,
                })?;
            ids.push(id);
        }
    }
    ids.sort();

    let mut out = BTreeMap::new();
    for id in ids {
        let importance = c.require(&format!("{id}.importance"))?.to_scalar("importance")?;
        let degenerate_columns = c
            .require(&format!("{id}.degenerate_columns"))?
            .to_scalar("degenerate_columns")? as u64;
        let param_count = c
            .require(&format!("{id}.param_count"))?
            .to_scalar("param_count")? as u64;

        let names: &[&str] = match id.kind {
            SublayerKind::Mha => &crate::harness::MHA_MATRICES,
            SublayerKind::Ffn => &crate::harness::FFN_MATRICES,
        };
        let mut matrices = BTreeMap::new();
        for name in names {
            let p = format!("{id}.{name}");
            let gram_y = c.require(&format!("{p}.gram_y"))?.to_matrix("gram_y")?;
            let gram_x = c.require(&format!("{p}.gram_x"))?.to_matrix("gram_x")?;
            let mean_y = c.require(&format!("{p}.mean_y"))?.values();
            let sum_x = c.require(&format!("{p}.sum_x"))?.values();
            let scale_abs = c.require(&format!("{p}.scale_abs"))?.values();
            let scale_l2 = c.require(&format!("{p}.scale_l2"))?.values();
            let token_count =
                c.require(&format!("{p}.token_count"))?.to_scalar("token_count")? as u64;
            let mut spectra = BTreeMap::new();
            for kind in SpectrumKind::ALL {
                if let Some(t) = c.get(&format!("{p}.spec.{}", kind.tag())) {
                    spectra.insert(kind, t.values());
                }
            }
            matrices.insert(
                name.to_string(),
                MatrixStats {
                    d_in: gram_x.rows(),
                    d_out: gram_y.rows(),
                    gram_y,
                    gram_x,
                    mean_y,
                    sum_x,
                    scale_abs,
                    scale_l2,
                    token_count,
                    spectra,
                },
            );
        }
        let joint_qk_gram = match c.get(&format!("{id}.joint.gram")) {
            Some(t) => Some(t.to_matrix("joint.gram")?),
            None => None,
        };
        let joint_spectrum = c.get(&format!("{id}.joint.spec")).map(|t| t.values());
        out.insert(
            id,
            SublayerStats {
                id,
                importance,
                degenerate_columns,
                param_count,
                matrices,
                joint_qk_gram,
                joint_spectrum,
            },
        );
    }
    Ok(out)
}

pub fn write_stats(
    path: &Path,
    stats: &BTreeMap<SublayerId, SublayerStats>,
) -> Result<(), IoError> {
    stats_to_container(stats).write_to(path)
}

pub fn read_stats(path: &Path) -> Result<BTreeMap<SublayerId, SublayerStats>, IoError> {
    stats_from_container(&TensorContainer::read_from(path)?)
}
