//! CSV and SVG emission for captured statistics: per-sublayer importance,
//! cumulative energy curves, and (when an allocation is computable) the
//! planned ratios and retained ranks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mgaa_core::allocate::{AllocationConfig, SpectrumKind, SublayerId, SublayerKind, SublayerStats};
use mgaa_core::decompose::Method;
use mgaa_core::io::{self, RunConfig};
use mgaa_core::pipeline;

use crate::failure::Failure;

pub fn emit(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    out_dir: &Path,
    cfg: Option<&RunConfig>,
) -> Result<(), Failure> {
    std::fs::create_dir_all(out_dir)?;
    emit_importance(stats, out_dir)?;
    emit_energy(stats, out_dir, cfg.map(|c| c.method).unwrap_or(Method::Pca))?;

    // Ratios and ranks need an allocation; fall back to the documented
    // defaults at the half-compression operating point when no config is
    // supplied.
    let (alloc_cfg, method) = match cfg {
        Some(c) => (c.allocation_config()?, c.method),
        None => (
            AllocationConfig {
                target_ratio: 0.5,
                ..AllocationConfig::default()
            },
            Method::Pca,
        ),
    };
    match pipeline::build_plan_from_stats(stats, &alloc_cfg, method) {
        Ok(plan) => {
            emit_ratios(&plan.ratios, out_dir)?;
            emit_ranks(&plan.ranks, out_dir)?;
        }
        Err(err) => eprintln!(
            "warning: skipping ratio/rank plots, allocation failed: {err}"
        ),
    }
    Ok(())
}

fn layer_series(
    values: &BTreeMap<SublayerId, f64>,
    kind: SublayerKind,
) -> Vec<(f64, f64)> {
    values
        .iter()
        .filter(|(id, _)| id.kind == kind)
        .map(|(id, v)| (id.layer as f64, *v))
        .collect()
}

fn emit_importance(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    out_dir: &Path,
) -> Result<(), Failure> {
    let mut csv = String::from("sublayer,layer,kind,importance,degenerate_columns\n");
    let mut values = BTreeMap::new();
    for (id, sub) in stats {
        writeln!(
            csv,
            "{id},{},{},{},{}",
            id.layer, id.kind, sub.importance, sub.degenerate_columns
        )
        .unwrap();
        values.insert(*id, sub.importance);
    }
    io::write_atomic(&out_dir.join("importance.csv"), csv.as_bytes())?;

    let svg = line_chart(
        "sublayer importance (input/output cosine similarity)",
        "layer",
        "importance",
        &[
            ("mha", layer_series(&values, SublayerKind::Mha)),
            ("ffn", layer_series(&values, SublayerKind::Ffn)),
        ],
    );
    io::write_atomic(&out_dir.join("importance.svg"), svg.as_bytes())?;
    Ok(())
}

fn emit_energy(
    stats: &BTreeMap<SublayerId, SublayerStats>,
    out_dir: &Path,
    method: Method,
) -> Result<(), Failure> {
    let family = match method {
        Method::Svd => SpectrumKind::Svd,
        Method::Asvd => SpectrumKind::Asvd,
        Method::Awsvd => SpectrumKind::Awsvd,
        Method::Afm => SpectrumKind::Afm,
        Method::Pca | Method::JointQk => SpectrumKind::Pca,
    };
    let mut csv = String::from("sublayer,matrix,rank,cumulative_energy\n");
    let mut first_layer_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (id, sub) in stats {
        for (name, ms) in &sub.matrices {
            let Some(spectrum) = ms.spectra.get(&family) else {
                continue;
            };
            let total: f64 = spectrum.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let mut running = 0.0;
            let mut points = Vec::with_capacity(spectrum.len());
            for (i, e) in spectrum.iter().enumerate() {
                running += e;
                let c = running / total;
                writeln!(csv, "{id},{name},{},{c}", i + 1).unwrap();
                points.push(((i + 1) as f64, c));
            }
            if id.layer == 0 {
                first_layer_series.push((format!("{id}.{name}"), points));
            }
        }
    }
    io::write_atomic(&out_dir.join("energy.csv"), csv.as_bytes())?;

    let series: Vec<(&str, Vec<(f64, f64)>)> = first_layer_series
        .iter()
        .map(|(n, p)| (n.as_str(), p.clone()))
        .collect();
    let svg = line_chart(
        "cumulative energy by retained rank (layer 0)",
        "rank",
        "retained energy fraction",
        &series,
    );
    io::write_atomic(&out_dir.join("energy.svg"), svg.as_bytes())?;
    Ok(())
}

fn emit_ratios(ratios: &BTreeMap<SublayerId, f64>, out_dir: &Path) -> Result<(), Failure> {
    let mut csv = String::from("sublayer,layer,kind,ratio\n");
    for (id, p) in ratios {
        writeln!(csv, "{id},{},{},{p}", id.layer, id.kind).unwrap();
    }
    io::write_atomic(&out_dir.join("ratios.csv"), csv.as_bytes())?;
    let svg = line_chart(
        "allocated compression ratio per sublayer",
        "layer",
        "compression ratio",
        &[
            ("mha", layer_series(ratios, SublayerKind::Mha)),
            ("ffn", layer_series(ratios, SublayerKind::Ffn)),
        ],
    );
    io::write_atomic(&out_dir.join("ratios.svg"), svg.as_bytes())?;
    Ok(())
}

fn emit_ranks(
    ranks: &BTreeMap<SublayerId, BTreeMap<String, usize>>,
    out_dir: &Path,
) -> Result<(), Failure> {
    let mut csv = String::from("sublayer,matrix,rank\n");
    let mut by_matrix: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (id, per_matrix) in ranks {
        for (name, &rank) in per_matrix {
            writeln!(csv, "{id},{name},{rank}").unwrap();
            by_matrix
                .entry(name.clone())
                .or_default()
                .push((id.layer as f64, rank as f64));
        }
    }
    io::write_atomic(&out_dir.join("ranks.csv"), csv.as_bytes())?;
    let series: Vec<(&str, Vec<(f64, f64)>)> = by_matrix
        .iter()
        .map(|(n, p)| (n.as_str(), p.clone()))
        .collect();
    let svg = line_chart(
        "retained rank per weight matrix",
        "layer",
        "rank",
        &series,
    );
    io::write_atomic(&out_dir.join("ranks.svg"), svg.as_bytes())?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

/// Minimal standalone SVG line chart; enough for quick visual inspection
/// without pulling in a plotting stack.
fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    let (w, h) = (760.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 160.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    write!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    write!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"#,
        ml + pw / 2.0
    )
    .unwrap();
    // Axes.
    write!(
        svg,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph
    )
    .unwrap();
    write!(
        svg,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        mt + ph
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.3}</text>"#,
            sx(fx),
            mt + ph + 18.0,
            fx
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        )
        .unwrap();
    }
    write!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>"#,
        ml + pw / 2.0,
        h - 10.0
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    )
    .unwrap();

    for (idx, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[idx % PALETTE.len()];
        let mut path = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            write!(path, "{cmd}{:.2},{:.2} ", sx(*x), sy(*y)).unwrap();
        }
        write!(
            svg,
            r#"<path d="{path}" fill="none" stroke="{color}" stroke-width="1.6"/>"#
        )
        .unwrap();
        for (x, y) in pts {
            write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.4" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            )
            .unwrap();
        }
        let ly = mt + 14.0 * idx as f64;
        write!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - mr + 8.0,
            w - mr + 28.0
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{name}</text>"#,
            w - mr + 34.0,
            ly + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
