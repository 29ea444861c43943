//! Summary tables and static plots assembled from a finished run.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::experiment::{read_json, Stage};
use crate::error::{bail_config, Error, Result};
use crate::eval::{AttentionProbe, BenchmarkReport, TierAblation};
use crate::inference::GenerationMode;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// One row per generation mode: mean and across-seed error of each metric.
pub fn comparison_table(b: &BenchmarkReport) -> String {
    let mut s = String::from(
        "method,fidelity,fidelity_se,editability,editability_se,consistency,consistency_se,ffd,ffd_se\n",
    );
    for mode in GenerationMode::ALL {
        let cols: Vec<String> = [
            b.summary(mode, |r| r.fidelity),
            b.summary(mode, |r| r.editability),
            b.summary(mode, |r| r.consistency),
            b.summary(mode, |r| r.ffd),
        ]
        .iter()
        .flat_map(|(m, se)| [format!("{m:.6}"), format!("{se:.6}")])
        .collect();
        s += &format!("{},{}\n", mode.as_str(), cols.join(","));
    }
    s
}

pub fn comparisons_csv(b: &BenchmarkReport) -> String {
    let mut s = String::from("mode,metric,mean_diff,se,improved\n");
    for c in b.comparisons() {
        s += &format!("{},{},{:.6},{:.6},{}\n", c.mode.as_str(), c.metric, c.mean_diff, c.se, c.improved);
    }
    s += &format!("all,directional,,,{}\n", b.directional_pass());
    s
}

/// Three panels, one per headline metric, with a point and error bar per mode.
fn plot_comparison(b: &BenchmarkReport, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (900, 300)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, 3));
    let metrics: [(&str, fn(&crate::eval::MetricsReport) -> f64); 3] =
        [("fidelity", |r| r.fidelity), ("editability", |r| r.editability), ("ffd", |r| r.ffd)];
    for (panel, (name, metric)) in panels.iter().zip(metrics) {
        let pts: Vec<(f64, f64)> = GenerationMode::ALL.iter().map(|&m| b.summary(m, metric)).collect();
        let lo = pts.iter().map(|(m, se)| m - se).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|(m, se)| m + se).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.2).max(1e-3);
        let mut chart = ChartBuilder::on(panel)
            .caption(name, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(20)
            .y_label_area_size(45)
            .build_cartesian_2d(-0.5f64..2.5f64, (lo - pad)..(hi + pad))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_labels(3)
            .x_label_formatter(&|x| ["base", "free", "trained"].get(x.round() as usize).unwrap_or(&"").to_string())
            .disable_x_mesh()
            .draw()
            .map_err(plot_err)?;
        for (i, (m, se)) in pts.iter().enumerate() {
            let x = i as f64;
            chart
                .draw_series(std::iter::once(PathElement::new(vec![(x, m - se), (x, m + se)], BLACK)))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Circle::new((x, *m), 4, Palette99::pick(i).filled())))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

fn mask_label(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Fidelity against consistency, one labelled point per tier mask.
fn plot_scatter(ab: &TierAblation, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (480, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let pts: Vec<(f64, f64, String)> = ab
        .rows
        .iter()
        .map(|r| (r.report.consistency, r.report.fidelity, mask_label(&r.mask)))
        .collect();
    let range = |f: fn(&(f64, f64, String)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.15).max(1e-3);
        (lo - pad)..(hi + pad)
    };
    let mut chart = ChartBuilder::on(&root)
        .caption("tier ablation", ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(range(|p| p.0), range(|p| p.1))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("consistency")
        .y_desc("fidelity")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), BLUE.mix(0.4)))
        .map_err(plot_err)?;
    chart
        .draw_series(pts.iter().map(|p| {
            EmptyElement::at((p.0, p.1)) + Circle::new((0, 0), 4, BLUE.filled()) + Text::new(p.2.clone(), (6, -12), ("sans-serif", 12))
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Build the summary from the stage outputs of `run_dir` into `out`.
/// `required` lists the stages that must be present; the others are
/// included when found. Missing prerequisites are all named at once.
pub fn reproduce_report(run_dir: &Path, required: &[Stage], out: &Path) -> Result<Vec<PathBuf>> {
    let have = |s: Stage| s.artifact_in(run_dir).is_file();
    let missing: Vec<_> = required.iter().filter(|&&s| !have(s)).map(|s| s.as_str()).collect();
    if !missing.is_empty() {
        bail_config!(
            "{} is missing completed stages: {}",
            run_dir.display(),
            missing.join(", ")
        );
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if have(Stage::Benchmark) {
        let b: BenchmarkReport = read_json(&Stage::Benchmark.artifact_in(run_dir))?;
        put("table.csv", comparison_table(&b))?;
        put("comparisons.csv", comparisons_csv(&b))?;
        plot_comparison(&b, &out.join("table.svg"))?;
    }
    if have(Stage::Ablation) {
        let ab: TierAblation = read_json(&Stage::Ablation.artifact_in(run_dir))?;
        let mut text = ab.scatter_csv();
        text += &format!("single_image,{:.6},{:.6}\n", ab.single_image.consistency, ab.single_image.fidelity);
        put("tier_scatter.csv", text)?;
        plot_scatter(&ab, &out.join("tier_scatter.svg"))?;
    }
    if have(Stage::Attention) {
        let probe: AttentionProbe = read_json(&Stage::Attention.artifact_in(run_dir))?;
        put("attention.csv", probe.summary.to_csv())?;
    }
    for svg in ["table.svg", "tier_scatter.svg"] {
        if out.join(svg).exists() {
            written.push(out.join(svg));
        }
    }
    Ok(written)
}
