//! Report artifacts: transfer and aggregate CSVs, an SVG heatmap (blue =
//! low accuracy = strong transfer), per-image integrated-gradients maps as
//! binary PGM, and a versioned JSON manifest. Every writer is deterministic:
//! identical inputs produce identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{integrated_gradients, AttackSpec};
use crate::gradcore::Tensor;
use crate::zoo::{Classifier, TrainingTag};

use super::{AggregateMatrix, BenchError, RobustnessReport, TransferMatrix};

fn tag_str(tag: Option<TrainingTag>) -> &'static str {
    match tag {
        Some(TrainingTag::At) => "AT",
        Some(TrainingTag::St) => "ST",
        None => "",
    }
}

/// Linear blue→white ramp: accuracy 0 (strongest transfer) is deep blue,
/// accuracy 1 is white.
pub fn heat_color(accuracy: f64) -> String {
    let t = accuracy.clamp(0.0, 1.0);
    let ch = |lo: f64| (lo + (255.0 - lo) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(31.0), ch(82.0), ch(156.0))
}

/// `surrogate,target,surrogate_tag,target_tag,accuracy,n` — one row per cell
/// in row-major (surrogate, target) order, white-box cells included.
pub fn transfer_csv(matrix: &TransferMatrix) -> String {
    let mut out = String::from("surrogate,target,surrogate_tag,target_tag,accuracy,n\n");
    for cell in &matrix.cells {
        let s = &matrix.surrogates[cell.surrogate];
        let t = &matrix.targets[cell.target];
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id,
            t.id,
            tag_str(s.tag),
            tag_str(t.tag),
            cell.accuracy,
            cell.n
        ));
    }
    out
}

/// `target,target_tag,accuracy` reference column of clean accuracies.
pub fn clean_csv(matrix: &TransferMatrix) -> String {
    let mut out = String::from("target,target_tag,accuracy\n");
    for (meta, acc) in matrix.targets.iter().zip(&matrix.clean_accuracy) {
        out.push_str(&format!("{},{},{}\n", meta.id, tag_str(meta.tag), acc));
    }
    out
}

/// Wide 2×2 aggregate: header plus one row per surrogate tag.
pub fn aggregate_csv(aggregate: &AggregateMatrix) -> String {
    let mut out = String::from("surrogate_tag,at_targets,st_targets\n");
    out.push_str(&format!(
        "AT,{},{}\n",
        aggregate.at_to_at.mean, aggregate.at_to_st.mean
    ));
    out.push_str(&format!(
        "ST,{},{}\n",
        aggregate.st_to_at.mean, aggregate.st_to_st.mean
    ));
    out
}

/// `epsilon,pgd_accuracy,mig_accuracy` sweep rows for one model.
pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("epsilon,pgd_accuracy,mig_accuracy\n");
    for row in &report.rows {
        out.push_str(&format!("{},{},{}\n", row.epsilon, row.pgd_accuracy, row.mig_accuracy));
    }
    out
}

const CELL: usize = 44;
const LEFT: usize = 130;
const TOP: usize = 96;

/// SVG 1.1 heatmap in the reference layout: surrogates on the X axis,
/// targets on the Y axis, cell color from [`heat_color`], white-box cells
/// outlined. Output bytes depend only on the matrix.
pub fn heatmap_svg(matrix: &TransferMatrix) -> String {
    let s_count = matrix.surrogates.len();
    let t_count = matrix.targets.len();
    let width = LEFT + s_count * CELL + 24;
    let height = TOP + t_count * CELL + 70;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" fill=\"#111\">Target accuracy by surrogate (blue = stronger transfer)</text>\n",
        LEFT
    ));

    for (s, meta) in matrix.surrogates.iter().enumerate() {
        let x = LEFT + s * CELL + CELL / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#111\" text-anchor=\"start\" transform=\"rotate(-40 {x} {})\">{} [{}]</text>\n",
            TOP - 8,
            TOP - 8,
            meta.id,
            tag_str(meta.tag)
        ));
    }
    for (t, meta) in matrix.targets.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#111\" text-anchor=\"end\">{} [{}]</text>\n",
            LEFT - 8,
            TOP + t * CELL + CELL / 2 + 4,
            meta.id,
            tag_str(meta.tag)
        ));
    }

    for cell in &matrix.cells {
        let x = LEFT + cell.surrogate * CELL;
        let y = TOP + cell.target * CELL;
        let fill = heat_color(cell.accuracy);
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"{fill}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            CELL - 1,
            CELL - 1
        ));
        if cell.white_box {
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#d97706\" stroke-width=\"2\"/>\n",
                x + 2,
                y + 2,
                CELL - 5,
                CELL - 5
            ));
        }
        let text_fill = if cell.accuracy < 0.5 { "#ffffff" } else { "#333333" };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{text_fill}\" text-anchor=\"middle\">{:.2}</text>\n",
            x + CELL / 2,
            y + CELL / 2 + 4,
            cell.accuracy
        ));
    }

    // Legend strip: eleven swatches from 0.0 to 1.0.
    let ly = TOP + t_count * CELL + 24;
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#111\">accuracy 0.0</text>\n",
        ly - 6
    ));
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{ly}\" width=\"18\" height=\"12\" fill=\"{}\"/>\n",
            LEFT + i * 18,
            heat_color(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#111\">1.0</text>\n",
        LEFT + 11 * 18 + 4,
        ly + 10
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Renders a per-pixel attribution (channels summed) as a binary P5 PGM:
/// zero maps to mid-gray 128, the strongest positive attribution to 255 and
/// the strongest negative to 1, normalized by the per-image peak magnitude.
pub fn attribution_pgm(attr: &[f32], h: usize, w: usize, c: usize) -> Result<Vec<u8>, BenchError> {
    if h == 0 || w == 0 || c == 0 || attr.len() != h * w * c {
        return Err(BenchError::Invalid {
            detail: format!("attribution of {} values does not fill {h}×{w}×{c}", attr.len()),
        });
    }
    let mut per_pixel = vec![0.0f64; h * w];
    for (i, v) in attr.iter().enumerate() {
        per_pixel[i / c] += f64::from(*v);
    }
    let peak = per_pixel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in per_pixel {
        let byte = if peak == 0.0 { 128.0 } else { (128.0 + 127.0 * v / peak).round() };
        out.push(byte.clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Computes integrated gradients for each image (toward its label's logit,
/// from the spec's baseline with the spec's step count) and writes
/// `{prefix}_{index:03}.pgm` files into `dir`.
pub fn export_attribution_maps(
    model: &Classifier<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>, BenchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(BenchError::Invalid {
            detail: format!("expected [n,h,w,c] images, got {shape:?}"),
        });
    }
    let [h, w, c] = [shape[1], shape[2], shape[3]];
    let baseline =
        Tensor::new(vec![h, w, c], spec.baseline.materialize(h * w * c)).expect("baseline shape");
    let attr = integrated_gradients(model, images, labels, &baseline, spec.ig_steps)?;
    let mut written = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let per_image = &attr.data()[i * h * w * c..(i + 1) * h * w * c];
        let bytes = attribution_pgm(per_image, h, w, c)?;
        let path = dir.join(format!("{prefix}_{i:03}.pgm"));
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// The versioned JSON manifest bundling a full benchmark evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub version: u32,
    pub matrix: TransferMatrix,
    pub aggregate: AggregateMatrix,
    pub robustness: Vec<RobustnessReport>,
    /// Reference aggregate accuracies (percent) for orientation: rows are
    /// surrogate tags [AT, ST], columns target tags [AT, ST].
    pub reference_percent: [[f64; 2]; 2],
}

/// Writes the full report family into `out_dir`: `transfer_matrix.csv`,
/// `clean_accuracy.csv`, `aggregate.csv`, `heatmap.svg`,
/// `robustness_<model>.csv` per sweep, and `report.json`. Returns every path
/// written, in write order. Bytes depend only on the inputs.
pub fn export_reports(
    matrix: &TransferMatrix,
    aggregate: &AggregateMatrix,
    robustness: &[RobustnessReport],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, BenchError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let put = |name: String, bytes: &[u8]| -> Result<PathBuf, BenchError> {
        let path = dir.join(name);
        let mut file = fs::File::create(&path)?;
        file.write_all(bytes)?;
        Ok(path)
    };

    written.push(put("transfer_matrix.csv".into(), transfer_csv(matrix).as_bytes())?);
    written.push(put("clean_accuracy.csv".into(), clean_csv(matrix).as_bytes())?);
    written.push(put("aggregate.csv".into(), aggregate_csv(aggregate).as_bytes())?);
    written.push(put("heatmap.svg".into(), heatmap_svg(matrix).as_bytes())?);
    for report in robustness {
        written.push(put(
            format!("robustness_{}.csv", report.model),
            robustness_csv(report).as_bytes(),
        )?);
    }

    let manifest = ReportManifest {
        version: 1,
        matrix: matrix.clone(),
        aggregate: *aggregate,
        robustness: robustness.to_vec(),
        reference_percent: super::TRANSFER_REFERENCE_PERCENT,
    };
    let mut body = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| BenchError::Invalid { detail: format!("report manifest: {e}") })?;
    body.push(b'\n');
    written.push(put("report.json".into(), &body)?);
    Ok(written)
}
