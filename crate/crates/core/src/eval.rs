//! Ranking metrics, continual-learning summaries and heatmap export.

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Label, ObjectData};
use crate::error::{Error, Result};
use crate::model::{anomaly_map, ModelState};

/// Area under the ROC curve via the Mann-Whitney rank statistic with midranks
/// for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("one label per score required".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score passed to AUROC".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean of the final-step AUROC row.
pub fn acc(final_row: &[Option<f64>]) -> Result<f64> {
    if final_row.is_empty() {
        return Err(Error::Contract("final row is empty".into()));
    }
    let mut sum = 0.0;
    for v in final_row {
        sum += v.ok_or_else(|| Error::Contract("final row has an unevaluated task".into()))?;
    }
    Ok(sum / final_row.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pixel,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub object_id: usize,
    pub pixel: Option<f64>,
    pub image: Option<f64>,
}

impl Cell {
    pub fn get(&self, level: Level) -> Option<f64> {
        match level {
            Level::Pixel => self.pixel,
            Level::Image => self.image,
        }
    }
}

/// AUROC of every seen object after every step. Row `b` holds exactly the
/// objects introduced at or before step `b + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: Vec<Vec<Cell>>,
}

impl ScoreMatrix {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        if let Some(prev) = self.rows.last() {
            let covered = prev
                .iter()
                .all(|c| row.iter().any(|r| r.object_id == c.object_id));
            if !covered {
                return Err(Error::Contract(
                    "a later row dropped a previously seen object".into(),
                ));
            }
        }
        for cell in &row {
            for v in [cell.pixel, cell.image].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("AUROC {v} outside [0, 1]")));
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn value(&self, step: usize, object_id: usize, level: Level) -> Option<f64> {
        self.rows
            .get(step)?
            .iter()
            .find(|c| c.object_id == object_id)
            .and_then(|c| c.get(level))
    }

    pub fn final_row(&self, level: Level) -> Vec<Option<f64>> {
        self.rows
            .last()
            .map(|r| r.iter().map(|c| c.get(level)).collect())
            .unwrap_or_default()
    }

    /// ACC over the final row, skipping objects whose metric is undefined.
    pub fn acc(&self, level: Level) -> Result<f64> {
        let row: Vec<Option<f64>> = self
            .final_row(level)
            .into_iter()
            .filter(|v| v.is_some())
            .collect();
        acc(&row)
    }

    pub fn fm(&self, level: Level) -> Result<f64> {
        fm(self, level)
    }
}

/// Forgetting: mean over objects introduced before the final step of the best
/// earlier AUROC minus the final AUROC. Negative values mean improvement.
pub fn fm(m: &ScoreMatrix, level: Level) -> Result<f64> {
    let n = m.steps();
    if n < 2 {
        return Err(Error::UndefinedMetric(
            "forgetting needs at least two steps".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for cell in &m.rows[n - 2] {
        let Some(last) = m.value(n - 1, cell.object_id, level) else {
            continue;
        };
        let best = (0..n - 1)
            .filter_map(|b| m.value(b, cell.object_id, level))
            .map(|v| v - last)
            .fold(f64::NEG_INFINITY, f64::max);
        if best.is_finite() {
            total += best;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "no earlier object has a defined metric".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Anomaly map of one test image, kept for heatmap export.
#[derive(Clone, Debug)]
pub struct ImageMap {
    pub object_name: String,
    pub image_name: String,
    pub pixel_scores: Array2<f32>,
    pub image_score: f32,
}

#[derive(Clone, Debug)]
pub struct StepEvaluation {
    pub cells: Vec<Cell>,
    pub maps: Vec<ImageMap>,
}

fn evaluate_object(
    model: &ModelState,
    object: &ObjectData,
    gated: bool,
) -> Result<(Cell, Vec<ImageMap>)> {
    let size = model.config.image_size;
    let mut pix_scores = Vec::new();
    let mut pix_labels = Vec::new();
    let mut img_scores = Vec::new();
    let mut img_labels = Vec::new();
    let mut maps = Vec::with_capacity(object.test.len());
    for sample in &object.test {
        let rec = model.infer(&sample.image, gated)?;
        let target: Array3<f32> = model.tokens_to_grid(&rec.target);
        let x_hat = model.tokens_to_grid(&rec.x_hat);
        let map = anomaly_map(&target, &x_hat, (size, size))?;
        if map.pixel_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite anomaly score for {}/{}",
                object.name, sample.name
            )));
        }
        pix_scores.extend(map.pixel_scores.iter().map(|&v| v as f64));
        pix_labels.extend(sample.mask.iter().map(|&m| m > 0));
        img_scores.push(map.image_score as f64);
        img_labels.push(sample.label == Label::Defective);
        maps.push(ImageMap {
            object_name: object.name.clone(),
            image_name: sample.name.clone(),
            pixel_scores: map.pixel_scores,
            image_score: map.image_score,
        });
    }
    let defined = |r: Result<f64>, what: &str| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{what} AUROC undefined for {}: {msg}", object.name);
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let cell = Cell {
        object_id: object.object_id,
        pixel: defined(auroc(&pix_scores, &pix_labels), "pixel")?,
        image: defined(auroc(&img_scores, &img_labels), "image")?,
    };
    Ok((cell, maps))
}

/// Scores every seen object on its test split. Only `test` samples are read.
pub fn evaluate_step(
    model: &ModelState,
    seen: &[&ObjectData],
    gated: bool,
) -> Result<StepEvaluation> {
    let per_object: Vec<Result<(Cell, Vec<ImageMap>)>> = seen
        .par_iter()
        .map(|obj| evaluate_object(model, obj, gated))
        .collect();
    let mut cells = Vec::with_capacity(seen.len());
    let mut maps = Vec::new();
    for r in per_object {
        let (cell, m) = r?;
        cells.push(cell);
        maps.extend(m);
    }
    Ok(StepEvaluation { cells, maps })
}

const PALETTE: [[f32; 3]; 4] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Blue → cyan → yellow → red for `v ∈ [0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f32;
    let i = (v.floor() as usize).min(PALETTE.len() - 2);
    let t = v - i as f32;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (PALETTE[i][c] * (1.0 - t) + PALETTE[i + 1][c] * t).round() as u8;
    }
    out
}

/// Per-image min-max normalisation; a constant map normalises to zero.
pub fn normalize(scores: &Array2<f32>) -> Array2<f32> {
    let min = scores.iter().copied().fold(f32::INFINITY, f32::min);
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(scores.dim());
    }
    scores.mapv(|v| (v - min) / range)
}

pub fn heatmap_image(scores: &Array2<f32>) -> image::RgbImage {
    let norm = normalize(scores);
    let (h, w) = norm.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(colormap(norm[[y as usize, x as usize]]))
    })
}

pub fn export_heatmap(scores: &Array2<f32>, path: &Path) -> Result<()> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite heatmap for {}",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    heatmap_image(scores)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cell(id: usize, image: f64) -> Cell {
        Cell {
            object_id: id,
            pixel: Some(image),
            image: Some(image),
        }
    }

    #[test]
    fn auroc_basic_cases() {
        assert_eq!(
            auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn acc_cases() {
        assert_eq!(acc(&[Some(0.9), Some(0.9)]).unwrap(), 0.9);
        assert_eq!(acc(&[Some(0.7)]).unwrap(), 0.7);
        assert!((acc(&[Some(0.8), Some(0.85)]).unwrap() - 0.825).abs() < 1e-15);
        assert!(acc(&[Some(0.8), None]).is_err());
    }

    #[test]
    fn fm_cases() {
        let mut m = ScoreMatrix::default();
        m.push_row(vec![cell(0, 0.9)]).unwrap();
        assert!(matches!(
            fm(&m, Level::Image),
            Err(Error::UndefinedMetric(_))
        ));
        m.push_row(vec![cell(0, 0.8), cell(1, 0.7)]).unwrap();
        assert!((fm(&m, Level::Image).unwrap() - 0.1).abs() < 1e-15);

        let mut up = ScoreMatrix::default();
        up.push_row(vec![cell(0, 0.7)]).unwrap();
        up.push_row(vec![cell(0, 0.75), cell(1, 0.9)]).unwrap();
        let v = fm(&up, Level::Pixel).unwrap();
        assert!(v < 0.0 && (v + 0.05).abs() < 1e-12);
    }

    #[test]
    fn rows_cannot_drop_objects() {
        let mut m = ScoreMatrix::default();
        m.push_row(vec![cell(0, 0.9), cell(1, 0.8)]).unwrap();
        assert!(m.push_row(vec![cell(1, 0.8)]).is_err());
        assert!(m.push_row(vec![cell(0, 1.5), cell(1, 0.8)]).is_err());
    }

    #[test]
    fn colormap_endpoints_and_constant_map() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        let n = normalize(&Array2::from_elem((3, 3), 4.0));
        assert!(n.iter().all(|&v| v == 0.0));
        let img = heatmap_image(&array![[0.0, 1.0], [0.5, 2.0]]);
        assert_eq!(img.get_pixel(1, 1).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 255]);
    }
}
