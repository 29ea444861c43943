use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail_config, bail_param, Error, Result};
use crate::inference::AttentionRecord;

/// Step index used for attention probes: step 15 of a 25-step schedule,
/// scaled to `steps`.
pub fn observation_step(steps: usize) -> usize {
    (15 * steps / 25).min(steps.saturating_sub(1))
}

/// Frame-to-frame attention averaged over heads, positions, layers and steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub frames: usize,
    /// Row-major `F x F`; row = query frame, column = key frame.
    pub map: Vec<f64>,
    /// Largest mean column mass, in `[1/F, 1]`.
    pub concentration: f64,
    pub argmax_column: usize,
}

/// Average every map in `records` (all clips, heads, positions, tiers and
/// sites, weighted equally per map) into one `F x F` matrix.
pub fn attention_alignment(records: &[AttentionRecord]) -> Result<AlignmentSummary> {
    let maps: Vec<_> = records.iter().flat_map(|r| &r.maps).collect();
    let Some(first) = maps.first() else {
        bail_config!("no attention maps were recorded");
    };
    let f = first.frames;
    if maps.iter().any(|m| m.frames != f) {
        bail_param!("attention maps disagree on frame count");
    }
    let mut acc = vec![0.0; f * f];
    let mut n = 0usize;
    for m in &maps {
        for clip in 0..m.clips() {
            for (a, v) in acc.iter_mut().zip(m.mean_map(clip)) {
                *a += v;
            }
            n += 1;
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    let (argmax_column, concentration) = concentration(&acc, f);
    Ok(AlignmentSummary {
        frames: f,
        map: acc,
        concentration,
        argmax_column,
    })
}

/// `(column, mass)` of the column with the largest mean mass.
pub fn concentration(map: &[f64], frames: usize) -> (usize, f64) {
    (0..frames)
        .map(|j| (j, (0..frames).map(|i| map[i * frames + j]).sum::<f64>() / frames as f64))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
}

impl AlignmentSummary {
    /// The matrix as comma-separated rows.
    pub fn to_csv(&self) -> String {
        self.map
            .chunks(self.frames)
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Heatmap PNG, `cell` pixels per entry, dark-to-bright with the map's
    /// own maximum at full brightness.
    pub fn save_heatmap(&self, path: &Path, cell: u32) -> Result<()> {
        let f = self.frames as u32;
        let max = self.map.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
        let img = image::RgbImage::from_fn(f * cell, f * cell, |x, y| {
            let v = self.map[(y / cell * f + x / cell) as usize] / max;
            // black -> red -> yellow -> white
            let ch = |lo: f64| ((v - lo) * 3.0).clamp(0.0, 1.0);
            image::Rgb([(ch(0.0) * 255.0) as u8, (ch(1.0 / 3.0) * 255.0) as u8, (ch(2.0 / 3.0) * 255.0) as u8])
        });
        img.save(path).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AttentionMap, Site};
    use crate::nn::Tensor;

    fn record(f: usize, row: impl Fn(usize) -> Vec<f32>) -> AttentionRecord {
        let probs: Vec<f32> = (0..2 * 3).flat_map(|_| (0..f).flat_map(&row)).collect();
        AttentionRecord {
            step: 0,
            t: 10,
            window: 0,
            maps: vec![AttentionMap {
                tier: 0,
                site: Site::Encoder,
                heads: 2,
                positions: 3,
                frames: f,
                probs: Tensor::from_vec(&[1, 2, 3, f, f], probs),
            }],
        }
    }

    #[test]
    fn uniform_and_one_hot_extremes() {
        let f = 5;
        let s = attention_alignment(&[record(f, |_| vec![1.0 / f as f32; f])]).unwrap();
        assert!((s.concentration - 1.0 / f as f64).abs() < 1e-6);
        let s = attention_alignment(&[record(f, |_| (0..f).map(|j| f32::from(u8::from(j == 3))).collect())]).unwrap();
        assert!((s.concentration - 1.0).abs() < 1e-12);
        assert_eq!(s.argmax_column, 3);
        assert_eq!(s.to_csv().lines().count(), f);
        assert!(attention_alignment(&[]).is_err());
    }

    #[test]
    fn observation_step_scales() {
        assert_eq!(observation_step(25), 15);
        assert_eq!(observation_step(50), 30);
        assert_eq!(observation_step(10), 6);
        assert_eq!(observation_step(1), 0);
    }
}
