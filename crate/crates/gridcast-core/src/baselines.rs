//! Reference predictors and the evaluation harness.
//!
//! Four baselines frame the learned models: predict zeros, repeat the
//! last frame, average the same slots of the previous three days, and a
//! running average whose forecasts feed back into themselves. Evaluation
//! clamps every prediction to `[0, 1]`, averages squared error per
//! channel over all examples and the three target frames, and reports
//! the result multiplied by 10^3 (the usual table convention).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{make_example, MovieDataset, TARGET_FRAMES};
use crate::error::Error;
use crate::models::ModelParams;
use crate::tensor::Tensor;
use crate::Result;

/// The four reference predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// All-zero frames.
    Zeros,
    /// The last observed frame, three times.
    Naive,
    /// Mean of the previous three days at the same time of day.
    Seasonal,
    /// Running average of the last three frames, predictions included.
    Average,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Zeros,
        BaselineKind::Naive,
        BaselineKind::Seasonal,
        BaselineKind::Average,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Zeros => "zeros",
            BaselineKind::Naive => "naive",
            BaselineKind::Seasonal => "seasonal",
            BaselineKind::Average => "average",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "zeros" => Ok(BaselineKind::Zeros),
            "naive" => Ok(BaselineKind::Naive),
            "seasonal" => Ok(BaselineKind::Seasonal),
            "average" => Ok(BaselineKind::Average),
            other => Err(Error::config(format!("unknown baseline '{other}'"))),
        }
    }

    /// First day index with enough context.
    pub fn min_day(&self) -> usize {
        match self {
            BaselineKind::Seasonal => 3,
            _ => 0,
        }
    }

    /// First within-day slot with enough context.
    pub fn min_slot(&self) -> usize {
        match self {
            BaselineKind::Zeros | BaselineKind::Seasonal => 0,
            BaselineKind::Naive => 1,
            BaselineKind::Average => 3,
        }
    }
}

/// Prediction of a baseline at `(day, slot)`: `[3, H, W, C]`.
pub fn baseline_predict(
    kind: BaselineKind,
    dataset: &MovieDataset,
    day: usize,
    slot: usize,
) -> Result<Tensor> {
    let fpd = dataset.frames_per_day();
    if day >= dataset.n_days() || slot + TARGET_FRAMES > fpd {
        return Err(Error::WindowOutOfRange {
            day,
            start: slot as isize,
            end: slot + TARGET_FRAMES,
            frames_per_day: fpd,
        });
    }
    let (h, w, c) = (dataset.height(), dataset.width(), dataset.channels());
    let frame_len = h * w * c;
    let shape = vec![TARGET_FRAMES, h, w, c];

    match kind {
        BaselineKind::Zeros => Ok(Tensor::zeros(&shape)),

        BaselineKind::Naive => {
            if slot < 1 {
                return Err(Error::MissingContext {
                    what: format!("naive needs frame (day {day}, slot {})", slot as isize - 1),
                });
            }
            let last = dataset.frames_tensor(
                dataset.frame_index(day, slot - 1),
                dataset.frame_index(day, slot),
            )?;
            let mut out = Vec::with_capacity(TARGET_FRAMES * frame_len);
            for _ in 0..TARGET_FRAMES {
                out.extend_from_slice(last.data());
            }
            Ok(Tensor::from_raw(shape, out))
        }

        BaselineKind::Seasonal => {
            if day < 3 {
                return Err(Error::MissingContext {
                    what: format!("seasonal needs days {}..{day}, have none before day 0", day as isize - 3),
                });
            }
            let mut out = vec![0.0; TARGET_FRAMES * frame_len];
            for back in 1..=3 {
                let start = dataset.frame_index(day - back, slot);
                let frames = dataset.frames_tensor(start, start + TARGET_FRAMES)?;
                for (o, v) in out.iter_mut().zip(frames.data()) {
                    *o += v / 3.0;
                }
            }
            Ok(Tensor::from_raw(shape, out))
        }

        BaselineKind::Average => {
            if slot < 3 {
                return Err(Error::MissingContext {
                    what: format!(
                        "running average needs frames (day {day}, slots {}..{slot})",
                        slot as isize - 3
                    ),
                });
            }
            let start = dataset.frame_index(day, slot - 3);
            let ctx = dataset.frames_tensor(start, start + 3)?;
            let f = |i: usize| &ctx.data()[i * frame_len..(i + 1) * frame_len];
            let mean3 = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<f64> {
                a.iter()
                    .zip(b)
                    .zip(c)
                    .map(|((x, y), z)| (x + y + z) / 3.0)
                    .collect()
            };
            let y1 = mean3(f(0), f(1), f(2));
            let y2 = mean3(f(1), f(2), &y1);
            let y3 = mean3(f(2), &y1, &y2);
            let mut out = y1;
            out.extend_from_slice(&y2);
            out.extend_from_slice(&y3);
            Ok(Tensor::from_raw(shape, out))
        }
    }
}

// ── Evaluation ─────────────────────────────────────────────────────────

/// Squared-error sums of one example, per channel, predictions clamped
/// to `[0, 1]`. Returns the per-channel sums and the element count per
/// channel.
pub fn score_example(pred: &Tensor, targets: &Tensor) -> Result<(Vec<f64>, usize)> {
    if pred.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "score_example",
            expected: targets.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let c = *pred.shape().last().unwrap();
    let mut sums = vec![0.0; c];
    for (i, (p, t)) in pred.data().iter().zip(targets.data()).enumerate() {
        let d = p.clamp(0.0, 1.0) - t;
        sums[i % c] += d * d;
    }
    Ok((sums, pred.len() / c))
}

/// Per-channel MSE of a predictor over `(days x slots)`, multiplied by
/// 10^3. Summation runs in the given order, so results are deterministic.
pub fn evaluate<F>(
    predict: F,
    dataset: &MovieDataset,
    days: &[usize],
    slots: &[usize],
) -> Result<Vec<f64>>
where
    F: Fn(&MovieDataset, usize, usize) -> Result<Tensor>,
{
    if days.is_empty() || slots.is_empty() {
        return Err(Error::config("evaluation needs at least one day and slot"));
    }
    let c = dataset.channels();
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for &day in days {
        for &slot in slots {
            let pred = predict(dataset, day, slot)?;
            let start = dataset.frame_index(day, slot);
            let targets = dataset.frames_tensor(start, start + TARGET_FRAMES)?;
            let (s, n) = score_example(&pred, &targets)?;
            for (acc, v) in sums.iter_mut().zip(&s) {
                *acc += v;
            }
            count += n;
        }
    }
    Ok(sums.iter().map(|s| s / count as f64 * 1e3).collect())
}

/// Adapts trained model parameters into an evaluation predictor.
pub fn model_predictor(
    params: &ModelParams,
    n_hour_bins: usize,
) -> impl Fn(&MovieDataset, usize, usize) -> Result<Tensor> + '_ {
    let history = params.history();
    move |ds, day, slot| {
        let example = make_example(ds, day, slot, history, n_hour_bins)?;
        params.predict(&example)
    }
}

/// Adapts a baseline into an evaluation predictor.
pub fn baseline_predictor(
    kind: BaselineKind,
) -> impl Fn(&MovieDataset, usize, usize) -> Result<Tensor> {
    move |ds, day, slot| baseline_predict(kind, ds, day, slot)
}

// ── Metric table ───────────────────────────────────────────────────────

/// One method's evaluated row: per-(city, channel) MSE cells, city-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    /// `cities x channels` cells, already scaled by 10^3.
    pub cells: Vec<f64>,
}

/// Table of per-(city, channel) MSEs plus derived means, one row per
/// method.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub cities: Vec<String>,
    pub channels: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(cities: Vec<String>, channels: usize) -> Self {
        MetricTable {
            cities,
            channels,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, method: impl Into<String>, cells: Vec<f64>) -> Result<()> {
        if cells.len() != self.cities.len() * self.channels {
            return Err(Error::LengthMismatch {
                expected: self.cities.len() * self.channels,
                got: cells.len(),
            });
        }
        if cells.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "metric cell",
            });
        }
        self.rows.push(MetricRow {
            method: method.into(),
            cells,
        });
        Ok(())
    }

    pub fn city_means(&self, row: &MetricRow) -> Vec<f64> {
        (0..self.cities.len())
            .map(|ci| {
                let s: f64 = row.cells[ci * self.channels..(ci + 1) * self.channels]
                    .iter()
                    .sum();
                s / self.channels as f64
            })
            .collect()
    }

    pub fn overall_mean(&self, row: &MetricRow) -> f64 {
        row.cells.iter().sum::<f64>() / row.cells.len() as f64
    }

    fn channel_name(&self, c: usize) -> String {
        if self.channels == 3 {
            ["V", "S", "H"][c].into()
        } else {
            format!("c{c}")
        }
    }

    fn header_cells(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for city in &self.cities {
            for c in 0..self.channels {
                cols.push(format!("{city}_{}", self.channel_name(c)));
            }
        }
        for city in &self.cities {
            cols.push(format!("{city}_mean"));
        }
        cols.push(String::from("overall_mean"));
        cols
    }

    fn row_cells(&self, row: &MetricRow) -> Vec<f64> {
        let mut out = row.cells.clone();
        out.extend(self.city_means(row));
        out.push(self.overall_mean(row));
        out
    }

    /// Deterministic CSV: method, per-(city, channel) cells, city means,
    /// overall mean, all fixed to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,");
        out.push_str(&self.header_cells().join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.method);
            for v in self.row_cells(row) {
                out.push_str(&format!(",{v:.2}"));
            }
            out.push('\n');
        }
        out
    }

    /// The same layout as a markdown table.
    pub fn to_markdown(&self) -> String {
        let headers = self.header_cells();
        let mut out = String::from("| method |");
        for h in &headers {
            out.push_str(&format!(" {h} |"));
        }
        out.push_str("\n|---|");
        for _ in &headers {
            out.push_str("---|");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.method));
            for v in self.row_cells(row) {
                out.push_str(&format!(" {v:.2} |"));
            }
            out.push('\n');
        }
        out
    }
}
