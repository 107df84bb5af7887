//! Frame-movie storage, calendar indexing, and training-example
//! extraction.
//!
//! A city's data is a movie of `T` frames, each `H x W` pixels with `C`
//! channels, one frame every `interval_minutes`. Raw values are unsigned
//! bytes; consumers see them normalized to `[0, 1]` (divide by 255).
//! Days partition the movie into blocks of `1440 / interval_minutes`
//! frames; examples never cross a day boundary.

use alloc::string::String;
use alloc::vec::Vec;

use chrono::{DateTime, Datelike, Timelike};

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

pub const MINUTES_PER_DAY: u32 = 1440;

/// Number of future frames every example predicts.
pub const TARGET_FRAMES: usize = 3;

/// Calendar coordinates of a prediction time: hour bin of the day,
/// weekday (Monday = 0), and month (January = 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClockIndex {
    pub hour_bin: usize,
    pub weekday: usize,
    pub month: usize,
}

/// Maps a UTC timestamp (unix seconds) to its [`ClockIndex`].
///
/// `n_hour_bins` equal-width bins cover the day, so it must divide 1440.
pub fn clock_index(unix_seconds: i64, n_hour_bins: usize) -> Result<ClockIndex> {
    if n_hour_bins == 0 || MINUTES_PER_DAY as usize % n_hour_bins != 0 {
        return Err(Error::config(alloc::format!(
            "n_hour_bins must divide 1440, got {n_hour_bins}"
        )));
    }
    let dt = DateTime::from_timestamp(unix_seconds, 0)
        .ok_or_else(|| Error::config("timestamp out of range"))?;
    let minute_of_day = dt.hour() as usize * 60 + dt.minute() as usize;
    let bin_width = MINUTES_PER_DAY as usize / n_hour_bins;
    Ok(ClockIndex {
        hour_bin: minute_of_day / bin_width,
        weekday: dt.weekday().num_days_from_monday() as usize,
        month: dt.month0() as usize,
    })
}

/// A city's frame movie. Frames are stored as the raw bytes the on-disk
/// format carries, t-major then row, column, channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MovieDataset {
    pub city_name: String,
    height: usize,
    width: usize,
    channels: usize,
    n_frames: usize,
    start_unix_seconds: i64,
    interval_minutes: u16,
    raw: Vec<u8>,
}

impl MovieDataset {
    pub fn new(
        city_name: String,
        height: usize,
        width: usize,
        channels: usize,
        start_unix_seconds: i64,
        interval_minutes: u16,
        raw: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config("frame dimensions must be positive"));
        }
        if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes as u32 != 0 {
            return Err(Error::config(alloc::format!(
                "interval_minutes must divide 1440, got {interval_minutes}"
            )));
        }
        let frame_len = height * width * channels;
        if raw.is_empty() || raw.len() % frame_len != 0 {
            return Err(Error::LengthMismatch {
                expected: frame_len,
                got: raw.len(),
            });
        }
        let n_frames = raw.len() / frame_len;
        Ok(MovieDataset {
            city_name,
            height,
            width,
            channels,
            n_frames,
            start_unix_seconds,
            interval_minutes,
            raw,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn start_unix_seconds(&self) -> i64 {
        self.start_unix_seconds
    }

    pub fn interval_minutes(&self) -> u16 {
        self.interval_minutes
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn frames_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes as u32) as usize
    }

    /// Number of whole days in the movie.
    pub fn n_days(&self) -> usize {
        self.n_frames / self.frames_per_day()
    }

    /// Global frame index of `(day, slot)`.
    pub fn frame_index(&self, day: usize, slot: usize) -> usize {
        day * self.frames_per_day() + slot
    }

    /// Timestamp of a global frame index.
    pub fn timestamp_at(&self, frame: usize) -> i64 {
        self.start_unix_seconds + frame as i64 * self.interval_minutes as i64 * 60
    }

    /// Normalized value at `(frame, row, col, channel)`.
    pub fn value(&self, frame: usize, row: usize, col: usize, channel: usize) -> f64 {
        let idx = ((frame * self.height + row) * self.width + col) * self.channels + channel;
        self.raw[idx] as f64 / 255.0
    }

    /// Normalized frames `[t0, t1)` as a `[t1-t0, H, W, C]` tensor.
    pub fn frames_tensor(&self, t0: usize, t1: usize) -> Result<Tensor> {
        if t0 >= t1 || t1 > self.n_frames {
            return Err(Error::IndexOutOfRange {
                what: "frame range",
                index: t1,
                len: self.n_frames,
            });
        }
        let frame_len = self.height * self.width * self.channels;
        let data: Vec<f64> = self.raw[t0 * frame_len..t1 * frame_len]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Tensor::from_raw(
            alloc::vec![t1 - t0, self.height, self.width, self.channels],
            data,
        ))
    }
}

/// One supervised example: `h` history frames, 3 target frames, and the
/// calendar index of the prediction time.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// `[h, H, W, C]`, oldest frame first.
    pub history: Tensor,
    /// `[3, H, W, C]`.
    pub targets: Tensor,
    pub clock: ClockIndex,
    /// `(day index, slot index)` the example was cut from.
    pub origin: (usize, usize),
}

/// Cuts the example at `(day, slot)` with history length `h`. The window
/// `[slot - h, slot + 3)` must lie inside the day; no padding is applied.
pub fn make_example(
    dataset: &MovieDataset,
    day: usize,
    slot: usize,
    h: usize,
    n_hour_bins: usize,
) -> Result<TrainingExample> {
    if h == 0 {
        return Err(Error::config("history length must be >= 1"));
    }
    let fpd = dataset.frames_per_day();
    if day >= dataset.n_days() || slot < h || slot + TARGET_FRAMES > fpd {
        return Err(Error::WindowOutOfRange {
            day,
            start: slot as isize - h as isize,
            end: slot + TARGET_FRAMES,
            frames_per_day: fpd,
        });
    }
    let base = dataset.frame_index(day, 0);
    let history = dataset.frames_tensor(base + slot - h, base + slot)?;
    let targets = dataset.frames_tensor(base + slot, base + slot + TARGET_FRAMES)?;
    let clock = clock_index(dataset.timestamp_at(base + slot), n_hour_bins)?;
    Ok(TrainingExample {
        history,
        targets,
        clock,
        origin: (day, slot),
    })
}

/// Evenly spaced per-day prediction slots, mirroring the handful of
/// scored time slices per day.
pub fn default_target_slots(frames_per_day: usize, count: usize) -> Vec<usize> {
    (1..=count)
        .map(|i| i * frames_per_day / (count + 1))
        .collect()
}

/// Chronological train/validation day split: the first
/// `(1 - val_fraction)` of days train, the rest validate.
pub fn split_train_val(n_days: usize, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("val_fraction must be in [0, 1)"));
    }
    let n_val = ((n_days as f64 * val_fraction) + 0.5) as usize;
    let n_train = n_days.saturating_sub(n_val);
    if n_train == 0 {
        return Err(Error::config("no training days left after split"));
    }
    Ok(((0..n_train).collect(), (n_train..n_days).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 2019-01-07 was a Monday.
    const MONDAY_2019_01_07: i64 = 1_546_819_200;

    #[test]
    fn clock_midnight_is_bin_zero() {
        let c = clock_index(MONDAY_2019_01_07, 12).unwrap();
        assert_eq!(c.hour_bin, 0);
    }

    #[test]
    fn clock_minute_1430_is_bin_11() {
        let c = clock_index(MONDAY_2019_01_07 + 1430 * 60, 12).unwrap();
        assert_eq!(c.hour_bin, 11);
    }

    #[test]
    fn clock_monday_january() {
        let c = clock_index(MONDAY_2019_01_07, 12).unwrap();
        assert_eq!(c.weekday, 0);
        assert_eq!(c.month, 0);
    }

    #[test]
    fn clock_rejects_bad_bins() {
        assert!(clock_index(0, 7).is_err());
        assert!(clock_index(0, 0).is_err());
    }

    proptest! {
        #[test]
        fn clock_is_periodic(
            secs in 0i64..4_000_000_000i64,
            bins in prop::sample::select(alloc::vec![1usize, 2, 12, 24, 1440]),
        ) {
            let base = clock_index(secs, bins).unwrap();
            let week_later = clock_index(secs + 7 * 86_400, bins).unwrap();
            prop_assert_eq!(base.weekday, week_later.weekday);
            let day_later = clock_index(secs + 86_400, bins).unwrap();
            prop_assert_eq!(base.hour_bin, day_later.hour_bin);
        }
    }

    fn movie(frames: usize) -> MovieDataset {
        // 2x2, 1 channel, 5-minute interval, bytes counting upward.
        let raw: Vec<u8> = (0..frames * 4).map(|i| (i % 251) as u8).collect();
        MovieDataset::new(String::from("test"), 2, 2, 1, MONDAY_2019_01_07, 5, raw).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        let ds =
            MovieDataset::new(String::from("t"), 1, 1, 1, 0, 5, alloc::vec![0, 255]).unwrap();
        assert_eq!(ds.value(0, 0, 0, 0), 0.0);
        assert_eq!(ds.value(1, 0, 0, 0), 1.0);
    }

    #[test]
    fn minimal_example_window() {
        let ds = movie(288);
        let ex = make_example(&ds, 0, 1, 1, 12).unwrap();
        assert_eq!(ex.history.shape(), &[1, 2, 2, 1]);
        assert_eq!(ex.targets.shape(), &[3, 2, 2, 1]);
        // History is frame 0, targets frames 1..4.
        assert_eq!(ex.history.at(&[0, 0, 0, 0]), ds.value(0, 0, 0, 0));
        assert_eq!(ex.targets.at(&[0, 0, 0, 0]), ds.value(1, 0, 0, 0));
        assert_eq!(ex.targets.at(&[2, 1, 1, 0]), ds.value(3, 1, 1, 0));
    }

    #[test]
    fn slot_before_history_is_rejected() {
        let ds = movie(288);
        assert!(matches!(
            make_example(&ds, 0, 1, 2, 12),
            Err(Error::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn last_valid_slot_of_day() {
        let ds = movie(288);
        assert!(make_example(&ds, 0, 285, 3, 12).is_ok());
        assert!(make_example(&ds, 0, 286, 3, 12).is_err());
    }

    #[test]
    fn example_clock_uses_slot_time() {
        let ds = movie(576); // two days
        let ex = make_example(&ds, 1, 48, 4, 12).unwrap();
        // Day 1 of a Monday start is a Tuesday; slot 48 is minute 240.
        assert_eq!(ex.clock.weekday, 1);
        assert_eq!(ex.clock.hour_bin, 2);
    }

    proptest! {
        #[test]
        fn history_and_targets_are_contiguous(slot in 4usize..285, h in 1usize..=4) {
            let ds = movie(288);
            let ex = make_example(&ds, 0, slot, h, 12).unwrap();
            let whole = ds.frames_tensor(slot - h, slot + 3).unwrap();
            let mut joined = ex.history.data().to_vec();
            joined.extend_from_slice(ex.targets.data());
            prop_assert_eq!(whole.data(), &joined[..]);
        }
    }

    #[test]
    fn default_slots_are_spread() {
        assert_eq!(
            default_target_slots(288, 5),
            alloc::vec![48, 96, 144, 192, 240]
        );
    }

    #[test]
    fn split_is_chronological() {
        let (train, val) = split_train_val(10, 0.2).unwrap();
        assert_eq!(train, (0..8).collect::<Vec<_>>());
        assert_eq!(val, alloc::vec![8, 9]);
        assert!(split_train_val(3, 0.99).is_err());
    }
}
