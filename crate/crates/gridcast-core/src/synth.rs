//! Synthetic city generator.
//!
//! Produces desk-scale frame movies with a fixed sparse road mask and
//! per-road activity that is a product of hour-of-day, day-of-week, and
//! month-of-year profiles plus bounded uniform noise. Off-road pixels are
//! exactly zero at every frame. Everything is deterministic in the seed.
//!
//! The hour profile carries a per-pixel phase, so the time-of-day shape
//! differs from location to location; a location-agnostic regressor can
//! only follow it through the recent history, while per-location bias
//! tables can learn it outright.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{clock_index, MovieDataset, MINUTES_PER_DAY};
use crate::error::Error;
use crate::Result;

const TAU: f64 = core::f64::consts::TAU;

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_days: usize,
    /// Fraction of pixels that carry a road, in (0, 1).
    pub road_density: f64,
    /// Amplitude of the hour-of-day profile (per-pixel phase), >= 0.
    pub hour_amplitude: f64,
    /// Each road pixel cycles `1..=hour_harmonics` times per day; higher
    /// values plant faster location-specific daily shapes.
    pub hour_harmonics: usize,
    /// Amplitude of the day-of-week profile, >= 0.
    pub week_amplitude: f64,
    /// Amplitude of the month-of-year profile, >= 0.
    pub month_amplitude: f64,
    /// Half-width of the uniform noise added to every on-road value.
    pub noise: f64,
    pub seed: u64,
    /// UTC timestamp of frame 0.
    pub start_unix_seconds: i64,
    pub interval_minutes: u16,
}

impl SynthSpec {
    /// 2019-01-07 00:00 UTC, a Monday.
    pub const DEFAULT_START: i64 = 1_546_819_200;

    pub fn new(height: usize, width: usize, channels: usize, n_days: usize, seed: u64) -> Self {
        SynthSpec {
            height,
            width,
            channels,
            n_days,
            road_density: 0.12,
            hour_amplitude: 1.0,
            hour_harmonics: 16,
            week_amplitude: 0.2,
            month_amplitude: 0.05,
            noise: 0.02,
            seed,
            start_unix_seconds: Self::DEFAULT_START,
            interval_minutes: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("synth dimensions must be positive"));
        }
        if self.n_days == 0 {
            return Err(Error::config("synth needs at least one day"));
        }
        if !(self.road_density > 0.0 && self.road_density < 1.0) {
            return Err(Error::config("road_density must lie in (0, 1)"));
        }
        if self.hour_amplitude < 0.0 || self.week_amplitude < 0.0 || self.month_amplitude < 0.0 {
            return Err(Error::config("amplitudes must be >= 0"));
        }
        if self.hour_harmonics == 0 {
            return Err(Error::config("hour_harmonics must be >= 1"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise must be >= 0"));
        }
        if self.interval_minutes == 0 || MINUTES_PER_DAY % self.interval_minutes as u32 != 0 {
            return Err(Error::config("interval_minutes must divide 1440"));
        }
        Ok(())
    }
}

/// Generates a deterministic synthetic city movie.
pub fn synthesize_city(spec: &SynthSpec) -> Result<MovieDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let pixels = spec.height * spec.width;
    let road: Vec<bool> = (0..pixels)
        .map(|_| rng.gen::<f64>() < spec.road_density)
        .collect();

    // Per road pixel: a base level per channel plus its own daily shape
    // (phase and cycles per day).
    struct RoadPixel {
        index: usize,
        base: Vec<f64>,
        phase: f64,
        cycles: usize,
    }
    let road_pixels: Vec<RoadPixel> = road
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(index, _)| RoadPixel {
            index,
            base: (0..spec.channels).map(|_| rng.gen_range(0.15..0.50)).collect(),
            phase: rng.gen_range(0.0..TAU),
            cycles: rng.gen_range(1..=spec.hour_harmonics),
        })
        .collect();

    let fpd = (MINUTES_PER_DAY / spec.interval_minutes as u32) as usize;
    let n_frames = spec.n_days * fpd;

    // The hour profile repeats every day; precompute it per (slot, road).
    let mut hour_factor = vec![1.0; fpd * road_pixels.len()];
    if spec.hour_amplitude > 0.0 {
        for slot in 0..fpd {
            let angle = TAU * slot as f64 / fpd as f64;
            for (ri, rp) in road_pixels.iter().enumerate() {
                hour_factor[slot * road_pixels.len() + ri] =
                    1.0 + spec.hour_amplitude * libm::sin(rp.cycles as f64 * angle + rp.phase);
            }
        }
    }

    let frame_len = pixels * spec.channels;
    let mut raw = vec![0u8; n_frames * frame_len];
    for day in 0..spec.n_days {
        let day_ts = spec.start_unix_seconds + (day * fpd) as i64 * spec.interval_minutes as i64 * 60;
        let clock = clock_index(day_ts, 24)?;
        let week_factor = 1.0 + spec.week_amplitude * libm::sin(TAU * clock.weekday as f64 / 7.0);
        let month_factor = 1.0 + spec.month_amplitude * libm::sin(TAU * clock.month as f64 / 12.0);
        let calendar = week_factor * month_factor;

        for slot in 0..fpd {
            let frame = &mut raw[(day * fpd + slot) * frame_len..(day * fpd + slot + 1) * frame_len];
            let hf = &hour_factor[slot * road_pixels.len()..(slot + 1) * road_pixels.len()];
            for (ri, rp) in road_pixels.iter().enumerate() {
                let level = hf[ri] * calendar;
                for (c, &b) in rp.base.iter().enumerate() {
                    let mut v = b * level;
                    if spec.noise > 0.0 {
                        v += rng.gen_range(-spec.noise..=spec.noise);
                    }
                    frame[rp.index * spec.channels + c] =
                        libm::round(v.clamp(0.0, 1.0) * 255.0) as u8;
                }
            }
        }
    }

    MovieDataset::new(
        String::from("synth"),
        spec.height,
        spec.width,
        spec.channels,
        spec.start_unix_seconds,
        spec.interval_minutes,
        raw,
    )
}

/// Fraction of pixels with any activity at any time.
pub fn on_road_fraction(dataset: &MovieDataset) -> f64 {
    let pixels = dataset.height() * dataset.width();
    let mut active = vec![false; pixels];
    let c = dataset.channels();
    for (i, &b) in dataset.raw().iter().enumerate() {
        if b != 0 {
            active[(i / c) % pixels] = true;
        }
    }
    active.iter().filter(|&&a| a).count() as f64 / pixels as f64
}
