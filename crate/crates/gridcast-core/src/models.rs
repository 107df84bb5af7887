//! Forecasting models.
//!
//! The backbone is a temporal regressor: a stack of per-pixel channel
//! mixes (1x1 convolutions) that maps the `h * C` stacked history
//! channels of a pixel to its `3 * C` future channels, with the same
//! weights at every location. On top of it sit three learnable additive
//! bias tables indexed by calendar and location:
//!
//! - location x hour-bin, one offset per pixel and hour bin,
//! - weekday x hour-bin, one offset per (weekday, hour bin),
//! - month, one offset per month,
//!
//! each carrying `3 * C` output channels. The prediction is the sum of
//! the regressor output and the looked-up biases.
//!
//! The displacement-masked variant additionally predicts a per-pixel
//! `(dx, dy)` displacement field, warps the binary occupancy mask of the
//! last observed frame with it, and multiplies the warped mask into the
//! value prediction elementwise.
//!
//! Output channel layout everywhere is frame-major: channel `f * C + c`
//! is channel `c` of future frame `f`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{ClockIndex, TrainingExample, TARGET_FRAMES};
use crate::error::Error;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Normalized volume of one raw byte unit; pixels at or above it count
/// as occupied.
pub const OCCUPANCY_THRESHOLD: f64 = 1.0 / 255.0;

/// Architecture of the temporal regression stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrConfig {
    /// Total number of layers; the last one is linear (no activation).
    pub n_layers: usize,
    pub hidden_channels: usize,
    /// History length `h` in frames.
    pub history: usize,
    pub activation: Activation,
    /// Odd neighborhood size; 1 keeps the stack purely per-pixel.
    /// Larger kernels are realized as a zero-padded neighborhood gather
    /// of the stacked input followed by the same channel mixes.
    pub kernel_size: usize,
}

impl Default for TrConfig {
    fn default() -> Self {
        TrConfig {
            n_layers: 2,
            hidden_channels: 16,
            history: 4,
            activation: Activation::Elu,
            kernel_size: 1,
        }
    }
}

impl TrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be >= 1"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::config("hidden_channels must be >= 1"));
        }
        if self.history == 0 {
            return Err(Error::config("history must be >= 1"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd and >= 1"));
        }
        Ok(())
    }

    /// `(in, out)` channel counts of every layer for `c` data channels.
    pub fn layer_shapes(&self, channels: usize) -> Vec<(usize, usize)> {
        let k2 = self.kernel_size * self.kernel_size;
        let input = k2 * self.history * channels;
        let output = TARGET_FRAMES * channels;
        (0..self.n_layers)
            .map(|i| {
                let cin = if i == 0 { input } else { self.hidden_channels };
                let cout = if i == self.n_layers - 1 {
                    output
                } else {
                    self.hidden_channels
                };
                (cin, cout)
            })
            .collect()
    }
}

/// Frame geometry the parameters are bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn of(ds: &crate::data::MovieDataset) -> Self {
        GridShape {
            height: ds.height(),
            width: ds.width(),
            channels: ds.channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        TARGET_FRAMES * self.channels
    }
}

/// Which bias tables participate in the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasCombo {
    pub location_hour: bool,
    pub weekday_hour: bool,
    pub month: bool,
}

impl BiasCombo {
    pub const NONE: BiasCombo = BiasCombo {
        location_hour: false,
        weekday_hour: false,
        month: false,
    };
    pub const ALL: BiasCombo = BiasCombo {
        location_hour: true,
        weekday_hour: true,
        month: true,
    };

    pub fn any(&self) -> bool {
        self.location_hour || self.weekday_hour || self.month
    }

    /// Stable text form: `lxh+wxh+m` subsets, or `none`.
    pub fn label(&self) -> String {
        if !self.any() {
            return String::from("none");
        }
        let mut parts = Vec::new();
        if self.location_hour {
            parts.push("lxh");
        }
        if self.weekday_hour {
            parts.push("wxh");
        }
        if self.month {
            parts.push("m");
        }
        parts.join("+")
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text == "none" {
            return Ok(BiasCombo::NONE);
        }
        let mut combo = BiasCombo::NONE;
        for part in text.split('+') {
            match part {
                "lxh" => combo.location_hour = true,
                "wxh" => combo.weekday_hour = true,
                "m" => combo.month = true,
                other => {
                    return Err(Error::config(format!(
                        "unknown bias table '{other}' (expected lxh, wxh, m, or none)"
                    )))
                }
            }
        }
        Ok(combo)
    }
}

/// The three learnable bias tables, all initialized to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasTables {
    /// `[H, W, n_hour_bins, 3C]`
    pub location_hour: Tensor,
    /// `[7, n_hour_bins, 3C]`
    pub weekday_hour: Tensor,
    /// `[12, 3C]`
    pub month: Tensor,
}

impl BiasTables {
    pub fn zeros(grid: GridShape, n_hour_bins: usize) -> Self {
        let oc = grid.out_channels();
        BiasTables {
            location_hour: Tensor::zeros(&[grid.height, grid.width, n_hour_bins, oc]),
            weekday_hour: Tensor::zeros(&[7, n_hour_bins, oc]),
            month: Tensor::zeros(&[12, oc]),
        }
    }
}

/// One channel-mix layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[C_out, C_in]`
    pub weights: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

/// Temporal regression parameters plus bias tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TrbParams {
    pub config: TrConfig,
    pub grid: GridShape,
    pub n_hour_bins: usize,
    pub combo: BiasCombo,
    pub layers: Vec<LinearLayer>,
    pub tables: BiasTables,
}

/// Displacement-masked parameters: a value model plus a displacement
/// stack producing `(dx, dy)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedParams {
    pub value: TrbParams,
    pub displacement: Vec<LinearLayer>,
    /// Channel index carrying traffic volume.
    pub volume_channel: usize,
}

fn he_layers(shapes: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<LinearLayer> {
    shapes
        .iter()
        .map(|&(cin, cout)| {
            let std = libm::sqrt(2.0 / cin as f64);
            let normal = Normal::new(0.0, std).expect("valid std");
            LinearLayer {
                weights: Tensor::from_fn(&[cout, cin], |_| normal.sample(rng)),
                bias: Tensor::zeros(&[cout]),
            }
        })
        .collect()
}

/// Initializes a temporal-regression-plus-biases model: layer weights
/// drawn from N(0, sqrt(2 / fan_in)), layer biases and all bias tables
/// zero. Deterministic in the seed.
pub fn init_trb(
    config: TrConfig,
    grid: GridShape,
    n_hour_bins: usize,
    combo: BiasCombo,
    seed: u64,
) -> Result<TrbParams> {
    config.validate()?;
    if n_hour_bins == 0 {
        return Err(Error::config("n_hour_bins must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = he_layers(&config.layer_shapes(grid.channels), &mut rng);
    Ok(TrbParams {
        config,
        grid,
        n_hour_bins,
        combo,
        layers,
        tables: BiasTables::zeros(grid, n_hour_bins),
    })
}

/// Initializes the displacement-masked variant. The displacement stack
/// shares the architecture of the value stack but maps
/// `h * C + 2` inputs (history plus normalized x/y coordinate channels)
/// to 2 outputs.
pub fn init_masked(
    config: TrConfig,
    grid: GridShape,
    n_hour_bins: usize,
    combo: BiasCombo,
    seed: u64,
) -> Result<MaskedParams> {
    let value = init_trb(config, grid, n_hour_bins, combo, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let k2 = config.kernel_size * config.kernel_size;
    let input = k2 * (config.history * grid.channels + 2);
    let shapes: Vec<(usize, usize)> = (0..config.n_layers)
        .map(|i| {
            let cin = if i == 0 { input } else { config.hidden_channels };
            let cout = if i == config.n_layers - 1 {
                2
            } else {
                config.hidden_channels
            };
            (cin, cout)
        })
        .collect();
    let displacement = he_layers(&shapes, &mut rng);
    Ok(MaskedParams {
        value,
        displacement,
        volume_channel: 0,
    })
}

// ── Input preparation ──────────────────────────────────────────────────

/// `[F, H, W, C] -> [H, W, F*C]`, frame-major channel order.
pub fn frames_to_channels(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "frames_to_channels",
            expected: vec![0, 0, 0, 0],
            got: s.to_vec(),
        });
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for fi in 0..f {
        for p in 0..h * w {
            for ci in 0..c {
                out[p * f * c + fi * c + ci] = src[(fi * h * w + p) * c + ci];
            }
        }
    }
    Ok(Tensor::from_raw(vec![h, w, f * c], out))
}

/// Inverse of [`frames_to_channels`].
pub fn channels_to_frames(t: &Tensor, frames: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || frames == 0 || s[2] % frames != 0 {
        return Err(Error::ShapeMismatch {
            op: "channels_to_frames",
            expected: vec![0, 0, frames],
            got: s.to_vec(),
        });
    }
    let (h, w, fc) = (s[0], s[1], s[2]);
    let c = fc / frames;
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for fi in 0..frames {
        for p in 0..h * w {
            for ci in 0..c {
                out[(fi * h * w + p) * c + ci] = src[p * fc + fi * c + ci];
            }
        }
    }
    Ok(Tensor::from_raw(vec![frames, h, w, c], out))
}

/// Binary occupancy of one frame's volume channel: 1 where the volume is
/// at least one byte unit.
pub fn occupancy_mask(frames: &Tensor, frame: usize, volume_channel: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || frame >= s[0] || volume_channel >= s[3] {
        return Err(Error::ShapeMismatch {
            op: "occupancy_mask",
            expected: vec![frame + 1, 0, 0, volume_channel + 1],
            got: s.to_vec(),
        });
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let base = frame * h * w * c;
    Ok(Tensor::from_fn(&[h, w], |p| {
        (frames.data()[base + p * c + volume_channel] >= OCCUPANCY_THRESHOLD) as u8 as f64
    }))
}

/// Per-frame occupancy of the targets broadcast over channels, aligned
/// with the `[H, W, 3C]` prediction layout.
pub fn target_occupancy_channels(targets: &Tensor, volume_channel: usize) -> Result<Tensor> {
    let s = targets.shape();
    if s.len() != 4 || s[0] != TARGET_FRAMES {
        return Err(Error::ShapeMismatch {
            op: "target_occupancy_channels",
            expected: vec![TARGET_FRAMES, 0, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let src = targets.data();
    let mut out = vec![0.0; h * w * TARGET_FRAMES * c];
    for f in 0..TARGET_FRAMES {
        for p in 0..h * w {
            let occupied =
                src[(f * h * w + p) * c + volume_channel] >= OCCUPANCY_THRESHOLD;
            if occupied {
                for ci in 0..c {
                    out[p * TARGET_FRAMES * c + f * c + ci] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![h, w, TARGET_FRAMES * c], out))
}

/// History stacked into channels plus two normalized coordinate
/// channels, the displacement stack's input.
pub fn displacement_input(history: &Tensor) -> Result<Tensor> {
    let stacked = frames_to_channels(history)?;
    let (h, w, hc) = (
        stacked.shape()[0],
        stacked.shape()[1],
        stacked.shape()[2],
    );
    let src = stacked.data();
    let mut out = vec![0.0; h * w * (hc + 2)];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            out[p * (hc + 2)..p * (hc + 2) + hc].copy_from_slice(&src[p * hc..(p + 1) * hc]);
            out[p * (hc + 2) + hc] = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
            out[p * (hc + 2) + hc + 1] = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        }
    }
    Ok(Tensor::from_raw(vec![h, w, hc + 2], out))
}

// ── Tape-level forward passes ──────────────────────────────────────────

/// Leaf handles of registered TRB parameters, in declaration order.
pub struct TrbVars {
    pub layers: Vec<(Var, Var)>,
    pub location_hour: Option<Var>,
    pub weekday_hour: Option<Var>,
    pub month: Option<Var>,
}

/// Leaf handles of registered masked-model parameters.
pub struct MaskedVars {
    pub value: TrbVars,
    pub displacement: Vec<(Var, Var)>,
}

/// Tape output of the masked forward pass.
pub struct MaskedForward {
    /// `[H, W, 3C]`, the modulated prediction.
    pub y_final: Var,
    /// `[H, W]`, the warped occupancy mask.
    pub mask_warped: Var,
    /// `[H, W, 3C]`, the unmodulated value prediction.
    pub y_value: Var,
}

fn layer_stack_forward(
    tape: &mut Tape,
    input: Var,
    layers: &[(Var, Var)],
    activation: Activation,
    kernel_size: usize,
) -> Result<Var> {
    let mut x = if kernel_size > 1 {
        tape.neighborhood_gather(input, kernel_size)?
    } else {
        input
    };
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.channel_linear(x, w, b)?;
        if i + 1 < layers.len() {
            x = tape.activation(x, activation);
        }
    }
    Ok(x)
}

impl TrbParams {
    /// Registers the parameters as tape leaves. Inactive bias tables are
    /// not registered; they receive zero gradients.
    pub fn register(&self, tape: &mut Tape) -> TrbVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weights.clone()), tape.leaf(l.bias.clone())))
            .collect();
        TrbVars {
            layers,
            location_hour: self
                .combo
                .location_hour
                .then(|| tape.leaf(self.tables.location_hour.clone())),
            weekday_hour: self
                .combo
                .weekday_hour
                .then(|| tape.leaf(self.tables.weekday_hour.clone())),
            month: self.combo.month.then(|| tape.leaf(self.tables.month.clone())),
        }
    }

    /// Temporal regression alone on the stacked input: `[H, W, 3C]`.
    pub fn tr_forward(&self, tape: &mut Tape, vars: &TrbVars, input: Var) -> Result<Var> {
        layer_stack_forward(
            tape,
            input,
            &vars.layers,
            self.config.activation,
            self.config.kernel_size,
        )
    }

    /// Full forward pass: regression output plus active bias lookups.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &TrbVars,
        input: Var,
        clock: ClockIndex,
    ) -> Result<Var> {
        let mut out = self.tr_forward(tape, vars, input)?;
        if let Some(table) = vars.location_hour {
            let field = tape.hour_slice(table, clock.hour_bin)?;
            out = tape.add(out, field)?;
        }
        if let Some(table) = vars.weekday_hour {
            let row = clock.weekday * self.n_hour_bins + clock.hour_bin;
            let v = tape.last_axis_row(table, row)?;
            out = tape.add_vector(out, v)?;
        }
        if let Some(table) = vars.month {
            let v = tape.last_axis_row(table, clock.month)?;
            out = tape.add_vector(out, v)?;
        }
        Ok(out)
    }

    /// Value-level prediction for an example: `[3, H, W, C]`.
    pub fn predict(&self, example: &TrainingExample) -> Result<Tensor> {
        let input = frames_to_channels(&example.history)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let input = tape.leaf(input);
        let out = self.forward(&mut tape, &vars, input, example.clock)?;
        channels_to_frames(tape.value(out), TARGET_FRAMES)
    }

    /// Regression-only prediction, bias tables ignored: `[3, H, W, C]`.
    pub fn predict_tr_only(&self, example: &TrainingExample) -> Result<Tensor> {
        let input = frames_to_channels(&example.history)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let input = tape.leaf(input);
        let out = self.tr_forward(&mut tape, &vars, input)?;
        channels_to_frames(tape.value(out), TARGET_FRAMES)
    }
}

/// Sum of the active bias tables at a clock index, broadcast to
/// `[3, H, W, C]`.
pub fn bias_sum(
    tables: &BiasTables,
    combo: BiasCombo,
    clock: ClockIndex,
    grid: GridShape,
    n_hour_bins: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut out = tape.leaf(Tensor::zeros(&[grid.height, grid.width, grid.out_channels()]));
    if combo.location_hour {
        let table = tape.leaf(tables.location_hour.clone());
        let field = tape.hour_slice(table, clock.hour_bin)?;
        out = tape.add(out, field)?;
    }
    if combo.weekday_hour {
        if clock.weekday >= 7 {
            return Err(Error::IndexOutOfRange {
                what: "weekday",
                index: clock.weekday,
                len: 7,
            });
        }
        let table = tape.leaf(tables.weekday_hour.clone());
        let v = tape.last_axis_row(table, clock.weekday * n_hour_bins + clock.hour_bin)?;
        out = tape.add_vector(out, v)?;
    }
    if combo.month {
        let table = tape.leaf(tables.month.clone());
        let v = tape.last_axis_row(table, clock.month)?;
        out = tape.add_vector(out, v)?;
    }
    channels_to_frames(tape.value(out), TARGET_FRAMES)
}

impl MaskedParams {
    pub fn register(&self, tape: &mut Tape) -> MaskedVars {
        let value = self.value.register(tape);
        let displacement = self
            .displacement
            .iter()
            .map(|l| (tape.leaf(l.weights.clone()), tape.leaf(l.bias.clone())))
            .collect();
        MaskedVars { value, displacement }
    }

    /// Full masked forward pass on the tape.
    ///
    /// `value_input` is the stacked history, `disp_input` the stacked
    /// history plus coordinate channels, `source_mask` the binary
    /// occupancy of the last observed frame.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &MaskedVars,
        value_input: Var,
        disp_input: Var,
        source_mask: &Tensor,
        clock: ClockIndex,
    ) -> Result<MaskedForward> {
        let y_value = self.value.forward(tape, &vars.value, value_input, clock)?;
        let displacement = layer_stack_forward(
            tape,
            disp_input,
            &vars.displacement,
            self.value.config.activation,
            self.value.config.kernel_size,
        )?;
        let mask = tape.leaf(source_mask.clone());
        let mask_warped = tape.bilinear_sample(mask, displacement)?;
        let y_final = tape.mul_field(y_value, mask_warped)?;
        Ok(MaskedForward {
            y_final,
            mask_warped,
            y_value,
        })
    }

    /// Value-level prediction: `(y_final, warped mask, y_value)` with the
    /// frame tensors in `[3, H, W, C]` layout.
    pub fn predict(&self, example: &TrainingExample) -> Result<(Tensor, Tensor, Tensor)> {
        let value_input = frames_to_channels(&example.history)?;
        let disp_input = displacement_input(&example.history)?;
        let mask = occupancy_mask(
            &example.history,
            example.history.shape()[0] - 1,
            self.volume_channel,
        )?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let value_input = tape.leaf(value_input);
        let disp_input = tape.leaf(disp_input);
        let fwd = self.forward(&mut tape, &vars, value_input, disp_input, &mask, example.clock)?;
        Ok((
            channels_to_frames(tape.value(fwd.y_final), TARGET_FRAMES)?,
            tape.value(fwd.mask_warped).clone(),
            channels_to_frames(tape.value(fwd.y_value), TARGET_FRAMES)?,
        ))
    }
}

// ── Unified parameter access ───────────────────────────────────────────

/// A trained model of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Trb(TrbParams),
    Masked(MaskedParams),
}

impl ModelParams {
    /// The model's prediction for an example: `[3, H, W, C]`.
    pub fn predict(&self, example: &TrainingExample) -> Result<Tensor> {
        match self {
            ModelParams::Trb(p) => p.predict(example),
            ModelParams::Masked(p) => p.predict(example).map(|(y, _, _)| y),
        }
    }

    pub fn grid(&self) -> GridShape {
        match self {
            ModelParams::Trb(p) => p.grid,
            ModelParams::Masked(p) => p.value.grid,
        }
    }

    pub fn config(&self) -> &TrConfig {
        match self {
            ModelParams::Trb(p) => &p.config,
            ModelParams::Masked(p) => &p.value.config,
        }
    }

    pub fn history(&self) -> usize {
        self.config().history
    }
}

fn trb_param_names(p: &TrbParams) -> Vec<String> {
    let mut names: Vec<String> = (0..p.layers.len())
        .flat_map(|i| [format!("layer{i}.weights"), format!("layer{i}.bias")])
        .collect();
    names.push(String::from("bias.location_hour"));
    names.push(String::from("bias.weekday_hour"));
    names.push(String::from("bias.month"));
    names
}

impl TrbParams {
    /// Parameter tensors in declaration order: layer weights and biases,
    /// then the three tables (present even when inactive).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect();
        out.push(&self.tables.location_hour);
        out.push(&self.tables.weekday_hour);
        out.push(&self.tables.month);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect();
        out.push(&mut self.tables.location_hour);
        out.push(&mut self.tables.weekday_hour);
        out.push(&mut self.tables.month);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        trb_param_names(self)
    }

    /// Leaf vars aligned with [`Self::param_tensors`]; `None` for
    /// unregistered (inactive) tables.
    pub fn ordered_vars(vars: &TrbVars) -> Vec<Option<Var>> {
        let mut out: Vec<Option<Var>> = vars
            .layers
            .iter()
            .flat_map(|&(w, b)| [Some(w), Some(b)])
            .collect();
        out.push(vars.location_hour);
        out.push(vars.weekday_hour);
        out.push(vars.month);
        out
    }
}

impl MaskedParams {
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.value.param_tensors();
        out.extend(self.displacement.iter().flat_map(|l| [&l.weights, &l.bias]));
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.value.param_tensors_mut();
        out.extend(
            self.displacement
                .iter_mut()
                .flat_map(|l| [&mut l.weights, &mut l.bias]),
        );
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.value.param_names();
        names.extend(
            (0..self.displacement.len())
                .flat_map(|i| [format!("disp{i}.weights"), format!("disp{i}.bias")]),
        );
        names
    }

    pub fn ordered_vars(vars: &MaskedVars) -> Vec<Option<Var>> {
        let mut out = TrbParams::ordered_vars(&vars.value);
        out.extend(vars.displacement.iter().flat_map(|&(w, b)| [Some(w), Some(b)]));
        out
    }
}

impl ModelParams {
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            ModelParams::Trb(p) => p.param_tensors(),
            ModelParams::Masked(p) => p.param_tensors(),
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ModelParams::Trb(p) => p.param_tensors_mut(),
            ModelParams::Masked(p) => p.param_tensors_mut(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ModelParams::Trb(p) => p.param_names(),
            ModelParams::Masked(p) => p.param_names(),
        }
    }
}
