//! Synthetic degradation histories with known end-of-life.
//!
//! Capacity fades as `Qd(c) = Q0 − a·c − b·exp(k·(c − c_knee))`: a linear
//! regime followed by an exponential knee. `c_knee = knee_position · EoL` and
//! `k = knee_sharpness / (EoL − c_knee)`, so the sharpness counts e-folds
//! between the knee and end-of-life. `b` is found by bisection so that the
//! curve crosses `0.8·Q0` half a cycle before the target, which makes the
//! first integer cycle below threshold exactly the target.
//!
//! The discharge curve at cycle `c` is a logistic in voltage pinned to the
//! top of the window, `Q(V) ∝ σ((V_MAX − V)/w(c) − MIDPOINT_WIDTHS)`,
//! normalised so that its maximum equals `Qd(c)`. The width `w(c)` grows
//! linearly and doubles over the cell's life; a wider curve lies below a
//! narrower one at every voltage, so aged curves are dominated by young ones.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CellHistory, CycleRecord, VoltageCapacityCurve, DEFAULT_EOL_THRESHOLD};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, Rng};

pub const V_MIN: f64 = 2.0;
pub const V_MAX: f64 = 3.5;
pub const VOLTAGE_POINTS: usize = 100;
pub const TEMPERATURE_POINTS: usize = 12;
/// Curve width at cycle 0, volts.
pub const INITIAL_WIDTH: f64 = 0.04;
/// Logistic midpoint sits this many widths below `V_MAX`.
pub const MIDPOINT_WIDTHS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCellParams {
    /// Amp-hours.
    pub nominal_capacity: f64,
    pub target_eol: u32,
    /// Ah per cycle.
    pub linear_fade_rate: f64,
    pub knee_sharpness: f64,
    /// Fraction of life in (0, 1).
    pub knee_position: f64,
    /// Ohms.
    pub base_resistance: f64,
    /// Ohms per cycle.
    pub resistance_growth: f64,
    /// °C.
    pub base_temperature: f64,
    /// °C.
    pub temperature_amplitude: f64,
    /// Minutes.
    pub charge_time_base: f64,
    /// Relative standard deviation of measurement noise.
    pub noise_scale: f64,
}

impl Default for SyntheticCellParams {
    fn default() -> Self {
        Self {
            nominal_capacity: 1.1,
            target_eol: 800,
            linear_fade_rate: 5e-5,
            knee_sharpness: 6.0,
            knee_position: 0.7,
            base_resistance: 0.016,
            resistance_growth: 5e-7,
            base_temperature: 30.0,
            temperature_amplitude: 4.0,
            charge_time_base: 10.0,
            noise_scale: 0.0,
        }
    }
}

impl SyntheticCellParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nominal_capacity", self.nominal_capacity),
            ("linear_fade_rate", self.linear_fade_rate),
            ("knee_sharpness", self.knee_sharpness),
            ("base_resistance", self.base_resistance),
            ("resistance_growth", self.resistance_growth),
            ("base_temperature", self.base_temperature),
            ("temperature_amplitude", self.temperature_amplitude),
            ("charge_time_base", self.charge_time_base),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.target_eol < 2 {
            return Err(Error::InvalidArgument("target_eol must be >= 2".into()));
        }
        if !(self.knee_position > 0.0 && self.knee_position < 1.0) {
            return Err(Error::InvalidArgument("knee_position must be in (0, 1)".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Noise-free capacity fade curve with solved knee amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadeCurve {
    pub initial_capacity: f64,
    pub linear_rate: f64,
    pub knee_amplitude: f64,
    pub knee_rate: f64,
    pub knee_cycle: f64,
}

impl FadeCurve {
    pub fn capacity(&self, cycle: f64) -> f64 {
        self.initial_capacity
            - self.linear_rate * cycle
            - self.knee_amplitude * (self.knee_rate * (cycle - self.knee_cycle)).exp()
    }

    /// Solves the knee amplitude by bisection.
    pub fn solve(params: &SyntheticCellParams) -> Result<Self> {
        let target = params.target_eol as f64;
        let knee_cycle = params.knee_position * target;
        let mut curve = FadeCurve {
            initial_capacity: params.nominal_capacity,
            linear_rate: params.linear_fade_rate,
            knee_amplitude: 0.0,
            knee_rate: params.knee_sharpness / (target - knee_cycle),
            knee_cycle,
        };
        let threshold = DEFAULT_EOL_THRESHOLD * params.nominal_capacity;
        let crossing = target - 0.5;
        let excess = |c: &FadeCurve, b: f64| {
            FadeCurve {
                knee_amplitude: b,
                ..*c
            }
            .capacity(crossing)
                - threshold
        };

        if excess(&curve, 0.0) <= 0.0 {
            return Err(Error::Bracket {
                target_eol: params.target_eol,
                reason: "linear fade alone reaches the threshold before the target".into(),
            });
        }
        let mut hi = params.nominal_capacity;
        let mut doublings = 0;
        while excess(&curve, hi) >= 0.0 {
            hi *= 2.0;
            doublings += 1;
            if doublings > 200 || !hi.is_finite() {
                return Err(Error::Bracket {
                    target_eol: params.target_eol,
                    reason: "knee amplitude diverged".into(),
                });
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if excess(&curve, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        curve.knee_amplitude = 0.5 * (lo + hi);
        Ok(curve)
    }
}

/// Discharge-curve width at a cycle (noise-free).
pub fn curve_width(cycle: f64, target_eol: u32) -> f64 {
    INITIAL_WIDTH * (1.0 + cycle / target_eol as f64)
}

/// Shared voltage grid, descending from `V_MAX` to `V_MIN`.
pub fn voltage_grid() -> Vec<f64> {
    let step = (V_MAX - V_MIN) / (VOLTAGE_POINTS - 1) as f64;
    (0..VOLTAGE_POINTS)
        .map(|i| {
            if i == VOLTAGE_POINTS - 1 {
                V_MIN
            } else {
                V_MAX - step * i as f64
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Closed-form normalised curve shape at `voltage` for width `width`.
pub fn curve_shape(voltage: f64, width: f64) -> f64 {
    let arg = |v: f64| (V_MAX - v) / width - MIDPOINT_WIDTHS;
    sigmoid(arg(voltage)) / sigmoid(arg(V_MIN))
}

fn discharge_curve(grid: &[f64], capacity: f64, width: f64) -> VoltageCapacityCurve {
    let norm = sigmoid((V_MAX - V_MIN) / width - MIDPOINT_WIDTHS);
    let q = grid
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i == grid.len() - 1 {
                capacity
            } else {
                capacity * (sigmoid((V_MAX - v) / width - MIDPOINT_WIDTHS) / norm)
            }
        })
        .collect();
    VoltageCapacityCurve {
        voltage: grid.to_vec(),
        capacity: q,
    }
}

fn noise(rng: &mut Rng, scale: f64) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    scale * e
}

/// Generates `n_cycles` cycles of one cell. The label is set when the
/// history reaches the target end-of-life.
pub fn generate_cell(seed: u64, params: &SyntheticCellParams, n_cycles: u32) -> Result<CellHistory> {
    generate_cell_with_id(format!("syn-{seed:016x}"), seed, params, n_cycles)
}

pub fn generate_cell_with_id(
    cell_id: String,
    seed: u64,
    params: &SyntheticCellParams,
    n_cycles: u32,
) -> Result<CellHistory> {
    params.validate()?;
    let fade = FadeCurve::solve(params)?;
    let mut rng = rng_from(seed);
    let grid = voltage_grid();
    let eta = params.noise_scale;
    let q0 = params.nominal_capacity;

    let mut cycles = Vec::with_capacity(n_cycles as usize);
    for index in 1..=n_cycles {
        let c = index as f64;
        let clean_q = fade.capacity(c);
        let clean_r = params.base_resistance + params.resistance_growth * c;

        let qd = clean_q * (1.0 + noise(&mut rng, eta));
        let width = curve_width(c, params.target_eol) * (1.0 + noise(&mut rng, eta));
        let resistance = clean_r + params.base_resistance * noise(&mut rng, eta);
        let charge_time = params.charge_time_base * (clean_q / q0) * (1.0 + noise(&mut rng, eta));

        let duration = 60.0 * (charge_time + 60.0 * clean_q / q0);
        let heating = params.temperature_amplitude * clean_r / params.base_resistance;
        let last = (TEMPERATURE_POINTS - 1) as f64;
        let temperature_series = (0..TEMPERATURE_POINTS)
            .map(|j| {
                let frac = j as f64 / last;
                let temp = params.base_temperature
                    + heating * (std::f64::consts::PI * frac).sin()
                    + params.base_temperature * noise(&mut rng, eta);
                (duration * frac, temp)
            })
            .collect();

        cycles.push(CycleRecord {
            cycle_index: index,
            discharge_capacity: qd,
            charge_time,
            internal_resistance: resistance,
            temperature_series,
            discharge_curve: discharge_curve(&grid, qd, width),
        });
    }

    let history = CellHistory {
        cell_id,
        nominal_capacity: q0,
        cycles,
        eol_cycle: (n_cycles >= params.target_eol).then_some(params.target_eol),
    };
    history.validate()?;
    Ok(history)
}

/// Inclusive sampling range for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: Copy> Span<T> {
    pub fn fixed(value: T) -> Self {
        Self {
            min: value,
            max: value,
        }
    }
}

impl<T> Span<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

/// How many cycles to generate per fleet cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleHorizon {
    /// Stop at the cell's target end-of-life.
    ThroughEol,
    Fixed(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRanges {
    pub nominal_capacity: Span<f64>,
    pub target_eol: Span<u32>,
    pub linear_fade_rate: Span<f64>,
    pub knee_sharpness: Span<f64>,
    pub knee_position: Span<f64>,
    pub base_resistance: Span<f64>,
    pub resistance_growth: Span<f64>,
    pub base_temperature: Span<f64>,
    pub temperature_amplitude: Span<f64>,
    pub charge_time_base: Span<f64>,
    pub noise_scale: Span<f64>,
    pub horizon: CycleHorizon,
}

impl Default for FleetRanges {
    fn default() -> Self {
        Self {
            nominal_capacity: Span::fixed(1.1),
            target_eol: Span::new(500, 2000),
            linear_fade_rate: Span::new(2e-5, 8e-5),
            knee_sharpness: Span::new(4.0, 10.0),
            knee_position: Span::new(0.5, 0.8),
            base_resistance: Span::new(0.014, 0.018),
            resistance_growth: Span::new(1e-7, 1e-6),
            base_temperature: Span::new(28.0, 33.0),
            temperature_amplitude: Span::new(3.0, 6.0),
            charge_time_base: Span::new(9.0, 13.0),
            noise_scale: Span::new(0.002, 0.006),
            horizon: CycleHorizon::ThroughEol,
        }
    }
}

impl FleetRanges {
    /// Every field pinned to `params`.
    pub fn degenerate(params: &SyntheticCellParams, horizon: CycleHorizon) -> Self {
        Self {
            nominal_capacity: Span::fixed(params.nominal_capacity),
            target_eol: Span::fixed(params.target_eol),
            linear_fade_rate: Span::fixed(params.linear_fade_rate),
            knee_sharpness: Span::fixed(params.knee_sharpness),
            knee_position: Span::fixed(params.knee_position),
            base_resistance: Span::fixed(params.base_resistance),
            resistance_growth: Span::fixed(params.resistance_growth),
            base_temperature: Span::fixed(params.base_temperature),
            temperature_amplitude: Span::fixed(params.temperature_amplitude),
            charge_time_base: Span::fixed(params.charge_time_base),
            noise_scale: Span::fixed(params.noise_scale),
            horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        let spans = [
            ("nominal_capacity", self.nominal_capacity),
            ("linear_fade_rate", self.linear_fade_rate),
            ("knee_sharpness", self.knee_sharpness),
            ("knee_position", self.knee_position),
            ("base_resistance", self.base_resistance),
            ("resistance_growth", self.resistance_growth),
            ("base_temperature", self.base_temperature),
            ("temperature_amplitude", self.temperature_amplitude),
            ("charge_time_base", self.charge_time_base),
            ("noise_scale", self.noise_scale),
        ];
        for (name, s) in spans {
            if !(s.min <= s.max) {
                return Err(Error::InvalidArgument(format!("range for {name} has min > max")));
            }
        }
        if self.target_eol.min > self.target_eol.max {
            return Err(Error::InvalidArgument("range for target_eol has min > max".into()));
        }
        Ok(())
    }

    /// Draws one parameter set.
    pub fn sample(&self, rng: &mut Rng) -> SyntheticCellParams {
        let mut uni = |s: Span<f64>| {
            if s.min == s.max {
                s.min
            } else {
                rng.gen_range(s.min..=s.max)
            }
        };
        let nominal_capacity = uni(self.nominal_capacity);
        let linear_fade_rate = uni(self.linear_fade_rate);
        let knee_sharpness = uni(self.knee_sharpness);
        let knee_position = uni(self.knee_position);
        let base_resistance = uni(self.base_resistance);
        let resistance_growth = uni(self.resistance_growth);
        let base_temperature = uni(self.base_temperature);
        let temperature_amplitude = uni(self.temperature_amplitude);
        let charge_time_base = uni(self.charge_time_base);
        let noise_scale = uni(self.noise_scale);
        let target_eol = rng.gen_range(self.target_eol.min..=self.target_eol.max);
        SyntheticCellParams {
            nominal_capacity,
            target_eol,
            linear_fade_rate,
            knee_sharpness,
            knee_position,
            base_resistance,
            resistance_growth,
            base_temperature,
            temperature_amplitude,
            charge_time_base,
            noise_scale,
        }
    }
}

/// Per-cell seed; depends only on the fleet seed and the cell's index.
pub fn cell_seed(fleet_seed: u64, index: usize) -> u64 {
    derive_seed(fleet_seed, index as u64)
}

pub fn fleet_cell_id(fleet_seed: u64, index: usize) -> String {
    format!("syn{fleet_seed}-{index:04}")
}

/// Parameters and cycle count of fleet cell `index`.
pub fn fleet_cell_params(fleet_seed: u64, index: usize, ranges: &FleetRanges) -> (SyntheticCellParams, u32) {
    let mut rng = rng_from(cell_seed(fleet_seed, index));
    let params = ranges.sample(&mut rng);
    let n_cycles = match ranges.horizon {
        CycleHorizon::ThroughEol => params.target_eol,
        CycleHorizon::Fixed(n) => n,
    };
    (params, n_cycles)
}

pub fn generate_fleet(seed: u64, n: usize, ranges: &FleetRanges) -> Result<Vec<CellHistory>> {
    if n == 0 {
        return Err(Error::InvalidArgument("fleet size must be >= 1".into()));
    }
    ranges.validate()?;
    (0..n)
        .map(|i| {
            let (params, n_cycles) = fleet_cell_params(seed, i, ranges);
            generate_cell_with_id(
                fleet_cell_id(seed, i),
                derive_seed(cell_seed(seed, i), 1),
                &params,
                n_cycles,
            )
        })
        .collect()
}
