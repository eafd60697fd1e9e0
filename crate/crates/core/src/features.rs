//! Nine-feature summary of a cell at a prediction cycle, and z-score
//! standardisation of feature matrices.
//!
//! | group | features |
//! |---|---|
//! | ΔQ(V) between cycle `c` and cycle 10 | log10 \|min\|, log10 variance |
//! | discharge capacity fade over 2..=c | OLS slope, OLS intercept, Qd at cycle 2 |
//! | other | mean charge time over 1..=5, temperature integral over 2..=c, min resistance over 2..=c, R(c) − R(2) |

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CellHistory, CellView, VoltageCapacityCurve};
use crate::error::{Error, Result};

pub const N_FEATURES: usize = 9;

/// Reference cycle for the ΔQ curve.
pub const REFERENCE_CYCLE: u32 = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "dq_min",
    "dq_var",
    "fade_slope",
    "fade_intercept",
    "qd_cycle2",
    "avg_charge_time",
    "temp_integral",
    "min_resistance",
    "resistance_diff",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Apply `log10(|·|)` to the ΔQ minimum and variance.
    pub log_transform: bool,
    /// Number of voltage points for the ΔQ grid.
    pub grid_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            log_transform: true,
            grid_size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub prediction_cycle: u32,
    pub dq_min: f64,
    pub dq_var: f64,
    /// Ah per cycle.
    pub fade_slope: f64,
    /// Ah.
    pub fade_intercept: f64,
    /// Ah.
    pub qd_cycle2: f64,
    /// Minutes.
    pub avg_charge_time: f64,
    /// °C·s.
    pub temp_integral: f64,
    /// Ohms.
    pub min_resistance: f64,
    /// Ohms.
    pub resistance_diff: f64,
}

impl FeatureVector {
    pub fn values(&self) -> [f64; N_FEATURES] {
        [
            self.dq_min,
            self.dq_var,
            self.fade_slope,
            self.fade_intercept,
            self.qd_cycle2,
            self.avg_charge_time,
            self.temp_integral,
            self.min_resistance,
            self.resistance_diff,
        ]
    }
}

/// Piecewise-linear Q(V) evaluated at each grid voltage.
pub fn interpolate_capacity(curve: &VoltageCapacityCurve, grid: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = curve.voltage_span();
    let v = &curve.voltage;
    let q = &curve.capacity;
    grid.iter()
        .map(|&g| {
            if !(g >= lo && g <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "grid voltage {g} outside curve span [{lo}, {hi}]"
                )));
            }
            // voltages descend: first knot at or below g
            let j = v.partition_point(|&x| x > g);
            if v[j] == g {
                return Ok(q[j]);
            }
            let t = (v[j - 1] - g) / (v[j - 1] - v[j]);
            Ok(q[j - 1] + t * (q[j] - q[j - 1]))
        })
        .collect()
}

/// Untransformed minimum and population variance of ΔQ(V).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaQStats {
    pub min: f64,
    pub variance: f64,
}

/// ΔQ(V) = Q_c(V) − Q_10(V) on a uniform grid over the overlapping span.
pub fn delta_q_stats(view: &CellView<'_>, c: u32, grid_size: usize) -> Result<DeltaQStats> {
    if c <= REFERENCE_CYCLE {
        return Err(Error::InvalidArgument(format!(
            "prediction cycle {c} must exceed the reference cycle {REFERENCE_CYCLE}"
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidArgument("ΔQ grid needs at least 2 points".into()));
    }
    let reference = &view.cycle(REFERENCE_CYCLE)?.discharge_curve;
    let current = &view.cycle(c)?.discharge_curve;
    let (lo_r, hi_r) = reference.voltage_span();
    let (lo_c, hi_c) = current.voltage_span();
    let (lo, hi) = (lo_r.max(lo_c), hi_r.min(hi_c));
    if !(lo < hi) {
        return Err(Error::Degenerate(format!(
            "cell {}: voltage spans of cycles {REFERENCE_CYCLE} and {c} do not overlap",
            view.cell_id
        )));
    }
    let last = (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| {
            if i == grid_size - 1 {
                hi
            } else {
                lo + (hi - lo) * (i as f64 / last)
            }
        })
        .collect();
    let q_ref = interpolate_capacity(reference, &grid)?;
    let q_cur = interpolate_capacity(current, &grid)?;
    let delta: Vec<f64> = q_cur.iter().zip(&q_ref).map(|(a, b)| a - b).collect();
    let n = delta.len() as f64;
    let min = delta.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = delta.iter().sum::<f64>() / n;
    let mut variance = delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let max_abs = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    // rounding noise of a constant curve is not spread
    if variance.sqrt() <= 1e-12 * max_abs {
        variance = 0.0;
    }
    Ok(DeltaQStats { min, variance })
}

/// `(dq_min, dq_var)` with the configured transform.
pub fn delta_q_features(view: &CellView<'_>, c: u32, config: &FeatureConfig) -> Result<(f64, f64)> {
    let stats = delta_q_stats(view, c, config.grid_size)?;
    if !config.log_transform {
        return Ok((stats.min, stats.variance));
    }
    transform_delta_q(stats).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("cell {}: {msg}", view.cell_id)),
        other => other,
    })
}

/// `log10(|min|)` and `log10(variance)`; zero values cannot be logged.
pub fn transform_delta_q(stats: DeltaQStats) -> Result<(f64, f64)> {
    if stats.min == 0.0 {
        return Err(Error::Degenerate("dq_min: minimum ΔQ is zero".into()));
    }
    if stats.variance <= 0.0 {
        return Err(Error::Degenerate("dq_var: ΔQ variance is zero".into()));
    }
    Ok((stats.min.abs().log10(), stats.variance.log10()))
}

/// OLS of discharge capacity on cycle index over cycles `2..=c`.
pub fn fade_regression(view: &CellView<'_>, c: u32) -> Result<(f64, f64)> {
    if c < 3 {
        return Err(Error::InvalidArgument(format!(
            "fade regression needs c >= 3, got {c}"
        )));
    }
    let cycles = view.cycle_range(2, c)?;
    let points: Vec<(f64, f64)> = cycles
        .iter()
        .map(|r| (r.cycle_index as f64, r.discharge_capacity))
        .collect();
    linear_fit(&points)
}

/// Closed-form least-squares line `(slope, intercept)`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::MissingData(
            "linear regression needs at least 2 points".into(),
        ));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        (sxy + (x - mean_x) * (y - mean_y), sxx + (x - mean_x).powi(2))
    });
    if sxx == 0.0 {
        return Err(Error::Degenerate("regression abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Trapezoidal integral of a `(time, value)` series.
pub fn trapezoid(series: &[(f64, f64)]) -> f64 {
    series
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryFeatures {
    pub qd_cycle2: f64,
    pub avg_charge_time: f64,
    pub temp_integral: f64,
    pub min_resistance: f64,
    pub resistance_diff: f64,
}

pub fn auxiliary_features(view: &CellView<'_>, c: u32) -> Result<AuxiliaryFeatures> {
    if c < 5 {
        return Err(Error::InvalidArgument(format!(
            "auxiliary features need c >= 5, got {c}"
        )));
    }
    view.cycle_range(1, c)?;
    let first_five = view.cycle_range(1, 5)?;
    let from_two = view.cycle_range(2, c)?;
    Ok(AuxiliaryFeatures {
        qd_cycle2: view.cycle(2)?.discharge_capacity,
        avg_charge_time: first_five.iter().map(|r| r.charge_time).sum::<f64>() / 5.0,
        temp_integral: from_two
            .iter()
            .map(|r| trapezoid(&r.temperature_series))
            .sum(),
        min_resistance: from_two
            .iter()
            .map(|r| r.internal_resistance)
            .fold(f64::INFINITY, f64::min),
        resistance_diff: view.cycle(c)?.internal_resistance - view.cycle(2)?.internal_resistance,
    })
}

/// Features of `history` at cycle `c`, computed from cycles `1..=c` only.
pub fn featurize(history: &CellHistory, c: u32, config: &FeatureConfig) -> Result<FeatureVector> {
    featurize_view(&history.up_to(c), c, config)
}

pub fn featurize_view(view: &CellView<'_>, c: u32, config: &FeatureConfig) -> Result<FeatureVector> {
    if c <= REFERENCE_CYCLE {
        return Err(Error::InvalidArgument(format!(
            "prediction cycle {c} must exceed the reference cycle {REFERENCE_CYCLE}"
        )));
    }
    let (dq_min, dq_var) = delta_q_features(view, c, config)?;
    let (fade_slope, fade_intercept) = fade_regression(view, c)?;
    let aux = auxiliary_features(view, c)?;
    let fv = FeatureVector {
        prediction_cycle: c,
        dq_min,
        dq_var,
        fade_slope,
        fade_intercept,
        qd_cycle2: aux.qd_cycle2,
        avg_charge_time: aux.avg_charge_time,
        temp_integral: aux.temp_integral,
        min_resistance: aux.min_resistance,
        resistance_diff: aux.resistance_diff,
    };
    if let Some(pos) = fv.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "cell {}: feature {} is not finite",
            view.cell_id, FEATURE_NAMES[pos]
        )));
    }
    Ok(fv)
}

/// Per-feature z-scoring fitted on a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; N_FEATURES],
    pub sd: [f64; N_FEATURES],
}

impl Standardizer {
    /// Mean and sample (n−1) standard deviation of every column.
    pub fn fit(rows: &[FeatureVector]) -> Result<Self> {
        let matrix: Vec<[f64; N_FEATURES]> = rows.iter().map(FeatureVector::values).collect();
        Self::fit_matrix(&matrix)
    }

    pub fn fit_matrix(rows: &[[f64; N_FEATURES]]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::MissingData(
                "standardizer needs at least 2 rows".into(),
            ));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut sd = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let ss: f64 = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
            sd[j] = (ss / (n - 1.0)).sqrt();
            if !(sd[j] > 0.0) || !sd[j].is_finite() {
                return Err(Error::Degenerate(format!(
                    "feature {} is constant across the fitting rows",
                    FEATURE_NAMES[j]
                )));
            }
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, fv: &FeatureVector) -> [f64; N_FEATURES] {
        self.apply_values(&fv.values())
    }

    pub fn apply_values(&self, values: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (values[j] - self.mean[j]) / self.sd[j])
    }
}

/// One exported feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub cell_id: String,
    pub eol_cycle: Option<u32>,
    pub features: FeatureVector,
}

/// Writes `cell_id, prediction_cycle, eol_cycle` followed by the nine features.
pub fn write_feature_csv<W: Write>(out: W, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    let mut header = vec!["cell_id", "prediction_cycle", "eol_cycle"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(to_err)?;
    for row in rows {
        let mut record = vec![
            row.cell_id.clone(),
            row.features.prediction_cycle.to_string(),
            row.eol_cycle.map(|e| e.to_string()).unwrap_or_default(),
        ];
        record.extend(row.features.values().iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CycleRecord;

    fn curve(points: &[(f64, f64)]) -> VoltageCapacityCurve {
        VoltageCapacityCurve::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
        )
        .unwrap()
    }

    fn record(index: u32, qd: f64, shape: &[(f64, f64)]) -> CycleRecord {
        CycleRecord {
            cycle_index: index,
            discharge_capacity: qd,
            charge_time: 10.0,
            internal_resistance: 0.02,
            temperature_series: vec![(0.0, 30.0), (3600.0, 30.0)],
            discharge_curve: curve(shape),
        }
    }

    fn history(records: Vec<CycleRecord>) -> CellHistory {
        CellHistory {
            cell_id: "t".into(),
            nominal_capacity: 1.1,
            cycles: records,
            eol_cycle: None,
        }
    }

    #[test]
    fn interpolates_midpoint_and_knots() {
        let c = curve(&[(3.5, 0.0), (2.5, 1.0)]);
        assert_eq!(interpolate_capacity(&c, &[3.0]).unwrap(), vec![0.5]);
        let c = curve(&[(3.5, 0.0), (3.0, 0.2), (2.2, 0.9), (2.0, 1.0)]);
        assert_eq!(interpolate_capacity(&c, &c.voltage).unwrap(), c.capacity);
        assert!(interpolate_capacity(&c, &[1.9]).is_err());
        assert!(interpolate_capacity(&c, &[3.6]).is_err());
    }

    #[test]
    fn identical_curves_are_degenerate() {
        let shape = [(3.5, 0.0), (2.0, 1.0)];
        let h = history((1..=12).map(|i| record(i, 1.0, &shape)).collect());
        let err = delta_q_features(&h.view(), 12, &FeatureConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn constant_shift_fails_only_on_variance() {
        let records = (1..=12)
            .map(|i| {
                let q = if i == 12 { 0.99 } else { 1.0 };
                record(i, q, &[(3.5, q), (2.0, q)])
            })
            .collect();
        let h = history(records);
        let stats = delta_q_stats(&h.view(), 12, 1000).unwrap();
        assert!((stats.min + 0.01).abs() < 1e-12);
        assert_eq!(stats.variance, 0.0);
        let dq_min = stats.min.abs().log10();
        assert!((dq_min + 2.0).abs() < 1e-9);
        match delta_q_features(&h.view(), 12, &FeatureConfig::default()) {
            Err(Error::Degenerate(msg)) => assert!(msg.starts_with("cell t: dq_var")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_overlapping_spans_rejected() {
        let mut records: Vec<_> = (1..=12)
            .map(|i| record(i, 1.0, &[(3.5, 0.0), (3.0, 1.0)]))
            .collect();
        records[11] = record(12, 1.0, &[(2.9, 0.0), (2.0, 1.0)]);
        let h = history(records);
        assert!(matches!(
            delta_q_stats(&h.view(), 12, 100),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn exact_line_regression() {
        let shape = |q| [(3.5, 0.0), (2.0, q)];
        let h = history(vec![
            record(1, 1.11, &shape(1.11)),
            record(2, 1.10, &shape(1.10)),
            record(3, 1.09, &shape(1.09)),
            record(4, 1.08, &shape(1.08)),
        ]);
        let (slope, intercept) = fade_regression(&h.view(), 4).unwrap();
        assert!((slope + 0.01).abs() < 1e-12);
        assert!((intercept - 1.12).abs() < 1e-12);

        let flat = history((1..=6).map(|i| record(i, 1.05, &shape(1.05))).collect());
        let (slope, intercept) = fade_regression(&flat.view(), 6).unwrap();
        assert_eq!(slope, 0.0);
        assert!((intercept - 1.05).abs() < 1e-15);
        assert!(fade_regression(&flat.view(), 2).is_err());
    }

    #[test]
    fn auxiliary_closed_forms() {
        let shape = [(3.5, 0.0), (2.0, 1.0)];
        let mut records: Vec<_> = (1..=5).map(|i| record(i, 1.0, &shape)).collect();
        for (i, r) in records.iter_mut().enumerate() {
            r.internal_resistance = 0.02 + 0.001 * i as f64;
            if i != 1 {
                r.temperature_series = vec![(0.0, 0.0), (1.0, 0.0)];
            }
        }
        let h = history(records);
        // only cycle 2 holds a non-zero temperature trace in 2..=5
        let aux = auxiliary_features(&h.view(), 5).unwrap();
        assert_eq!(aux.avg_charge_time, 10.0);
        assert!((aux.temp_integral - 108_000.0).abs() < 1e-9);
        assert!((aux.min_resistance - 0.021).abs() < 1e-15);
        assert!((aux.resistance_diff - 0.003).abs() < 1e-15);
        assert!(auxiliary_features(&h.view(), 6).is_err());
        assert!(auxiliary_features(&h.view(), 4).is_err());
    }

    #[test]
    fn reference_cycle_boundary() {
        let shape = [(3.5, 0.0), (2.0, 1.0)];
        let h = history((1..=12).map(|i| record(i, 1.0, &shape)).collect());
        assert!(matches!(
            featurize(&h, 10, &FeatureConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn standardizer_two_rows() {
        let rows = [[1.0; N_FEATURES], [3.0; N_FEATURES]];
        let s = Standardizer::fit_matrix(&rows).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert!((s.sd[0] - 2f64.sqrt()).abs() < 1e-15);
        let z = s.apply_values(&[3.0; N_FEATURES]);
        assert!((z[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn standardizer_rejects_constant_columns() {
        let mut rows = [[1.0; N_FEATURES], [3.0; N_FEATURES]];
        rows[1][4] = 1.0;
        assert!(matches!(
            Standardizer::fit_matrix(&rows),
            Err(Error::Degenerate(msg)) if msg.contains("qd_cycle2")
        ));
        assert!(Standardizer::fit_matrix(&rows[..1]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let fv = FeatureVector {
            prediction_cycle: 100,
            dq_min: -2.0,
            dq_var: -5.0,
            fade_slope: -1e-4,
            fade_intercept: 1.1,
            qd_cycle2: 1.09,
            avg_charge_time: 10.0,
            temp_integral: 1e6,
            min_resistance: 0.016,
            resistance_diff: 1e-4,
        };
        let rows = vec![FeatureRow {
            cell_id: "a".into(),
            eol_cycle: None,
            features: fv,
        }];
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 12);
        assert!(lines[1].starts_with("a,100,,-2,"));
    }
}
