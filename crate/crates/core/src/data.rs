//! Cycling telemetry types, the `cellhist-v1` interchange format, and
//! ground-truth end-of-life detection.
//!
//! A file in the interchange format looks like:
//!
//! ```text
//! cellhist-v1
//! CELL b1c0 1.1
//! CYC 1 1.0712 10.5 0.0162
//! T 0:30.1 360:31.4 720:30.9
//! V 3.5:0 3.0:0.61 2.0:1.0712
//! ...
//! EOL 812
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Header line of the interchange format.
pub const FORMAT_HEADER: &str = "cellhist-v1";

/// Fraction of nominal capacity below which a cell is considered dead.
pub const DEFAULT_EOL_THRESHOLD: f64 = 0.8;

/// Cells reaching end-of-life before this cycle are excluded from experiments.
pub const DEFAULT_MIN_EOL: u32 = 500;

const CAPACITY_MATCH_RTOL: f64 = 1e-6;

/// Discharge curve Q(V): cumulative discharged capacity as voltage falls.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageCapacityCurve {
    /// Volts, strictly descending.
    pub voltage: Vec<f64>,
    /// Amp-hours, non-decreasing along `voltage`.
    pub capacity: Vec<f64>,
}

impl VoltageCapacityCurve {
    /// Builds a curve, checking its invariants.
    pub fn new(voltage: Vec<f64>, capacity: Vec<f64>) -> Result<Self> {
        let curve = Self { voltage, capacity };
        if let Some(invariant) = curve.violation() {
            return Err(Error::Invariant {
                invariant,
                cell_id: String::new(),
                cycle_index: None,
            });
        }
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }

    /// Lowest and highest voltage on the curve.
    pub fn voltage_span(&self) -> (f64, f64) {
        let first = self.voltage[0];
        let last = self.voltage[self.voltage.len() - 1];
        (last.min(first), last.max(first))
    }

    pub fn max_capacity(&self) -> f64 {
        self.capacity.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn violation(&self) -> Option<&'static str> {
        if self.voltage.len() != self.capacity.len() || self.voltage.len() < 2 {
            return Some("curve lengths equal and >= 2");
        }
        if self
            .voltage
            .iter()
            .chain(&self.capacity)
            .any(|v| !v.is_finite())
        {
            return Some("curve values finite");
        }
        if self.voltage.windows(2).any(|w| w[1] >= w[0]) {
            return Some("voltage strictly monotonic");
        }
        if self.capacity.iter().any(|&q| q < 0.0) {
            return Some("capacity non-negative");
        }
        if self.capacity.windows(2).any(|w| w[1] < w[0]) {
            return Some("capacity non-decreasing as voltage descends");
        }
        None
    }
}

/// Telemetry summarised for one charge/discharge cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle_index: u32,
    /// Discharge capacity Qd in amp-hours.
    pub discharge_capacity: f64,
    /// Minutes.
    pub charge_time: f64,
    /// Ohms.
    pub internal_resistance: f64,
    /// (seconds, °C) pairs with strictly increasing time.
    pub temperature_series: Vec<(f64, f64)>,
    pub discharge_curve: VoltageCapacityCurve,
}

impl CycleRecord {
    fn violation(&self) -> Option<&'static str> {
        if !(self.discharge_capacity > 0.0 && self.discharge_capacity.is_finite()) {
            return Some("discharge_capacity > 0");
        }
        if !(self.internal_resistance > 0.0 && self.internal_resistance.is_finite()) {
            return Some("internal_resistance > 0");
        }
        if !(self.charge_time > 0.0 && self.charge_time.is_finite()) {
            return Some("charge_time > 0");
        }
        if self
            .temperature_series
            .iter()
            .any(|(t, v)| !t.is_finite() || !v.is_finite())
        {
            return Some("temperature values finite");
        }
        if self.temperature_series.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Some("temperature time strictly increasing");
        }
        if let Some(invariant) = self.discharge_curve.violation() {
            return Some(invariant);
        }
        let max_q = self.discharge_curve.max_capacity();
        if (max_q - self.discharge_capacity).abs() > CAPACITY_MATCH_RTOL * self.discharge_capacity
        {
            return Some("discharge_capacity equals curve maximum");
        }
        None
    }
}

/// Ordered per-cycle history of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellHistory {
    pub cell_id: String,
    /// Amp-hours.
    pub nominal_capacity: f64,
    pub cycles: Vec<CycleRecord>,
    /// Ground-truth end-of-life cycle, when known.
    pub eol_cycle: Option<u32>,
}

impl CellHistory {
    /// Checks every invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        let fail = |invariant: &'static str, cycle_index: Option<u32>| Error::Invariant {
            invariant,
            cell_id: self.cell_id.clone(),
            cycle_index,
        };
        if !(self.nominal_capacity > 0.0 && self.nominal_capacity.is_finite()) {
            return Err(fail("nominal_capacity > 0", None));
        }
        for (pos, cycle) in self.cycles.iter().enumerate() {
            if cycle.cycle_index as usize != pos + 1 {
                return Err(fail(
                    "cycle indices contiguous from 1",
                    Some(cycle.cycle_index),
                ));
            }
            if let Some(invariant) = cycle.violation() {
                return Err(fail(invariant, Some(cycle.cycle_index)));
            }
        }
        if let Some(eol) = self.eol_cycle {
            if eol == 0 || eol > self.last_cycle_index().unwrap_or(0) {
                return Err(fail("eol_cycle <= last cycle_index", None));
            }
        }
        Ok(())
    }

    pub fn last_cycle_index(&self) -> Option<u32> {
        self.cycles.last().map(|c| c.cycle_index)
    }

    /// View of the whole history.
    pub fn view(&self) -> CellView<'_> {
        CellView {
            cell_id: &self.cell_id,
            nominal_capacity: self.nominal_capacity,
            cycles: &self.cycles,
        }
    }

    /// View restricted to cycles with index `<= last`. Feature extraction
    /// works on views so a cycle-`c` feature cannot read later cycles.
    pub fn up_to(&self, last: u32) -> CellView<'_> {
        let end = self.cycles.partition_point(|c| c.cycle_index <= last);
        CellView {
            cell_id: &self.cell_id,
            nominal_capacity: self.nominal_capacity,
            cycles: &self.cycles[..end],
        }
    }

    /// The stored label, or the first threshold crossing at 80 % when absent.
    pub fn resolved_eol(&self) -> Option<u32> {
        self.eol_cycle
            .or_else(|| detect_eol(self, DEFAULT_EOL_THRESHOLD).ok().flatten())
    }
}

/// Borrowed prefix of a [`CellHistory`].
#[derive(Debug, Clone, Copy)]
pub struct CellView<'a> {
    pub cell_id: &'a str,
    pub nominal_capacity: f64,
    cycles: &'a [CycleRecord],
}

impl<'a> CellView<'a> {
    pub fn cycles(&self) -> &'a [CycleRecord] {
        self.cycles
    }

    pub fn last_cycle_index(&self) -> Option<u32> {
        self.cycles.last().map(|c| c.cycle_index)
    }

    /// Looks up a cycle by index.
    pub fn cycle(&self, index: u32) -> Result<&'a CycleRecord> {
        let pos = index as usize;
        let found = match self.cycles.get(pos.wrapping_sub(1)) {
            Some(c) if c.cycle_index == index => Some(c),
            _ => self
                .cycles
                .binary_search_by_key(&index, |c| c.cycle_index)
                .ok()
                .map(|i| &self.cycles[i]),
        };
        found.ok_or_else(|| {
            Error::MissingData(format!("cell {} has no cycle {index}", self.cell_id))
        })
    }

    /// Cycles with index in `first..=last`, all of which must be present.
    pub fn cycle_range(&self, first: u32, last: u32) -> Result<&'a [CycleRecord]> {
        let start = self.cycles.partition_point(|c| c.cycle_index < first);
        let end = self.cycles.partition_point(|c| c.cycle_index <= last);
        let slice = &self.cycles[start..end.max(start)];
        if last < first || slice.len() != (last - first + 1) as usize {
            return Err(Error::MissingData(format!(
                "cell {} lacks cycles {first}..={last}",
                self.cell_id
            )));
        }
        Ok(slice)
    }
}

/// First cycle whose discharge capacity is strictly below
/// `threshold_fraction × nominal_capacity`; `None` if never crossed.
pub fn detect_eol(history: &CellHistory, threshold_fraction: f64) -> Result<Option<u32>> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold_fraction {threshold_fraction} not in (0, 1)"
        )));
    }
    if history.cycles.is_empty() {
        return Err(Error::MissingData(format!(
            "cell {} has no cycles",
            history.cell_id
        )));
    }
    let threshold = threshold_fraction * history.nominal_capacity;
    Ok(history
        .cycles
        .iter()
        .find(|c| c.discharge_capacity < threshold)
        .map(|c| c.cycle_index))
}

/// Keeps cells whose end-of-life is at least `min_eol`, preserving order.
/// Each retained cell carries its resolved label in `eol_cycle`.
pub fn filter_usable(histories: Vec<CellHistory>, min_eol: u32) -> Result<Vec<CellHistory>> {
    let mut kept = Vec::with_capacity(histories.len());
    for mut h in histories {
        let eol = h.resolved_eol().ok_or_else(|| {
            Error::MissingData(format!("cell {} has no resolvable end-of-life", h.cell_id))
        })?;
        if eol >= min_eol {
            h.eol_cycle = Some(eol);
            kept.push(h);
        }
    }
    Ok(kept)
}

/// Splits off cells without a resolvable end-of-life. Returns
/// `(labelled, dropped_ids)`.
pub fn drop_unlabelled(histories: Vec<CellHistory>) -> (Vec<CellHistory>, Vec<String>) {
    let mut dropped = Vec::new();
    let kept = histories
        .into_iter()
        .filter_map(|h| {
            if h.resolved_eol().is_some() {
                Some(h)
            } else {
                dropped.push(h.cell_id);
                None
            }
        })
        .collect();
    (kept, dropped)
}

/// Reads a `cellhist-v1` file. Cells come back in file order; reading stops
/// after `max_cells` cells when given.
pub fn load_cell_histories(path: &Path, max_cells: Option<usize>) -> Result<Vec<CellHistory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cells = parse_cell_histories(BufReader::new(file), max_cells).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    Ok(cells)
}

/// Parses the interchange format from any buffered reader.
pub fn parse_cell_histories<R: BufRead>(
    reader: R,
    max_cells: Option<usize>,
) -> Result<Vec<CellHistory>> {
    let mut parser = Parser::default();
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io("<input>", e))?;
            if line.trim() != FORMAT_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{FORMAT_HEADER}`"),
                });
            }
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty input".into(),
            })
        }
    }

    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with("CELL ")
            && max_cells.is_some_and(|m| parser.cells.len() + usize::from(parser.cell.is_some()) >= m)
        {
            break;
        }
        parser.line(trimmed, lineno)?;
    }
    parser.finish()
}

#[derive(Default)]
struct PendingCycle {
    header: (u32, f64, f64, f64),
    line: usize,
    temperature: Option<Vec<(f64, f64)>>,
    curve: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Default)]
struct Parser {
    cells: Vec<CellHistory>,
    cell: Option<CellHistory>,
    cycle: Option<PendingCycle>,
    saw_eol: bool,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(token: Option<&str>, line: usize, what: &str) -> Result<T> {
    let token = token.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    token
        .parse()
        .map_err(|_| parse_err(line, format!("bad {what} `{token}`")))
}

fn pairs<'a>(tokens: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<(f64, f64)>> {
    tokens
        .map(|tok| {
            let (a, b) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line, format!("expected `x:y`, got `{tok}`")))?;
            Ok((num(Some(a), line, "number")?, num(Some(b), line, "number")?))
        })
        .collect()
}

impl Parser {
    fn line(&mut self, text: &str, line: usize) -> Result<()> {
        let mut tokens = text.split_ascii_whitespace();
        let tag = tokens.next().unwrap_or_default();
        match tag {
            "CELL" => {
                self.close_cell(line)?;
                let id: String = num(tokens.next(), line, "cell id")?;
                let nominal: f64 = num(tokens.next(), line, "nominal capacity")?;
                self.reject_trailing(tokens, line)?;
                self.cell = Some(CellHistory {
                    cell_id: id,
                    nominal_capacity: nominal,
                    cycles: Vec::new(),
                    eol_cycle: None,
                });
                self.saw_eol = false;
            }
            "CYC" => {
                self.close_cycle(line)?;
                if self.cell.is_none() {
                    return Err(parse_err(line, "CYC before any CELL"));
                }
                if self.saw_eol {
                    return Err(parse_err(line, "CYC after EOL"));
                }
                let header = (
                    num(tokens.next(), line, "cycle index")?,
                    num(tokens.next(), line, "discharge capacity")?,
                    num(tokens.next(), line, "charge time")?,
                    num(tokens.next(), line, "internal resistance")?,
                );
                self.reject_trailing(tokens, line)?;
                self.cycle = Some(PendingCycle {
                    header,
                    line,
                    ..Default::default()
                });
            }
            "T" => {
                let cycle = self
                    .cycle
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "T line outside a cycle"))?;
                if cycle.temperature.is_some() {
                    return Err(parse_err(line, "duplicate T line"));
                }
                cycle.temperature = Some(pairs(tokens, line)?);
            }
            "V" => {
                let cycle = self
                    .cycle
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "V line outside a cycle"))?;
                if cycle.curve.is_some() {
                    return Err(parse_err(line, "duplicate V line"));
                }
                let (v, q) = pairs(tokens, line)?.into_iter().unzip();
                cycle.curve = Some((v, q));
            }
            "EOL" => {
                self.close_cycle(line)?;
                let cell = self
                    .cell
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "EOL before any CELL"))?;
                if self.saw_eol {
                    return Err(parse_err(line, "duplicate EOL line"));
                }
                cell.eol_cycle = Some(num(tokens.next(), line, "eol cycle")?);
                self.saw_eol = true;
                self.reject_trailing(tokens, line)?;
            }
            other => return Err(parse_err(line, format!("unknown record `{other}`"))),
        }
        Ok(())
    }

    fn reject_trailing<'a>(&self, mut tokens: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
        match tokens.next() {
            Some(extra) => Err(parse_err(line, format!("unexpected token `{extra}`"))),
            None => Ok(()),
        }
    }

    fn close_cycle(&mut self, line: usize) -> Result<()> {
        let Some(pending) = self.cycle.take() else {
            return Ok(());
        };
        let temperature = pending
            .temperature
            .ok_or_else(|| parse_err(pending.line, "cycle missing T line"))?;
        let (voltage, capacity) = pending
            .curve
            .ok_or_else(|| parse_err(pending.line, "cycle missing V line"))?;
        let (cycle_index, qd, charge_time, resistance) = pending.header;
        let cell = self
            .cell
            .as_mut()
            .ok_or_else(|| parse_err(line, "cycle outside a cell"))?;
        cell.cycles.push(CycleRecord {
            cycle_index,
            discharge_capacity: qd,
            charge_time,
            internal_resistance: resistance,
            temperature_series: temperature,
            discharge_curve: VoltageCapacityCurve { voltage, capacity },
        });
        Ok(())
    }

    fn close_cell(&mut self, line: usize) -> Result<()> {
        self.close_cycle(line)?;
        if let Some(cell) = self.cell.take() {
            cell.validate()?;
            self.cells.push(cell);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<CellHistory>> {
        self.close_cell(0)?;
        Ok(self.cells)
    }
}

/// Writes histories in the interchange format. Numbers use Rust's
/// shortest round-trip decimal form, so a save/load cycle is exact.
pub fn save_cell_histories(path: &Path, histories: &[CellHistory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_cell_histories(&mut out, histories).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cell_histories<W: Write>(out: &mut W, histories: &[CellHistory]) -> std::io::Result<()> {
    writeln!(out, "{FORMAT_HEADER}")?;
    let mut buf = String::new();
    for cell in histories {
        writeln!(out, "CELL {} {}", cell.cell_id, cell.nominal_capacity)?;
        for c in &cell.cycles {
            writeln!(
                out,
                "CYC {} {} {} {}",
                c.cycle_index, c.discharge_capacity, c.charge_time, c.internal_resistance
            )?;
            buf.clear();
            buf.push('T');
            for (t, temp) in &c.temperature_series {
                let _ = write!(buf, " {t}:{temp}");
            }
            writeln!(out, "{buf}")?;
            buf.clear();
            buf.push('V');
            let curve = &c.discharge_curve;
            for (v, q) in curve.voltage.iter().zip(&curve.capacity) {
                let _ = write!(buf, " {v}:{q}");
            }
            writeln!(out, "{buf}")?;
        }
        if let Some(eol) = cell.eol_cycle {
            writeln!(out, "EOL {eol}")?;
        }
    }
    Ok(())
}
