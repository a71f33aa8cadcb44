//! Failure records, covariate coding, dataset validation and CSV ingestion.
//!
//! Two CSV layouts are accepted. The positional layout
//! `unit_id,row,col,cage,slot,node,time,event` carries in-cabinet positions that
//! are dummy coded against the baselines cage 2, slot 7 and node 3. The numeric
//! layout `unit_id,row,col,x1,...,xp,time,event` carries an already coded design
//! row (this is what the simulator writes). Times are in years and `event` is
//! 0 (censored), 1 (mode 1) or 2 (mode 2).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::distributions::DistributionFamily;
use crate::error::{Error, Result};

pub const CAGE_LEVELS: u8 = 3;
pub const SLOT_LEVELS: u8 = 8;
pub const NODE_LEVELS: u8 = 4;
/// Number of dummy columns produced by the positional coding.
pub const POSITION_COVARIATES: usize = 12;
/// Upper bound on the number of distinct cabinet locations.
pub const MAX_LOCATIONS: usize = 200;

const POSITION_HEADER: [&str; 8] = ["unit_id", "row", "col", "cage", "slot", "node", "time", "event"];

/// Failure mode observed for a unit, or censoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventType {
    Censored = 0,
    Mode1 = 1,
    Mode2 = 2,
}

impl EventType {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Self::Censored),
            1 => Some(Self::Mode1),
            2 => Some(Self::Mode2),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Event indicator for mode `k` (1 or 2).
    pub fn indicator(self, mode: usize) -> bool {
        matches!((self, mode), (Self::Mode1, 1) | (Self::Mode2, 2))
    }
}

/// Rectangular cabinet grid whose columns wrap around (the last column is
/// adjacent to column 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    /// 8 rows by 25 connectivity-labelled columns.
    pub const TITAN: Grid = Grid { rows: 8, cols: 25 };

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Validation(format!(
                "grid must have at least 2 rows and 2 columns, got {rows}x{cols}"
            )));
        }
        if rows * cols > MAX_LOCATIONS {
            return Err(Error::Validation(format!(
                "grid {rows}x{cols} exceeds {MAX_LOCATIONS} locations"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn contains(&self, loc: Location) -> bool {
        (loc.row as usize) < self.rows && (loc.col as usize) < self.cols
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self::TITAN
    }
}

/// Cabinet coordinates `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub row: u8,
    pub col: u8,
}

impl Location {
    pub fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }
}

/// In-cabinet position of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Position {
    pub cage: u8,
    pub slot: u8,
    pub node: u8,
}

impl Position {
    pub fn validate(&self) -> Result<()> {
        if self.cage >= CAGE_LEVELS || self.slot >= SLOT_LEVELS || self.node >= NODE_LEVELS {
            return Err(Error::Validation(format!(
                "position cage={} slot={} node={} outside 0-2/0-7/0-3",
                self.cage, self.slot, self.node
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariates {
    Position(Position),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub unit_id: String,
    pub location: Location,
    pub covariates: Covariates,
    /// Observed failure or censoring time in years.
    pub time: f64,
    pub event: EventType,
}

impl FailureRecord {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !grid.contains(self.location) {
            return Err(Error::Validation(format!(
                "unit {}: location ({}, {}) outside the {}x{} grid",
                self.unit_id, self.location.row, self.location.col, grid.rows, grid.cols
            )));
        }
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(Error::Validation(format!(
                "unit {}: time must be positive, got {}",
                self.unit_id, self.time
            )));
        }
        match &self.covariates {
            Covariates::Position(pos) => pos.validate(),
            Covariates::Values(v) if v.iter().any(|x| !x.is_finite()) => Err(Error::Validation(
                format!("unit {}: non-finite covariate", self.unit_id),
            )),
            Covariates::Values(_) => Ok(()),
        }
    }
}

/// Dummy coding of an in-cabinet position: cage levels 0,1, slot levels 0-6 and
/// node levels 0-2 get one indicator each; cage 2, slot 7 and node 3 are the
/// baselines and encode to zeros.
pub fn encode_position(pos: &Position) -> [f64; POSITION_COVARIATES] {
    let mut x = [0.0; POSITION_COVARIATES];
    if pos.cage < CAGE_LEVELS - 1 {
        x[pos.cage as usize] = 1.0;
    }
    if pos.slot < SLOT_LEVELS - 1 {
        x[2 + pos.slot as usize] = 1.0;
    }
    if pos.node < NODE_LEVELS - 1 {
        x[9 + pos.node as usize] = 1.0;
    }
    x
}

pub fn encode_covariates(record: &FailureRecord) -> Vec<f64> {
    match &record.covariates {
        Covariates::Position(pos) => encode_position(pos).to_vec(),
        Covariates::Values(v) => v.clone(),
    }
}

/// Permutation from physical cabinet columns to connectivity columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRelabelMap {
    physical_to_connectivity: Vec<u8>,
}

impl ColumnRelabelMap {
    pub fn identity(cols: usize) -> Self {
        Self { physical_to_connectivity: (0..cols as u8).collect() }
    }

    pub fn new(map: Vec<u8>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &c in &map {
            let c = c as usize;
            if c >= map.len() || seen[c] {
                return Err(Error::Validation(format!(
                    "column relabel map is not a permutation of 0..{}",
                    map.len()
                )));
            }
            seen[c] = true;
        }
        Ok(Self { physical_to_connectivity: map })
    }

    /// Reads a two-column CSV `physical,connectivity`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<u8> {
                rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    line: i + 2,
                    message: "expected `physical,connectivity` integers".into(),
                })
            };
            pairs.push((parse(0)?, parse(1)?));
        }
        let mut map = vec![u8::MAX; pairs.len()];
        for (phys, conn) in pairs {
            let slot = map.get_mut(phys as usize).ok_or_else(|| {
                Error::Validation(format!("physical column {phys} out of range"))
            })?;
            *slot = conn;
        }
        Self::new(map)
    }

    pub fn len(&self) -> usize {
        self.physical_to_connectivity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.physical_to_connectivity.is_empty()
    }

    pub fn apply(&self, col: u8) -> Result<u8> {
        self.physical_to_connectivity
            .get(col as usize)
            .copied()
            .ok_or_else(|| Error::Validation(format!("column {col} outside relabel map")))
    }
}

/// A validated, immutable set of failure records with its design matrix and
/// location index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    grid: Grid,
    records: Vec<FailureRecord>,
    locations: Vec<Location>,
    location_index: Vec<usize>,
    design: Vec<f64>,
    p: usize,
}

impl Dataset {
    pub fn new(grid: Grid, records: Vec<FailureRecord>) -> Result<Self> {
        let mut p = None;
        let mut positional = None;
        for r in &records {
            r.validate(&grid)?;
            let is_pos = matches!(r.covariates, Covariates::Position(_));
            if *positional.get_or_insert(is_pos) != is_pos {
                return Err(Error::Validation(
                    "records mix positional and numeric covariates".into(),
                ));
            }
            let len = match &r.covariates {
                Covariates::Position(_) => POSITION_COVARIATES,
                Covariates::Values(v) => v.len(),
            };
            if *p.get_or_insert(len) != len {
                return Err(Error::Validation(format!(
                    "unit {}: expected {} covariates, got {len}",
                    r.unit_id,
                    p.unwrap_or(0)
                )));
            }
        }
        let p = p.unwrap_or(0);

        let mut by_loc: BTreeMap<Location, usize> = BTreeMap::new();
        for r in &records {
            by_loc.entry(r.location).or_insert(0);
        }
        let locations: Vec<Location> = by_loc.keys().copied().collect();
        for (i, v) in by_loc.values_mut().enumerate() {
            *v = i;
        }
        let location_index = records.iter().map(|r| by_loc[&r.location]).collect();
        let mut design = Vec::with_capacity(records.len() * p);
        for r in &records {
            design.extend(encode_covariates(r));
        }
        Ok(Self { grid, records, locations, location_index, design, p })
    }

    pub fn empty(grid: Grid, p: usize) -> Self {
        Self { grid, records: Vec::new(), locations: Vec::new(), location_index: Vec::new(), design: Vec::new(), p }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn records(&self) -> &[FailureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct locations in row-major order.
    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn location_of(&self, unit: usize) -> usize {
        self.location_index[unit]
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn covariates(&self, unit: usize) -> &[f64] {
        &self.design[unit * self.p..(unit + 1) * self.p]
    }

    pub fn is_positional(&self) -> bool {
        matches!(self.records.first().map(|r| &r.covariates), Some(Covariates::Position(_)))
    }

    /// Number of units at each location index.
    pub fn location_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.locations.len()];
        for &i in &self.location_index {
            counts[i] += 1;
        }
        counts
    }

    /// Failure counts `(mode 1, mode 2, censored)`.
    pub fn event_counts(&self) -> (usize, usize, usize) {
        self.records.iter().fold((0, 0, 0), |(a, b, c), r| match r.event {
            EventType::Mode1 => (a + 1, b, c),
            EventType::Mode2 => (a, b + 1, c),
            EventType::Censored => (a, b, c + 1),
        })
    }

    /// Writes the dataset in the layout matching its covariates.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.is_positional() || self.records.is_empty() {
            w.write_record(POSITION_HEADER)?;
        } else {
            let mut header = vec!["unit_id".to_string(), "row".into(), "col".into()];
            header.extend((1..=self.p).map(|j| format!("x{j}")));
            header.extend(["time".to_string(), "event".into()]);
            w.write_record(&header)?;
        }
        for r in &self.records {
            let mut row = vec![r.unit_id.clone(), r.location.row.to_string(), r.location.col.to_string()];
            match &r.covariates {
                Covariates::Position(pos) => {
                    row.extend([pos.cage.to_string(), pos.slot.to_string(), pos.node.to_string()])
                }
                Covariates::Values(v) => row.extend(v.iter().map(|x| x.to_string())),
            }
            row.push(r.time.to_string());
            row.push(r.event.code().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Reads and validates a dataset. Column values are passed through `relabel`
/// when given.
pub fn ingest_csv(path: &Path, grid: Grid, relabel: Option<&ColumnRelabelMap>) -> Result<Dataset> {
    ingest_reader(File::open(path)?, grid, relabel)
}

pub fn ingest_reader<R: Read>(reader: R, grid: Grid, relabel: Option<&ColumnRelabelMap>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let positional = header.iter().map(String::as_str).eq(POSITION_HEADER.iter().copied());
    let p = if positional {
        POSITION_COVARIATES
    } else {
        numeric_layout_width(&header).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!(
                "header must be `{}` or `unit_id,row,col,x1,...,xp,time,event`",
                POSITION_HEADER.join(",")
            ),
        })?
    };
    if let Some(map) = relabel {
        if map.len() != grid.cols {
            return Err(Error::Validation(format!(
                "relabel map has {} columns, grid has {}",
                map.len(),
                grid.cols
            )));
        }
    }

    let mut records = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let expected = if positional { 8 } else { p + 5 };
        if rec.len() != expected {
            return Err(Error::Parse { line, message: format!("expected {expected} fields, got {}", rec.len()) });
        }
        let field = |j: usize| rec.get(j).unwrap_or("");
        let int = |j: usize| -> Result<i64> {
            field(j).parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("field `{}` is not an integer: {:?}", header[j], field(j)),
            })
        };
        let real = |j: usize| -> Result<f64> {
            field(j).parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("field `{}` is not a number: {:?}", header[j], field(j)),
            })
        };
        let small = |j: usize| -> Result<u8> {
            let v = int(j)?;
            u8::try_from(v).map_err(|_| {
                Error::Validation(format!("line {line}: `{}` = {v} out of range", header[j]))
            })
        };
        let row = small(1)?;
        let mut col = small(2)?;
        if let Some(map) = relabel {
            col = map.apply(col)?;
        }
        let covariates = if positional {
            Covariates::Position(Position { cage: small(3)?, slot: small(4)?, node: small(5)? })
        } else {
            Covariates::Values((0..p).map(|j| real(3 + j)).collect::<Result<_>>()?)
        };
        let time = real(expected - 2)?;
        let code = int(expected - 1)?;
        let event = EventType::from_code(code)
            .ok_or_else(|| Error::Validation(format!("line {line}: event code {code} not in {{0,1,2}}")))?;
        let record = FailureRecord {
            unit_id: field(0).to_string(),
            location: Location::new(row, col),
            covariates,
            time,
            event,
        };
        record.validate(&grid).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line}: {msg}")),
            other => other,
        })?;
        records.push(record);
    }
    Dataset::new(grid, records)
}

fn numeric_layout_width(header: &[String]) -> Option<usize> {
    let n = header.len();
    if n < 5 || header[0] != "unit_id" || header[1] != "row" || header[2] != "col" {
        return None;
    }
    if header[n - 2] != "time" || header[n - 1] != "event" {
        return None;
    }
    let p = n - 5;
    (0..p).all(|j| header[3 + j] == format!("x{}", j + 1)).then_some(p)
}

/// Failure count for one mode against the posterior propriety threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePropriety {
    pub mode: usize,
    pub failures: usize,
    /// The failure count must strictly exceed this value.
    pub threshold: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProprietyReport {
    pub family: DistributionFamily,
    pub p: usize,
    pub modes: [ModePropriety; 2],
}

impl ProprietyReport {
    pub fn all_satisfied(&self) -> bool {
        self.modes.iter().all(|m| m.satisfied)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.modes
            .iter()
            .filter(|m| !m.satisfied)
            .map(|m| {
                format!(
                    "mode {}: {} failures does not exceed {} ({:?}, p = {}); the posterior may be improper",
                    m.mode, m.failures, m.threshold, self.family, self.p
                )
            })
            .collect()
    }
}

/// Per-mode failure counts against the sufficient conditions for a proper
/// posterior under flat location/coefficient priors: `m > p + 1` (Weibull) and
/// `m > (p + 3) / 2` (lognormal). Violations are warnings only.
pub fn check_propriety(data: &Dataset, family: DistributionFamily) -> ProprietyReport {
    let (m1, m2, _) = data.event_counts();
    propriety_from_counts(family, data.n_covariates(), [m1, m2])
}

pub fn propriety_from_counts(family: DistributionFamily, p: usize, failures: [usize; 2]) -> ProprietyReport {
    let threshold = match family {
        DistributionFamily::Weibull => p as f64 + 1.0,
        DistributionFamily::Lognormal => (p as f64 + 3.0) / 2.0,
    };
    let mode = |k: usize| ModePropriety {
        mode: k + 1,
        failures: failures[k],
        threshold,
        satisfied: failures[k] as f64 > threshold,
    };
    ProprietyReport { family, p, modes: [mode(0), mode(1)] }
}
