//! Per-location failure proportions for heatmaps.

use std::io::Write;

use crate::data::{Dataset, EventType, Grid};
use crate::error::Result;

/// Failure proportions on the full grid, row-major. Cells without units are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureMap {
    pub grid: Grid,
    pub units: Vec<usize>,
    pub failures: [Vec<usize>; 2],
    pub proportion: [Vec<Option<f64>>; 2],
    /// Per-row proportion pooled over columns, per mode.
    pub row_marginal: [Vec<Option<f64>>; 2],
    pub col_marginal: [Vec<Option<f64>>; 2],
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn failure_proportion_map(data: &Dataset) -> FailureMap {
    let grid = data.grid();
    let cells = grid.rows * grid.cols;
    let mut units = vec![0; cells];
    let mut failures = [vec![0; cells], vec![0; cells]];
    for r in data.records() {
        let c = r.location.row as usize * grid.cols + r.location.col as usize;
        units[c] += 1;
        match r.event {
            EventType::Mode1 => failures[0][c] += 1,
            EventType::Mode2 => failures[1][c] += 1,
            EventType::Censored => {}
        }
    }
    let proportion = [0, 1].map(|k| (0..cells).map(|c| ratio(failures[k][c], units[c])).collect());
    let pool = |k: usize, cells_of: &dyn Fn(usize) -> Vec<usize>, n: usize| -> Vec<Option<f64>> {
        (0..n)
            .map(|i| {
                let cs = cells_of(i);
                ratio(cs.iter().map(|&c| failures[k][c]).sum(), cs.iter().map(|&c| units[c]).sum())
            })
            .collect()
    };
    let row_cells = |r: usize| (0..grid.cols).map(|c| r * grid.cols + c).collect();
    let col_cells = |c: usize| (0..grid.rows).map(|r| r * grid.cols + c).collect();
    let row_marginal = [0, 1].map(|k| pool(k, &row_cells, grid.rows));
    let col_marginal = [0, 1].map(|k| pool(k, &col_cells, grid.cols));
    FailureMap { grid, units, failures, proportion, row_marginal, col_marginal }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |p| p.to_string())
}

impl FailureMap {
    /// One row per cell and mode; missing proportions are empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["mode", "row", "col", "units", "failures", "proportion"])?;
        for k in 0..2 {
            for c in 0..self.units.len() {
                w.write_record([
                    (k + 1).to_string(),
                    (c / self.grid.cols).to_string(),
                    (c % self.grid.cols).to_string(),
                    self.units[c].to_string(),
                    self.failures[k][c].to_string(),
                    fmt(self.proportion[k][c]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_marginals_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["mode", "axis", "index", "proportion"])?;
        for k in 0..2 {
            for (axis, values) in [("row", &self.row_marginal[k]), ("col", &self.col_marginal[k])] {
                for (i, v) in values.iter().enumerate() {
                    w.write_record([(k + 1).to_string(), axis.to_string(), i.to_string(), fmt(*v)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariates, FailureRecord, Location};
    use crate::simulation::{simulate, SimConfig};

    fn rec(i: usize, row: u8, col: u8, event: EventType) -> FailureRecord {
        FailureRecord {
            unit_id: format!("u{i}"),
            location: Location::new(row, col),
            covariates: Covariates::Values(vec![]),
            time: 1.0 + i as f64,
            event,
        }
    }

    #[test]
    fn half_of_one_location() {
        let events = [EventType::Mode1, EventType::Mode1, EventType::Censored, EventType::Mode2];
        let records = events.iter().enumerate().map(|(i, e)| rec(i, 0, 1, *e)).collect();
        let data = Dataset::new(Grid::square(2).unwrap(), records).unwrap();
        let m = failure_proportion_map(&data);
        assert_eq!(m.proportion[0][1], Some(0.5));
        assert_eq!(m.proportion[1][1], Some(0.25));
        assert_eq!(m.proportion[0][0], None);
        assert_eq!(m.row_marginal[0], vec![Some(0.5), None]);
        assert_eq!(m.col_marginal[1], vec![None, Some(0.25)]);
    }

    #[test]
    fn all_censored_is_zero() {
        let records = (0..6).map(|i| rec(i, (i % 2) as u8, (i % 3) as u8, EventType::Censored)).collect();
        let data = Dataset::new(Grid::square(3).unwrap(), records).unwrap();
        let m = failure_proportion_map(&data);
        for k in 0..2 {
            assert!(m.proportion[k].iter().flatten().all(|p| *p == 0.0));
        }
    }

    #[test]
    fn matches_brute_force_counts() {
        let sim = simulate(&SimConfig::new(1500, 4, 5)).unwrap();
        let m = failure_proportion_map(&sim.dataset);
        for (c, cell) in m.units.iter().enumerate() {
            let (row, col) = ((c / 4) as u8, (c % 4) as u8);
            let here: Vec<_> =
                sim.dataset.records().iter().filter(|r| r.location == Location::new(row, col)).collect();
            assert_eq!(*cell, here.len());
            let n1 = here.iter().filter(|r| r.event == EventType::Mode1).count();
            assert_eq!(m.proportion[0][c], (!here.is_empty()).then(|| n1 as f64 / here.len() as f64));
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 16);
    }
}
