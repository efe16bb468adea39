use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: &str =
    "family,method,seed,d,k,T,N,iteration,train_loss,estimation_error,balance_gap,dist_to_target,wall_ms,diverged";

/// One CSV row. Metrics that do not apply to a family are left empty; a
/// diverged run ends with a row flagged `diverged` whose metrics are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub family: String,
    pub method: String,
    /// Empty on theory rows.
    pub seed: Option<u64>,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub t_count: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub estimation_error: Option<f64>,
    pub balance_gap: Option<f64>,
    pub dist_to_target: Option<f64>,
    pub wall_ms: Option<f64>,
    pub diverged: bool,
}

impl ExperimentRecord {
    /// Row with every metric empty.
    pub fn blank(family: &str, method: &str, seed: Option<u64>, dims: (usize, usize, usize, usize)) -> Self {
        let (d, k, t_count, n) = dims;
        Self {
            family: family.to_owned(),
            method: method.to_owned(),
            seed,
            d,
            k,
            t_count,
            n,
            iteration: 0,
            train_loss: None,
            estimation_error: None,
            balance_gap: None,
            dist_to_target: None,
            wall_ms: None,
            diverged: false,
        }
    }

    /// Every present metric is finite, or the row is flagged as diverged.
    pub fn is_well_formed(&self) -> bool {
        self.diverged
            || [self.train_loss, self.estimation_error, self.balance_gap, self.dist_to_target, self.wall_ms]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
    }
}

/// Writes the header and rows with `\n` line endings and shortest round-trip
/// float formatting.
pub fn write_records<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(out);
    wtr.write_record(CSV_HEADER.split(','))?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(file, records)
}

pub fn read_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ExperimentRecord> {
        let mut a = ExperimentRecord::blank("iter_sweep", "tpgd", Some(3), (20, 2, 40, 1000));
        a.iteration = 7;
        a.train_loss = Some(0.125);
        a.estimation_error = Some(1.0e-5);
        a.balance_gap = Some(0.1 + 0.2);
        a.dist_to_target = Some(std::f64::consts::PI);
        let mut b = ExperimentRecord::blank("iter_sweep", "theory", None, (20, 2, 40, 1000));
        b.estimation_error = Some(2.5e-4);
        let mut c = ExperimentRecord::blank("iter_sweep", "gd_loss1", Some(0), (20, 2, 40, 1000));
        c.diverged = true;
        vec![a, b, c]
    }

    #[test]
    fn header_and_round_trip() {
        let rows = sample();
        let mut buf = Vec::new();
        write_records(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().nth(2).unwrap(), "iter_sweep,theory,,20,2,40,1000,0,,0.00025,,,,false");
        assert_eq!(read_records(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn floats_survive_exactly() {
        let mut r = ExperimentRecord::blank("f", "m", Some(0), (1, 1, 1, 1));
        for v in [0.1 + 0.2, 1.0 / 3.0, 6.02e23, 5e-324, -0.0, 1e-300] {
            r.train_loss = Some(v);
            let mut buf = Vec::new();
            write_records(&mut buf, std::slice::from_ref(&r)).unwrap();
            let back = read_records(buf.as_slice()).unwrap();
            assert_eq!(back[0].train_loss.unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn well_formedness() {
        let rows = sample();
        assert!(rows.iter().all(ExperimentRecord::is_well_formed));
        let mut bad = rows[0].clone();
        bad.train_loss = Some(f64::NAN);
        assert!(!bad.is_well_formed());
        bad.diverged = true;
        assert!(bad.is_well_formed());
    }
}
