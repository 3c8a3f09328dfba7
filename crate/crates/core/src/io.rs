//! CSV formats for covariates and assignments.
//!
//! Covariate files have a header row, the unit id in the first column and
//! numeric covariates in the rest. Assignment files have the columns
//! `unit_id,group,treatment` with one-based group and treatment numbers.

use std::io::{Read, Write};

use crate::data::{CovariateSet, Partition};
use crate::error::{DesignError, Result};
use crate::online::Assignment;

fn csv_error(row: usize, column: usize, message: impl Into<String>) -> DesignError {
    DesignError::Csv {
        row,
        column,
        message: message.into(),
    }
}

fn from_csv(e: csv::Error) -> DesignError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DesignError::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            csv_error(row, 0, format!("expected {expected_len} fields, found {len}"))
        }
        csv::ErrorKind::Utf8 { err, .. } => csv_error(row, err.field() + 1, "invalid UTF-8"),
        other => csv_error(row, 0, format!("{other:?}")),
    }
}

/// Reads covariates. Rows and columns in errors are one-based, counting the header as row 1.
pub fn read_covariates<R: Read>(input: R) -> Result<CovariateSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(from_csv)?.clone();
    if header.len() < 2 {
        return Err(csv_error(
            1,
            header.len(),
            "need a unit_id column and at least one covariate",
        ));
    }
    let p = header.len() - 1;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(from_csv)?;
        let row = record.position().map_or(ids.len() + 2, |pos| pos.line() as usize);
        let id = record[0].trim();
        if id.is_empty() {
            return Err(csv_error(row, 1, "empty unit_id"));
        }
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_error(row, c + 1, format!("{:?} is not a number", cell)))?;
            if !v.is_finite() {
                return Err(csv_error(row, c + 1, format!("{cell:?} is not finite")));
            }
            values.push(v);
        }
        ids.push(id.to_string());
    }
    if ids.is_empty() {
        return Err(DesignError::InvalidCovariates("no data rows".into()));
    }
    CovariateSet::new(ids, p, values)
}

pub fn write_covariates<W: Write>(data: &CovariateSet, names: &[String], out: W) -> Result<()> {
    data.require_dim(names.len())?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(from_csv)?;
    for (id, row) in data.unit_ids().iter().zip(data.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(from_csv)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_assignments<W: Write>(assignments: &[Assignment], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "group", "treatment"]).map_err(from_csv)?;
    for a in assignments {
        w.write_record([
            a.unit_id.clone(),
            (a.group + 1).to_string(),
            (a.treatment + 1).to_string(),
        ])
        .map_err(from_csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Assignments for an offline partition, unit ids in data order.
pub fn assignments_for(
    unit_ids: &[String],
    partition: &Partition,
    group_to_treatment: &[usize],
) -> Result<Vec<Assignment>> {
    partition.require_len(unit_ids.len())?;
    if group_to_treatment.len() != partition.groups() {
        return Err(DesignError::DimensionMismatch {
            expected: partition.groups(),
            found: group_to_treatment.len(),
        });
    }
    Ok(unit_ids
        .iter()
        .zip(partition.labels())
        .map(|(id, &g)| Assignment {
            unit_id: id.clone(),
            group: g,
            treatment: group_to_treatment[g],
        })
        .collect())
}

pub fn read_assignments<R: Read>(input: R) -> Result<Vec<Assignment>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(from_csv)?;
    let expected = ["unit_id", "group", "treatment"];
    if header.iter().map(str::trim).ne(expected) {
        return Err(csv_error(1, 0, format!("header must be {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(from_csv)?;
        let row = record.position().map_or(out.len() + 2, |pos| pos.line() as usize);
        let number = |c: usize| -> Result<usize> {
            match record[c].trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(csv_error(
                    row,
                    c + 1,
                    format!("{:?} is not a positive integer", &record[c]),
                )),
            }
        };
        out.push(Assignment {
            unit_id: record[0].trim().to_string(),
            group: number(1)?,
            treatment: number(2)?,
        });
    }
    Ok(out)
}

/// Rebuilds the partition from assignments; the group count is the largest group seen.
pub fn partition_from_assignments(assignments: &[Assignment]) -> Result<Partition> {
    let groups = assignments.iter().map(|a| a.group + 1).max().unwrap_or(0);
    Partition::new(assignments.iter().map(|a| a.group).collect(), groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_covariates() {
        let text = "unit_id,x,y\na,1,2.5\nb, -3 ,4e1\n";
        let data = read_covariates(text.as_bytes()).unwrap();
        assert_eq!(data.unit_ids(), ["a", "b"]);
        assert_eq!(data.row(1), [-3.0, 40.0]);
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let text = "unit_id,x,y\na,1,2\nb,3,oops\n";
        match read_covariates(text.as_bytes()).unwrap_err() {
            DesignError::Csv { row, column, message } => {
                assert_eq!((row, column), (3, 3));
                assert!(message.contains("oops"));
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn ragged_and_empty_files_are_rejected() {
        assert!(matches!(
            read_covariates("unit_id,x\na,1\nb,2,3\n".as_bytes()),
            Err(DesignError::Csv { row: 3, .. })
        ));
        assert!(read_covariates("unit_id,x\n".as_bytes()).is_err());
        assert!(read_covariates("unit_id\na\n".as_bytes()).is_err());
        assert!(read_covariates("unit_id,x\na,NaN\n".as_bytes()).is_err());
    }

    #[test]
    fn assignments_round_trip() {
        let p = Partition::new(vec![1, 0, 2, 1], 3).unwrap();
        let ids: Vec<String> = ["w", "x", "y", "z"].map(String::from).into();
        let a = assignments_for(&ids, &p, &[2, 0, 1]).unwrap();
        let mut buf = Vec::new();
        write_assignments(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("unit_id,group,treatment\nw,2,1\n"));
        let back = read_assignments(text.as_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(partition_from_assignments(&back).unwrap(), p);
    }

    #[test]
    fn zero_group_number_is_rejected() {
        let text = "unit_id,group,treatment\na,0,1\n";
        assert!(matches!(
            read_assignments(text.as_bytes()),
            Err(DesignError::Csv { row: 2, column: 2, .. })
        ));
    }
}
