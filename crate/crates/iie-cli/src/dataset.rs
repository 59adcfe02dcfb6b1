use crate::error::{CliError, CliResult};
use iie::Observation;
use std::io::{Read, Write};

const FIXED: [&str; 4] = ["y", "a", "m1", "m2"];

fn schema(column: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        column: column.to_string(),
        message: message.into(),
    }
}

/// Header must be exactly `y,a,m1,m2,x1[,x2,...]`.
fn check_header(h: &csv::StringRecord) -> CliResult<usize> {
    for (k, want) in FIXED.iter().enumerate() {
        match h.get(k) {
            Some(got) if got == *want => {}
            Some(got) => return Err(schema(want, format!("missing; found '{got}' in position {}", k + 1))),
            None => return Err(schema(want, "missing")),
        }
    }
    let p = h.len() - FIXED.len();
    if p == 0 {
        return Err(schema("x1", "missing; at least one covariate is required"));
    }
    for j in 0..p {
        let want = format!("x{}", j + 1);
        let got = &h[FIXED.len() + j];
        if got != want {
            return Err(schema(&want, format!("missing; found '{got}' in position {}", FIXED.len() + j + 1)));
        }
    }
    Ok(p)
}

fn binary(rec: &csv::StringRecord, k: usize, row: usize) -> CliResult<u8> {
    match &rec[k] {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(schema(FIXED[k], format!("row {row}: expected 0 or 1, got '{other}'"))),
    }
}

/// Parse a dataset. Rows are numbered from 1, excluding the header.
pub fn read_dataset<R: Read>(input: R) -> CliResult<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(|e| schema("header", e.to_string()))?.clone();
    let p = check_header(&header)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| schema("record", format!("row {row}: {e}")))?;
        let y: f64 = rec[0]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| schema("y", format!("row {row}: '{}' is not a finite number", &rec[0])))?;
        let (a, m1, m2) = (binary(&rec, 1, row)?, binary(&rec, 2, row)?, binary(&rec, 3, row)?);
        let x = (0..p)
            .map(|j| {
                let s = &rec[FIXED.len() + j];
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| schema(&format!("x{}", j + 1), format!("row {row}: '{s}' is not a finite number")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        out.push(Observation::new(y, a, m1, m2, x)?);
    }
    if out.is_empty() {
        return Err(schema("y", "dataset has no rows"));
    }
    Ok(out)
}

pub fn read_dataset_path(path: &std::path::Path) -> CliResult<Vec<Observation>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(f))
}

/// Write observations in the dataset schema; floats use shortest round-trip form.
pub fn write_dataset<W: Write>(w: W, data: &[Observation]) -> CliResult<()> {
    let mut wr = csv::Writer::from_writer(w);
    let p = data.first().map_or(1, |o| o.x.len());
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|j| format!("x{j}")));
    wr.write_record(&header)?;
    for o in data {
        let mut rec = vec![o.y.to_string(), o.a.to_string(), o.m1.to_string(), o.m2.to_string()];
        rec.extend(o.x.iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
