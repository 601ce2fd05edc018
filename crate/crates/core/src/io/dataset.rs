use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, Dataset, Observation};
use crate::error::{DiveError, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"DIVEMTRX";
const HEADER_LEN: usize = 16;

pub const VALUES_FILE: &str = "values.bin";
pub const ROWS_FILE: &str = "rows.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| DiveError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DiveError::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> DiveError {
    let location = e
        .position()
        .map_or_else(|| "line ?".to_string(), |p| format!("line {}", p.line()));
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DiveError::io(path, io),
        kind => DiveError::format(path, location, format!("{kind:?}")),
    }
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

/// Header rows are written explicitly so that empty tables keep theirs.
pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?))
}

pub(crate) fn write_records<T: Serialize>(
    path: &Path,
    header: &[&str],
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DiveError::io(path, e))
}

pub(crate) fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(DiveError::format(
            path,
            "line 1",
            format!("expected header {}, found {}", expected.join(","), found.join(",")),
        ));
    }
    Ok(())
}

/// Reads a value matrix, either binary (`DIVEMTRX` header) or CSV with a
/// header row.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(open(path)?)
        .read_to_end(&mut bytes)
        .map_err(|e| DiveError::io(path, e))?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_matrix(path, &bytes)
    } else {
        read_matrix_csv(path)
    }
}

fn decode_matrix(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(DiveError::format(path, "byte 8", "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + rows * cols * 8;
    if bytes.len() != expected {
        return Err(DiveError::format(
            path,
            format!("byte {}", bytes.len().min(expected)),
            format!(
                "{rows}x{cols} matrix needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (n, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(DiveError::format(
                path,
                format!("byte {}", HEADER_LEN + 8 * n),
                format!("non-finite value at row {}, column {}", n / cols, n % cols),
            ));
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv_reader(path)?;
    let cols = reader.headers().map_err(|e| csv_error(path, e))?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                DiveError::format(path, format!("line {line}"), format!("column {c}: not a number: {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(DiveError::format(
                    path,
                    format!("line {line}"),
                    format!("column {c}: non-finite value"),
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("csv enforces equal field counts"))
}

pub fn write_matrix(path: &Path, values: &Array2<f64>) -> Result<()> {
    let too_big = |n: usize| u32::try_from(n).map_err(|_| DiveError::Config(format!("dimension {n} exceeds u32")));
    let rows = too_big(values.nrows())?;
    let cols = too_big(values.ncols())?;
    let mut w = create(path)?;
    let mut write = |b: &[u8]| w.write_all(b).map_err(|e| DiveError::io(path, e));
    write(MATRIX_MAGIC)?;
    write(&rows.to_le_bytes())?;
    write(&cols.to_le_bytes())?;
    for v in values.iter() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| DiveError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct RowRecord {
    subject_id: u64,
    visit_id: u64,
    age: f64,
}

pub fn read_rows(path: &Path) -> Result<Vec<Observation>> {
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &["subject_id", "visit_id", "age"])?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<RowRecord>() {
        let r = record.map_err(|e| csv_error(path, e))?;
        if !r.age.is_finite() {
            return Err(DiveError::format(
                path,
                format!("line {}", rows.len() + 2),
                "non-finite age",
            ));
        }
        rows.push(Observation {
            subject: r.subject_id,
            visit: r.visit_id,
            age: r.age,
        });
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[Observation]) -> Result<()> {
    let records = rows.iter().map(|o| RowRecord {
        subject_id: o.subject,
        visit_id: o.visit,
        age: o.age,
    });
    write_records(path, &["subject_id", "visit_id", "age"], records)
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    l1: usize,
    l2: usize,
}

/// Reads a 0-indexed edge list. Edges listed in one direction only are
/// symmetrized with a warning.
pub fn read_adjacency(path: &Path, n_vertices: usize) -> Result<Adjacency> {
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &["l1", "l2"])?;
    let mut edges = Vec::new();
    for (n, record) in reader.deserialize::<EdgeRecord>().enumerate() {
        let e = record.map_err(|e| csv_error(path, e))?;
        let line = format!("line {}", n + 2);
        if e.l1 >= n_vertices || e.l2 >= n_vertices {
            return Err(DiveError::format(
                path,
                line,
                format!("edge ({}, {}) out of range for {n_vertices} vertices", e.l1, e.l2),
            ));
        }
        if e.l1 == e.l2 {
            return Err(DiveError::format(path, line, format!("self-loop at vertex {}", e.l1)));
        }
        edges.push((e.l1, e.l2));
    }
    let (adjacency, missing) = Adjacency::from_edges(n_vertices, &edges)?;
    if missing > 0 {
        warn!(
            "{}: {missing} edges listed in one direction only; symmetrized",
            path.display()
        );
    }
    Ok(adjacency)
}

/// Writes every edge in both directions.
pub fn write_adjacency(path: &Path, adjacency: &Adjacency) -> Result<()> {
    let records = (0..adjacency.len())
        .flat_map(|l1| adjacency.neighbors(l1).iter().map(move |&l2| EdgeRecord { l1, l2 }));
    write_records(path, &["l1", "l2"], records)
}

pub fn load_dataset(values: &Path, rows: &Path, adjacency: &Path) -> Result<Dataset> {
    let matrix = read_matrix(values)?;
    let obs = read_rows(rows)?;
    if matrix.nrows() != obs.len() {
        return Err(DiveError::format(
            values,
            "header",
            format!(
                "{} value rows but {} has {} observations",
                matrix.nrows(),
                rows.display(),
                obs.len()
            ),
        ));
    }
    let adjacency = read_adjacency(adjacency, matrix.ncols())?;
    Dataset::new(matrix, obs, adjacency)
}

/// Writes `values.bin`, `rows.csv` and `adjacency.csv` into `dir`,
/// creating it if needed.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DiveError::io(dir, e))?;
    write_matrix(&dir.join(VALUES_FILE), data.values())?;
    write_rows(&dir.join(ROWS_FILE), data.rows())?;
    write_adjacency(&dir.join(ADJACENCY_FILE), data.adjacency())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(
        &dir.join(VALUES_FILE),
        &dir.join(ROWS_FILE),
        &dir.join(ADJACENCY_FILE),
    )
}
