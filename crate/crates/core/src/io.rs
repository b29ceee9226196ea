//! File formats: site tables, sample matrices (CSV and the `SMX1` binary
//! block), mixtures and generic result tables.
//!
//! Every CSV written here starts with one `# {...}` comment line holding a
//! JSON object (configuration hash, seed and any other run metadata),
//! followed by a header row.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::covmodel::SiteSet;
use crate::error::{Error, Result};
use crate::mixture::GammaMixture;
use crate::simulate::SampleMatrix;

pub const SMX_MAGIC: &[u8; 4] = b"SMX1";

/// Metadata written as the leading `#` comment of a CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvHeader(pub BTreeMap<String, Value>);

impl CsvHeader {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        let mut m = BTreeMap::new();
        m.insert("config_hash".to_string(), Value::from(config_hash));
        m.insert("seed".to_string(), Value::from(seed));
        Self(m)
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn line(&self) -> String {
        format!("# {}", serde_json::to_string(&self.0).expect("string keys serialize"))
    }

    /// Parses a `# {...}` line; other comments give an empty header.
    pub fn parse(line: &str) -> Self {
        let body = line.trim_start_matches('#').trim();
        match serde_json::from_str::<BTreeMap<String, Value>>(body) {
            Ok(m) => Self(m),
            Err(_) => Self::default(),
        }
    }
}

fn input_err(path: &Path, line: Option<u64>, msg: impl std::fmt::Display) -> Error {
    match line {
        Some(l) => Error::Input(format!("{}:{l}: {msg}", path.display())),
        None => Error::Input(format!("{}: {msg}", path.display())),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| input_err(path, None, e))
}

/// Leading `#` line of a file, if any.
pub fn read_header(path: &Path) -> Result<CsvHeader> {
    let mut text = String::new();
    BufReader::new(open(path)?).take(1 << 16).read_to_string(&mut text)?;
    Ok(text
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .map(CsvHeader::parse)
        .unwrap_or_default())
}

/// A numeric CSV table; each row keeps its line number for error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl Table {
    /// Index of a named column, or a line-1 error naming it.
    pub fn column_index(&self, path: &Path, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input_err(path, Some(1), format!("missing column '{name}'")))
    }
}

pub fn read_numeric_table(path: &Path) -> Result<Table> {
    read_numeric_from(open(path)?, path)
}

fn read_numeric_from<R: Read>(reader: R, path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| input_err(path, e.position().map(|p| p.line()), e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(input_err(path, None, "missing header row"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input_err(path, e.position().map(|p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(input_err(
                path,
                Some(line),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let v: f64 = f
                    .parse()
                    .map_err(|_| input_err(path, Some(line), format!("column '{}': cannot parse '{f}'", headers[k])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(input_err(path, Some(line), format!("column '{}': non-finite value", headers[k])))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, vals));
    }
    Ok(Table { headers, rows })
}

/// Sites from a CSV with columns `x,y` followed by optional covariates.
/// Returns the sites and one covariate row per site (empty rows when there
/// are no covariate columns).
pub fn read_sites(path: &Path, allow_coincident: bool) -> Result<(SiteSet, Vec<Vec<f64>>)> {
    let t = read_numeric_table(path)?;
    if t.headers.len() < 2 || t.headers[0] != "x" || t.headers[1] != "y" {
        return Err(input_err(path, Some(1), "site table must start with columns x,y"));
    }
    if t.rows.is_empty() {
        return Err(input_err(path, None, "no sites"));
    }
    let coords = t.rows.iter().map(|(_, r)| [r[0], r[1]]).collect();
    let covariates = if t.headers.len() > 2 {
        t.rows.iter().map(|(_, r)| r[2..].to_vec()).collect()
    } else {
        Vec::new()
    };
    let sites = if allow_coincident {
        SiteSet::with_coincident(coords)
    } else {
        SiteSet::new(coords)
    }
    .map_err(|e| input_err(path, None, e))?;
    Ok((sites, covariates))
}

pub fn write_sites(path: &Path, header: &CsvHeader, sites: &SiteSet) -> Result<()> {
    let rows = sites.coords().iter().map(|c| vec![c[0], c[1]]).collect::<Vec<_>>();
    write_table(path, header, &["x", "y"], &rows)
}

/// Writes a numeric table with a metadata comment and a header row.
pub fn write_table(path: &Path, header: &CsvHeader, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_table_to(&mut out, header, columns, rows)?;
    out.flush()?;
    Ok(())
}

pub fn write_table_to<W: Write>(out: &mut W, header: &CsvHeader, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    writeln!(out, "{}", header.line())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for r in rows {
        if r.len() != columns.len() {
            return Err(Error::Input(format!("row of {} values for {} columns", r.len(), columns.len())));
        }
        w.write_record(r.iter().map(|v| format_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Table whose first column is a text label.
pub fn write_labeled_table(
    path: &Path,
    header: &CsvHeader,
    columns: &[&str],
    rows: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.line())?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(columns)?;
    for (label, r) in rows {
        if r.len() + 1 != columns.len() {
            return Err(Error::Input(format!("row of {} values for {} columns", r.len() + 1, columns.len())));
        }
        let mut rec = vec![label.clone()];
        rec.extend(r.iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v != 0.0 && (v.abs() < 1e-5 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn site_columns(j: usize) -> Vec<String> {
    (0..j).map(|k| format!("s{k}")).collect()
}

/// Sample matrix as CSV: columns `s0..s{J-1}`, plus a trailing `v` column
/// with the scaling draws of scale-mixture ensembles.
pub fn write_samples_csv(path: &Path, header: &CsvHeader, m: &SampleMatrix) -> Result<()> {
    let mut cols = site_columns(m.ncols());
    if m.v_draws().is_some() {
        cols.push("v".into());
    }
    let header = header
        .clone()
        .with("kind", serde_json::to_value(m.kind()).expect("enum serializes"));
    let names: Vec<&str> = cols.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = m
        .rows()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.to_vec();
            if let Some(v) = m.v_draws() {
                row.push(v[i]);
            }
            row
        })
        .collect();
    write_table(path, &header, &names, &rows)
}

/// Reads a sample matrix CSV. A trailing `v` column becomes the scaling
/// draws; all other columns are field values.
pub fn read_samples_csv(path: &Path) -> Result<SampleMatrix> {
    let t = read_numeric_table(path)?;
    let has_v = t.headers.last().is_some_and(|h| h == "v");
    let j = t.headers.len() - usize::from(has_v);
    if j == 0 {
        return Err(input_err(path, Some(1), "no field columns"));
    }
    if t.rows.is_empty() {
        return Err(input_err(path, None, "no rows"));
    }
    let n = t.rows.len();
    let mut values = Vec::with_capacity(n * j);
    let mut v = Vec::new();
    for (line, r) in &t.rows {
        values.extend_from_slice(&r[..j]);
        if has_v {
            if !(r[j] > 0.0) {
                return Err(input_err(path, Some(*line), "scaling draw must be positive"));
            }
            v.push(r[j]);
        }
    }
    SampleMatrix::new(n, j, values, has_v.then_some(v))
}

/// `SMX1` block: magic, `u32` rows, `u32` columns, then `f64` values in
/// row-major order, all little-endian.
pub fn write_samples_binary(path: &Path, m: &SampleMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_binary_to(&mut out, m)?;
    out.flush()?;
    Ok(())
}

pub fn write_binary_to<W: Write>(out: &mut W, m: &SampleMatrix) -> Result<()> {
    let n = u32::try_from(m.nrows()).map_err(|_| Error::Size("more than u32::MAX rows".into()))?;
    let j = u32::try_from(m.ncols()).map_err(|_| Error::Size("more than u32::MAX columns".into()))?;
    out.write_all(SMX_MAGIC)?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&j.to_le_bytes())?;
    for v in m.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_samples_binary(path: &Path) -> Result<SampleMatrix> {
    let mut buf = Vec::new();
    BufReader::new(open(path)?).read_to_end(&mut buf)?;
    parse_binary(&buf).map_err(|e| input_err(path, None, e))
}

pub fn parse_binary(buf: &[u8]) -> std::result::Result<SampleMatrix, String> {
    if buf.len() < 12 || &buf[..4] != SMX_MAGIC {
        return Err("not an SMX1 file".into());
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let j = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(j)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(12))
        .ok_or("size overflow")?;
    if buf.len() != expected {
        return Err(format!("expected {expected} bytes for {n}x{j}, found {}", buf.len()));
    }
    let values = buf[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SampleMatrix::new(n, j, values, None).map_err(|e| e.to_string())
}

/// Mixture as CSV with columns `weight,shape,scale`.
pub fn write_mixture(path: &Path, header: &CsvHeader, mix: &GammaMixture) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..mix.n_components())
        .map(|s| vec![mix.weights()[s], mix.shapes()[s], mix.scales()[s]])
        .collect();
    write_table(path, header, &["weight", "shape", "scale"], &rows)
}

/// Reads a mixture; it must have unit mean.
pub fn read_mixture(path: &Path) -> Result<GammaMixture> {
    let t = read_numeric_table(path)?;
    if t.headers != ["weight", "shape", "scale"] {
        return Err(input_err(path, Some(1), "mixture table needs columns weight,shape,scale"));
    }
    let col = |k: usize| t.rows.iter().map(|(_, r)| r[k]).collect::<Vec<_>>();
    GammaMixture::new(col(0), col(1), col(2)).map_err(|e| input_err(path, None, e))
}
