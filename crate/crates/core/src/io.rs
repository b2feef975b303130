//! File formats: numeric CSV matrices, dataset manifests, fit outputs and
//! interval tables.
//!
//! Floats are written with Rust's shortest round-trip formatting so that
//! identical runs give identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::config::KeyValues;
use crate::datagen::{Dataset, Scenario};
use crate::error::{Error, Result};
use crate::inference::{InferenceMode, InferenceReport};
use crate::protocol::TraceRecord;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RESPONSE_FILE: &str = "response.csv";
pub const TRUTH_FILE: &str = "beta0.csv";
pub const BETA_HAT_FILE: &str = "beta_hat.csv";
pub const Z_FINAL_FILE: &str = "z_final.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "fit_summary.txt";

pub const TRACE_HEADER: [&str; 5] = ["iter", "dql", "est_err", "alg_err", "consensus_dev"];
pub const BETA_HAT_HEADER: [&str; 3] = ["node", "coef_index", "value"];
pub const INTERVAL_HEADER: [&str; 7] = [
    "node",
    "coef_index",
    "estimate",
    "lower",
    "upper",
    "mode",
    "level",
];

pub fn machine_file(j: usize) -> String {
    format!("machine_{}.csv", j + 1)
}

/// A numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub data: DMatrix<f64>,
}

/// Parses a headed CSV in which every data field is a finite number.
pub fn parse_matrix_csv(reader: impl Read, source: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(source, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::parse(
            1,
            format!("{}: missing header row", source.display()),
        ));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(source, e))?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::parse(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(line, format!("'{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite value '{field}'")));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(Table {
        data: DMatrix::from_row_slice(rows, header.len(), &values),
        header,
    })
}

pub fn read_matrix_csv(path: &Path) -> Result<Table> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(std::io::BufReader::new(file), path)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes rows of pre-formatted fields under `header`.
pub fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(create(path)?));
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(path: &Path, header: &[String], data: &DMatrix<f64>) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::Structural(format!(
            "{} header names for {} columns",
            header.len(),
            data.ncols()
        )));
    }
    let names: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        path,
        &names,
        data.row_iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Dataset manifest: the machine files with their column counts plus the
/// generating parameters when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n: usize,
    pub response: String,
    pub machines: Vec<(String, usize)>,
    pub truth: Option<String>,
    pub seed: Option<u64>,
    /// Remaining `key = value` entries, in file order.
    pub params: Vec<(String, String)>,
}

impl Manifest {
    pub fn p(&self) -> usize {
        self.machines.iter().map(|(_, c)| c).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# dsgcqr dataset manifest\n");
        s += &format!("n = {}\n", self.n);
        if let Some(seed) = self.seed {
            s += &format!("seed = {seed}\n");
        }
        s += &format!("response = {}\n", self.response);
        if let Some(t) = &self.truth {
            s += &format!("truth = {t}\n");
        }
        for (file, cols) in &self.machines {
            s += &format!("machine = {file} {cols}\n");
        }
        for (k, v) in &self.params {
            s += &format!("{k} = {v}\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse_with(text, |k| k == "machine")?;
        let mut manifest = Manifest {
            n: 0,
            response: String::new(),
            machines: Vec::new(),
            truth: None,
            seed: None,
            params: Vec::new(),
        };
        let mut have_n = false;
        for entry in kv.entries() {
            let (line, value) = (entry.line, entry.value.as_str());
            match entry.key.as_str() {
                "n" => {
                    manifest.n = value
                        .parse()
                        .map_err(|_| Error::parse(line, format!("bad sample size '{value}'")))?;
                    have_n = true;
                }
                "seed" => {
                    manifest.seed = Some(
                        value
                            .parse()
                            .map_err(|_| Error::parse(line, format!("bad seed '{value}'")))?,
                    )
                }
                "response" => manifest.response = check_file_name(value, line)?,
                "truth" => manifest.truth = Some(check_file_name(value, line)?),
                "machine" => {
                    let mut parts = value.split_whitespace();
                    let (Some(file), Some(cols), None) = (parts.next(), parts.next(), parts.next())
                    else {
                        return Err(Error::parse(
                            line,
                            "machine entries need a file name and a column count",
                        ));
                    };
                    let cols: usize =
                        cols.parse().ok().filter(|c| *c > 0).ok_or_else(|| {
                            Error::parse(line, format!("bad column count '{cols}'"))
                        })?;
                    manifest.machines.push((check_file_name(file, line)?, cols));
                }
                _ => manifest
                    .params
                    .push((entry.key.clone(), entry.value.clone())),
            }
        }
        if !have_n || manifest.n == 0 {
            return Err(Error::parse(0, "manifest lacks a positive 'n'"));
        }
        if manifest.response.is_empty() {
            return Err(Error::parse(0, "manifest lacks 'response'"));
        }
        if manifest.machines.is_empty() {
            return Err(Error::parse(0, "manifest lists no machines"));
        }
        Ok(manifest)
    }
}

/// Manifest file names are plain names inside the dataset directory.
fn check_file_name(name: &str, line: usize) -> Result<String> {
    let ok = !name.is_empty()
        && !name.contains(['/', '\\'])
        && name != "."
        && name != ".."
        && name.chars().all(|c| !c.is_control());
    if ok {
        Ok(name.to_owned())
    } else {
        Err(Error::parse(
            line,
            format!("'{name}' is not a plain file name"),
        ))
    }
}

/// A dataset loaded from disk, with the columns of all machines concatenated.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub manifest: Manifest,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta0: Option<DVector<f64>>,
    pub partition: Vec<std::ops::Range<usize>>,
}

/// Writes the per-machine CSVs, the response, the true coefficients and the
/// manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, data: &Dataset, scenario: &Scenario) -> Result<PathBuf> {
    let mut machines = Vec::new();
    for (j, r) in data.partition.iter().enumerate() {
        let header: Vec<String> = (1..=r.len()).map(|k| format!("x{k}")).collect();
        write_matrix_csv(&dir.join(machine_file(j)), &header, &data.block(j))?;
        machines.push((machine_file(j), r.len()));
    }
    write_matrix_csv(
        &dir.join(RESPONSE_FILE),
        &["y".into()],
        &DMatrix::from_column_slice(data.n(), 1, data.y.as_slice()),
    )?;
    write_matrix_csv(
        &dir.join(TRUTH_FILE),
        &["beta0".into()],
        &DMatrix::from_column_slice(data.beta0.len(), 1, data.beta0.as_slice()),
    )?;
    let manifest = Manifest {
        n: data.n(),
        response: RESPONSE_FILE.into(),
        machines,
        truth: Some(TRUTH_FILE.into()),
        seed: Some(scenario.seed),
        params: vec![
            ("scenario.p".into(), scenario.p.to_string()),
            ("scenario.m".into(), scenario.m.to_string()),
            ("scenario.tau".into(), scenario.tau.to_string()),
            (
                "scenario.error_kind".into(),
                scenario.error_kind.to_string(),
            ),
            (
                "scenario.innovation".into(),
                scenario.innovation.to_string(),
            ),
            (
                "scenario.covariance".into(),
                scenario.covariance.to_string(),
            ),
            ("scenario.rho".into(), scenario.rho.to_string()),
        ],
    };
    let path = dir.join(MANIFEST_FILE);
    create(&path)?
        .write_all(manifest.to_text().as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from its manifest, checking every file against it.
pub fn read_dataset(manifest_path: &Path) -> Result<LoadedData> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let column = |file: &str, what: &str| -> Result<DVector<f64>> {
        let path = dir.join(file);
        let t = read_matrix_csv(&path)?;
        if t.data.ncols() != 1 {
            return Err(Error::Structural(format!(
                "{} should hold a single {what} column",
                path.display()
            )));
        }
        Ok(t.data.column(0).into_owned())
    };
    let y = column(&manifest.response, "response")?;
    if y.len() != manifest.n {
        return Err(Error::Structural(format!(
            "response has {} rows, manifest says {}",
            y.len(),
            manifest.n
        )));
    }
    let mut x = DMatrix::zeros(manifest.n, manifest.p());
    let mut partition = Vec::new();
    let mut start = 0;
    for (file, cols) in &manifest.machines {
        let path = dir.join(file);
        let t = read_matrix_csv(&path)?;
        if t.data.shape() != (manifest.n, *cols) {
            return Err(Error::Structural(format!(
                "{} is {}x{}, manifest says {}x{}",
                path.display(),
                t.data.nrows(),
                t.data.ncols(),
                manifest.n,
                cols
            )));
        }
        x.columns_mut(start, *cols).copy_from(&t.data);
        partition.push(start..start + cols);
        start += cols;
    }
    let beta0 = match &manifest.truth {
        Some(file) => {
            let b = column(file, "coefficient")?;
            if b.len() != manifest.p() {
                return Err(Error::Structural(format!(
                    "{file} has {} entries for {} columns",
                    b.len(),
                    manifest.p()
                )));
            }
            Some(b)
        }
        None => None,
    };
    Ok(LoadedData {
        manifest,
        x,
        y,
        beta0,
        partition,
    })
}

pub fn write_beta_hat(path: &Path, beta: &[DVector<f64>]) -> Result<()> {
    write_rows(
        path,
        &BETA_HAT_HEADER,
        beta.iter().enumerate().flat_map(|(j, b)| {
            b.iter()
                .enumerate()
                .map(move |(k, v)| vec![(j + 1).to_string(), (k + 1).to_string(), v.to_string()])
        }),
    )
}

/// Reads per-node coefficient blocks; node and coefficient indices must be
/// consecutive from 1.
pub fn read_beta_hat(path: &Path) -> Result<Vec<DVector<f64>>> {
    let t = read_matrix_csv(path)?;
    if t.header != BETA_HAT_HEADER {
        return Err(Error::parse(
            1,
            format!(
                "{}: expected header {}",
                path.display(),
                BETA_HAT_HEADER.join(",")
            ),
        ));
    }
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    for (i, row) in t.data.row_iter().enumerate() {
        let (node, coef) = (row[0], row[1]);
        let line = i + 2;
        let as_index = |v: f64| (v >= 1.0 && v.fract() == 0.0).then_some(v as usize);
        let (Some(node), Some(coef)) = (as_index(node), as_index(coef)) else {
            return Err(Error::parse(line, "indices must be positive integers"));
        };
        if node == blocks.len() + 1 {
            blocks.push(Vec::new());
        } else if node != blocks.len() {
            return Err(Error::parse(line, "node indices must be consecutive"));
        }
        let block = blocks.last_mut().expect("at least one block");
        if coef != block.len() + 1 {
            return Err(Error::parse(
                line,
                "coefficient indices must be consecutive",
            ));
        }
        block.push(row[2]);
    }
    Ok(blocks.into_iter().map(DVector::from_vec).collect())
}

pub fn write_z_final(path: &Path, z: &[DVector<f64>]) -> Result<()> {
    let n = z.first().map_or(0, |v| v.len());
    let header: Vec<String> = (1..=z.len()).map(|j| format!("z{j}")).collect();
    write_matrix_csv(path, &header, &DMatrix::from_fn(n, z.len(), |i, j| z[j][i]))
}

pub fn read_z_final(path: &Path) -> Result<Vec<DVector<f64>>> {
    let t = read_matrix_csv(path)?;
    Ok(t.data.column_iter().map(|c| c.into_owned()).collect())
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_rows(
        path,
        &TRACE_HEADER,
        trace.iter().map(|r| {
            vec![
                r.iter.to_string(),
                opt(r.dql),
                opt(r.est_err),
                opt(r.alg_err),
                r.consensus_dev.to_string(),
            ]
        }),
    )
}

pub fn write_intervals(path: &Path, reports: &[InferenceReport]) -> Result<()> {
    write_rows(
        path,
        &INTERVAL_HEADER,
        reports.iter().flat_map(|r| {
            r.intervals.iter().enumerate().map(move |(k, (lo, hi))| {
                vec![
                    (r.node + 1).to_string(),
                    (k + 1).to_string(),
                    r.estimate[k].to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    r.mode.name().to_owned(),
                    r.level.to_string(),
                ]
            })
        }),
    )
}

pub fn interval_file(mode: InferenceMode) -> String {
    format!("intervals_{}.csv", mode.name())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}
