//! Conversion of public dumps into the raw container.
//!
//! Accepted inputs: `.npz` archives holding a `frames×nodes[×channels]`
//! array (by default under the key `data`), the same array as a bare `.npy`
//! file, or a CSV table with one row per frame and one column per node.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use m3net::{Error, RawSeries, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Npz,
    Npy,
    Csv,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "npz" => Ok(Self::Npz),
            "npy" => Ok(Self::Npy),
            "csv" | "txt" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        Self::parse(ext)
            .map_err(|_| Error::Config(format!("cannot infer input format of {} (use --format)", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub format: Option<Format>,
    pub key: String,
    /// Leading channels kept; channel 0 must be flow.
    pub channels: usize,
    pub interval_minutes: u16,
    pub start_weekday: u8,
    pub name: Option<String>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            format: None,
            key: "data".into(),
            channels: 1,
            interval_minutes: 5,
            start_weekday: 0,
            name: None,
        }
    }
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DatasetNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Decodes an `.npy` stream of any real or integer dtype to `f64`.
fn read_npy<R: Read>(file: npyz::NpyFile<R>, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape: Vec<usize> = file.shape().iter().map(|&d| d as usize).collect();
    if file.order() != npyz::Order::C {
        return Err(load_err(path, "Fortran-ordered arrays are not supported"));
    }
    let values: std::io::Result<Vec<f64>> = match file.try_data::<f64>() {
        Ok(r) => r.collect(),
        Err(file) => match file.try_data::<f32>() {
            Ok(r) => r.map(|v| v.map(f64::from)).collect(),
            Err(file) => match file.try_data::<i64>() {
                Ok(r) => r.map(|v| v.map(|x| x as f64)).collect(),
                Err(file) => match file.try_data::<i32>() {
                    Ok(r) => r.map(|v| v.map(f64::from)).collect(),
                    Err(file) => {
                        return Err(load_err(path, format!("unsupported dtype {}", file.dtype().descr())))
                    }
                },
            },
        },
    };
    Ok((shape, values.map_err(|e| load_err(path, e))?))
}

fn read_csv(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let mut values = Vec::new();
    let mut cols = None;
    let mut frames = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| load_err(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            // a non-numeric first line is a header
            Err(_) if i == 0 => continue,
            Err(e) => return Err(load_err(path, format!("line {}: {e}", i + 1))),
        };
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(load_err(path, format!("line {} has {} columns, expected {c}", i + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        frames += 1;
    }
    let cols = cols.ok_or_else(|| load_err(path, "no numeric rows"))?;
    Ok((vec![frames, cols], values))
}

/// Reads `input` into a series, keeping the first `opts.channels` channels.
pub fn convert(input: &Path, opts: &ConvertOptions) -> Result<RawSeries> {
    let format = match opts.format {
        Some(f) => f,
        None => Format::from_path(input)?,
    };
    let (shape, values) = match format {
        Format::Csv => read_csv(input)?,
        Format::Npy => {
            let file = npyz::NpyFile::new(BufReader::new(open(input)?)).map_err(|e| load_err(input, e))?;
            read_npy(file, input)?
        }
        Format::Npz => {
            open(input)?;
            let mut archive = npyz::npz::NpzArchive::open(input).map_err(|e| load_err(input, e))?;
            let names: Vec<String> = archive.array_names().map(str::to_string).collect();
            let file = archive
                .by_name(&opts.key)
                .map_err(|e| load_err(input, e))?
                .ok_or_else(|| load_err(input, format!("no array `{}` (found {names:?})", opts.key)))?;
            read_npy(file, input)?
        }
    };
    let (frames, nodes, channels) = match shape.as_slice() {
        [t, n] => (*t, *n, 1),
        [t, n, c] => (*t, *n, *c),
        other => return Err(load_err(input, format!("expected frames×nodes[×channels], got shape {other:?}"))),
    };
    if opts.channels == 0 || opts.channels > channels {
        return Err(Error::Config(format!(
            "cannot keep {} channels of an input with {channels}",
            opts.channels
        )));
    }
    let keep = opts.channels;
    let mut data = Vec::with_capacity(frames * nodes * keep);
    for cell in values.chunks(channels) {
        data.extend(cell[..keep].iter().map(|&v| v as f32));
    }
    let tensor = Tensor::new(&[frames, nodes, keep], data).map_err(|e| load_err(input, e))?;
    let name = opts.name.clone().unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    RawSeries::new(name, tensor, opts.interval_minutes, opts.start_weekday)
}
