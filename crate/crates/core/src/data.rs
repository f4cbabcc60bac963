//! Raw series ingestion, windowing, min-max normalisation and train/test splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A multivariate series as read from disk, `steps × d`, row-major by time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub steps: usize,
    pub d: usize,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub channel_names: Vec<String>,
}

impl RawSeries {
    pub fn new(d: usize, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        ensure!(d >= 1, InvalidArgument, "series needs at least one channel");
        ensure!(
            !values.is_empty() && values.len() % d == 0,
            Shape,
            "{} values do not fill rows of {d} channels",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "series contains non-finite values"
        );
        let steps = values.len() / d;
        let missing = vec![false; values.len()];
        Ok(Self {
            steps,
            d,
            values,
            missing,
            channel_names,
        })
    }

    pub fn get(&self, step: usize, channel: usize) -> f64 {
        self.values[step * self.d + channel]
    }

    pub fn is_missing(&self, step: usize, channel: usize) -> bool {
        self.missing[step * self.d + channel]
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }
}

/// A `d × m` window, stored channel-major: `values[c * m + t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub d: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl SeriesWindow {
    pub fn new(d: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(d >= 1, Shape, "window needs at least one channel");
        ensure!(m >= 2, Shape, "window length must be at least 2, got {m}");
        ensure!(
            values.len() == d * m,
            Shape,
            "expected {} values for a {d}x{m} window, got {}",
            d * m,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            NonFinite,
            "window values"
        );
        Ok(Self { d, m, values })
    }

    pub fn constant(d: usize, m: usize, value: f64) -> Self {
        Self {
            d,
            m,
            values: vec![value; d * m],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.m..(c + 1) * self.m]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let m = self.m;
        &mut self.values[c * m..(c + 1) * m]
    }

    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.values[c * self.m + t]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    pub fn check_shape(&self, d: usize, m: usize) -> Result<()> {
        ensure!(
            self.d == d && self.m == m,
            Shape,
            "window is {}x{}, expected {d}x{m}",
            self.d,
            self.m
        );
        Ok(())
    }
}

/// Column selection for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub delimiter: char,
    pub missing_token: String,
    pub has_header: bool,
    /// Columns to read; `None` reads every column as numeric.
    pub columns: Option<Vec<ColumnRef>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            delimiter: ',',
            missing_token: "?".to_string(),
            has_header: false,
            columns: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(BufReader::new(file), schema)
}

pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<RawSeries> {
    ensure!(
        schema.delimiter.is_ascii(),
        InvalidArgument,
        "delimiter must be a single ASCII character"
    );
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut records = rdr.records();
    let mut header: Option<Vec<String>> = None;
    let mut row_offset = 0;
    if schema.has_header {
        match records.next() {
            Some(rec) => {
                let rec = rec.map_err(|e| Error::Parse {
                    row: 0,
                    msg: e.to_string(),
                })?;
                header = Some(rec.iter().map(str::to_string).collect());
                row_offset = 1;
            }
            None => {
                return Err(Error::Parse {
                    row: 0,
                    msg: "no rows".into(),
                })
            }
        }
    }

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut selected: Option<Vec<usize>> = None;
    let mut channel_names = Vec::new();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut steps = 0;

    for (i, rec) in records.enumerate() {
        let row = i + row_offset;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row,
                msg: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        if selected.is_none() {
            let (cols, names) = resolve_columns(schema, header.as_deref(), w)?;
            selected = Some(cols);
            channel_names = names;
        }
        for &c in selected.as_ref().unwrap() {
            let field = &rec[c];
            if field == schema.missing_token || field.is_empty() {
                values.push(0.0);
                missing.push(true);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("column {c}: `{field}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        msg: format!("column {c}: non-finite value"),
                    });
                }
                values.push(v);
                missing.push(false);
            }
        }
        steps += 1;
    }

    if steps == 0 {
        return Err(Error::Parse {
            row: row_offset,
            msg: "no rows".into(),
        });
    }
    let d = channel_names.len();
    Ok(RawSeries {
        steps,
        d,
        values,
        missing,
        channel_names,
    })
}

fn resolve_columns(
    schema: &CsvSchema,
    header: Option<&[String]>,
    width: usize,
) -> Result<(Vec<usize>, Vec<String>)> {
    let cols: Vec<usize> = match &schema.columns {
        None => (0..width).collect(),
        Some(refs) => refs
            .iter()
            .map(|r| match r {
                ColumnRef::Index(i) if *i < width => Ok(*i),
                ColumnRef::Index(i) => Err(Error::InvalidArgument(format!(
                    "column index {i} out of range for {width} columns"
                ))),
                ColumnRef::Name(name) => header
                    .and_then(|h| h.iter().position(|n| n == name))
                    .ok_or_else(|| Error::InvalidArgument(format!("no column named `{name}`"))),
            })
            .collect::<Result<_>>()?,
    };
    ensure!(
        !cols.is_empty(),
        InvalidArgument,
        "schema selects no numeric columns"
    );
    let names = cols
        .iter()
        .map(|&c| {
            header
                .and_then(|h| h.get(c).cloned())
                .unwrap_or_else(|| format!("ch{c}"))
        })
        .collect();
    Ok((cols, names))
}

/// Fills missing entries by linear interpolation in time; gaps at either end take
/// the nearest observed value.
pub fn impute(raw: &RawSeries) -> Result<RawSeries> {
    let mut out = raw.clone();
    for c in 0..raw.d {
        let observed: Vec<usize> = (0..raw.steps).filter(|&t| !raw.is_missing(t, c)).collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            let name = raw
                .channel_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("#{c}"));
            return Err(Error::InvalidArgument(format!(
                "channel `{name}` is entirely missing"
            )));
        };
        for t in 0..first {
            out.values[t * raw.d + c] = raw.get(first, c);
        }
        for t in last + 1..raw.steps {
            out.values[t * raw.d + c] = raw.get(last, c);
        }
        for pair in observed.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (vlo, vhi) = (raw.get(lo, c), raw.get(hi, c));
            for t in lo + 1..hi {
                let w = (t - lo) as f64 / (hi - lo) as f64;
                out.values[t * raw.d + c] = vlo + w * (vhi - vlo);
            }
        }
    }
    out.missing.iter_mut().for_each(|m| *m = false);
    Ok(out)
}

/// Number of windows `window` produces.
pub fn window_count(total_steps: usize, m: usize, stride: usize) -> usize {
    if m > total_steps || stride == 0 {
        0
    } else {
        (total_steps - m) / stride + 1
    }
}

pub fn window(raw: &RawSeries, m: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    ensure!(stride >= 1, InvalidArgument, "stride must be positive");
    ensure!(m >= 2, InvalidArgument, "window length must be at least 2");
    ensure!(
        m <= raw.steps,
        InvalidArgument,
        "window length {m} exceeds series length {}",
        raw.steps
    );
    ensure!(
        !raw.has_missing(),
        InvalidArgument,
        "series has missing values; impute before windowing"
    );
    let count = window_count(raw.steps, m, stride);
    Ok((0..count)
        .map(|k| {
            let offset = k * stride;
            let mut values = Vec::with_capacity(raw.d * m);
            for c in 0..raw.d {
                values.extend((offset..offset + m).map(|t| raw.get(t, c)));
            }
            SeriesWindow { d: raw.d, m, values }
        })
        .collect())
}

const SCHEME: &str = "min-max";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scheme: String,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Stats under which normalisation is the identity map.
    pub fn identity(d: usize) -> Self {
        Self {
            scheme: SCHEME.to_string(),
            min: vec![-1.0; d],
            max: vec![1.0; d],
        }
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn check(&self, w: &SeriesWindow) -> Result<()> {
        ensure!(
            w.d == self.channels(),
            Shape,
            "normalisation stats have {} channels, window has {}",
            self.channels(),
            w.d
        );
        Ok(())
    }
}

pub fn normalize_fit(train: &[SeriesWindow]) -> Result<NormStats> {
    ensure!(
        !train.is_empty(),
        InvalidArgument,
        "cannot fit normalisation on an empty set"
    );
    let d = train[0].d;
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for w in train {
        ensure!(w.d == d, Shape, "training windows disagree on channel count");
        for c in 0..d {
            for &v in w.channel(c) {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    Ok(NormStats {
        scheme: SCHEME.to_string(),
        min,
        max,
    })
}

/// Maps each channel affinely from `[min, max]` onto `[-1, 1]`; flat channels map to 0.
pub fn normalize_apply(w: &SeriesWindow, stats: &NormStats) -> Result<SeriesWindow> {
    stats.check(w)?;
    let mut out = w.clone();
    for c in 0..w.d {
        let (lo, hi) = (stats.min[c], stats.max[c]);
        let span = hi - lo;
        for v in out.channel_mut(c) {
            *v = if span > 0.0 {
                2.0 * (*v - lo) / span - 1.0
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

pub fn denormalize(w: &SeriesWindow, stats: &NormStats) -> Result<SeriesWindow> {
    stats.check(w)?;
    let mut out = w.clone();
    for c in 0..w.d {
        let (lo, hi) = (stats.min[c], stats.max[c]);
        let span = hi - lo;
        for v in out.channel_mut(c) {
            *v = if span > 0.0 {
                (*v + 1.0) * 0.5 * span + lo
            } else {
                lo
            };
        }
    }
    Ok(out)
}

pub fn normalize_all(ws: &[SeriesWindow], stats: &NormStats) -> Result<Vec<SeriesWindow>> {
    ws.iter().map(|w| normalize_apply(w, stats)).collect()
}

pub fn denormalize_all(ws: &[SeriesWindow], stats: &NormStats) -> Result<Vec<SeriesWindow>> {
    ws.iter().map(|w| denormalize(w, stats)).collect()
}

/// Train/test partition. Indices refer to positions in the windowed input, which
/// are source offsets divided by the stride.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

pub fn split(windows: &[SeriesWindow], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    ensure!(
        test_fraction > 0.0 && test_fraction < 1.0,
        InvalidArgument,
        "test fraction must lie in (0, 1), got {test_fraction}"
    );
    let n = windows.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    ensure!(
        n_test >= 1 && n_test < n,
        InvalidArgument,
        "{n} windows cannot be split with test fraction {test_fraction}"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = idx.split_at(n_test);
    let (mut test_idx, mut train_idx) = (test_idx.to_vec(), train_idx.to_vec());
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| windows[i].clone()).collect(),
        test: test_idx.iter().map(|&i| windows[i].clone()).collect(),
        train_idx,
        test_idx,
        seed,
    })
}

const BLOB_MAGIC: &[u8; 4] = b"LFTS";
const BLOB_VERSION: u32 = 1;

/// Serialises windows as `LFTS | version | count | d | m` (little-endian u32s)
/// followed by the f64 values of each window in channel-major order.
pub fn encode_windows(windows: &[SeriesWindow]) -> Result<Vec<u8>> {
    let (d, m) = windows.first().map(SeriesWindow::shape).unwrap_or((0, 0));
    let mut buf = Vec::with_capacity(20 + windows.len() * d * m * 8);
    buf.extend_from_slice(BLOB_MAGIC);
    for v in [BLOB_VERSION, windows.len() as u32, d as u32, m as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for w in windows {
        w.check_shape(d, m)?;
        for v in &w.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_windows(bytes: &[u8]) -> Result<Vec<SeriesWindow>> {
    let bad = |msg: &str| Error::InvalidArgument(format!("window blob: {msg}"));
    if bytes.len() < 20 || &bytes[..4] != BLOB_MAGIC {
        return Err(bad("missing LFTS header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, count, d, m) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != BLOB_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let expected = 20 + count * d * m * 8;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if count == 0 {
        return Ok(Vec::new());
    }
    floats
        .chunks_exact(d * m)
        .map(|chunk| SeriesWindow::new(d, m, chunk.to_vec()))
        .collect()
}

pub fn write_windows(path: impl AsRef<Path>, windows: &[SeriesWindow]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_windows(windows)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_windows(path: impl AsRef<Path>) -> Result<Vec<SeriesWindow>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_windows(&bytes)
}

/// Long-format CSV: `sample,channel,t,value`.
pub fn write_windows_csv(path: impl AsRef<Path>, windows: &[SeriesWindow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "sample,channel,t,value").map_err(io)?;
    for (i, win) in windows.iter().enumerate() {
        for c in 0..win.d {
            for (t, v) in win.channel(c).iter().enumerate() {
                writeln!(w, "{i},{c},{t},{v}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
