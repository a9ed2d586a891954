//! Timeseries, pathline and endpoint records and the three concurrent
//! output protocols.
//!
//! All text outputs share one schema: whitespace separated columns
//! `time_index time particle_id group cell layer x y z xloc yloc zloc`
//! (pathlines append `segment`), floats with 17 significant digits, and
//! `#` header lines carrying the format version and the config digest.
//! `layer` counts from 1 at the top of the model.
//!
//! The consolidated protocol stages records in per-worker binary files
//! (`<base>.ts.w<k>`): a 16 byte header (`PTRACETS`, u32 version, u32 zero)
//! followed by 96 byte little-endian records in text-schema order, all
//! fields 64-bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::Grid;
use crate::scheduler::WorkerObserver;
use crate::tracking::{Particle, ParticleStatus, TrackObserver};

pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 8] = b"PTRACETS";
pub const BINARY_HEADER_LEN: u64 = 16;
pub const RECORD_BYTES: usize = 96;

pub const TIMESERIES_FILE: &str = "timeseries.dat";
pub const ENDPOINT_FILE: &str = "endpoint.dat";
const TIMESERIES_BASE: &str = "timeseries";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: undecodable record at byte offset {offset}: {msg}")]
    Binary { path: PathBuf, offset: u64, msg: String },
    #[error("pathline output supports only the parallel_exclusive protocol")]
    PathlineProtocol,
    #[error("worker {worker} out of range for {workers} output units")]
    Worker { worker: usize, workers: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    CriticalSingle,
    Consolidated,
    ParallelExclusive,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [
        ProtocolKind::CriticalSingle,
        ProtocolKind::Consolidated,
        ProtocolKind::ParallelExclusive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::CriticalSingle => "critical_single",
            ProtocolKind::Consolidated => "consolidated",
            ProtocolKind::ParallelExclusive => "parallel_exclusive",
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown output protocol `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeseriesRecord {
    pub time_index: u64,
    pub time: f64,
    pub particle_id: u64,
    pub group: u64,
    pub cell: u64,
    pub layer: u64,
    pub position: [f64; 3],
    pub local: [f64; 3],
}

impl TimeseriesRecord {
    pub fn from_particle(grid: &Grid, time_index: u64, p: &Particle) -> Self {
        let (_, _, k) = grid.ijk(p.cell);
        TimeseriesRecord {
            time_index,
            time: p.time,
            particle_id: p.id,
            group: u64::from(p.group),
            cell: p.cell.0 as u64,
            layer: (grid.nz() - k) as u64,
            position: p.position,
            local: p.local,
        }
    }

    /// Sort key used by equivalence checks.
    pub fn key(&self) -> (u64, u64) {
        (self.particle_id, self.time_index)
    }

    pub fn write_text(&self, out: &mut String) {
        let _ = write!(
            out,
            "{} {:.16e} {} {} {} {}",
            self.time_index, self.time, self.particle_id, self.group, self.cell, self.layer
        );
        for v in self.position.iter().chain(&self.local) {
            let _ = write!(out, " {v:.16e}");
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(256);
        self.write_text(&mut s);
        s
    }

    pub fn to_bytes(&self) -> [u8; RECORD_BYTES] {
        let mut b = [0u8; RECORD_BYTES];
        let words: [u64; 12] = [
            self.time_index,
            self.time.to_bits(),
            self.particle_id,
            self.group,
            self.cell,
            self.layer,
            self.position[0].to_bits(),
            self.position[1].to_bits(),
            self.position[2].to_bits(),
            self.local[0].to_bits(),
            self.local[1].to_bits(),
            self.local[2].to_bits(),
        ];
        for (chunk, w) in b.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8; RECORD_BYTES]) -> Self {
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        let f = |i: usize| f64::from_bits(w(i));
        TimeseriesRecord {
            time_index: w(0),
            time: f(1),
            particle_id: w(2),
            group: w(3),
            cell: w(4),
            layer: w(5),
            position: [f(6), f(7), f(8)],
            local: [f(9), f(10), f(11)],
        }
    }

    fn parse_fields(fields: &[&str]) -> Result<Self, String> {
        if fields.len() != 12 {
            return Err(format!("expected 12 columns, found {}", fields.len()));
        }
        let u = |i: usize| fields[i].parse::<u64>().map_err(|e| format!("column {}: {e}", i + 1));
        let f = |i: usize| fields[i].parse::<f64>().map_err(|e| format!("column {}: {e}", i + 1));
        Ok(TimeseriesRecord {
            time_index: u(0)?,
            time: f(1)?,
            particle_id: u(2)?,
            group: u(3)?,
            cell: u(4)?,
            layer: u(5)?,
            position: [f(6)?, f(7)?, f(8)?],
            local: [f(9)?, f(10)?, f(11)?],
        })
    }
}

impl FromStr for TimeseriesRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        Self::parse_fields(&fields)
    }
}

/// A pathline vertex: a timeseries-schema row plus the segment counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathlineRecord {
    pub point: TimeseriesRecord,
    pub segment: u64,
}

impl PathlineRecord {
    pub fn to_text(&self) -> String {
        let mut s = self.point.to_text();
        let _ = write!(s, " {}", self.segment);
        s
    }
}

impl FromStr for PathlineRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 13 {
            return Err(format!("expected 13 columns, found {}", fields.len()));
        }
        Ok(PathlineRecord {
            point: TimeseriesRecord::parse_fields(&fields[..12])?,
            segment: fields[12].parse().map_err(|e| format!("column 13: {e}"))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointRecord {
    pub particle_id: u64,
    pub group: u64,
    pub status: ParticleStatus,
    pub initial_time: f64,
    pub initial_cell: u64,
    pub initial_position: [f64; 3],
    pub final_time: f64,
    pub final_cell: u64,
    pub final_position: [f64; 3],
}

impl EndpointRecord {
    pub fn from_particle(p: &Particle) -> Self {
        EndpointRecord {
            particle_id: p.id,
            group: u64::from(p.group),
            status: p.status,
            initial_time: p.release_time,
            initial_cell: p.initial_cell.0 as u64,
            initial_position: p.initial_position,
            final_time: p.time,
            final_cell: p.cell.0 as u64,
            final_position: p.position,
        }
    }

    pub fn to_text(&self) -> String {
        let [x0, y0, z0] = self.initial_position;
        let [x1, y1, z1] = self.final_position;
        format!(
            "{} {} {} {:.16e} {} {x0:.16e} {y0:.16e} {z0:.16e} {:.16e} {} {x1:.16e} {y1:.16e} {z1:.16e}",
            self.particle_id,
            self.group,
            self.status,
            self.initial_time,
            self.initial_cell,
            self.final_time,
            self.final_cell,
        )
    }
}

impl FromStr for EndpointRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 13 {
            return Err(format!("expected 13 columns, found {}", f.len()));
        }
        let u = |i: usize| f[i].parse::<u64>().map_err(|e| format!("column {}: {e}", i + 1));
        let x = |i: usize| f[i].parse::<f64>().map_err(|e| format!("column {}: {e}", i + 1));
        Ok(EndpointRecord {
            particle_id: u(0)?,
            group: u(1)?,
            status: f[2].parse()?,
            initial_time: x(3)?,
            initial_cell: u(4)?,
            initial_position: [x(5)?, x(6)?, x(7)?],
            final_time: x(8)?,
            final_cell: u(9)?,
            final_position: [x(10)?, x(11)?, x(12)?],
        })
    }
}

/// Hex SHA-256 of a canonical configuration description.
pub fn config_digest(canonical: &str) -> String {
    let hash = Sha256::digest(canonical.as_bytes());
    let mut s = String::with_capacity(64);
    for b in hash.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn header(kind: &str, digest: &str, columns: &str) -> String {
    format!("# ptrace {kind} v{FORMAT_VERSION}\n# config {digest}\n# {columns}\n")
}

const TS_COLUMNS: &str = "time_index time particle_id group cell layer x y z xloc yloc zloc";
const PL_COLUMNS: &str = "time_index time particle_id group cell layer x y z xloc yloc zloc segment";
const EP_COLUMNS: &str = "particle_id group status initial_time initial_cell x0 y0 z0 final_time final_cell x y z";

/// Keeps per-worker units on separate cache lines.
#[repr(align(128))]
#[derive(Debug)]
struct Padded<T>(T);

#[derive(Debug)]
struct Unit {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl Unit {
    fn create(path: PathBuf, header: &[u8]) -> Result<Unit, OutputError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut writer = BufWriter::with_capacity(1 << 16, file);
        writer.write_all(header).map_err(io_err(&path))?;
        Ok(Unit { path, writer })
    }
}

fn binary_header() -> [u8; BINARY_HEADER_LEN as usize] {
    let mut h = [0u8; BINARY_HEADER_LEN as usize];
    h[..8].copy_from_slice(BINARY_MAGIC);
    h[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Timeseries,
    Pathline,
}

/// An opened output protocol for one simulation.
#[derive(Debug)]
pub struct OutputProtocol {
    kind: ProtocolKind,
    stream: Stream,
    dir: PathBuf,
    workers: usize,
    /// Single text unit (critical_single) or consolidation target.
    single: Option<Mutex<Unit>>,
    units: Vec<Padded<Mutex<Unit>>>,
}

impl OutputProtocol {
    /// Opens timeseries output in `dir` for `workers` workers.
    pub fn open_timeseries(
        kind: ProtocolKind,
        dir: &Path,
        workers: usize,
        digest: &str,
    ) -> Result<OutputProtocol, OutputError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let text_header = header("timeseries", digest, TS_COLUMNS);
        let mut single = None;
        let mut units = Vec::new();
        match kind {
            ProtocolKind::CriticalSingle | ProtocolKind::Consolidated => {
                single = Some(Mutex::new(Unit::create(
                    dir.join(TIMESERIES_FILE),
                    text_header.as_bytes(),
                )?));
            }
            ProtocolKind::ParallelExclusive => {}
        }
        for w in 0..workers {
            match kind {
                ProtocolKind::CriticalSingle => {}
                ProtocolKind::Consolidated => units.push(Padded(Mutex::new(Unit::create(
                    binary_unit_path(dir, w),
                    &binary_header(),
                )?))),
                ProtocolKind::ParallelExclusive => units.push(Padded(Mutex::new(Unit::create(
                    dir.join(format!("{TIMESERIES_BASE}.w{w}.dat")),
                    text_header.as_bytes(),
                )?))),
            }
        }
        Ok(OutputProtocol {
            kind,
            stream: Stream::Timeseries,
            dir: dir.to_path_buf(),
            workers,
            single,
            units,
        })
    }

    /// Opens pathline output; only the parallel_exclusive protocol exists.
    pub fn open_pathline(
        kind: ProtocolKind,
        dir: &Path,
        workers: usize,
        digest: &str,
    ) -> Result<OutputProtocol, OutputError> {
        if kind != ProtocolKind::ParallelExclusive {
            return Err(OutputError::PathlineProtocol);
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let h = header("pathline", digest, PL_COLUMNS);
        let units = (0..workers)
            .map(|w| Unit::create(dir.join(format!("pathline.w{w}.dat")), h.as_bytes()).map(|u| Padded(Mutex::new(u))))
            .collect::<Result<_, _>>()?;
        Ok(OutputProtocol {
            kind,
            stream: Stream::Pathline,
            dir: dir.to_path_buf(),
            workers,
            single: None,
            units,
        })
    }

    pub fn kind(&self) -> ProtocolKind {
        self.kind
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Every file a reader needs to decode this protocol's records.
    pub fn files(&self) -> Vec<PathBuf> {
        match (self.kind, self.stream) {
            (ProtocolKind::ParallelExclusive, _) => self
                .units
                .iter()
                .map(|u| u.0.lock().unwrap_or_else(|e| e.into_inner()).path.clone())
                .collect(),
            _ => vec![self.dir.join(TIMESERIES_FILE)],
        }
    }

    fn unit(&self, worker: usize) -> Result<&Mutex<Unit>, OutputError> {
        self.units.get(worker).map(|u| &u.0).ok_or(OutputError::Worker {
            worker,
            workers: self.workers,
        })
    }

    fn append(unit: &Mutex<Unit>, bytes: &[u8]) -> Result<(), OutputError> {
        let mut u = unit.lock().unwrap_or_else(|e| e.into_inner());
        let Unit { path, writer } = &mut *u;
        writer.write_all(bytes).map_err(io_err(path))
    }

    /// Writes one timeseries record on behalf of `worker`.
    pub fn write_record(&self, worker: usize, rec: &TimeseriesRecord) -> Result<(), OutputError> {
        match self.kind {
            ProtocolKind::CriticalSingle => {
                let mut line = rec.to_text();
                line.push('\n');
                // The exclusion region spans exactly one encode + append.
                let single = self.single.as_ref().expect("critical unit");
                Self::append(single, line.as_bytes())
            }
            ProtocolKind::Consolidated => Self::append(self.unit(worker)?, &rec.to_bytes()),
            ProtocolKind::ParallelExclusive => {
                let mut line = rec.to_text();
                line.push('\n');
                Self::append(self.unit(worker)?, line.as_bytes())
            }
        }
    }

    pub fn write_pathline(&self, worker: usize, rec: &PathlineRecord) -> Result<(), OutputError> {
        let mut line = rec.to_text();
        line.push('\n');
        Self::append(self.unit(worker)?, line.as_bytes())
    }

    /// Flushes every unit (step boundary).
    pub fn flush(&self) -> Result<(), OutputError> {
        for u in self.single.iter().chain(self.units.iter().map(|u| &u.0)) {
            let mut u = u.lock().unwrap_or_else(|e| e.into_inner());
            let Unit { path, writer } = &mut *u;
            writer.flush().map_err(io_err(path))?;
        }
        Ok(())
    }

    /// Merges the worker binary units into the consolidated text file and
    /// resets them. Runs only between particle loops. Returns the number of
    /// merged records; a no-op for the other protocols.
    pub fn consolidate_step(&self, time_index: u64) -> Result<u64, OutputError> {
        if self.kind != ProtocolKind::Consolidated {
            return Ok(0);
        }
        self.flush()?;
        let mut target = self
            .single
            .as_ref()
            .expect("consolidation target")
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        let mut merged = 0;
        let mut line = String::with_capacity(256);
        for unit in &self.units {
            let mut u = unit.0.lock().unwrap_or_else(|e| e.into_inner());
            let path = u.path.clone();
            let records = read_binary(&path)?;
            for (n, rec) in records.iter().enumerate() {
                if rec.time_index != time_index {
                    return Err(OutputError::Binary {
                        path,
                        offset: BINARY_HEADER_LEN + (n * RECORD_BYTES) as u64,
                        msg: format!("time index {} in step {time_index}", rec.time_index),
                    });
                }
                line.clear();
                rec.write_text(&mut line);
                line.push('\n');
                target.writer.write_all(line.as_bytes()).map_err(io_err(&target.path))?;
            }
            merged += records.len() as u64;
            let file = u.writer.get_mut();
            file.set_len(BINARY_HEADER_LEN).map_err(io_err(&path))?;
            file.seek(SeekFrom::Start(BINARY_HEADER_LEN)).map_err(io_err(&path))?;
        }
        let Unit { path, writer } = &mut *target;
        writer.flush().map_err(io_err(path))?;
        Ok(merged)
    }

    /// Flushes everything and removes the consolidated staging files.
    pub fn finish(self) -> Result<Vec<PathBuf>, OutputError> {
        self.flush()?;
        let files = self.files();
        if self.kind == ProtocolKind::Consolidated {
            for u in &self.units {
                let path = u.0.lock().unwrap_or_else(|e| e.into_inner()).path.clone();
                std::fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        Ok(files)
    }
}

pub fn binary_unit_path(dir: &Path, worker: usize) -> PathBuf {
    dir.join(format!("{TIMESERIES_BASE}.ts.w{worker}"))
}

fn read_binary(path: &Path) -> Result<Vec<TimeseriesRecord>, OutputError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_binary(path, &bytes)
}

fn decode_binary(path: &Path, bytes: &[u8]) -> Result<Vec<TimeseriesRecord>, OutputError> {
    let bad = |offset: u64, msg: String| OutputError::Binary {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < BINARY_HEADER_LEN as usize || &bytes[..8] != BINARY_MAGIC {
        return Err(bad(0, "missing binary header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(8, format!("unsupported version {version}")));
    }
    let body = &bytes[BINARY_HEADER_LEN as usize..];
    if !body.len().is_multiple_of(RECORD_BYTES) {
        let offset = BINARY_HEADER_LEN + (body.len() - body.len() % RECORD_BYTES) as u64;
        return Err(bad(offset, "truncated record".into()));
    }
    Ok(body
        .chunks_exact(RECORD_BYTES)
        .map(|c| TimeseriesRecord::from_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_text_records<T: FromStr<Err = String>>(path: &Path) -> Result<Vec<T>, OutputError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(t.parse().map_err(|msg| OutputError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        })?);
    }
    Ok(out)
}

/// Decodes timeseries records from text or binary files; multiple files give
/// the union in file order.
pub fn decode_timeseries<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<TimeseriesRecord>, OutputError> {
    let mut out = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let mut head = [0u8; 8];
        let n = File::open(path)
            .and_then(|mut f| f.read(&mut head))
            .map_err(io_err(path))?;
        if n == 8 && &head == BINARY_MAGIC {
            out.extend(read_binary(path)?);
        } else {
            out.extend(read_text_records::<TimeseriesRecord>(path)?);
        }
    }
    Ok(out)
}

pub fn decode_pathlines<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<PathlineRecord>, OutputError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_text_records::<PathlineRecord>(p.as_ref())?);
    }
    Ok(out)
}

/// Writes endpoint records in the given order, serially.
pub fn write_endpoint_file(records: &[EndpointRecord], path: &Path, digest: &str) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(header("endpoint", digest, EP_COLUMNS).as_bytes())
        .map_err(io_err(path))?;
    for r in records {
        writeln!(w, "{}", r.to_text()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_endpoint_file(path: &Path) -> Result<Vec<EndpointRecord>, OutputError> {
    read_text_records(path)
}

/// Reads the `# config <digest>` header of an output file.
pub fn read_digest(path: &Path) -> Result<Option<String>, OutputError> {
    let file = File::open(path).map_err(io_err(path))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some(d) = rest.trim().strip_prefix("config ") {
            return Ok(Some(d.trim().to_string()));
        }
    }
    Ok(None)
}

/// Step information shared by all observers of one particle loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based output index when this step ends at an output time.
    pub output_index: Option<u64>,
    /// Index of the tracking step, used for pathline rows.
    pub step: u64,
}

/// Records every particle alive at an output time.
pub struct TimeseriesObserver<'a> {
    protocol: &'a OutputProtocol,
    grid: &'a Grid,
    worker: usize,
    step: StepInfo,
}

impl<'a> TimeseriesObserver<'a> {
    pub fn new(protocol: &'a OutputProtocol, grid: &'a Grid, worker: usize, step: StepInfo) -> Self {
        TimeseriesObserver {
            protocol,
            grid,
            worker,
            step,
        }
    }
}

fn to_io(e: OutputError) -> io::Error {
    match e {
        OutputError::Io { source, .. } => source,
        other => io::Error::other(other.to_string()),
    }
}

impl TrackObserver for TimeseriesObserver<'_> {
    fn time_limit(&mut self, p: &Particle) -> io::Result<u64> {
        let Some(index) = self.step.output_index else {
            return Ok(0);
        };
        let rec = TimeseriesRecord::from_particle(self.grid, index, p);
        self.protocol.write_record(self.worker, &rec).map_err(to_io)?;
        Ok(1)
    }
}

impl WorkerObserver for TimeseriesObserver<'_> {}

/// Records release, every cell transfer and the terminal point.
pub struct PathlineObserver<'a> {
    protocol: &'a OutputProtocol,
    grid: &'a Grid,
    worker: usize,
    step: StepInfo,
}

impl<'a> PathlineObserver<'a> {
    pub fn new(protocol: &'a OutputProtocol, grid: &'a Grid, worker: usize, step: StepInfo) -> Self {
        PathlineObserver {
            protocol,
            grid,
            worker,
            step,
        }
    }

    fn emit(&self, p: &Particle) -> io::Result<u64> {
        let rec = PathlineRecord {
            point: TimeseriesRecord::from_particle(self.grid, self.step.step, p),
            segment: u64::from(p.segments),
        };
        self.protocol.write_pathline(self.worker, &rec).map_err(to_io)?;
        Ok(1)
    }
}

impl TrackObserver for PathlineObserver<'_> {
    fn released(&mut self, p: &Particle) -> io::Result<u64> {
        self.emit(p)
    }

    fn cell_transfer(&mut self, p: &Particle) -> io::Result<u64> {
        self.emit(p)
    }

    fn terminal(&mut self, p: &Particle) -> io::Result<u64> {
        self.emit(p)
    }
}

impl WorkerObserver for PathlineObserver<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::thread;

    fn rec(i: u64, t: u64) -> TimeseriesRecord {
        TimeseriesRecord {
            time_index: t,
            time: t as f64 * 0.1,
            particle_id: i,
            group: i % 3,
            cell: i * 7,
            layer: 1,
            position: [i as f64 / 3.0, 1e-300, -2.5],
            local: [0.0, 1.0, 1.0 / 7.0],
        }
    }

    proptest! {
        #[test]
        fn text_and_binary_round_trip(
            id in any::<u64>(), t in 1u64..1000, x in any::<f64>(), y in -1e12f64..1e12, l in 0.0f64..=1.0
        ) {
            prop_assume!(x.is_finite());
            let r = TimeseriesRecord {
                time_index: t, time: y.abs(), particle_id: id, group: 2, cell: 5, layer: 3,
                position: [x, y, l], local: [l, 0.0, 1.0],
            };
            prop_assert_eq!(r.to_text().parse::<TimeseriesRecord>().unwrap(), r);
            prop_assert_eq!(TimeseriesRecord::from_bytes(&r.to_bytes()), r);
        }
    }

    #[test]
    fn protocol_names() {
        for k in ProtocolKind::ALL {
            assert_eq!(k.as_str().parse::<ProtocolKind>().unwrap(), k);
        }
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = config_digest("a=1");
        assert_eq!(d.len(), 64);
        assert_eq!(d, config_digest("a=1"));
        assert_ne!(d, config_digest("a=2"));
    }

    #[test]
    fn critical_single_has_no_torn_lines() {
        let dir = tempfile::tempdir().unwrap();
        let proto = OutputProtocol::open_timeseries(ProtocolKind::CriticalSingle, dir.path(), 4, "d").unwrap();
        thread::scope(|s| {
            for w in 0..4u64 {
                let proto = &proto;
                s.spawn(move || {
                    for i in 0..2500 {
                        proto.write_record(w as usize, &rec(w * 10_000 + i, 1)).unwrap();
                    }
                });
            }
        });
        let files = proto.finish().unwrap();
        let recs = decode_timeseries(&files).unwrap();
        assert_eq!(recs.len(), 10_000);
        let ids: HashSet<u64> = recs.iter().map(|r| r.particle_id).collect();
        assert_eq!(ids.len(), 10_000);
        for r in &recs {
            assert_eq!(*r, rec(r.particle_id, 1));
        }
    }

    #[test]
    fn parallel_exclusive_keeps_records_in_worker_unit() {
        let dir = tempfile::tempdir().unwrap();
        let proto = OutputProtocol::open_timeseries(ProtocolKind::ParallelExclusive, dir.path(), 3, "d").unwrap();
        proto.write_record(2, &rec(42, 1)).unwrap();
        let files = proto.finish().unwrap();
        assert_eq!(files.len(), 3);
        assert!(decode_timeseries(&files[..2]).unwrap().is_empty());
        assert_eq!(decode_timeseries(&files[2..]).unwrap(), vec![rec(42, 1)]);
        assert_eq!(read_digest(&files[0]).unwrap().as_deref(), Some("d"));
    }

    #[test]
    fn consolidation_merges_and_resets() {
        let dir = tempfile::tempdir().unwrap();
        let proto = OutputProtocol::open_timeseries(ProtocolKind::Consolidated, dir.path(), 3, "d").unwrap();
        assert_eq!(proto.consolidate_step(1).unwrap(), 0);
        for (w, n) in [(0usize, 5u64), (1, 7), (2, 0)] {
            for i in 0..n {
                proto.write_record(w, &rec(w as u64 * 100 + i, 2)).unwrap();
            }
        }
        assert_eq!(proto.consolidate_step(2).unwrap(), 12);
        for w in 0..3 {
            let len = std::fs::metadata(binary_unit_path(dir.path(), w)).unwrap().len();
            assert_eq!(len, BINARY_HEADER_LEN);
        }
        proto.write_record(1, &rec(9, 3)).unwrap();
        assert_eq!(proto.consolidate_step(3).unwrap(), 1);
        let files = proto.finish().unwrap();
        let recs = decode_timeseries(&files).unwrap();
        assert_eq!(recs.len(), 13);
        assert!(recs.windows(2).all(|w| w[0].time_index <= w[1].time_index));
        assert!(!binary_unit_path(dir.path(), 0).exists());
    }

    #[test]
    fn consolidation_rejects_foreign_step() {
        let dir = tempfile::tempdir().unwrap();
        let proto = OutputProtocol::open_timeseries(ProtocolKind::Consolidated, dir.path(), 1, "d").unwrap();
        proto.write_record(0, &rec(1, 4)).unwrap();
        assert!(matches!(
            proto.consolidate_step(5),
            Err(OutputError::Binary { offset: 16, .. })
        ));
    }

    #[test]
    fn binary_decoding_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ts.w0");
        let mut bytes = binary_header().to_vec();
        bytes.extend_from_slice(&rec(1, 1).to_bytes());
        bytes.extend_from_slice(&[0u8; 10]);
        std::fs::write(&p, &bytes).unwrap();
        match decode_timeseries(&[&p]) {
            Err(OutputError::Binary { offset, .. }) => assert_eq!(offset, 16 + 96),
            other => panic!("{other:?}"),
        }
        bytes.truncate(16 + 96);
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(decode_timeseries(&[&p]).unwrap(), vec![rec(1, 1)]);
    }

    #[test]
    fn text_parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.dat");
        std::fs::write(&p, format!("# h\n{}\n1 2 3\n", rec(0, 1).to_text())).unwrap();
        match decode_timeseries(&[&p]) {
            Err(OutputError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let empty: [&Path; 0] = [];
        assert!(decode_timeseries(&empty).unwrap().is_empty());
    }

    #[test]
    fn pathline_requires_parallel_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            OutputProtocol::open_pathline(ProtocolKind::CriticalSingle, dir.path(), 2, "d"),
            Err(OutputError::PathlineProtocol)
        ));
        let proto = OutputProtocol::open_pathline(ProtocolKind::ParallelExclusive, dir.path(), 2, "d").unwrap();
        let r = PathlineRecord {
            point: rec(3, 1),
            segment: 4,
        };
        proto.write_pathline(1, &r).unwrap();
        let files = proto.finish().unwrap();
        assert_eq!(decode_pathlines(&files).unwrap(), vec![r]);
    }

    #[test]
    fn endpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(ENDPOINT_FILE);
        write_endpoint_file(&[], &p, "abc").unwrap();
        assert!(read_endpoint_file(&p).unwrap().is_empty());
        assert_eq!(read_digest(&p).unwrap().as_deref(), Some("abc"));
        let e = EndpointRecord {
            particle_id: 3,
            group: 1,
            status: ParticleStatus::ReachedBoundary,
            initial_time: 0.0,
            initial_cell: 10,
            initial_position: [10.0, 0.5, 0.5],
            final_time: 1490.0,
            final_cell: 1499,
            final_position: [1500.0, 0.5, 0.5],
        };
        write_endpoint_file(&[e, e], &p, "abc").unwrap();
        assert_eq!(read_endpoint_file(&p).unwrap(), vec![e, e]);
    }
}
