//! Demonstration episodes and the `.tw2e` container.
//!
//! ```text
//! "TW2E" | version u32 | header_len u32 | header JSON
//! records, fixed stride:
//!     rec_ts u64 | cmd_ts u64 | cmd f64 x D | state_ts u64 | proprio f64 x (7 + 2n) | frame_off u64 | frame_len u64
//! image blob
//! marks JSON
//! footer: record_count u64 | blob_off u64 | blob_len u64 | marks_off u64 | marks_len u64 | crc32 u32 | "TW2F"
//! ```
//!
//! All integers and floats are little-endian. The CRC covers every byte
//! before the footer. A frame offset of `u64::MAX` means no frame.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::command::{CommandLayout, CommandVector, NormalizationStats, ProprioState};
use crate::error::EpisodeError;

pub const MAGIC: &[u8; 4] = b"TW2E";
pub const FOOTER_MAGIC: &[u8; 4] = b"TW2F";
pub const VERSION: u32 = 1;
const FOOTER_LEN: usize = 5 * 8 + 4 + 4;
const NO_FRAME: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub pose_hz: f64,
    pub cmd_hz: f64,
    pub record_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            pose_hz: 100.0,
            cmd_hz: 50.0,
            record_hz: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub layout: CommandLayout,
    /// Joint count of the proprioceptive state.
    pub proprio_joints: usize,
    #[serde(default)]
    pub normalization: Option<NormalizationStats>,
    pub rates: Rates,
    pub model_hash: String,
    /// Unix time, nanoseconds.
    pub created_at: u64,
}

impl EpisodeHeader {
    fn stride(&self) -> usize {
        8 * (2 + self.layout.dim() + 1 + ProprioState::flat_dim(self.proprio_joints) + 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Nanoseconds.
    pub timestamp: u64,
    pub command: CommandVector,
    pub state: ProprioState,
    pub frame: Option<FrameRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkKind {
    EpisodeStart,
    EpisodeEnd,
    Failure,
    Pause,
    /// A stream went silent for longer than the gap threshold.
    Gap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub timestamp: u64,
    pub kind: MarkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Mark {
    pub fn new(timestamp: u64, kind: MarkKind) -> Self {
        Self {
            timestamp,
            kind,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub records: Vec<Record>,
    /// Concatenated image bytes addressed by [`FrameRef`]s.
    pub frames: Vec<u8>,
    pub marks: Vec<Mark>,
}

impl Episode {
    pub fn new(header: EpisodeHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            frames: Vec::new(),
            marks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame(&self, r: &Record) -> Option<&[u8]> {
        r.frame.map(|f| &self.frames[f.offset as usize..(f.offset + f.len) as usize])
    }

    /// Appends a record, copying `frame` into the blob.
    pub fn push(
        &mut self,
        timestamp: u64,
        command: CommandVector,
        state: ProprioState,
        frame: Option<&[u8]>,
    ) -> Result<(), EpisodeError> {
        if let Some(last) = self.records.last() {
            if timestamp <= last.timestamp {
                return Err(EpisodeError::Invalid(format!(
                    "record timestamp {timestamp} not after {}",
                    last.timestamp
                )));
            }
        }
        let frame = frame.map(|bytes| {
            let offset = self.frames.len() as u64;
            self.frames.extend_from_slice(bytes);
            FrameRef {
                offset,
                len: bytes.len() as u64,
            }
        });
        self.records.push(Record {
            timestamp,
            command,
            state,
            frame,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let dim = self.header.layout.dim();
        let joints = self.header.proprio_joints;
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 && r.timestamp <= self.records[i - 1].timestamp {
                return Err(EpisodeError::Invalid(format!("timestamps not increasing at record {i}")));
            }
            r.command.flatten(&self.header.layout).map_err(|e| {
                EpisodeError::Invalid(format!("record {i}: command does not match layout of {dim}: {e}"))
            })?;
            if r.state.q.len() != joints || r.state.dq.len() != joints {
                return Err(EpisodeError::Invalid(format!("record {i}: state does not have {joints} joints")));
            }
            if let Some(f) = r.frame {
                if f.offset.checked_add(f.len).is_none_or(|end| end > self.frames.len() as u64) {
                    return Err(EpisodeError::Invalid(format!("record {i}: frame reference out of range")));
                }
            }
        }
        if self.marks.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(EpisodeError::Invalid("marks not sorted".into()));
        }
        Ok(())
    }

    /// Inserts a mark keeping the list sorted (stable for equal timestamps).
    pub fn add_mark(&mut self, mark: Mark) {
        let at = self.marks.partition_point(|m| m.timestamp <= mark.timestamp);
        self.marks.insert(at, mark);
    }

    /// Flattened commands, one row per record.
    pub fn command_rows(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.command.flatten(&self.header.layout).expect("validated layout"))
            .collect()
    }

    /// A new episode with the records at `indices` (ascending), frames
    /// re-packed, and the marks falling inside their time span.
    fn select(&self, indices: &[usize]) -> Episode {
        let mut out = Episode::new(self.header.clone());
        for &i in indices {
            let r = &self.records[i];
            out.push(r.timestamp, r.command.clone(), r.state.clone(), self.frame(r))
                .expect("source timestamps are increasing");
        }
        if let (Some(first), Some(last)) = (out.records.first(), out.records.last()) {
            let (lo, hi) = (first.timestamp, last.timestamp);
            out.marks = self
                .marks
                .iter()
                .filter(|m| m.timestamp >= lo && m.timestamp <= hi)
                .cloned()
                .collect();
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EpisodeError> {
        let mut buf = Vec::new();
        let mut writer = EpisodeWriter::new(&mut buf, self.header.clone())?;
        for r in &self.records {
            writer.append(r.timestamp, &r.command, &r.state, self.frame(r))?;
        }
        for m in &self.marks {
            writer.mark(m.clone());
        }
        writer.finish()?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EpisodeError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(EpisodeError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(EpisodeError::UnsupportedVersion(version));
        }
        if bytes.len() < 12 + FOOTER_LEN || &bytes[bytes.len() - 4..] != FOOTER_MAGIC {
            return Err(EpisodeError::MissingFooter);
        }
        let footer_start = bytes.len() - FOOTER_LEN;
        let mut f = Cursor::new(&bytes[footer_start..]);
        let record_count = f.u64() as usize;
        let blob_off = f.u64() as usize;
        let blob_len = f.u64() as usize;
        let marks_off = f.u64() as usize;
        let marks_len = f.u64() as usize;
        let stored = f.u32();
        let computed = crc32fast::hash(&bytes[..footer_start]);
        if stored != computed {
            return Err(EpisodeError::Checksum { stored, computed });
        }

        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|e| *e <= footer_start)
            .ok_or_else(|| EpisodeError::Header("header length out of range".into()))?;
        let header: EpisodeHeader =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|e| EpisodeError::Header(e.to_string()))?;
        let stride = header.stride();
        let records_end = record_count
            .checked_mul(stride)
            .and_then(|n| n.checked_add(header_end))
            .ok_or_else(|| EpisodeError::Invalid("record count overflow".into()))?;
        let in_range = |off: usize, len: usize| off.checked_add(len).is_some_and(|e| e <= footer_start);
        if records_end != blob_off || !in_range(blob_off, blob_len) || !in_range(marks_off, marks_len) {
            return Err(EpisodeError::Invalid("footer offsets inconsistent".into()));
        }

        let dim = header.layout.dim();
        let joints = header.proprio_joints;
        let mut records = Vec::with_capacity(record_count);
        let mut c = Cursor::new(&bytes[header_end..records_end]);
        for _ in 0..record_count {
            let timestamp = c.u64();
            let cmd_ts = c.u64();
            let flat = c.f64s(dim);
            let command = CommandVector::unflatten(&header.layout, &flat, cmd_ts)?;
            let state_ts = c.u64();
            let pflat = c.f64s(ProprioState::flat_dim(joints));
            let state = ProprioState::unflatten(joints, &pflat, state_ts)?;
            let offset = c.u64();
            let len = c.u64();
            let frame = (offset != NO_FRAME).then_some(FrameRef { offset, len });
            records.push(Record {
                timestamp,
                command,
                state,
                frame,
            });
        }
        let marks: Vec<Mark> = serde_json::from_slice(&bytes[marks_off..marks_off + marks_len])
            .map_err(|e| EpisodeError::Invalid(format!("marks: {e}")))?;
        let episode = Episode {
            header,
            records,
            frames: bytes[blob_off..blob_off + blob_len].to_vec(),
            marks,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, EpisodeError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Per-dimension command moments across `episodes`.
    pub fn command_stats(episodes: &[Episode]) -> Result<NormalizationStats, EpisodeError> {
        let rows: Vec<Vec<f64>> = episodes.iter().flat_map(|e| e.command_rows()).collect();
        Ok(NormalizationStats::from_samples(&rows)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| f64::from_le_bytes(self.take())).collect()
    }
}

/// Writes into a sink that tracks the running checksum and position.
struct Checked<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> Checked<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(bytes)?;
        self.hasher.update(bytes);
        self.written += bytes.len() as u64;
        Ok(())
    }
}

enum Blob {
    Memory(Vec<u8>),
    Sidecar { path: PathBuf, file: BufWriter<File> },
}

/// Streaming episode writer. Records go straight to the sink; frames are
/// staged and appended on [`finish`](Self::finish). A writer dropped before
/// `finish` leaves a file without footer, which readers reject.
pub struct EpisodeWriter<W: Write> {
    out: Checked<W>,
    header: EpisodeHeader,
    blob: Blob,
    blob_len: u64,
    marks: Vec<Mark>,
    count: u64,
    last_ts: Option<u64>,
}

impl EpisodeWriter<BufWriter<File>> {
    /// Creates `path`, staging frames in a sidecar file next to it.
    pub fn create(path: impl AsRef<Path>, header: EpisodeHeader) -> Result<Self, EpisodeError> {
        let path = path.as_ref();
        let file = BufWriter::new(File::create(path)?);
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".frames.tmp");
        let sidecar = PathBuf::from(sidecar);
        let blob = Blob::Sidecar {
            file: BufWriter::new(File::create(&sidecar)?),
            path: sidecar,
        };
        Self::with_blob(file, header, blob)
    }
}

impl<W: Write> EpisodeWriter<W> {
    /// A writer that stages frames in memory.
    pub fn new(sink: W, header: EpisodeHeader) -> Result<Self, EpisodeError> {
        Self::with_blob(sink, header, Blob::Memory(Vec::new()))
    }

    fn with_blob(sink: W, header: EpisodeHeader, blob: Blob) -> Result<Self, EpisodeError> {
        let mut out = Checked {
            inner: sink,
            hasher: crc32fast::Hasher::new(),
            written: 0,
        };
        let json = serde_json::to_vec(&header).map_err(|e| EpisodeError::Header(e.to_string()))?;
        out.put(MAGIC)?;
        out.put(&VERSION.to_le_bytes())?;
        out.put(&(json.len() as u32).to_le_bytes())?;
        out.put(&json)?;
        Ok(Self {
            out,
            header,
            blob,
            blob_len: 0,
            marks: Vec::new(),
            count: 0,
            last_ts: None,
        })
    }

    pub fn header(&self) -> &EpisodeHeader {
        &self.header
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }

    pub fn append(
        &mut self,
        timestamp: u64,
        command: &CommandVector,
        state: &ProprioState,
        frame: Option<&[u8]>,
    ) -> Result<(), EpisodeError> {
        if self.last_ts.is_some_and(|t| timestamp <= t) {
            return Err(EpisodeError::Invalid(format!("record timestamp {timestamp} not increasing")));
        }
        let flat = command.flatten(&self.header.layout)?;
        if state.q.len() != self.header.proprio_joints || state.dq.len() != self.header.proprio_joints {
            return Err(EpisodeError::Invalid(format!(
                "state has {} joints, header says {}",
                state.q.len(),
                self.header.proprio_joints
            )));
        }
        let (offset, len) = match frame {
            Some(bytes) => {
                match &mut self.blob {
                    Blob::Memory(v) => v.extend_from_slice(bytes),
                    Blob::Sidecar { file, .. } => file.write_all(bytes)?,
                }
                let offset = self.blob_len;
                self.blob_len += bytes.len() as u64;
                (offset, bytes.len() as u64)
            }
            None => (NO_FRAME, 0),
        };
        let mut rec = Vec::with_capacity(self.header.stride());
        rec.extend_from_slice(&timestamp.to_le_bytes());
        rec.extend_from_slice(&command.timestamp.to_le_bytes());
        flat.iter().for_each(|v| rec.extend_from_slice(&v.to_le_bytes()));
        rec.extend_from_slice(&state.timestamp.to_le_bytes());
        state.flatten().iter().for_each(|v| rec.extend_from_slice(&v.to_le_bytes()));
        rec.extend_from_slice(&offset.to_le_bytes());
        rec.extend_from_slice(&len.to_le_bytes());
        self.out.put(&rec)?;
        self.count += 1;
        self.last_ts = Some(timestamp);
        Ok(())
    }

    pub fn mark(&mut self, mark: Mark) {
        let at = self.marks.partition_point(|m| m.timestamp <= mark.timestamp);
        self.marks.insert(at, mark);
    }

    /// Appends frames, marks and the footer, then flushes.
    pub fn finish(mut self) -> Result<(), EpisodeError> {
        let blob_off = self.out.written;
        match std::mem::replace(&mut self.blob, Blob::Memory(Vec::new())) {
            Blob::Memory(v) => self.out.put(&v)?,
            Blob::Sidecar { path, file } => {
                let file = file.into_inner().map_err(|e| e.into_error())?;
                drop(file);
                let mut staged = File::open(&path)?;
                let mut chunk = vec![0u8; 1 << 16];
                loop {
                    let n = staged.read(&mut chunk)?;
                    if n == 0 {
                        break;
                    }
                    self.out.put(&chunk[..n])?;
                }
                drop(staged);
                let _ = fs::remove_file(&path);
            }
        }
        let marks_off = self.out.written;
        let marks = serde_json::to_vec(&self.marks).map_err(|e| EpisodeError::Invalid(e.to_string()))?;
        self.out.put(&marks)?;
        let crc = self.out.hasher.clone().finalize();
        let mut footer = Vec::with_capacity(FOOTER_LEN);
        for v in [self.count, blob_off, self.blob_len, marks_off, marks.len() as u64] {
            footer.extend_from_slice(&v.to_le_bytes());
        }
        footer.extend_from_slice(&crc.to_le_bytes());
        footer.extend_from_slice(FOOTER_MAGIC);
        self.out.inner.write_all(&footer)?;
        self.out.inner.flush()?;
        Ok(())
    }
}

impl<W: Write> Drop for EpisodeWriter<W> {
    fn drop(&mut self) {
        if let Blob::Sidecar { path, .. } = &self.blob {
            let _ = fs::remove_file(path);
        }
    }
}

/// Outcome of segmentation and idle filtering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_records: usize,
    pub output_records: usize,
    /// Records removed by idle compression.
    pub idle_removed: usize,
    /// Records outside any kept span, including dropped episodes.
    pub dropped_records: usize,
    pub episodes_kept: usize,
    pub episodes_dropped: usize,
    pub reasons: Vec<String>,
    pub warnings: Vec<String>,
}

impl FilterReport {
    pub fn is_consistent(&self) -> bool {
        self.input_records == self.output_records + self.idle_removed + self.dropped_records
    }
}

/// Splits `episode` at its start/end marks. Spans are inclusive of the
/// records at the mark timestamps; spans containing a failure mark are
/// dropped. Without start/end marks the whole file is one span.
pub fn segment(episode: &Episode) -> (Vec<Episode>, FilterReport) {
    let mut report = FilterReport {
        input_records: episode.len(),
        ..FilterReport::default()
    };
    let ts: Vec<u64> = episode.records.iter().map(|r| r.timestamp).collect();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut open: Option<u64> = None;
    for m in &episode.marks {
        match m.kind {
            MarkKind::EpisodeStart => {
                if let Some(start) = open.replace(m.timestamp) {
                    report
                        .warnings
                        .push(format!("start at {start} closed implicitly by start at {}", m.timestamp));
                    spans.push((start, m.timestamp.saturating_sub(1)));
                }
            }
            MarkKind::EpisodeEnd => match open.take() {
                Some(start) => spans.push((start, m.timestamp)),
                None => report.warnings.push(format!("end at {} without start ignored", m.timestamp)),
            },
            _ => {}
        }
    }
    if let Some(start) = open {
        report
            .warnings
            .push(format!("start at {start} has no end; segment runs to end of file"));
        spans.push((start, u64::MAX));
    }
    let has_bounds = episode
        .marks
        .iter()
        .any(|m| matches!(m.kind, MarkKind::EpisodeStart | MarkKind::EpisodeEnd));
    if !has_bounds {
        spans.push((0, u64::MAX));
    }

    let mut out = Vec::new();
    let mut kept = 0usize;
    for (lo, hi) in spans {
        let a = ts.partition_point(|t| *t < lo);
        let b = ts.partition_point(|t| *t <= hi);
        if a >= b {
            report.warnings.push(format!("span {lo}..={hi} contains no records"));
            continue;
        }
        let failed = episode
            .marks
            .iter()
            .any(|m| m.kind == MarkKind::Failure && m.timestamp >= lo && m.timestamp <= hi);
        if failed {
            report.episodes_dropped += 1;
            report
                .reasons
                .push(format!("span {}..={} dropped: failure mark", ts[a], ts[b - 1]));
            continue;
        }
        let indices: Vec<usize> = (a..b).collect();
        kept += indices.len();
        out.push(episode.select(&indices));
    }
    report.episodes_kept = out.len();
    report.output_records = kept;
    report.dropped_records = report.input_records - kept;
    (out, report)
}

/// Compresses idle stretches: maximal runs of consecutive records whose
/// command changes by less than `eps` (infinity norm, normalized units when
/// the header carries statistics) and that last longer than `min_duration`
/// seconds keep only their first and last record.
pub fn filter_idle(episode: &Episode, eps: f64, min_duration: f64) -> Result<(Episode, FilterReport), EpisodeError> {
    if !(eps >= 0.0) || !(min_duration > 0.0) {
        return Err(EpisodeError::Invalid(format!(
            "idle filter needs eps >= 0 and duration > 0, got {eps} and {min_duration}"
        )));
    }
    let mut rows = episode.command_rows();
    if let Some(stats) = &episode.header.normalization {
        for row in rows.iter_mut() {
            *row = stats.normalize(row)?;
        }
    }
    let n = rows.len();
    let idle = |i: usize| {
        rows[i]
            .iter()
            .zip(&rows[i + 1])
            .map(|(a, b)| (b - a).abs())
            .fold(0.0f64, f64::max)
            < eps
    };
    let limit = (min_duration * 1e9) as u64;
    let mut keep = vec![true; n];
    let mut i = 0;
    while i + 1 < n {
        if !idle(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < n && idle(i) {
            i += 1;
        }
        // Records start..=i form a maximal idle run.
        if episode.records[i].timestamp - episode.records[start].timestamp > limit {
            keep[start + 1..i].iter_mut().for_each(|k| *k = false);
        }
    }
    let indices: Vec<usize> = (0..n).filter(|&k| keep[k]).collect();
    let mut out = episode.select(&indices);
    out.marks = episode.marks.clone();
    let report = FilterReport {
        input_records: n,
        output_records: indices.len(),
        idle_removed: n - indices.len(),
        episodes_kept: 1,
        ..FilterReport::default()
    };
    Ok((out, report))
}
