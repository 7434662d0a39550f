//! Segmented append-only log.
//!
//! # Format
//!
//! A log is a directory of segment files named `{first_position:020}.seg`.
//! Each segment is a sequence of frames:
//!
//! ```text
//! +-------------+------------------+-----------+---------------------+
//! | len: u32 LE | position: u64 LE | payload   | crc32c: u32 LE      |
//! +-------------+------------------+-----------+---------------------+
//! ```
//!
//! `len` is the payload length and the CRC32C covers the position bytes and
//! the payload. Positions strictly increase across the whole log. On open,
//! the tail of the last segment is truncated at the first incomplete or
//! corrupt frame; a bad frame in any earlier segment is reported as
//! corruption because earlier segments are synced before the log rolls.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub const FRAME_OVERHEAD: u64 = 4 + 8 + 4;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub position: u64,
    pub payload: Vec<u8>,
}

/// What `open` found on disk.
#[derive(Debug, Default)]
pub struct Recovery {
    pub entries: Vec<LogEntry>,
    /// Bytes cut from the tail of the last segment.
    pub truncated_bytes: u64,
}

#[derive(Debug)]
pub struct SegmentLog {
    dir: PathBuf,
    active: File,
    active_len: u64,
    active_first: u64,
    next_position: u64,
    max_segment_bytes: u64,
}

fn segment_name(first: u64) -> String {
    format!("{first:020}.seg")
}

fn list_segments(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut segs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".seg") {
            if let Ok(first) = stem.parse::<u64>() {
                segs.push((first, path));
            }
        }
    }
    segs.sort();
    Ok(segs)
}

fn corrupt(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn encode_frame(position: u64, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(payload.len() + FRAME_OVERHEAD as usize);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&position.to_le_bytes());
    buf.extend_from_slice(payload);
    let crc = crc32c::crc32c_append(crc32c::crc32c(&position.to_le_bytes()), payload);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Read frames until EOF or the first bad frame. Returns the entries and the
/// byte offset just past the last good frame.
fn read_frames(path: &Path) -> io::Result<(Vec<LogEntry>, u64, u64)> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut entries = Vec::new();
    let mut good = 0u64;
    loop {
        let mut head = [0u8; 12];
        match r.read_exact(&mut head) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let len = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let position = u64::from_le_bytes(head[4..].try_into().unwrap());
        if len > MAX_PAYLOAD || good + FRAME_OVERHEAD + len as u64 > file_len {
            break;
        }
        let mut payload = vec![0u8; len];
        let mut crc = [0u8; 4];
        if r.read_exact(&mut payload).is_err() || r.read_exact(&mut crc).is_err() {
            break;
        }
        let want = crc32c::crc32c_append(crc32c::crc32c(&head[4..]), &payload);
        if u32::from_le_bytes(crc) != want {
            break;
        }
        good += FRAME_OVERHEAD + len as u64;
        entries.push(LogEntry { position, payload });
    }
    Ok((entries, good, file_len))
}

impl SegmentLog {
    /// Open (or create) the log in `dir`, recovering from a torn tail.
    pub fn open(dir: impl AsRef<Path>, max_segment_bytes: u64) -> io::Result<(Self, Recovery)> {
        Self::open_with_floor(dir, max_segment_bytes, 0)
    }

    /// Like `open`, but positions will start no lower than `floor`.
    pub fn open_with_floor(
        dir: impl AsRef<Path>,
        max_segment_bytes: u64,
        floor: u64,
    ) -> io::Result<(Self, Recovery)> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let segs = list_segments(&dir)?;
        let mut rec = Recovery::default();
        let mut next = floor;

        for (i, (first, path)) in segs.iter().enumerate() {
            let last = i + 1 == segs.len();
            let (entries, good, len) = read_frames(path)?;
            if good < len {
                if !last {
                    return Err(corrupt(format!(
                        "corrupt frame at byte {good} of sealed segment {}",
                        path.display()
                    )));
                }
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(good)?;
                f.sync_all()?;
                rec.truncated_bytes = len - good;
                tracing::warn!(
                    segment = %path.display(),
                    bytes = len - good,
                    "truncated torn tail"
                );
            }
            next = next.max(*first);
            for e in entries {
                if e.position < next {
                    return Err(corrupt(format!(
                        "position {} out of order in {}",
                        e.position,
                        path.display()
                    )));
                }
                next = e.position + 1;
                rec.entries.push(e);
            }
        }

        let (active_path, active_len, active_first) = match segs.last() {
            Some((first, p)) => (p.clone(), fs::metadata(p)?.len(), *first),
            None => (dir.join(segment_name(next)), 0, next),
        };
        let active = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&active_path)?;
        if segs.is_empty() {
            sync_dir(&dir)?;
        }
        Ok((
            SegmentLog {
                dir,
                active,
                active_len,
                active_first,
                next_position: next,
                max_segment_bytes,
            },
            rec,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn next_position(&self) -> u64 {
        self.next_position
    }

    /// Make the next append use a position of at least `floor`.
    pub fn raise_next_position(&mut self, floor: u64) {
        self.next_position = self.next_position.max(floor);
    }

    /// Positions below this live in sealed segments, which were synced
    /// when the log rolled past them.
    pub fn active_first(&self) -> u64 {
        self.active_first
    }

    /// Append at the next position. Not durable until `sync`.
    pub fn append(&mut self, payload: &[u8]) -> io::Result<u64> {
        let pos = self.next_position;
        self.append_at(pos, payload)?;
        Ok(pos)
    }

    /// Append with an explicit position, which must not be lower than
    /// `next_position`. Used when rewriting a log.
    pub fn append_at(&mut self, position: u64, payload: &[u8]) -> io::Result<()> {
        if position < self.next_position {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("position {position} below next position {}", self.next_position),
            ));
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "payload too large"));
        }
        let frame = encode_frame(position, payload);
        if self.active_len > 0 && self.active_len + frame.len() as u64 > self.max_segment_bytes {
            self.roll(position)?;
        }
        if let Err(e) = self.active.write_all(&frame) {
            // Do not leave a partial frame in front of later appends.
            let _ = self.active.set_len(self.active_len);
            return Err(e);
        }
        self.active_len += frame.len() as u64;
        self.next_position = position + 1;
        Ok(())
    }

    fn roll(&mut self, first: u64) -> io::Result<()> {
        self.active.sync_data()?;
        let path = self.dir.join(segment_name(first));
        self.active = OpenOptions::new().create(true).append(true).open(&path)?;
        self.active_len = 0;
        self.active_first = first;
        sync_dir(&self.dir)
    }

    pub fn sync(&self) -> io::Result<()> {
        self.active.sync_data()
    }

    /// A handle on the active segment for syncing outside a lock.
    pub fn sync_handle(&self) -> io::Result<File> {
        self.active.try_clone()
    }

    /// Total bytes across all segments.
    pub fn disk_bytes(&self) -> io::Result<u64> {
        let mut total = 0;
        for (_, p) in list_segments(&self.dir)? {
            total += fs::metadata(p)?.len();
        }
        Ok(total)
    }

    /// Probe whether the directory accepts writes.
    pub fn probe_writable(&self) -> io::Result<()> {
        let probe = self.dir.join(".probe");
        let mut f = File::create(&probe)?;
        f.write_all(b"ok")?;
        drop(f);
        fs::remove_file(probe)
    }
}

/// Generation directories `gen-NNNNNN` under a parent, with a `CURRENT`
/// file naming the live one. Rewrites go to a fresh generation that
/// becomes live with an atomic rename of the pointer.
pub mod generations {
    use std::fs::{self, File};
    use std::io::{self, Write};
    use std::path::{Path, PathBuf};

    use super::sync_dir;

    pub fn dir(parent: &Path, generation: u64) -> PathBuf {
        parent.join(format!("gen-{generation:06}"))
    }

    fn parse(name: &str) -> Option<u64> {
        name.strip_prefix("gen-")?.parse().ok()
    }

    pub fn current(parent: &Path) -> io::Result<Option<u64>> {
        match fs::read_to_string(parent.join("CURRENT")) {
            Ok(s) => parse(s.trim())
                .map(Some)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "malformed CURRENT file")),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Make `generation` live.
    pub fn commit(parent: &Path, generation: u64) -> io::Result<()> {
        let tmp = parent.join("CURRENT.tmp");
        {
            let mut f = File::create(&tmp)?;
            writeln!(f, "gen-{generation:06}")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, parent.join("CURRENT"))?;
        sync_dir(parent)
    }

    /// The live generation, creating generation 1 on first use. Leftovers
    /// of an interrupted rewrite are removed.
    pub fn open(parent: &Path) -> io::Result<u64> {
        fs::create_dir_all(parent)?;
        let live = match current(parent)? {
            Some(g) => g,
            None => {
                fs::create_dir_all(dir(parent, 1))?;
                commit(parent, 1)?;
                1
            }
        };
        for e in fs::read_dir(parent)?.flatten() {
            let stale = e.file_name().to_str().and_then(parse).is_some_and(|g| g != live);
            if stale {
                fs::remove_dir_all(e.path())?;
            }
        }
        Ok(live)
    }
}

pub fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directory fsync makes file creation and renames durable on Linux.
    File::open(dir)?.sync_all()
}
