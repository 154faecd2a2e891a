use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use tracing::warn;

use super::{utc_day, Layout, Result, StorageError};
use crate::model::{PlugId, PowerSample};

/// Single writer for one `.samples.jsonl` file.
///
/// Each sample is written with one `write` call so a killed process leaves
/// at most one torn line. Reopening an existing file repairs a torn tail
/// and continues the sequence numbers.
#[derive(Debug)]
pub struct StreamWriter {
    path: PathBuf,
    file: File,
    next_seq: u64,
    last_ts: Option<i64>,
}

impl StreamWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| StorageError::io(path, e))?;
        let (next_seq, last_ts) = repair_tail(path, &mut file)?;
        Ok(StreamWriter {
            path: path.to_owned(),
            file,
            next_seq,
            last_ts,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Assigns the next sequence number and writes the sample.
    pub fn append(&mut self, mut sample: PowerSample) -> Result<PowerSample> {
        sample.seq = self.next_seq;
        if let Some(last) = self.last_ts {
            // Host clock stepped backwards; keep ts non-decreasing.
            sample.ts = sample.ts.max(last);
        }
        let mut line = sample.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| StorageError::io(&self.path, e))?;
        self.next_seq += 1;
        self.last_ts = Some(sample.ts);
        Ok(sample)
    }

    pub fn sync(&self) -> Result<()> {
        self.file
            .sync_data()
            .map_err(|e| StorageError::io(&self.path, e))
    }
}

/// Cuts off an unparseable final fragment (or terminates a complete one)
/// and returns the next sequence number and last timestamp.
fn repair_tail(path: &Path, file: &mut File) -> Result<(u64, Option<i64>)> {
    let io = |e| StorageError::io(path, e);
    let len = file.metadata().map_err(io)?.len();
    if len == 0 {
        return Ok((1, None));
    }
    // Lines are short; 64 KiB always covers the last two.
    let start = len.saturating_sub(64 * 1024);
    file.seek(SeekFrom::Start(start)).map_err(io)?;
    let mut tail = Vec::new();
    file.read_to_end(&mut tail).map_err(io)?;

    let parse = |bytes: &[u8]| serde_json::from_slice::<PowerSample>(bytes).ok();
    let mut last_complete = None;

    if tail.last() != Some(&b'\n') {
        let cut = tail.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let fragment = &tail[cut..];
        if let Some(sample) = parse(fragment) {
            file.write_all(b"\n").map_err(io)?;
            last_complete = Some(sample);
        } else {
            warn!(path = %path.display(), bytes = fragment.len(), "dropping torn final line");
            file.set_len(start + cut as u64).map_err(io)?;
            tail.truncate(cut);
        }
    }
    if last_complete.is_none() {
        last_complete = tail
            .split(|&b| b == b'\n')
            .rev()
            .find(|l| !l.is_empty())
            .and_then(parse);
    }
    Ok(match last_complete {
        Some(s) => (s.seq + 1, Some(s.ts)),
        None => (1, None),
    })
}

/// Result of reading a sample file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamRead {
    pub samples: Vec<PowerSample>,
    pub warnings: Vec<String>,
    /// Bytes of the file covered by complete records.
    pub consumed_bytes: u64,
}

/// Reads all complete records, optionally keeping only `t0 <= ts <= t1`.
///
/// An unterminated final fragment is a crash artifact and is skipped with a
/// warning. A bad record anywhere else is corruption and fails the read.
pub fn read_stream(path: &Path, range: Option<(i64, i64)>) -> Result<StreamRead> {
    let bytes = fs::read(path).map_err(|e| StorageError::io(path, e))?;
    parse_stream(path, &bytes, range)
}

pub fn parse_stream(path: &Path, bytes: &[u8], range: Option<(i64, i64)>) -> Result<StreamRead> {
    let mut out = StreamRead::default();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, terminated, next) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], true, offset + i + 1),
            None => (&bytes[offset..], false, bytes.len()),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            if terminated {
                out.consumed_bytes = next as u64;
            }
            offset = next;
            continue;
        }
        let parsed = serde_json::from_slice::<PowerSample>(line)
            .map_err(|e| e.to_string())
            .and_then(|s| s.validate().map(|_| s).map_err(|e| e.to_string()));
        match parsed {
            Ok(sample) => {
                if range.is_none_or(|(t0, t1)| t0 <= sample.ts && sample.ts <= t1) {
                    out.samples.push(sample);
                }
                out.consumed_bytes = next as u64;
            }
            Err(_) if !terminated => {
                out.warnings.push(format!(
                    "{}:{line_no}: skipped incomplete final line ({} bytes)",
                    path.display(),
                    line.len()
                ));
            }
            Err(message) => {
                return Err(StorageError::Corrupt {
                    path: path.to_owned(),
                    line: line_no,
                    message,
                })
            }
        }
        offset = next;
    }
    Ok(out)
}

/// Standalone log for one plug, rolling to a new file at UTC midnight.
#[derive(Debug)]
pub struct StandaloneStream {
    layout: Layout,
    plug: PlugId,
    current: Option<(NaiveDate, StreamWriter)>,
}

impl StandaloneStream {
    pub fn new(layout: Layout, plug: PlugId) -> Self {
        StandaloneStream {
            layout,
            plug,
            current: None,
        }
    }

    pub fn append(&mut self, sample: PowerSample) -> Result<PowerSample> {
        let day = utc_day(sample.ts);
        let writer = match &mut self.current {
            Some((d, w)) if *d == day => w,
            _ => {
                let w = StreamWriter::open(&self.layout.standalone_file(&self.plug, day))?;
                &mut self.current.insert((day, w)).1
            }
        };
        writer.append(sample)
    }

    pub fn current_path(&self) -> Option<&Path> {
        self.current.as_ref().map(|(_, w)| w.path())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(ts: i64, w: f64) -> PowerSample {
        PowerSample::new(ts, 0, PlugId::new("desk").unwrap(), w)
    }

    #[test]
    fn append_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.samples.jsonl");
        let mut w = StreamWriter::open(&path).unwrap();
        let mut written = Vec::new();
        for i in 0..10_000 {
            let mut s = sample(1_700_000_000_000 + i * 1000, (i % 97) as f64 * 1.25);
            if i % 3 == 0 {
                s.energy_counter_wh = Some(i as f64 * 0.5);
            }
            written.push(w.append(s).unwrap());
        }
        let read = read_stream(&path, None).unwrap();
        assert_eq!(read.samples, written);
        assert!(read.warnings.is_empty());
        assert_eq!(read.samples[0].seq, 1);
        assert_eq!(read.samples[9999].seq, 10_000);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        let r = read_stream(&path, None).unwrap();
        assert!(r.samples.is_empty() && r.warnings.is_empty());
    }

    #[test]
    fn range_filter_is_inclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = StreamWriter::open(&path).unwrap();
        for t in 0..10 {
            w.append(sample(t * 100, 1.0)).unwrap();
        }
        let r = read_stream(&path, Some((200, 500))).unwrap();
        let ts: Vec<i64> = r.samples.iter().map(|s| s.ts).collect();
        assert_eq!(ts, vec![200, 300, 400, 500]);
    }

    #[test]
    fn corrupt_middle_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"ts\":1,\"seq\":1,\"plug\":\"p\",\"w\":1.0}\nnot json\n{\"ts\":3,\"seq\":3,\"plug\":\"p\",\"w\":1.0}\n",
        )
        .unwrap();
        match read_stream(&path, None) {
            Err(StorageError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn negative_power_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        fs::write(&path, "{\"ts\":1,\"seq\":1,\"plug\":\"p\",\"w\":-1.0}\n").unwrap();
        assert!(matches!(
            read_stream(&path, None),
            Err(StorageError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn reopen_repairs_torn_tail_and_continues_seq() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        {
            let mut w = StreamWriter::open(&path).unwrap();
            for t in 0..5 {
                w.append(sample(t, 2.0)).unwrap();
            }
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"ts\":9,\"seq\":6,\"pl").unwrap();
        drop(f);
        assert_eq!(read_stream(&path, None).unwrap().warnings.len(), 1);

        let mut w = StreamWriter::open(&path).unwrap();
        assert_eq!(w.next_seq(), 6);
        w.append(sample(10, 3.0)).unwrap();
        let r = read_stream(&path, None).unwrap();
        assert!(r.warnings.is_empty());
        assert_eq!(r.samples.len(), 6);
        assert_eq!(r.samples[5].seq, 6);
    }

    #[test]
    fn reopen_keeps_complete_unterminated_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.jsonl");
        fs::write(&path, "{\"ts\":5,\"seq\":4,\"plug\":\"p\",\"w\":1.0}").unwrap();
        let mut w = StreamWriter::open(&path).unwrap();
        assert_eq!(w.next_seq(), 5);
        w.append(sample(1, 1.0)).unwrap();
        let r = read_stream(&path, None).unwrap();
        assert_eq!(r.samples.len(), 2);
        // clamped to stay non-decreasing
        assert_eq!(r.samples[1].ts, 5);
    }

    #[test]
    fn standalone_rolls_at_utc_midnight() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let plug = PlugId::new("desk").unwrap();
        let mut s = StandaloneStream::new(layout.clone(), plug.clone());
        let midnight = 1_700_006_400_000; // 2023-11-15T00:00:00Z
        let a = s.append(sample(midnight - 1000, 1.0)).unwrap();
        let b = s.append(sample(midnight, 1.0)).unwrap();
        assert_eq!((a.seq, b.seq), (1, 1));
        assert!(layout.standalone_file(&plug, utc_day(midnight - 1)).exists());
        assert!(layout.standalone_file(&plug, utc_day(midnight)).exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn truncation_loses_at_most_final_line(n in 1usize..200, cut_frac in 0.0f64..1.0) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            let mut w = StreamWriter::open(&path).unwrap();
            for i in 0..n {
                w.append(sample(i as i64 * 1000, i as f64 + 0.5).with_counter(i as f64)).unwrap();
            }
            drop(w);
            let bytes = fs::read(&path).unwrap();
            let cut = (bytes.len() as f64 * cut_frac) as usize;
            fs::write(&path, &bytes[..cut]).unwrap();
            let complete_lines = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
            let r = read_stream(&path, None).unwrap();
            prop_assert!(r.samples.len() == complete_lines || r.samples.len() == complete_lines + 1);
            prop_assert!(r.warnings.len() <= 1);
            for (i, s) in r.samples.iter().enumerate() {
                prop_assert_eq!(s.seq, i as u64 + 1);
            }
        }

        #[test]
        fn reader_sees_prefix_of_writer(n in 1usize..100, k in 0usize..100) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("l.jsonl");
            let mut w = StreamWriter::open(&path).unwrap();
            let mut written = Vec::new();
            for i in 0..n {
                written.push(w.append(sample(i as i64, 1.0)).unwrap());
                if i == k % n {
                    let r = read_stream(&path, None).unwrap();
                    prop_assert_eq!(&r.samples[..], &written[..]);
                }
            }
        }
    }
}
