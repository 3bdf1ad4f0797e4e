//! Little-endian, versioned binary formats (BVOL volumes, EMBT embeddings,
//! CKPT checkpoints, ATLS atlases), the text formats that accompany them, and
//! atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::attribution::{top_regions, AtlasVolume, RegionScores};
use crate::error::{Error, Result};
use crate::eval::WindowedScore;
use crate::features::{EmbeddingTable, Transcript, TranscriptEntry};
use crate::vocab::Vocab;
use crate::volume::VolumeSeries;

pub const FORMAT_VERSION: u16 = 1;

/// Write to a sibling temporary file, sync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{}: not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::config(format!("{}: no such file", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

/// Element encoding of a binary payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    /// Values are rounded to single precision.
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u16(FORMAT_VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn values(&mut self, dtype: Dtype, vals: impl IntoIterator<Item = f64>) {
        for v in vals {
            match dtype {
                Dtype::F32 => self.0.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => self.0.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        Self { buf, pos: 0, path }
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.buf.len(),
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file ends at {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(self.err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    std::str::from_utf8(magic).unwrap_or("?")
                ),
            ));
        }
        let v = self.u16("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::Version {
                path: self.path.to_string(),
                found: v,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn values(&mut self, dtype: Dtype, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(dtype.width())
            .ok_or_else(|| self.err(self.pos, format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
}

/// Reorder a z-fastest volume to x-fastest, or back with `inverse`.
fn transpose_xyz(data: &[f64], ext: [usize; 3], inverse: bool) -> Vec<f64> {
    let [nx, ny, nz] = ext;
    let mut out = vec![0.0; data.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let zf = (x * ny + y) * nz + z;
                let xf = (z * ny + y) * nx + x;
                if inverse {
                    out[zf] = data[xf];
                } else {
                    out[xf] = data[zf];
                }
            }
        }
    }
    out
}

const BVOL_F32: u16 = 1;

/// `BVOL`, version, dtype, X Y Z T, TR in milliseconds, then f32 frames with
/// x varying fastest.
pub fn encode_bvol(v: &VolumeSeries) -> Result<Vec<u8>> {
    let tr_ms = (v.tr() * 1000.0).round();
    if !(tr_ms >= 1.0 && tr_ms <= u32::MAX as f64) {
        return Err(Error::Data(format!(
            "TR {} s not representable in ms",
            v.tr()
        )));
    }
    let ext = v.extents();
    let mut w = Writer::header(b"BVOL");
    w.u16(BVOL_F32);
    for e in ext {
        w.u32(to_u32(e, "extent")?);
    }
    w.u32(to_u32(v.frames(), "frame count")?);
    w.u32(tr_ms as u32);
    for t in 0..v.frames() {
        w.values(Dtype::F32, transpose_xyz(v.frame(t), ext, false));
    }
    Ok(w.0)
}

pub fn decode_bvol(bytes: &[u8], path: &str) -> Result<VolumeSeries> {
    let mut r = Reader::new(bytes, path);
    r.header(b"BVOL")?;
    let at = r.pos;
    let dtype = r.u16("dtype")?;
    if dtype != BVOL_F32 {
        return Err(r.err(at, format!("unsupported dtype code {dtype}")));
    }
    let at = r.pos;
    let mut ext = [0usize; 3];
    for e in &mut ext {
        *e = r.u32("extent")? as usize;
    }
    let frames = r.u32("frame count")? as usize;
    if ext.contains(&0) || frames == 0 {
        return Err(r.err(at, format!("empty volume {ext:?} x {frames}")));
    }
    let tr_ms = r.u32("TR")?;
    if tr_ms == 0 {
        return Err(r.err(r.pos - 4, "TR of 0 ms"));
    }
    let per = product(&ext).ok_or_else(|| r.err(at, "extents overflow"))?;
    let n = per
        .checked_mul(frames)
        .ok_or_else(|| r.err(at, "volume size overflows"))?;
    let raw = r.values(Dtype::F32, n, "payload")?;
    r.finish()?;
    let data = raw
        .chunks_exact(per)
        .flat_map(|f| transpose_xyz(f, ext, true))
        .collect();
    VolumeSeries::new(ext, tr_ms as f64 / 1000.0, data)
}

pub fn write_bvol(path: &Path, v: &VolumeSeries) -> Result<()> {
    write_atomic(path, &encode_bvol(v)?)
}

pub fn read_bvol(path: &Path) -> Result<VolumeSeries> {
    decode_bvol(&read_file(path)?, &path.display().to_string())
}

/// `EMBT`, version, V, D, then V rows of D f32 values.
pub fn encode_embt(table: &EmbeddingTable) -> Result<Vec<u8>> {
    let mut w = Writer::header(b"EMBT");
    w.u32(to_u32(table.vocab_size(), "vocabulary size")?);
    w.u32(to_u32(table.dim(), "dimension")?);
    w.values(Dtype::F32, table.rows().iter().copied());
    Ok(w.0)
}

pub fn decode_embt(bytes: &[u8], path: &str) -> Result<EmbeddingTable> {
    let mut r = Reader::new(bytes, path);
    r.header(b"EMBT")?;
    let at = r.pos;
    let v = r.u32("vocabulary size")? as usize;
    let d = r.u32("dimension")? as usize;
    if v == 0 || d == 0 {
        return Err(r.err(at, format!("empty table {v} x {d}")));
    }
    let n = v
        .checked_mul(d)
        .ok_or_else(|| r.err(at, "table size overflows"))?;
    let rows = r.values(Dtype::F32, n, "rows")?;
    r.finish()?;
    EmbeddingTable::new(v, d, rows)
}

pub fn write_embt(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_atomic(path, &encode_embt(table)?)
}

pub fn read_embt(path: &Path) -> Result<EmbeddingTable> {
    decode_embt(&read_file(path)?, &path.display().to_string())
}

fn escape_char(c: char) -> String {
    match c {
        '\\' => "\\\\".into(),
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        c => c.to_string(),
    }
}

fn unescape_char(s: &str) -> Option<char> {
    let mut it = s.chars();
    let c = match (it.next()?, it.next()) {
        ('\\', Some('\\')) => '\\',
        ('\\', Some('t')) => '\t',
        ('\\', Some('n')) => '\n',
        ('\\', Some('r')) => '\r',
        (c, None) => return Some(c),
        _ => return None,
    };
    it.next().is_none().then_some(c)
}

/// One `char<TAB>id` line per entry in id order; tab, newline, carriage
/// return and backslash are backslash-escaped.
pub fn encode_vocab(vocab: &Vocab) -> String {
    let mut s = String::new();
    for (i, &c) in vocab.chars().iter().enumerate() {
        let _ = writeln!(s, "{}\t{i}", escape_char(c));
    }
    s
}

pub fn decode_vocab(text: &str, path: &str) -> Result<Vocab> {
    let mut chars = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::ParseLine {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let (c, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| err(format!("expected char<TAB>id, got {line:?}")))?;
        let c = unescape_char(c).ok_or_else(|| err(format!("not a single character: {c:?}")))?;
        let id: usize = id.parse().map_err(|e| err(format!("bad id {id:?}: {e}")))?;
        if id != chars.len() {
            return Err(err(format!(
                "id {id} out of sequence, expected {}",
                chars.len()
            )));
        }
        chars.push(c);
    }
    Vocab::new(chars).map_err(|e| Error::ParseLine {
        path: path.to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_atomic(path, encode_vocab(vocab).as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    decode_vocab(&text, &path.display().to_string())
}

/// Vocabulary file next to an EMBT file: same stem, `.vocab` extension.
pub fn vocab_path(embt: &Path) -> PathBuf {
    embt.with_extension("vocab")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if product(&dims) != Some(data.len()) {
            return Err(Error::shape(format!(
                "tensor {name}: dims {dims:?} but {} values",
                data.len()
            )));
        }
        Ok(Self {
            name,
            dtype: Dtype::F64,
            dims,
            data,
        })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data).expect("length matches")
    }
}

/// Named tensors in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }
}

/// `CKPT`, version, count, then per tensor: name length (u16) and UTF-8
/// bytes, dtype (u8), rank (u8), dims (u32 each), payload.
pub fn encode_ckpt(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::header(b"CKPT");
    w.u32(to_u32(ckpt.tensors.len(), "tensor count")?);
    for t in &ckpt.tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Data(format!("tensor name of {} bytes", name.len())))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Data(format!("tensor {} has rank {}", t.name, t.dims.len())))?;
        if product(&t.dims) != Some(t.data.len()) {
            return Err(Error::shape(format!(
                "tensor {}: dims {:?}",
                t.name, t.dims
            )));
        }
        w.u16(len);
        w.0.extend_from_slice(name);
        w.u8(t.dtype.code());
        w.u8(rank);
        for &d in &t.dims {
            w.u32(to_u32(d, "dimension")?);
        }
        w.values(t.dtype, t.data.iter().copied());
    }
    Ok(w.0)
}

pub fn decode_ckpt(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.header(b"CKPT")?;
    let count = r.u32("tensor count")?;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let at = r.pos;
        let code = r.u8("dtype")?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| r.err(at, format!("tensor {name}: unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n =
            product(&dims).ok_or_else(|| r.err(at, format!("tensor {name}: size overflows")))?;
        let data = r.values(dtype, n, "tensor payload")?;
        ckpt.push(NamedTensor {
            name,
            dtype,
            dims,
            data,
        });
    }
    r.finish()?;
    Ok(ckpt)
}

pub fn write_ckpt(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_ckpt(ckpt)?)
}

pub fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    decode_ckpt(&read_file(path)?, &path.display().to_string())
}

/// `ATLS`, version, X Y Z, region count, then u32 labels with x fastest.
pub fn encode_atls(atlas: &AtlasVolume) -> Result<Vec<u8>> {
    let ext = atlas.extents();
    let mut w = Writer::header(b"ATLS");
    for e in ext {
        w.u32(to_u32(e, "extent")?);
    }
    w.u32(atlas.regions());
    let as_f: Vec<f64> = atlas.labels().iter().map(|&l| l as f64).collect();
    for l in transpose_xyz(&as_f, ext, false) {
        w.u32(l as u32);
    }
    Ok(w.0)
}

pub fn decode_atls(bytes: &[u8], path: &str) -> Result<AtlasVolume> {
    let mut r = Reader::new(bytes, path);
    r.header(b"ATLS")?;
    let at = r.pos;
    let mut ext = [0usize; 3];
    for e in &mut ext {
        *e = r.u32("extent")? as usize;
    }
    let regions = r.u32("region count")?;
    let n = product(&ext)
        .filter(|&n| n > 0)
        .ok_or_else(|| r.err(at, format!("bad extents {ext:?}")))?;
    let raw = r.take(
        n.checked_mul(4)
            .ok_or_else(|| r.err(at, "size overflows"))?,
        "labels",
    )?;
    r.finish()?;
    let labels: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = transpose_xyz(&labels, ext, true)
        .into_iter()
        .map(|l| l as u32)
        .collect();
    AtlasVolume::with_regions(ext, labels, regions)
}

pub fn write_atls(path: &Path, atlas: &AtlasVolume) -> Result<()> {
    write_atomic(path, &encode_atls(atlas)?)
}

pub fn read_atls(path: &Path) -> Result<AtlasVolume> {
    decode_atls(&read_file(path)?, &path.display().to_string())
}

const TRANSCRIPT_HEADER: &str = "char_id\tonset\toffset";

pub fn encode_transcript(t: &Transcript) -> String {
    let mut s = format!("{TRANSCRIPT_HEADER}\n");
    for e in t.entries() {
        let _ = writeln!(s, "{}\t{}\t{}", e.char_id, e.onset, e.offset);
    }
    s
}

pub fn decode_transcript(text: &str, path: &str) -> Result<Transcript> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == TRANSCRIPT_HEADER {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseLine {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, got {}",
                f.len()
            )));
        }
        let char_id = f[0]
            .parse()
            .map_err(|e| err(format!("char_id {:?}: {e}", f[0])))?;
        let onset = f[1]
            .parse()
            .map_err(|e| err(format!("onset {:?}: {e}", f[1])))?;
        let offset = f[2]
            .parse()
            .map_err(|e| err(format!("offset {:?}: {e}", f[2])))?;
        entries.push(TranscriptEntry {
            char_id,
            onset,
            offset,
        });
    }
    Transcript::new(entries).map_err(|e| Error::ParseLine {
        path: path.to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_transcript(path: &Path, t: &Transcript) -> Result<()> {
    write_atomic(path, encode_transcript(t).as_bytes())
}

pub fn read_transcript(path: &Path) -> Result<Transcript> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: e.valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    decode_transcript(text, &path.display().to_string())
}

/// `center<TAB>score` per window; `NA` where both windows were empty.
pub fn encode_windows(w: &WindowedScore) -> String {
    let mut s = String::from("center\tscore\n");
    for (c, v) in &w.windows {
        match v {
            Some(v) => {
                let _ = writeln!(s, "{c}\t{v}");
            }
            None => {
                let _ = writeln!(s, "{c}\tNA");
            }
        }
    }
    s
}

/// `label<TAB>score<TAB>rank`, rank 1 the highest, in label order.
pub fn encode_region_scores(scores: &RegionScores) -> Result<String> {
    let n = scores.scores.len();
    let mut rank = vec![0; n];
    for (i, r) in top_regions(scores, n)?.iter().enumerate() {
        rank[r.label as usize - 1] = i + 1;
    }
    let mut s = String::from("label\tscore\trank\n");
    for (i, v) in scores.scores.iter().enumerate() {
        let _ = writeln!(s, "{}\t{v}\t{}", i + 1, rank[i]);
    }
    Ok(s)
}

/// Which binary format a file holds, from its magic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Bvol,
    Embt,
    Ckpt,
    Atls,
}

pub fn sniff(bytes: &[u8]) -> Option<Format> {
    match bytes.get(..4)? {
        b"BVOL" => Some(Format::Bvol),
        b"EMBT" => Some(Format::Embt),
        b"CKPT" => Some(Format::Ckpt),
        b"ATLS" => Some(Format::Atls),
        _ => None,
    }
}

/// Parse and re-encode; returns the re-encoded bytes.
pub fn reencode(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    match sniff(bytes) {
        Some(Format::Bvol) => encode_bvol(&decode_bvol(bytes, path)?),
        Some(Format::Embt) => encode_embt(&decode_embt(bytes, path)?),
        Some(Format::Ckpt) => encode_ckpt(&decode_ckpt(bytes, path)?),
        Some(Format::Atls) => encode_atls(&decode_atls(bytes, path)?),
        None => Err(Error::Parse {
            path: path.to_string(),
            offset: 0,
            msg: "unknown magic".into(),
        }),
    }
}

/// First differing byte offset between two buffers, if any.
pub fn first_difference(a: &[u8], b: &[u8]) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}
