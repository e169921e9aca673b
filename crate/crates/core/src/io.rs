//! On-disk formats: the binary detector-output dump, the prototype bank,
//! detections, ground truth and the JSON reports, plus TOML/JSON config
//! loading.
//!
//! Dump layout (all integers and floats little-endian):
//!
//! ```text
//! "OVRDUMP <version>\n"
//! <header JSON on one line>\n
//! repeated until EOF:
//!   u8   tag = b'R'
//!   u64  image_id
//!   f64  width, f64 height
//!   u8   flags  (1 = refined boxes, 2 = per-class refined boxes,
//!               4 = raw logits, 8 = labels)
//!   u32  M
//!   M x { f64 x1, y1, x2, y2; f64 objectness; u32 len; len x f32 feature }
//!   if refined:  [u32 C if per-class] then (M or M*C) x 4 x f64
//!   if logits:   u32 C; M*C x f64
//!   if labels:   M x { u8 present; u32 class_id }
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, GroundTruthRecord, LatencySummary, RecallReport, ScoreStats};
use crate::geometry::BoundingBox;
use crate::pipeline::{Detection, ImageOutput, ImageRecord, PipelineConfig, Profile, RefinedBoxes, ScoredProposal, Switches};
use crate::proposal_stage::RegionProposal;
use crate::prototypes::{BankProvenance, ClassCatalog, ClassInfo, ClassSamples, PrototypeBank, Split};
use crate::synthetic::SceneSpec;

pub const DUMP_MAGIC: &str = "OVRDUMP";
pub const DUMP_VERSION: u32 = 1;
/// Version shared by every JSON document this crate writes.
pub const DOC_VERSION: u32 = 1;

const RECORD_TAG: u8 = b'R';
const FLAG_REFINED: u8 = 1;
const FLAG_PER_CLASS: u8 = 2;
const FLAG_LOGITS: u8 = 4;
const FLAG_LABELS: u8 = 8;
const MAX_HEADER_BYTES: u64 = 1 << 30;
/// Upper bound on speculative preallocation from untrusted counts.
const PREALLOC_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderClass {
    pub id: u32,
    pub name: String,
    pub split: Split,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub version: u32,
    pub dim: usize,
    /// Whether features and text embeddings were L2-normalized upstream.
    pub normalized: bool,
    /// Temperature the raw logits are meant to be read with, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub classes: Vec<HeaderClass>,
}

impl DumpHeader {
    pub fn from_catalog(catalog: &ClassCatalog, normalized: bool, temperature: Option<f64>) -> Self {
        Self {
            version: DUMP_VERSION,
            dim: catalog.dim(),
            normalized,
            temperature,
            classes: catalog
                .classes()
                .iter()
                .zip(catalog.embeddings())
                .map(|(c, e)| HeaderClass {
                    id: c.id,
                    name: c.name.clone(),
                    split: c.split,
                    embedding: e.clone(),
                })
                .collect(),
        }
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        if self.classes.is_empty() {
            return Err(Error::EmptyInput("dump class catalog"));
        }
        for c in &self.classes {
            if c.embedding.len() != self.dim {
                return Err(Error::dimension(format!("text embedding of class {}", c.id), self.dim, c.embedding.len()));
            }
        }
        let infos = self
            .classes
            .iter()
            .map(|c| ClassInfo {
                id: c.id,
                name: c.name.clone(),
                split: c.split,
            })
            .collect();
        ClassCatalog::new(infos, self.classes.iter().map(|c| c.embedding.clone()).collect())
    }
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

impl<R: BufRead> BufRead for Counting<R> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.offset += amt as u64;
        self.inner.consume(amt)
    }
}

/// Streaming dump reader: the header is parsed eagerly, records one at a
/// time. Stops after the first error.
pub struct DumpReader<R> {
    input: Counting<R>,
    header: DumpHeader,
    catalog: ClassCatalog,
    done: bool,
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut input = Counting { inner, offset: 0 };
        let magic = read_line(&mut input, "magic line")?;
        let version = parse_magic(&magic)?;
        if version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "dump",
                found: version,
                supported: DUMP_VERSION,
            });
        }
        let start = input.offset;
        let line = read_line(&mut input, "header")?;
        let header: DumpHeader = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            offset: start,
            context: format!("dump header: {e}"),
        })?;
        if header.version != version {
            return Err(Error::UnsupportedVersion {
                kind: "dump header",
                found: header.version,
                supported: DUMP_VERSION,
            });
        }
        let catalog = header.catalog()?;
        Ok(Self {
            input,
            header,
            catalog,
            done: false,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.input.offset
    }

    fn next_record(&mut self) -> Result<Option<ImageRecord>> {
        let mut tag = [0u8; 1];
        loop {
            match self.input.read(&mut tag) {
                Ok(0) => return Ok(None),
                Ok(_) => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(io_at(e, self.input.offset, "record tag")),
            }
        }
        if tag[0] != RECORD_TAG {
            return Err(Error::Malformed {
                offset: self.input.offset - 1,
                context: format!("expected record tag 0x{RECORD_TAG:02x}, found 0x{:02x}", tag[0]),
            });
        }
        let dim = self.header.dim;
        let classes = self.catalog.len();
        let r = &mut self.input;
        let image_id = read_u64(r, "image id")?;
        let ctx = |what: &str| format!("image {image_id} {what}");
        let in_image = |e: Error| e.in_image(image_id);
        let width = read_finite(r, &ctx("width"))?;
        let height = read_finite(r, &ctx("height"))?;
        let flags = read_u8(r, &ctx("flags"))?;
        if flags & !(FLAG_REFINED | FLAG_PER_CLASS | FLAG_LOGITS | FLAG_LABELS) != 0
            || (flags & FLAG_PER_CLASS != 0 && flags & FLAG_REFINED == 0)
        {
            return Err(Error::Malformed {
                offset: r.offset - 1,
                context: ctx(&format!("unknown flags 0x{flags:02x}")),
            });
        }
        let m = read_u32(r, &ctx("proposal count"))? as usize;
        let mut proposals = Vec::with_capacity(m.min(PREALLOC_CAP));
        for i in 0..m {
            let bbox = read_box(r, &ctx(&format!("proposal {i} box")))?.map_err(in_image)?;
            let objectness = read_finite(r, &ctx(&format!("proposal {i} objectness")))?;
            let len = read_u32(r, &ctx(&format!("proposal {i} feature length")))? as usize;
            if len != dim {
                return Err(in_image(Error::dimension(format!("feature of proposal {i}"), dim, len)));
            }
            let mut feature = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut feature)
                .map_err(|e| io_at(e, r.offset, &ctx(&format!("proposal {i} feature"))))?;
            if let Some(j) = feature.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(ctx(&format!("proposal {i} feature entry {j}"))));
            }
            proposals.push(RegionProposal::new(bbox, objectness, feature).map_err(in_image)?);
        }
        let refined = if flags & FLAG_REFINED != 0 {
            if flags & FLAG_PER_CLASS != 0 {
                let c = read_u32(r, &ctx("refined class count"))? as usize;
                if c != classes {
                    return Err(in_image(Error::length("per-class refined boxes", classes, c)));
                }
                Some(RefinedBoxes::PerClass {
                    num_classes: c,
                    boxes: read_boxes(r, m * c, image_id, &ctx("refined boxes"))?,
                })
            } else {
                Some(RefinedBoxes::Agnostic(read_boxes(r, m, image_id, &ctx("refined boxes"))?))
            }
        } else {
            None
        };
        let raw_logits = if flags & FLAG_LOGITS != 0 {
            let c = read_u32(r, &ctx("logit class count"))? as usize;
            if c != classes {
                return Err(in_image(Error::length("raw logit columns", classes, c)));
            }
            let mut v = Vec::with_capacity((m * c).min(PREALLOC_CAP));
            for i in 0..m * c {
                v.push(read_finite(r, &ctx(&format!("logit {i}")))?);
            }
            Some(v)
        } else {
            None
        };
        let labels = if flags & FLAG_LABELS != 0 {
            let mut v = Vec::with_capacity(m.min(PREALLOC_CAP));
            for i in 0..m {
                let present = read_u8(r, &ctx(&format!("label {i}")))?;
                let id = read_u32(r, &ctx(&format!("label {i}")))?;
                v.push(match present {
                    0 => None,
                    1 => Some(id),
                    other => {
                        return Err(Error::Malformed {
                            offset: r.offset - 5,
                            context: ctx(&format!("label {i} presence byte {other}")),
                        })
                    }
                });
            }
            Some(v)
        } else {
            None
        };
        let record = ImageRecord {
            image_id,
            width,
            height,
            proposals,
            refined,
            raw_logits,
            labels,
        };
        record.validate(classes, dim).map_err(in_image)?;
        Ok(Some(record))
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.next_record().transpose();
        if !matches!(out, Some(Ok(_))) {
            self.done = true;
        }
        out
    }
}

fn parse_magic(line: &str) -> Result<u32> {
    let bad = || Error::Malformed {
        offset: 0,
        context: format!("expected '{DUMP_MAGIC} <version>' magic line"),
    };
    let rest = line.strip_prefix(DUMP_MAGIC).ok_or_else(bad)?;
    let rest = rest.strip_prefix(' ').ok_or_else(bad)?;
    rest.parse().map_err(|_| bad())
}

fn read_line<R: BufRead>(input: &mut Counting<R>, what: &str) -> Result<String> {
    let start = input.offset;
    let mut buf = Vec::new();
    (&mut *input)
        .take(MAX_HEADER_BYTES)
        .read_until(b'\n', &mut buf)
        .map_err(|e| io_at(e, input.offset, what))?;
    if buf.last() != Some(&b'\n') {
        return Err(Error::Truncated {
            offset: input.offset,
            context: format!("{what} is not newline-terminated"),
        });
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| Error::Malformed {
        offset: start,
        context: format!("{what} is not UTF-8"),
    })
}

fn io_at(e: std::io::Error, offset: u64, what: &str) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Truncated {
            offset,
            context: format!("end of input while reading {what}"),
        }
    } else {
        Error::Malformed {
            offset,
            context: format!("{what}: {e}"),
        }
    }
}

fn read_u8<R: Read>(r: &mut Counting<R>, what: &str) -> Result<u8> {
    r.read_u8().map_err(|e| io_at(e, r.offset, what))
}

fn read_u32<R: Read>(r: &mut Counting<R>, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| io_at(e, r.offset, what))
}

fn read_u64<R: Read>(r: &mut Counting<R>, what: &str) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(|e| io_at(e, r.offset, what))
}

fn read_finite<R: Read>(r: &mut Counting<R>, what: &str) -> Result<f64> {
    let v = r.read_f64::<LittleEndian>().map_err(|e| io_at(e, r.offset, what))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(v)
}

/// Outer error is I/O or non-finite; inner error is box validation.
fn read_box<R: Read>(r: &mut Counting<R>, what: &str) -> Result<Result<BoundingBox>> {
    let mut c = [0f64; 4];
    for v in &mut c {
        *v = read_finite(r, what)?;
    }
    Ok(BoundingBox::new(c[0], c[1], c[2], c[3]))
}

fn read_boxes<R: Read>(r: &mut Counting<R>, n: usize, image_id: u64, what: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::with_capacity(n.min(PREALLOC_CAP));
    for _ in 0..n {
        out.push(read_box(r, what)?.map_err(|e| e.in_image(image_id))?);
    }
    Ok(out)
}

pub struct DumpWriter<W: Write> {
    out: W,
    classes: usize,
    dim: usize,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, header: &DumpHeader) -> Result<Self> {
        let catalog = header.catalog()?;
        if header.version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "dump header",
                found: header.version,
                supported: DUMP_VERSION,
            });
        }
        let json = serde_json::to_string(header).map_err(|e| Error::Json {
            context: "dump header".into(),
            source: e,
        })?;
        let io = |e| Error::io("<dump>", e);
        writeln!(out, "{DUMP_MAGIC} {DUMP_VERSION}").map_err(io)?;
        writeln!(out, "{json}").map_err(io)?;
        Ok(Self {
            out,
            classes: catalog.len(),
            dim: catalog.dim(),
        })
    }

    pub fn write_record(&mut self, record: &ImageRecord) -> Result<()> {
        record.validate(self.classes, self.dim).map_err(|e| e.in_image(record.image_id))?;
        if let Some(l) = &record.raw_logits {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("image {} raw logits", record.image_id)));
            }
        }
        if !(record.width.is_finite() && record.height.is_finite()) {
            return Err(Error::NonFinite(format!("image {} size", record.image_id)));
        }
        let m = u32::try_from(record.proposals.len()).map_err(|_| Error::contract("too many proposals"))?;
        let mut flags = 0u8;
        match &record.refined {
            Some(RefinedBoxes::Agnostic(_)) => flags |= FLAG_REFINED,
            Some(RefinedBoxes::PerClass { .. }) => flags |= FLAG_REFINED | FLAG_PER_CLASS,
            None => {}
        }
        if record.raw_logits.is_some() {
            flags |= FLAG_LOGITS;
        }
        if record.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        let w = &mut self.out;
        let mut write = || -> std::io::Result<()> {
            let mut buf = Vec::new();
            buf.write_u8(RECORD_TAG)?;
            buf.write_u64::<LittleEndian>(record.image_id)?;
            buf.write_f64::<LittleEndian>(record.width)?;
            buf.write_f64::<LittleEndian>(record.height)?;
            buf.write_u8(flags)?;
            buf.write_u32::<LittleEndian>(m)?;
            let put_box = |buf: &mut Vec<u8>, b: &BoundingBox| -> std::io::Result<()> {
                for v in b.to_array() {
                    buf.write_f64::<LittleEndian>(v)?;
                }
                Ok(())
            };
            for p in &record.proposals {
                put_box(&mut buf, &p.bbox)?;
                buf.write_f64::<LittleEndian>(p.objectness)?;
                buf.write_u32::<LittleEndian>(p.feature.len() as u32)?;
                for &v in &p.feature {
                    buf.write_f32::<LittleEndian>(v)?;
                }
            }
            match &record.refined {
                Some(RefinedBoxes::Agnostic(boxes)) => {
                    for b in boxes {
                        put_box(&mut buf, b)?;
                    }
                }
                Some(RefinedBoxes::PerClass { num_classes, boxes }) => {
                    buf.write_u32::<LittleEndian>(*num_classes as u32)?;
                    for b in boxes {
                        put_box(&mut buf, b)?;
                    }
                }
                None => {}
            }
            if let Some(logits) = &record.raw_logits {
                buf.write_u32::<LittleEndian>(self.classes as u32)?;
                for &v in logits {
                    buf.write_f64::<LittleEndian>(v)?;
                }
            }
            if let Some(labels) = &record.labels {
                for l in labels {
                    buf.write_u8(l.is_some() as u8)?;
                    buf.write_u32::<LittleEndian>(l.unwrap_or(0))?;
                }
            }
            w.write_all(&buf)
        };
        write().map_err(|e| Error::io("<dump>", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io("<dump>", e))?;
        Ok(self.out)
    }
}

pub fn open_dump(path: &Path) -> Result<DumpReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    DumpReader::new(BufReader::new(file)).map_err(|e| with_path(e, path))
}

/// Writes a whole dump to `path` through a temporary sibling file.
pub fn save_dump<'a>(path: &Path, header: &DumpHeader, records: impl IntoIterator<Item = &'a ImageRecord>) -> Result<()> {
    write_atomically(path, |out| {
        let mut w = DumpWriter::new(out, header)?;
        for r in records {
            w.write_record(r)?;
        }
        w.finish()?;
        Ok(())
    })
}

/// Parses a complete in-memory dump.
pub fn parse_dump(bytes: &[u8]) -> Result<(DumpHeader, Vec<ImageRecord>)> {
    let reader = DumpReader::new(bytes)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<_>>()?;
    Ok((header, records))
}

pub fn encode_dump<'a>(header: &DumpHeader, records: impl IntoIterator<Item = &'a ImageRecord>) -> Result<Vec<u8>> {
    let mut w = DumpWriter::new(Vec::new(), header)?;
    for r in records {
        w.write_record(r)?;
    }
    w.finish()
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    }
}

fn write_atomically(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".partial");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    let result = f(&mut out).and_then(|_| out.flush().map_err(|e| Error::io(&tmp, e)));
    drop(out);
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(with_path(e, path));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Labeled base-class proposals grouped per class, with objectness as the
/// sample score. Classes are ordered as in the catalog; classes without
/// samples are omitted.
pub fn labeled_samples<I>(records: I, catalog: &ClassCatalog) -> Result<Vec<ClassSamples>>
where
    I: IntoIterator<Item = Result<ImageRecord>>,
{
    let mut per_class: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); catalog.len()];
    for record in records {
        let record = record?;
        let Some(labels) = &record.labels else { continue };
        for (p, label) in record.proposals.iter().zip(labels) {
            let Some(id) = label else { continue };
            let c = catalog
                .index_of(*id)
                .ok_or_else(|| Error::contract(format!("label {id} not in catalog")).in_image(record.image_id))?;
            if catalog.split(c) != Split::Base {
                return Err(Error::contract(format!("label {id} is a novel class")).in_image(record.image_id));
            }
            per_class[c].0.push(p.feature.iter().map(|&v| v as f64).collect());
            per_class[c].1.push(p.objectness);
        }
    }
    Ok(per_class
        .into_iter()
        .enumerate()
        .filter(|(_, (f, _))| !f.is_empty())
        .map(|(c, (features, scores))| ClassSamples {
            class_id: catalog.classes()[c].id,
            features,
            scores: Some(scores),
        })
        .collect())
}

fn check_doc(kind: &'static str, expected: &str, format: &str, version: u32) -> Result<()> {
    if format != expected {
        return Err(Error::contract(format!("expected a {expected} document, found '{format}'")));
    }
    if version != DOC_VERSION {
        return Err(Error::UnsupportedVersion {
            kind,
            found: version,
            supported: DOC_VERSION,
        });
    }
    Ok(())
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Json {
        context: what.to_string(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        context: "serialize".into(),
        source: e,
    })?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    write_atomically(path, |out| out.write_all(&bytes).map_err(|e| Error::io(path, e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankClass {
    pub id: u32,
    pub name: String,
    pub split: Split,
    pub text_embedding: Vec<f64>,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankDoc {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub classes: Vec<BankClass>,
    pub mean_base_prototype: Vec<f64>,
    pub mean_base_text: Vec<f64>,
    #[serde(default)]
    pub provenance: Option<BankProvenance>,
}

pub const BANK_FORMAT: &str = "ovrescore-bank";
/// Tolerance for stored vs recomputed base means in a bank file.
pub const BANK_MEAN_TOLERANCE: f64 = 1e-9;

impl BankDoc {
    pub fn from_bank(bank: &PrototypeBank) -> Self {
        Self {
            format: BANK_FORMAT.into(),
            version: DOC_VERSION,
            dim: bank.dim(),
            classes: bank
                .classes
                .iter()
                .zip(bank.text_embeddings.iter().zip(&bank.prototypes))
                .map(|(c, (t, p))| BankClass {
                    id: c.id,
                    name: c.name.clone(),
                    split: c.split,
                    text_embedding: t.clone(),
                    prototype: p.clone(),
                })
                .collect(),
            mean_base_prototype: bank.mean_base_prototype.clone(),
            mean_base_text: bank.mean_base_text.clone(),
            provenance: bank.provenance.clone(),
        }
    }

    pub fn into_bank(self) -> Result<PrototypeBank> {
        check_doc("bank", BANK_FORMAT, &self.format, self.version)?;
        if self.mean_base_prototype.len() != self.dim {
            return Err(Error::dimension("bank mean prototype", self.dim, self.mean_base_prototype.len()));
        }
        let mut bank = PrototypeBank {
            classes: Vec::with_capacity(self.classes.len()),
            text_embeddings: Vec::with_capacity(self.classes.len()),
            prototypes: Vec::with_capacity(self.classes.len()),
            mean_base_prototype: self.mean_base_prototype,
            mean_base_text: self.mean_base_text,
            provenance: self.provenance,
        };
        for c in self.classes {
            bank.classes.push(ClassInfo {
                id: c.id,
                name: c.name,
                split: c.split,
            });
            bank.text_embeddings.push(c.text_embedding);
            bank.prototypes.push(c.prototype);
        }
        bank.validate(BANK_MEAN_TOLERANCE)?;
        Ok(bank)
    }
}

pub fn parse_bank(bytes: &[u8]) -> Result<PrototypeBank> {
    parse_json::<BankDoc>(bytes, "bank")?.into_bank()
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank> {
    parse_bank(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub fn save_bank(path: &Path, bank: &PrototypeBank) -> Result<()> {
    write_json(path, &BankDoc::from_bank(bank))
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Json { context, source } => Error::Json {
            context: format!("{}: {context}", path.display()),
            source,
        },
        e => e,
    }
}

pub const DETECTIONS_FORMAT: &str = "ovrescore-detections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    /// Proposal-stage survivors, kept for the recall metric.
    pub proposals: Vec<ScoredProposal>,
}

impl From<ImageOutput> for ImageDetections {
    fn from(o: ImageOutput) -> Self {
        Self {
            image_id: o.image_id,
            detections: o.detections,
            proposals: o.proposals,
        }
    }
}

impl From<ImageDetections> for ImageOutput {
    fn from(d: ImageDetections) -> Self {
        Self {
            image_id: d.image_id,
            detections: d.detections,
            proposals: d.proposals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsDoc {
    pub format: String,
    pub version: u32,
    /// Effective pipeline configuration the detections were produced with.
    pub config: PipelineConfig,
    #[serde(default)]
    pub bank: Option<BankProvenance>,
    pub classes: Vec<ClassInfo>,
    pub images: Vec<ImageDetections>,
}

impl DetectionsDoc {
    pub fn new(config: PipelineConfig, bank: Option<BankProvenance>, classes: Vec<ClassInfo>, outputs: Vec<ImageOutput>) -> Self {
        Self {
            format: DETECTIONS_FORMAT.into(),
            version: DOC_VERSION,
            config,
            bank,
            classes,
            images: outputs.into_iter().map(Into::into).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        check_doc("detections", DETECTIONS_FORMAT, &self.format, self.version)
    }
}

pub fn parse_detections(bytes: &[u8]) -> Result<DetectionsDoc> {
    let doc: DetectionsDoc = parse_json(bytes, "detections")?;
    doc.check()?;
    Ok(doc)
}

pub fn load_detections(path: &Path) -> Result<DetectionsDoc> {
    parse_detections(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub fn save_detections(path: &Path, doc: &DetectionsDoc) -> Result<()> {
    write_json(path, doc)
}

pub const GROUND_TRUTH_FORMAT: &str = "ovrescore-ground-truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthDoc {
    pub format: String,
    pub version: u32,
    pub classes: Vec<ClassInfo>,
    pub images: Vec<GroundTruthRecord>,
}

impl GroundTruthDoc {
    pub fn new(classes: Vec<ClassInfo>, images: Vec<GroundTruthRecord>) -> Self {
        Self {
            format: GROUND_TRUTH_FORMAT.into(),
            version: DOC_VERSION,
            classes,
            images,
        }
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::labels_only(self.classes.clone())
    }
}

pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruthDoc> {
    let doc: GroundTruthDoc = parse_json(bytes, "ground truth")?;
    check_doc("ground truth", GROUND_TRUTH_FORMAT, &doc.format, doc.version)?;
    let catalog = doc.catalog()?;
    for g in &doc.images {
        g.validate(&catalog).map_err(|e| e.in_image(g.image_id))?;
    }
    Ok(doc)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthDoc> {
    parse_ground_truth(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub const EVAL_FORMAT: &str = "ovrescore-eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDoc {
    pub format: String,
    pub version: u32,
    pub config: PipelineConfig,
    #[serde(default)]
    pub bank: Option<BankProvenance>,
    pub report: EvalReport,
}

impl EvalDoc {
    pub fn new(config: PipelineConfig, bank: Option<BankProvenance>, report: EvalReport) -> Self {
        Self {
            format: EVAL_FORMAT.into(),
            version: DOC_VERSION,
            config,
            bank,
            report,
        }
    }
}

pub fn parse_eval(bytes: &[u8]) -> Result<EvalDoc> {
    let doc: EvalDoc = parse_json(bytes, "eval report")?;
    check_doc("eval report", EVAL_FORMAT, &doc.format, doc.version)?;
    Ok(doc)
}

pub fn load_eval(path: &Path) -> Result<EvalDoc> {
    parse_eval(&read_file(path)?).map_err(|e| in_file(e, path))
}

pub const ABLATION_FORMAT: &str = "ovrescore-ablation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub switches: Switches,
    pub map_novel: f64,
    pub map_base: f64,
    pub map_all: f64,
    pub max_recall: RecallReport,
    pub recall_score_stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationDoc {
    pub format: String,
    pub version: u32,
    /// Configuration shared by all rows; its switches are ignored.
    pub config: PipelineConfig,
    #[serde(default)]
    pub bank: Option<BankProvenance>,
    pub rows: Vec<AblationRow>,
}

impl AblationDoc {
    pub fn new(config: PipelineConfig, bank: Option<BankProvenance>, rows: Vec<AblationRow>) -> Self {
        Self {
            format: ABLATION_FORMAT.into(),
            version: DOC_VERSION,
            config,
            bank,
            rows,
        }
    }
}

pub const BENCH_FORMAT: &str = "ovrescore-bench";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchDoc {
    pub format: String,
    pub version: u32,
    pub config: PipelineConfig,
    pub proposals_per_image: f64,
    pub classes: usize,
    pub dim: usize,
    pub summary: LatencySummary,
}

impl BenchDoc {
    pub fn new(config: PipelineConfig, proposals_per_image: f64, classes: usize, dim: usize, summary: LatencySummary) -> Self {
        Self {
            format: BENCH_FORMAT.into(),
            version: DOC_VERSION,
            config,
            proposals_per_image,
            classes,
            dim,
            summary,
        }
    }
}

pub const REPORT_FORMAT: &str = "ovrescore-report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSide {
    pub config: PipelineConfig,
    pub map_novel: f64,
    pub map_base: f64,
    pub map_all: f64,
    pub max_recall: RecallReport,
    pub recall_score_stream: String,
    /// Mean base minus mean novel final score over true positives.
    pub tp_score_gap: f64,
    pub tp_scores: ScoreStats,
    pub scores: ScoreStats,
}

impl ReportSide {
    fn of(doc: &EvalDoc) -> Self {
        let r = &doc.report;
        Self {
            config: doc.config.clone(),
            map_novel: r.map_novel,
            map_base: r.map_base,
            map_all: r.map_all,
            max_recall: r.max_recall,
            recall_score_stream: r.recall_score_stream.clone(),
            tp_score_gap: r.tp_scores.mean_gap(),
            tp_scores: r.tp_scores.clone(),
            scores: r.scores.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDelta {
    pub map_novel: f64,
    pub map_base: f64,
    pub map_all: f64,
    pub recall_novel: f64,
    pub recall_base: f64,
    pub recall_all: f64,
    pub tp_score_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDelta {
    pub class_id: u32,
    pub name: String,
    pub split: Split,
    pub baseline_ap50: Option<f64>,
    pub aggregated_ap50: Option<f64>,
}

/// Paired comparison of a baseline and an aggregated evaluation; deltas are
/// aggregated minus baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDoc {
    pub format: String,
    pub version: u32,
    pub baseline: ReportSide,
    pub aggregated: ReportSide,
    pub delta: ReportDelta,
    pub per_class: Vec<ClassDelta>,
}

impl ReportDoc {
    pub fn compare(baseline: &EvalDoc, aggregated: &EvalDoc) -> Result<Self> {
        let ids = |d: &EvalDoc| d.report.per_class.iter().map(|c| c.class_id).collect::<Vec<_>>();
        if ids(baseline) != ids(aggregated) {
            return Err(Error::contract("eval reports cover different class lists"));
        }
        let (b, a) = (ReportSide::of(baseline), ReportSide::of(aggregated));
        let delta = ReportDelta {
            map_novel: a.map_novel - b.map_novel,
            map_base: a.map_base - b.map_base,
            map_all: a.map_all - b.map_all,
            recall_novel: a.max_recall.novel - b.max_recall.novel,
            recall_base: a.max_recall.base - b.max_recall.base,
            recall_all: a.max_recall.all - b.max_recall.all,
            tp_score_gap: a.tp_score_gap - b.tp_score_gap,
        };
        let per_class = baseline
            .report
            .per_class
            .iter()
            .zip(&aggregated.report.per_class)
            .map(|(x, y)| ClassDelta {
                class_id: x.class_id,
                name: x.name.clone(),
                split: x.split,
                baseline_ap50: x.ap50,
                aggregated_ap50: y.ap50,
            })
            .collect();
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: DOC_VERSION,
            baseline: b,
            aggregated: a,
            delta,
            per_class,
        })
    }
}

/// Partial pipeline settings from a config file; unset fields fall back to
/// the profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub temperature: Option<f64>,
    pub proposal_nms_iou: Option<f64>,
    pub class_nms_iou: Option<f64>,
    pub proposal_keep_max: Option<usize>,
    pub detections_per_image: Option<usize>,
    pub score_threshold: Option<f64>,
    pub mode: Option<crate::pipeline::Mode>,
    pub switches: Option<Switches>,
    pub normalize_embeddings: Option<bool>,
    pub novel_offset: Option<f64>,
}

impl ConfigFile {
    pub fn apply(&self, base: PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            k: self.k.unwrap_or(base.k),
            alpha: self.alpha.unwrap_or(base.alpha),
            gamma: self.gamma.unwrap_or(base.gamma),
            temperature: self.temperature.unwrap_or(base.temperature),
            proposal_nms_iou: self.proposal_nms_iou.unwrap_or(base.proposal_nms_iou),
            class_nms_iou: self.class_nms_iou.unwrap_or(base.class_nms_iou),
            proposal_keep_max: self.proposal_keep_max.unwrap_or(base.proposal_keep_max),
            detections_per_image: self.detections_per_image.unwrap_or(base.detections_per_image),
            score_threshold: self.score_threshold.unwrap_or(base.score_threshold),
            mode: self.mode.unwrap_or(base.mode),
            switches: self.switches.unwrap_or(base.switches),
            normalize_embeddings: self.normalize_embeddings.unwrap_or(base.normalize_embeddings),
            novel_offset: self.novel_offset.or(base.novel_offset),
        }
    }

    /// Whether the file sets any profile-controlled value.
    pub fn overrides_profile_values(&self) -> bool {
        self.k.is_some() || self.alpha.is_some() || self.gamma.is_some()
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

/// Parses TOML when `toml` is set, JSON otherwise.
pub fn parse_config_text<T: DeserializeOwned>(text: &str, toml: bool, what: &str) -> Result<T> {
    if toml {
        ::toml::from_str(text).map_err(|e| Error::Malformed {
            offset: e.span().map_or(0, |s| s.start as u64),
            context: format!("{what}: {}", e.message()),
        })
    } else {
        serde_json::from_str(text).map_err(|e| Error::Json {
            context: what.to_string(),
            source: e,
        })
    }
}

fn load_config_text<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, is_toml(path), &format!("{}: {what}", path.display()))
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile> {
    load_config_text(path, "config")
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let spec: SceneSpec = load_config_text(path, "scene spec")?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_dataset;

    fn small_dataset() -> crate::synthetic::SyntheticDataset {
        let spec = SceneSpec {
            dim: 8,
            base_classes: 3,
            novel_classes: 2,
            min_objects: 1,
            max_objects: 3,
            background_blobs: 1,
            samples_per_class: 4,
            ..SceneSpec::default()
        };
        generate_dataset(&spec, 3).unwrap()
    }

    fn bytes_of(ds: &crate::synthetic::SyntheticDataset) -> Vec<u8> {
        let header = DumpHeader::from_catalog(&ds.catalog, true, Some(ds.spec.temperature));
        encode_dump(&header, &ds.records).unwrap()
    }

    #[test]
    fn dump_round_trip() {
        let ds = small_dataset();
        let (header, records) = parse_dump(&bytes_of(&ds)).unwrap();
        assert_eq!(header.catalog().unwrap(), ds.catalog);
        assert_eq!(records, ds.records);
    }

    #[test]
    fn per_class_boxes_round_trip() {
        let ds = small_dataset();
        let mut rec = ds.records[0].clone();
        let c = ds.catalog.len();
        let b = rec.proposals.iter().flat_map(|p| std::iter::repeat_n(p.bbox, c)).collect();
        rec.refined = Some(RefinedBoxes::PerClass { num_classes: c, boxes: b });
        rec.labels = None;
        rec.raw_logits = None;
        let header = DumpHeader::from_catalog(&ds.catalog, false, None);
        let (_, back) = parse_dump(&encode_dump(&header, [&rec]).unwrap()).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn every_truncation_is_reported_with_offset() {
        let ds = small_dataset();
        let bytes = bytes_of(&ds);
        let header_end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(1).unwrap().0 + 1;
        for cut in (0..bytes.len()).step_by(37) {
            let r = parse_dump(&bytes[..cut]);
            if cut == header_end {
                assert_eq!(r.unwrap().1.len(), 0);
                continue;
            }
            match r {
                Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut as u64),
                Ok((_, recs)) => assert!(recs.len() < ds.records.len() && cut > header_end),
                Err(e) => panic!("cut {cut}: {e}"),
            }
        }
    }

    #[test]
    fn truncated_mid_record() {
        let ds = small_dataset();
        let bytes = bytes_of(&ds);
        let cut = bytes.len() - 3;
        match parse_dump(&bytes[..cut]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_feature_length_names_the_image() {
        let ds = small_dataset();
        let mut bytes = bytes_of(&ds);
        let header = DumpHeader::from_catalog(&ds.catalog, true, Some(ds.spec.temperature));
        let prefix = encode_dump(&header, &[]).unwrap().len();
        // tag, id, width, height, flags, M, then the first box and objectness.
        let len_at = prefix + 1 + 8 + 8 + 8 + 1 + 4 + 32 + 8;
        bytes[len_at..len_at + 4].copy_from_slice(&4u32.to_le_bytes());
        let err = parse_dump(&bytes).unwrap_err();
        match &err {
            Error::Image { image_id, source } => {
                assert_eq!(*image_id, ds.records[0].image_id);
                assert!(matches!(**source, Error::DimensionMismatch { expected: 8, found: 4, .. }));
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("image 0"));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let ds = small_dataset();
        let mut bytes = bytes_of(&ds);
        bytes[DUMP_MAGIC.len() + 1] = b'7';
        assert!(matches!(parse_dump(&bytes), Err(Error::UnsupportedVersion { found: 7, .. })));
        assert!(matches!(parse_dump(b"NOTADUMP 1\n{}\n"), Err(Error::Malformed { .. })));
    }

    #[test]
    fn non_finite_feature_is_named() {
        let ds = small_dataset();
        let mut bytes = bytes_of(&ds);
        let header = DumpHeader::from_catalog(&ds.catalog, true, Some(ds.spec.temperature));
        let prefix = encode_dump(&header, &[]).unwrap().len();
        let feat_at = prefix + 1 + 8 + 8 + 8 + 1 + 4 + 32 + 8 + 4;
        bytes[feat_at..feat_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_dump(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn writer_rejects_mismatched_records() {
        let ds = small_dataset();
        let mut rec = ds.records[0].clone();
        rec.proposals[0].feature.pop();
        let header = DumpHeader::from_catalog(&ds.catalog, true, None);
        assert!(encode_dump(&header, [&rec]).is_err());
    }

    #[test]
    fn streaming_reader_from_file() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let header = DumpHeader::from_catalog(&ds.catalog, true, None);
        save_dump(&path, &header, &ds.records).unwrap();
        let reader = open_dump(&path).unwrap();
        assert_eq!(reader.catalog(), &ds.catalog);
        let recs: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(recs, ds.records);
        assert!(!dir.path().join("d.bin.partial").exists());
        assert!(matches!(open_dump(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn labeled_samples_group_base_objects() {
        let ds = small_dataset();
        let samples = labeled_samples(ds.records.iter().cloned().map(Ok), &ds.catalog).unwrap();
        let total: usize = ds
            .records
            .iter()
            .map(|r| r.labels.as_ref().unwrap().iter().filter(|l| l.is_some()).count())
            .sum();
        assert_eq!(samples.iter().map(|s| s.features.len()).sum::<usize>(), total);
        for s in &samples {
            let c = ds.catalog.index_of(s.class_id).unwrap();
            assert_eq!(ds.catalog.split(c), Split::Base);
        }
    }

    #[test]
    fn bank_round_trip_and_mean_check() {
        let ds = small_dataset();
        let base = crate::prototypes::compute_base_prototypes(&ds.samples, crate::prototypes::SamplingStrategy::TopK { k: 2 }).unwrap();
        let mut bank = crate::prototypes::extrapolate_novel_prototypes(&base, &ds.catalog).unwrap();
        bank.provenance = Some(BankProvenance {
            strategy: crate::prototypes::SamplingStrategy::TopK { k: 2 },
            normalized_embeddings: false,
        });
        let bytes = to_json_bytes(&BankDoc::from_bank(&bank)).unwrap();
        assert_eq!(parse_bank(&bytes).unwrap(), bank);

        let mut doc = BankDoc::from_bank(&bank);
        doc.mean_base_prototype[0] += 1e-6;
        assert!(doc.into_bank().is_err());
        let mut doc = BankDoc::from_bank(&bank);
        doc.version = 2;
        assert!(matches!(doc.into_bank(), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn empty_detections_document() {
        let doc = DetectionsDoc::new(PipelineConfig::default(), None, vec![], vec![]);
        let bytes = to_json_bytes(&doc).unwrap();
        assert_eq!(parse_detections(&bytes).unwrap(), doc);
    }

    #[test]
    fn detections_round_trip_with_provenance() {
        let ds = small_dataset();
        let engine = crate::pipeline::Engine::new(
            &ds.catalog,
            None,
            PipelineConfig {
                switches: Switches { arp_lq: true, aoc_vs: false, aoc_lq: true },
                ..PipelineConfig::default()
            },
        )
        .unwrap();
        let outs = engine.run_batch(&ds.records).unwrap().images;
        assert!(outs.iter().any(|o| !o.detections.is_empty()));
        let doc = DetectionsDoc::new(engine.config().clone(), None, ds.catalog.classes().to_vec(), outs);
        let bytes = to_json_bytes(&doc).unwrap();
        let back = parse_detections(&bytes).unwrap();
        assert_eq!(back, doc);
        assert_eq!(to_json_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn ground_truth_round_trip() {
        let ds = small_dataset();
        let doc = GroundTruthDoc::new(ds.catalog.classes().to_vec(), ds.ground_truth.clone());
        let back = parse_ground_truth(&to_json_bytes(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
        let mut bad = doc.clone();
        bad.images[0].objects[0].class_id = 999;
        assert!(parse_ground_truth(&to_json_bytes(&bad).unwrap()).is_err());
    }

    #[test]
    fn config_file_overrides() {
        let cfg: ConfigFile = parse_config_text("alpha = 0.2\nmode = \"sparse\"\n", true, "t").unwrap();
        let eff = cfg.apply(PipelineConfig::default());
        assert_eq!(eff.alpha, 0.2);
        assert_eq!(eff.mode, crate::pipeline::Mode::Sparse);
        assert_eq!(eff.k, 3);
        assert!(cfg.overrides_profile_values());
        assert!(parse_config_text::<ConfigFile>("bogus = 1\n", true, "t").is_err());
        let spec: SceneSpec = parse_config_text(r#"{"seed": 3}"#, false, "s").unwrap();
        assert_eq!(spec.seed, 3);
    }
}
