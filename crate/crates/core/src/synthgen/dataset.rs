//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   manifest.txt          one line per procedure: id split effective height width frames
//!   proc_000/
//!     frames.bin          16-byte header + packed little-endian f32 HWC frames
//!     labels.txt          index t_seconds phase effective box_x box_y box_w box_h
//! ```
//!
//! The frame header is `b"PMFR"`, then `H: u16`, `W: u16`, `C: u16`,
//! a reserved `u16` (zero) and `N: u32`, all little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{BoundingBox, FrameRecord, PhaseLabel, SyntheticProcedure};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.bin";
pub const LABELS_FILE: &str = "labels.txt";
const MAGIC: &[u8; 4] = b"PMFR";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Number of procedures per split, assigned in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70/10/20 by index order; 35/5/10 for fifty procedures.
    pub fn proportional(n: usize) -> Self {
        let train = (n as f64 * 0.7).round() as usize;
        let val = ((n as f64 * 0.1).round() as usize).min(n - train);
        SplitSizes {
            train,
            val,
            test: n - train - val,
        }
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub effective_case: bool,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    fn render(&self) -> String {
        let mut out = String::from("# pmflow dataset manifest v1\n# id split effective height width frames\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                e.id,
                e.split.as_str(),
                u8::from(e.effective_case),
                e.height,
                e.width,
                e.frames
            );
        }
        out
    }

    fn parse(text: &str, file: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::data_format(file, format!("line {}: {msg}", lineno + 1));
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid integer"));
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                split: cols[1].parse().map_err(|_| bad("invalid split"))?,
                effective_case: match cols[2] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("invalid effective flag")),
                },
                height: num(cols[3])?,
                width: num(cols[4])?,
                frames: num(cols[5])?,
            });
        }
        Ok(Manifest { entries })
    }
}

/// Procedures plus their manifest.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub manifest: Manifest,
    pub procedures: Vec<SyntheticProcedure>,
}

impl Dataset {
    pub fn from_procedures(procedures: Vec<SyntheticProcedure>, sizes: SplitSizes) -> Self {
        let manifest = build_manifest(&procedures, sizes);
        Dataset {
            manifest,
            procedures,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&SyntheticProcedure> {
        self.manifest
            .entries
            .iter()
            .zip(&self.procedures)
            .filter(|(e, _)| e.split == split)
            .map(|(_, p)| p)
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&SyntheticProcedure> {
        self.procedures.iter().find(|p| p.id == id)
    }
}

fn build_manifest(procedures: &[SyntheticProcedure], sizes: SplitSizes) -> Manifest {
    Manifest {
        entries: procedures
            .iter()
            .enumerate()
            .map(|(i, p)| ManifestEntry {
                id: p.id.clone(),
                split: sizes.split_of(i),
                effective_case: p.effective_case,
                height: p.height,
                width: p.width,
                frames: p.len(),
            })
            .collect(),
    }
}

fn encode_frames(p: &SyntheticProcedure) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + p.len() * p.frame_len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(p.height as u16).to_le_bytes());
    buf.extend_from_slice(&(p.width as u16).to_le_bytes());
    buf.extend_from_slice(&3u16.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for f in &p.frames {
        for v in &f.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn encode_labels(p: &SyntheticProcedure) -> String {
    let mut out = String::from("# index t_seconds phase effective box_x box_y box_w box_h\n");
    for (i, f) in p.frames.iter().enumerate() {
        let eff = match f.effective {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        let b = f.bbox;
        let _ = writeln!(
            out,
            "{i} {} {} {eff} {} {} {} {}",
            f.t_seconds,
            f.phase.id(),
            b.x,
            b.y,
            b.w,
            b.h
        );
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `procedures` under `root` and returns the manifest. Each procedure
/// directory is staged under a temporary name and renamed into place.
pub fn write_dataset(procedures: &[SyntheticProcedure], root: &Path, sizes: SplitSizes) -> Result<Manifest> {
    if sizes.train + sizes.val + sizes.test != procedures.len() {
        return Err(Error::Config(format!(
            "split sizes {}/{}/{} do not cover {} procedures",
            sizes.train,
            sizes.val,
            sizes.test,
            procedures.len()
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for p in procedures {
        let staging = root.join(format!(".{}.tmp", p.id));
        let target = root.join(&p.id);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        write_file(&staging.join(FRAMES_FILE), &encode_frames(p))?;
        write_file(&staging.join(LABELS_FILE), encode_labels(p).as_bytes())?;
        if target.exists() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(&staging, &target).map_err(|e| Error::io(&target, e))?;
    }
    let manifest = build_manifest(procedures, sizes);
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    write_file(&tmp, manifest.render().as_bytes())?;
    let path = root.join(MANIFEST_FILE);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::data_format(path, "file is missing")
        } else {
            Error::io(path, e)
        }
    })
}

fn decode_frames(path: &Path, bytes: &[u8], entry: &ManifestEntry) -> Result<Vec<Vec<f32>>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::data_format(path, "bad frame header"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let (h, w, c) = (u16_at(4), u16_at(6), u16_at(8));
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if (h, w, c, n) != (entry.height, entry.width, 3, entry.frames) {
        return Err(Error::data_format(
            path,
            format!("header {h}x{w}x{c}, {n} frames disagrees with manifest"),
        ));
    }
    let per_frame = h * w * c;
    let expected = HEADER_LEN + n * per_frame * 4;
    if bytes.len() != expected {
        return Err(Error::data_format(
            path,
            format!("tensor length mismatch: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(per_frame * 4)
        .map(|frame| {
            frame
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect())
}

struct LabelRow {
    t_seconds: f64,
    phase: PhaseLabel,
    effective: Option<bool>,
    bbox: BoundingBox,
}

fn decode_labels(path: &Path, text: &str) -> Result<Vec<LabelRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::data_format(path, format!("line {}: {msg}", lineno + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(bad("expected 8 columns"));
        }
        let index: usize = cols[0].parse().map_err(|_| bad("invalid index"))?;
        if index != rows.len() {
            return Err(bad("frame indices must be consecutive from 0"));
        }
        let phase_id: usize = cols[2].parse().map_err(|_| bad("invalid phase"))?;
        let u = |s: &str| s.parse::<u32>().map_err(|_| bad("invalid box coordinate"));
        rows.push(LabelRow {
            t_seconds: cols[1].parse().map_err(|_| bad("invalid timestamp"))?,
            phase: PhaseLabel::from_id(phase_id).ok_or_else(|| bad("phase id out of range"))?,
            effective: match cols[3] {
                "1" => Some(true),
                "0" => Some(false),
                "-" => None,
                _ => return Err(bad("invalid effective flag")),
            },
            bbox: BoundingBox {
                x: u(cols[4])?,
                y: u(cols[5])?,
                w: u(cols[6])?,
                h: u(cols[7])?,
            },
        });
    }
    Ok(rows)
}

fn read_procedure(root: &Path, entry: &ManifestEntry) -> Result<SyntheticProcedure> {
    let dir: PathBuf = root.join(&entry.id);
    let frames_path = dir.join(FRAMES_FILE);
    let labels_path = dir.join(LABELS_FILE);
    let images = decode_frames(&frames_path, &read_bytes(&frames_path)?, entry)?;
    let text = String::from_utf8(read_bytes(&labels_path)?)
        .map_err(|_| Error::data_format(&labels_path, "not valid UTF-8"))?;
    let labels = decode_labels(&labels_path, &text)?;
    if labels.len() != images.len() {
        return Err(Error::data_format(
            &labels_path,
            format!("{} label rows for {} frames", labels.len(), images.len()),
        ));
    }
    let frames = images
        .into_iter()
        .zip(labels)
        .map(|(image, l)| FrameRecord {
            image,
            phase: l.phase,
            effective: l.effective,
            bbox: l.bbox,
            t_seconds: l.t_seconds,
        })
        .collect();
    Ok(SyntheticProcedure {
        id: entry.id.clone(),
        height: entry.height,
        width: entry.width,
        frames,
        effective_case: entry.effective_case,
    })
}

/// Reads the manifest only.
pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = String::from_utf8(read_bytes(&path)?)
        .map_err(|_| Error::data_format(&path, "not valid UTF-8"))?;
    Manifest::parse(&text, &path)
}

/// Reads every procedure listed in the manifest under `root`.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let procedures = manifest
        .entries
        .iter()
        .map(|e| read_procedure(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        procedures,
    })
}

/// Reads only the procedures of one split.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<SyntheticProcedure>> {
    let manifest = read_manifest(root)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| read_procedure(root, e))
        .collect()
}

/// Reads a single procedure by id.
pub fn read_one(root: &Path, id: &str) -> Result<SyntheticProcedure> {
    let manifest = read_manifest(root)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::data_format(root.join(MANIFEST_FILE), format!("no procedure '{id}'")))?;
    read_procedure(root, entry)
}
