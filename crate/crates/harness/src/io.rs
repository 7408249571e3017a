//! File formats and the staged writer every command goes through.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smug_core::fourier::ComplexImage;
use smug_core::robustness::MetricsRow;

use crate::error::{io_err, HarnessError, Result};

/// PSNR values above this (including exact reconstructions) are written as
/// this value.
pub const PSNR_CAP: f64 = 99.0;

pub const NORMALIZATION_NOTE: &str =
    "ground-truth images are scaled into [-1, 1] in the image domain before k-space simulation";
pub const ATTACK_STEP_RULE: &str =
    "l-infinity PGD from zero, sign-gradient steps of step_factor*eps/steps, box projection then sampling mask after each step, best iterate kept";

/// Float formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_psnr(v: f64) -> String {
    fmt_f64(v.min(PSNR_CAP))
}

fn fmt_opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// An in-memory CSV table whose last column is always `config_hash`.
#[derive(Clone, Debug)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    hash: String,
}

impl Table {
    pub fn new(columns: &[&str], config_hash: &str) -> Self {
        Self {
            header: columns
                .iter()
                .map(|c| c.to_string())
                .chain(["config_hash".to_string()])
                .collect(),
            rows: Vec::new(),
            hash: config_hash.to_string(),
        }
    }

    pub fn push(&mut self, mut row: Vec<String>) {
        assert_eq!(row.len() + 1, self.header.len(), "row width");
        row.push(self.hash.clone());
        self.rows.push(row);
    }

    /// Pushes a row that carries its own hash (used when aggregating).
    pub fn push_with_hash(&mut self, mut row: Vec<String>, hash: String) {
        assert_eq!(row.len() + 1, self.header.len(), "row width");
        row.push(hash);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))
    }
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "method",
    "kind",
    "grid_value",
    "clean_psnr",
    "clean_ssim",
    "noise_psnr",
    "noise_ssim",
    "robust_psnr",
    "robust_ssim",
    "rob_error_mean",
    "bound_Cn",
    "holds",
    "wall_seconds",
];

pub fn metrics_table(rows: &[MetricsRow], config_hash: &str) -> Table {
    let mut t = Table::new(&METRICS_COLUMNS, config_hash);
    for r in rows {
        t.push(vec![
            r.method.clone(),
            r.kind.clone(),
            fmt_f64(r.grid_value),
            fmt_psnr(r.clean_psnr),
            fmt_f64(r.clean_ssim),
            fmt_psnr(r.noise_psnr),
            fmt_f64(r.noise_ssim),
            fmt_psnr(r.robust_psnr),
            fmt_f64(r.robust_ssim),
            fmt_f64(r.rob_error_mean),
            fmt_opt(r.bound_cn, fmt_f64),
            fmt_opt(r.holds, |b| b.to_string()),
            fmt_opt(r.wall_seconds, fmt_f64),
        ]);
    }
    t
}

/// A parsed CSV file: header plus string records.
#[derive(Clone, Debug)]
pub struct CsvFile {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Distinct config hashes named in the file.
    pub fn hashes(&self) -> Vec<String> {
        let Some(c) = self.column("config_hash") else {
            return Vec::new();
        };
        let mut h: Vec<String> = self.rows.iter().map(|r| r[c].clone()).collect();
        h.sort();
        h.dedup();
        h
    }
}

// dataset files

pub const DATA_MAGIC: &[u8; 8] = b"SMUGDATA";
pub const DATA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config_hash: String,
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub normalization: String,
}

/// Magic, `u32` version, `u64` header length, JSON header, then the real and
/// imaginary planes of every image as little-endian float64.
pub fn dataset_to_bytes(images: &[ComplexImage], split: &str, config_hash: &str) -> Result<Vec<u8>> {
    let (height, width) = images.first().map(|i| i.shape()).unwrap_or((0, 0));
    if images.iter().any(|i| i.shape() != (height, width)) {
        return Err(HarnessError::Usage("dataset images differ in shape".into()));
    }
    let header = DatasetHeader {
        version: DATA_VERSION,
        config_hash: config_hash.into(),
        split: split.into(),
        count: images.len(),
        height,
        width,
        normalization: NORMALIZATION_NOTE.into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + images.len() * 16 * height * width);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for im in images {
        out.extend(im.as_slice().iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(DatasetHeader, Vec<ComplexImage>)> {
    let bad = |m: &str| HarnessError::Core(smug_core::Error::Format(format!("dataset: {m}")));
    if bytes.len() < 20 || &bytes[..8] != DATA_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATA_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    let header: DatasetHeader = serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated header"))?)?;
    let payload = &body[hlen..];
    let per = 2 * header.height * header.width;
    if payload.len() != header.count * per * 8 {
        return Err(bad("payload length does not match header"));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let images = vals
        .chunks_exact(per.max(1))
        .take(header.count)
        .map(|c| ComplexImage::from_vec(header.height, header.width, c.to_vec()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, images))
}

// manifests and staged output

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub complete: bool,
    pub normalization: String,
    pub attack_step_rule: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub outputs: Vec<OutputEntry>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Collects a command's outputs as `.partial` files and publishes them
/// together with a manifest on [`OutputSet::commit`]. Dropping an
/// uncommitted set deletes its partial files.
pub struct OutputSet {
    root: PathBuf,
    command: String,
    config_hash: String,
    seeds: std::collections::BTreeMap<String, u64>,
    started: u64,
    staged: Vec<(PathBuf, PathBuf, OutputEntry)>,
    committed: bool,
}

impl OutputSet {
    pub fn new(
        root: &Path,
        command: &str,
        config_hash: &str,
        seeds: std::collections::BTreeMap<String, u64>,
    ) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.into(),
            config_hash: config_hash.into(),
            seeds,
            started: unix_now(),
            staged: Vec::new(),
            committed: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stages `bytes` for `rel` (a path relative to the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.root.join(rel);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut partial = target.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        fs::write(&partial, bytes).map_err(io_err(&partial))?;
        let entry = OutputEntry {
            path: rel.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        };
        self.staged.push((partial, target.clone(), entry));
        Ok(target)
    }

    pub fn write_table(&mut self, rel: &str, table: &Table) -> Result<PathBuf> {
        self.write(rel, &table.to_bytes()?)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, &serde_json::to_vec_pretty(value)?)
    }

    /// Publishes every staged file and writes `manifest_<command>.json`.
    pub fn commit(mut self) -> Result<RunManifest> {
        for (partial, target, _) in &self.staged {
            fs::rename(partial, target).map_err(io_err(target))?;
        }
        self.committed = true;
        let manifest = RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: unix_now(),
            complete: true,
            normalization: NORMALIZATION_NOTE.into(),
            attack_step_rule: ATTACK_STEP_RULE.into(),
            seeds: self.seeds.clone(),
            outputs: self.staged.iter().map(|s| s.2.clone()).collect(),
        };
        let path = self
            .root
            .join(format!("manifest_{}.json", self.command.replace(' ', "_")));
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for (partial, _, _) in &self.staged {
                let _ = fs::remove_file(partial);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        let v = 0.1 + 0.2;
        let s = fmt_f64(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
        assert_eq!(fmt_psnr(f64::INFINITY), fmt_f64(99.0));
    }

    #[test]
    fn dataset_round_trip() {
        let a = ComplexImage::from_vec(2, 2, (0..8).map(|i| i as f64 / 7.0).collect()).unwrap();
        let b = a.scaled(-0.5);
        let bytes = dataset_to_bytes(&[a.clone(), b.clone()], "train", "abc").unwrap();
        let (h, imgs) = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(h.count, 2);
        assert_eq!(h.config_hash, "abc");
        assert_eq!(imgs, vec![a, b]);
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn table_quotes_and_appends_hash() {
        let mut t = Table::new(&["a", "b"], "h");
        t.push(vec!["x,y".into(), "1".into()]);
        let s = String::from_utf8(t.to_bytes().unwrap()).unwrap();
        assert_eq!(s, "a,b,config_hash\n\"x,y\",1,h\n");
    }

    #[test]
    fn dropped_output_set_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut o = OutputSet::new(dir.path(), "x", "h", Default::default()).unwrap();
            o.write("a.csv", b"1").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut o = OutputSet::new(dir.path(), "x", "h", Default::default()).unwrap();
        o.write("sub/a.csv", b"1").unwrap();
        let m = o.commit().unwrap();
        assert!(m.complete);
        assert_eq!(fs::read(dir.path().join("sub/a.csv")).unwrap(), b"1");
        assert!(dir.path().join("manifest_x.json").exists());
    }
}
