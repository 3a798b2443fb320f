//! Newline-delimited dataset records plus a JSON sidecar header.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pln_core::training::{GeneratorConfig, SyntheticSample};
use pln_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT: &str = "pln-dataset";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub units: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub gt: [f64; 2],
    pub duration: f64,
    pub activity: usize,
}

impl From<&SyntheticSample> for Record {
    fn from(s: &SyntheticSample) -> Self {
        let d = s.units.shape()[1];
        Self {
            units: s.units.data().chunks(d).map(<[f64]>::to_vec).collect(),
            tokens: s.tokens.clone(),
            gt: [s.gt_start_sec, s.gt_end_sec],
            duration: s.duration_seconds,
            activity: s.activity_id,
        }
    }
}

impl Record {
    pub fn into_sample(self) -> Result<SyntheticSample> {
        let l = self.units.len();
        let d = self.units.first().map_or(0, Vec::len);
        if l == 0 || d == 0 || self.units.iter().any(|r| r.len() != d) {
            bail!("units must be a non-empty rectangular array");
        }
        if self.tokens.is_empty() {
            bail!("empty token list");
        }
        let [s, e] = self.gt;
        if !(0.0 <= s && s < e && e <= self.duration) {
            bail!("ground truth [{s}, {e}] outside [0, {}]", self.duration);
        }
        Ok(SyntheticSample {
            units: Tensor::new(&[l, d], self.units.concat())?,
            tokens: self.tokens,
            gt_start_sec: s,
            gt_end_sec: e,
            duration_seconds: self.duration,
            activity_id: self.activity,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub l_v: usize,
    pub d_raw: usize,
    pub vocab_size: usize,
    pub generator: GeneratorConfig,
    /// SHA-256 of the record file, hex.
    pub sha256: String,
}

pub fn header_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn encode(samples: &[SyntheticSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &Record::from(s))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes the records and the header; nothing is written if `samples` is empty.
pub fn write(path: &Path, samples: &[SyntheticSample], generator: &GeneratorConfig) -> Result<Header> {
    let first = samples.first().context("refusing to write an empty dataset")?;
    let body = encode(samples)?;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        n_samples: samples.len(),
        l_v: first.units.shape()[0],
        d_raw: first.units.shape()[1],
        vocab_size: generator.vocab_size(),
        generator: generator.clone(),
        sha256: hex(&Sha256::digest(&body)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, &body).with_context(|| format!("writing {}", path.display()))?;
    let mut f = fs::File::create(header_path(path))?;
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n")?;
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).with_context(|| format!("reading {}", hp.display()))?;
    let h: Header = serde_json::from_str(&text).with_context(|| format!("parsing {}", hp.display()))?;
    if h.format != FORMAT || h.version != VERSION {
        bail!("{} is not a {FORMAT} v{VERSION} header", hp.display());
    }
    Ok(h)
}

/// Reads and validates records against the header.
pub fn read(path: &Path) -> Result<(Header, Vec<SyntheticSample>)> {
    let header = read_header(path)?;
    let digest = file_sha256(path)?;
    if digest != header.sha256 {
        bail!("{} does not match the checksum in its header", path.display());
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut samples = Vec::with_capacity(header.n_samples);
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?;
        let s = rec
            .into_sample()
            .with_context(|| format!("{}:{}", path.display(), k + 1))?;
        if s.units.shape() != [header.l_v, header.d_raw] {
            bail!("{}:{}: units {:?} disagree with the header", path.display(), k + 1, s.units.shape());
        }
        if let Some(t) = s.tokens.iter().find(|&&t| t >= header.vocab_size) {
            bail!("{}:{}: token {t} outside the vocabulary", path.display(), k + 1);
        }
        samples.push(s);
    }
    if samples.len() != header.n_samples {
        bail!("header promises {} samples, found {}", header.n_samples, samples.len());
    }
    Ok((header, samples))
}

/// Counts of ground-truth length fractions in `bins` equal bins of `(0, 1]`.
pub fn length_histogram(samples: &[SyntheticSample], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for s in samples {
        h[pln_core::eval::bucket_index(s.length_fraction(), bins)] += 1;
    }
    h
}
