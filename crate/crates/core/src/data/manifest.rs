use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value of the `format` field on manifest header lines.
pub const FORMAT: &str = "cpm2c-manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One video: metadata plus `T×D` frame features, read from disk on first use.
#[derive(Debug)]
pub struct VideoRecord {
    pub video_id: String,
    pub class_id: u32,
    pub split: Split,
    pub frames: usize,
    pub dim: usize,
    file: Option<PathBuf>,
    cache: OnceLock<Tensor>,
}

impl VideoRecord {
    /// A record whose features are already in memory.
    pub fn in_memory(video_id: impl Into<String>, class_id: u32, split: Split, features: Tensor) -> Result<Self> {
        let (frames, dim) = features.dims2()?;
        let video_id = video_id.into();
        if !features.is_finite() {
            return Err(Error::Data(format!("video {video_id} has non-finite features")));
        }
        Ok(VideoRecord {
            video_id,
            class_id,
            split,
            frames,
            dim,
            file: None,
            cache: OnceLock::from(features),
        })
    }

    fn on_disk(video_id: String, class_id: u32, split: Split, frames: usize, dim: usize, file: PathBuf) -> Self {
        VideoRecord {
            video_id,
            class_id,
            split,
            frames,
            dim,
            file: Some(file),
            cache: OnceLock::new(),
        }
    }

    pub fn feature_file(&self) -> Option<&Path> {
        self.file.as_deref()
    }

    pub fn features(&self) -> Result<&Tensor> {
        if let Some(t) = self.cache.get() {
            return Ok(t);
        }
        let path = self
            .file
            .as_ref()
            .ok_or_else(|| Error::Data(format!("video {} has no feature source", self.video_id)))?;
        let t = read_features(path, &self.video_id, self.frames, self.dim)?;
        Ok(self.cache.get_or_init(|| t))
    }
}

pub(crate) fn read_features(path: &Path, video_id: &str, frames: usize, dim: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != frames * dim * 4 {
        return Err(Error::Data(format!(
            "video {video_id}: declared {frames}x{dim} but {} holds {} floats",
            path.display(),
            bytes.len() / 4
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("video {video_id} has non-finite features")));
    }
    Tensor::new([frames, dim], data)
}

/// Writes a tensor as raw little-endian f32, row-major.
pub(crate) fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A validated set of videos with one prompt embedding per class.
#[derive(Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
    pub class_names: BTreeMap<u32, String>,
    pub prompts: BTreeMap<u32, Tensor>,
    /// Frame count and width shared by every record; `None` when empty.
    pub shape: Option<(usize, usize)>,
    by_split: BTreeMap<Split, BTreeMap<u32, Vec<usize>>>,
}

impl DatasetManifest {
    /// Validates and indexes an in-memory record list.
    pub fn new(
        records: Vec<VideoRecord>,
        class_names: BTreeMap<u32, String>,
        prompts: BTreeMap<u32, Tensor>,
    ) -> Result<Self> {
        let mut m = DatasetManifest {
            records,
            class_names,
            prompts,
            shape: None,
            by_split: BTreeMap::new(),
        };
        m.validate(None)?;
        Ok(m)
    }

    fn validate(&mut self, expect: Option<(usize, usize)>) -> Result<()> {
        let mut problems = Vec::new();
        let mut shape = expect;
        let mut seen = HashSet::new();
        let mut splits_of: BTreeMap<u32, BTreeSet<Split>> = BTreeMap::new();
        for r in &self.records {
            if !seen.insert(r.video_id.as_str()) {
                problems.push(format!("duplicate video_id {}", r.video_id));
            }
            match shape {
                None => shape = Some((r.frames, r.dim)),
                Some((t, d)) if (t, d) != (r.frames, r.dim) => problems.push(format!(
                    "video {} is {}x{}, expected {t}x{d}",
                    r.video_id, r.frames, r.dim
                )),
                _ => {}
            }
            splits_of.entry(r.class_id).or_default().insert(r.split);
            if !self.prompts.contains_key(&r.class_id) {
                problems.push(format!("class {} (video {}) has no prompt embedding", r.class_id, r.video_id));
            }
        }
        for (class, splits) in &splits_of {
            if splits.len() > 1 {
                let names: Vec<_> = splits.iter().map(|s| s.as_str()).collect();
                problems.push(format!("class {class} appears in splits {}", names.join(", ")));
            }
        }
        let prompt_dim = self.prompts.values().next().map(|p| p.numel());
        for (class, p) in &self.prompts {
            let want = shape.map(|s| s.1).or(prompt_dim).unwrap_or(0);
            if p.numel() != want || p.rank() != 1 {
                problems.push(format!("prompt for class {class} has shape {:?}, expected [{want}]", p.shape()));
            } else if !p.is_finite() {
                problems.push(format!("prompt for class {class} is not finite"));
            }
        }
        if !problems.is_empty() {
            problems.dedup();
            return Err(Error::Data(format!("invalid manifest: {}", problems.join("; "))));
        }
        self.shape = shape;
        self.by_split.clear();
        for (i, r) in self.records.iter().enumerate() {
            self.by_split
                .entry(r.split)
                .or_default()
                .entry(r.class_id)
                .or_default()
                .push(i);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of `split`, grouped by class in ascending class order.
    pub fn classes_in(&self, split: Split) -> Vec<(u32, &[usize])> {
        self.by_split
            .get(&split)
            .map(|m| m.iter().map(|(&c, v)| (c, v.as_slice())).collect())
            .unwrap_or_default()
    }

    pub fn prompt_token(&self, class_id: u32) -> Result<&Tensor> {
        self.prompts
            .get(&class_id)
            .ok_or_else(|| Error::Data(format!("no prompt embedding for class {class_id}")))
    }

    /// Class ids of `split` in ascending order.
    pub fn class_ids(&self, split: Split) -> Vec<u32> {
        self.classes_in(split).into_iter().map(|(c, _)| c).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_file: Option<String>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
}

/// `<dir>/<stem>.prompts.bin` next to `<dir>/<stem>.jsonl`.
pub fn prompt_sidecar(index: &Path) -> PathBuf {
    let stem = index.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    index.with_file_name(format!("{stem}.prompts.bin"))
}

fn read_prompts(path: &Path) -> Result<BTreeMap<u32, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated prompt file"))
    };
    let count = word(0)? as usize;
    let dim = word(1)? as usize;
    if bytes.len() != 8 + count * (4 + 4 * dim) {
        return Err(bad(&format!("size does not match {count} prompts of width {dim}")));
    }
    let mut out = BTreeMap::new();
    for c in 0..count {
        let base = 2 + c * (1 + dim);
        let class = word(base)?;
        let data = (0..dim).map(|k| word(base + 1 + k).map(|w| f32::from_bits(w) as f64)).collect::<Result<_>>()?;
        if out.insert(class, Tensor::new([dim.max(1)], data).map_err(|_| bad("zero-width prompt"))?).is_some() {
            return Err(bad(&format!("class {class} listed twice")));
        }
    }
    Ok(out)
}

fn write_prompts(path: &Path, prompts: &BTreeMap<u32, Tensor>) -> Result<()> {
    let dim = prompts.values().next().map_or(0, |p| p.numel());
    let mut buf = Vec::new();
    buf.extend_from_slice(&(prompts.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for (class, p) in prompts {
        buf.extend_from_slice(&class.to_le_bytes());
        for &x in p.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines index and its prompt sidecar.
///
/// Feature paths are resolved relative to the index file. Feature files are
/// checked for existence and size here but only read on first access.
/// `expect` pins the frame count and width every record must declare.
pub fn load_manifest(path: &Path, expect: Option<(usize, usize)>) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut class_names = BTreeMap::new();
    let mut header_shape = None;
    let mut problems = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: IndexLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if let Some(format) = &row.format {
            if format != FORMAT {
                return Err(Error::Data(format!("{}: unknown format {format:?}", path.display())));
            }
            if let (Some(t), Some(d)) = (row.t, row.d) {
                header_shape = Some((t, d));
            }
            continue;
        }
        let field = |name: &str| Error::Data(format!("{}:{}: missing field {name}", path.display(), lineno + 1));
        let video_id = row.video_id.ok_or_else(|| field("video_id"))?;
        let class_id = row.class_id.ok_or_else(|| field("class_id"))?;
        let split = row.split.ok_or_else(|| field("split"))?;
        let feature_file = base.join(row.feature_file.ok_or_else(|| field("feature_file"))?);
        let frames = row.t.ok_or_else(|| field("T"))?;
        let dim = row.d.ok_or_else(|| field("D"))?;
        if let Some(name) = row.class_name {
            class_names.insert(class_id, name);
        }
        match fs::metadata(&feature_file) {
            Err(_) => problems.push(format!("video {video_id}: missing feature file {}", feature_file.display())),
            Ok(meta) if meta.len() != (frames * dim * 4) as u64 => problems.push(format!(
                "video {video_id}: declared T={frames}, D={dim} but file holds {} floats",
                meta.len() / 4
            )),
            Ok(_) => {}
        }
        records.push(VideoRecord::on_disk(video_id, class_id, split, frames, dim, feature_file));
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!("invalid manifest: {}", problems.join("; "))));
    }
    let sidecar = prompt_sidecar(path);
    let prompts = if sidecar.exists() {
        read_prompts(&sidecar)?
    } else {
        BTreeMap::new()
    };
    let mut m = DatasetManifest {
        records,
        class_names,
        prompts,
        shape: None,
        by_split: BTreeMap::new(),
    };
    m.validate(expect.or(header_shape))?;
    Ok(m)
}

/// Writes `manifest` as `<dir>/<stem>.jsonl`, `<dir>/<stem>.prompts.bin` and
/// one `<dir>/features/<video_id>.f32` per record. Returns the index path.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path, stem: &str) -> Result<PathBuf> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let index = dir.join(format!("{stem}.jsonl"));
    let file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut w = BufWriter::new(file);
    let (t, d) = manifest.shape.unzip();
    let header = IndexLine {
        format: Some(FORMAT.into()),
        version: Some(1),
        video_id: None,
        class_id: None,
        class_name: None,
        split: None,
        feature_file: None,
        t,
        d,
    };
    let mut emit = |line: &IndexLine| -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{text}").map_err(|e| Error::io(&index, e))
    };
    emit(&header)?;
    for r in &manifest.records {
        let rel = format!("features/{}.f32", r.video_id);
        write_f32(&dir.join(&rel), r.features()?)?;
        emit(&IndexLine {
            format: None,
            version: None,
            video_id: Some(r.video_id.clone()),
            class_id: Some(r.class_id),
            class_name: manifest.class_names.get(&r.class_id).cloned(),
            split: Some(r.split),
            feature_file: Some(rel),
            t: Some(r.frames),
            d: Some(r.dim),
        })?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    write_prompts(&prompt_sidecar(&index), &manifest.prompts)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetManifest {
        let rec = |id: &str, c: u32, s: Split, v: f64| {
            VideoRecord::in_memory(id, c, s, Tensor::full([2, 3], v)).unwrap()
        };
        let prompts = (0..3).map(|c| (c, Tensor::full([3], c as f64 + 1.0))).collect();
        DatasetManifest::new(
            vec![
                rec("a", 0, Split::Train, 0.25),
                rec("b", 0, Split::Train, -1.5),
                rec("c", 1, Split::Val, 3.0),
                rec("d", 2, Split::Test, 7.0),
            ],
            BTreeMap::from([(0, "zero".to_string())]),
            prompts,
        )
        .unwrap()
    }

    #[test]
    fn empty_manifest_with_header_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, format!("{{\"format\":\"{FORMAT}\",\"version\":1,\"T\":8,\"D\":4}}\n")).unwrap();
        let m = load_manifest(&path, None).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.shape, Some((8, 4)));
    }

    #[test]
    fn short_feature_file_names_the_video() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(dir.path().join("v.f32"), vec![0u8; 7 * 2 * 4]).unwrap();
        fs::write(
            &path,
            "{\"video_id\":\"clip42\",\"class_id\":0,\"split\":\"train\",\"feature_file\":\"v.f32\",\"T\":8,\"D\":2}\n",
        )
        .unwrap();
        let err = load_manifest(&path, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("clip42"), "{err}");
    }

    #[test]
    fn missing_file_and_missing_prompt_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"video_id\":\"x\",\"class_id\":0,\"split\":\"train\",\"feature_file\":\"nope.f32\",\"T\":1,\"D\":1}\n",
        )
        .unwrap();
        assert!(load_manifest(&path, None).unwrap_err().to_string().contains("missing feature file"));
        fs::write(dir.path().join("nope.f32"), 1.0f32.to_le_bytes()).unwrap();
        assert!(load_manifest(&path, None).unwrap_err().to_string().contains("no prompt"));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let rec = |id: &str, s: Split| VideoRecord::in_memory(id, 5, s, Tensor::ones([1, 2])).unwrap();
        let err = DatasetManifest::new(
            vec![rec("a", Split::Train), rec("b", Split::Test)],
            BTreeMap::new(),
            BTreeMap::from([(5, Tensor::ones([2]))]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("class 5 appears in splits train, test"), "{err}");
    }

    #[test]
    fn expected_shape_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_manifest(&tiny(), dir.path(), "m").unwrap();
        assert!(load_manifest(&index, Some((2, 3))).is_ok());
        assert!(load_manifest(&index, Some((8, 3))).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let index = write_manifest(&m, dir.path(), "m").unwrap();
        let back = load_manifest(&index, None).unwrap();
        assert_eq!(back.len(), m.len());
        for (a, b) in m.records.iter().zip(&back.records) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.features().unwrap(), b.features().unwrap());
        }
        assert_eq!(back.prompts, m.prompts);
        assert_eq!(back.class_names, m.class_names);
        assert_eq!(back.class_ids(Split::Train), vec![0]);
    }

    #[test]
    fn prompt_token_is_returned_unchanged() {
        let m = tiny();
        assert_eq!(m.prompt_token(2).unwrap(), &Tensor::full([3], 3.0));
        assert!(m.prompt_token(9).is_err());
    }
}
