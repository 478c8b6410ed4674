//! Bag datasets on disk, CSV import, and a synthetic witness task.
//!
//! # Embedding files
//!
//! One file per bag, all values little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "MIVC"
//! 4       4         u32 version = 1
//! 8       4         u32 N (instances)
//! 12      4         u32 rank, 1 or 2
//! 16      4*rank    u32 dims: [M] or [P, D]
//! ..      4*N*M     f32 values, instance-major, row-major within an instance
//! ```
//!
//! Two instances `[1.0, 2.0]` and `[3.0, 4.0]`:
//!
//! ```text
//! 4d 49 56 43 01 00 00 00 02 00 00 00 01 00 00 00 02 00 00 00
//! 00 00 80 3f 00 00 00 40 00 00 40 40 00 00 80 40
//! ```
//!
//! # Manifests
//!
//! JSON lines. The first line is a header naming the classes; each further
//! line describes one bag, with `path` relative to the manifest:
//!
//! ```text
//! {"class_names":["neg","pos"]}
//! {"bag_id":"bag00000","label":1,"path":"bags/bag00000.mivc","n_instances":3,"shape":[2,2],"witnesses":[1]}
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LoadError, MivcError, Result};
use crate::fsio;
use crate::numkern::Rng;
use crate::par;
use crate::pooling::{Bag, InstanceEmbedding};

pub const MAGIC: [u8; 4] = *b"MIVC";
pub const VERSION: u32 = 1;
/// Largest bag in the product-image setting this task imitates.
pub const MAX_BAG_SIZE: usize = 21;

const WITNESS_KEY: &str = "witnesses";

/// Serialises instances to the embedding-file layout, narrowing to f32.
pub fn encode_embeddings(instances: &[InstanceEmbedding]) -> Result<Vec<u8>> {
    let first = instances
        .first()
        .ok_or_else(|| MivcError::Precondition("cannot write an empty bag".into()))?;
    let dims: Vec<u32> = match first.shape() {
        Some((p, d)) => vec![p as u32, d as u32],
        None => vec![first.dim() as u32],
    };
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * instances.len() * first.dim());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(instances.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for inst in instances {
        if inst.dim() != first.dim() || inst.shape() != first.shape() {
            return Err(MivcError::shape("encode_embeddings", first.dim(), inst.dim()));
        }
        for &x in inst.values() {
            let narrow = x as f32;
            if !narrow.is_finite() {
                return Err(MivcError::Data(format!("value {x} does not fit in f32")));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an embedding file, widening to f64.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Vec<InstanceEmbedding>> {
    let malformed = |detail: String| -> MivcError {
        LoadError::Malformed {
            path: path.to_path_buf(),
            detail,
        }
        .into()
    };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| malformed(format!("header truncated at offset {off}")))
    };
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| malformed("file shorter than magic".into()))?
        .try_into()
        .expect("4 bytes");
    if magic != MAGIC {
        return Err(LoadError::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u32_at(4)?;
    if version != VERSION {
        return Err(LoadError::BadVersion {
            path: path.to_path_buf(),
            version,
        }
        .into());
    }
    let n = u32_at(8)? as usize;
    let rank = u32_at(12)? as usize;
    let dims = match rank {
        1 => vec![u32_at(16)? as usize],
        2 => vec![u32_at(16)? as usize, u32_at(20)? as usize],
        r => return Err(malformed(format!("rank {r} not in {{1, 2}}"))),
    };
    let m: usize = dims.iter().product();
    if m == 0 {
        return Err(malformed("zero-sized instance dimension".into()));
    }
    let header = 16 + 4 * rank;
    let payload = &bytes[header.min(bytes.len())..];
    if !payload.len().is_multiple_of(4 * m) {
        return Err(malformed(format!(
            "payload of {} bytes is not a whole number of {m}-float instances",
            payload.len()
        )));
    }
    let found = payload.len() / (4 * m);
    if found != n {
        return Err(LoadError::CountMismatch {
            path: path.to_path_buf(),
            expected: n,
            found,
        }
        .into());
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(index) = values.iter().position(|x| !x.is_finite()) {
        return Err(LoadError::NonFinite {
            path: path.to_path_buf(),
            index,
        }
        .into());
    }
    values
        .chunks_exact(m)
        .map(|chunk| match dims.as_slice() {
            [p, d] => InstanceEmbedding::with_shape(chunk.to_vec(), (*p, *d)),
            _ => InstanceEmbedding::new(chunk.to_vec()),
        })
        .collect()
}

pub fn write_bag(path: &Path, bag: &Bag) -> Result<()> {
    fsio::write_atomic(path, &encode_embeddings(bag.instances())?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<InstanceEmbedding>> {
    decode_embeddings(&fsio::read(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub bag_id: String,
    pub label: usize,
    pub path: String,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<(usize, usize)>,
    /// Indices of witness instances, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory record paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.bag_id.as_str()) {
                return Err(LoadError::DuplicateBagId(r.bag_id.clone()).into());
            }
            if r.label >= self.classes() {
                return Err(LoadError::LabelOutOfRange {
                    bag_id: r.bag_id.clone(),
                    label: r.label,
                    classes: self.classes(),
                }
                .into());
            }
            if r.n_instances == 0 {
                return Err(MivcError::Data(format!("bag {:?} declares zero instances", r.bag_id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestHeader {
            class_names: self.class_names.clone(),
        })
        .expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, detail: String| -> MivcError {
            LoadError::Parse {
                path: path.to_path_buf(),
                line,
                detail,
            }
            .into()
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(header).map_err(|e| parse_err(hl + 1, format!("bad header: {e}")))?;
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string())))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        let manifest = DatasetManifest {
            class_names: header.class_names,
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = fsio::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| LoadError::Malformed {
        path: path.to_path_buf(),
        detail: "manifest is not UTF-8".into(),
    })?;
    DatasetManifest::parse(&text, path)
}

pub fn load_bag(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<Bag> {
    let path = manifest.base_dir.join(&record.path);
    let instances = read_embeddings(&path)?;
    if instances.len() != record.n_instances {
        return Err(LoadError::CountMismatch {
            path,
            expected: record.n_instances,
            found: instances.len(),
        }
        .into());
    }
    if let Some(shape) = record.shape {
        if instances[0].shape() != Some(shape) {
            return Err(MivcError::shape(
                "load_bag",
                format!("shape {shape:?}"),
                format!("shape {:?} in {}", instances[0].shape(), path.display()),
            ));
        }
    }
    let mut bag = Bag::new(record.bag_id.clone(), instances)?.with_label(record.label);
    if let Some(w) = &record.witnesses {
        set_witnesses(&mut bag, w);
    }
    Ok(bag)
}

/// Manifest plus every bag it lists, loaded concurrently, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Bag>)> {
    let manifest = load_manifest(manifest_path)?;
    let bags = par::map(&manifest.records, |r| load_bag(&manifest, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, bags))
}

/// Writes each bag to `<dir>/bags/<bag_id>.mivc` and a manifest at
/// `<dir>/<name>.jsonl`. Returns the manifest path.
pub fn write_dataset(dir: &Path, name: &str, bags: &[Bag], class_names: &[String]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(bags.len());
    for bag in bags {
        let label = bag
            .label
            .ok_or_else(|| MivcError::Data(format!("bag {:?} has no label", bag.id)))?;
        let rel = format!("bags/{}.mivc", bag.id);
        write_bag(&dir.join(&rel), bag)?;
        records.push(ManifestRecord {
            bag_id: bag.id.clone(),
            label,
            path: rel,
            n_instances: bag.len(),
            shape: bag.shape(),
            witnesses: witness_indices(bag),
        });
    }
    let manifest = DatasetManifest {
        class_names: class_names.to_vec(),
        records,
        base_dir: dir.to_path_buf(),
    };
    manifest.validate()?;
    let path = dir.join(format!("{name}.jsonl"));
    fsio::write_atomic(&path, manifest.to_jsonl().as_bytes())?;
    Ok(path)
}

/// One bag from a delimited text file, one instance per row.
pub fn import_csv(path: &Path, delimiter: u8) -> Result<Bag> {
    let bytes = fsio::read(path)?;
    parse_csv(&bytes, delimiter, path)
}

pub fn parse_csv(bytes: &[u8], delimiter: u8, path: &Path) -> Result<Bag> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .from_reader(bytes);
    let parse_err = |line: usize, detail: String| -> MivcError {
        LoadError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        }
        .into()
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        let values = rec
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(row, format!("column {}: {cell:?} is not a number", col + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(row, format!("column {}: non-finite value", col + 1)))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if values.len() != first.len() {
                return Err(parse_err(
                    row,
                    format!("ragged row: {} columns, expected {}", values.len(), first.len()),
                ));
            }
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(MivcError::Data(format!("{}: no rows", path.display())));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Bag::from_rows(id, rows)
}

/// Witness positions recorded on a bag, if any.
pub fn witness_indices(bag: &Bag) -> Option<Vec<usize>> {
    let s = bag.meta.get(WITNESS_KEY)?;
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.parse().ok()).collect()
}

pub fn set_witnesses(bag: &mut Bag, indices: &[usize]) {
    let joined = indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    bag.meta.insert(WITNESS_KEY.into(), joined);
}

/// Multiple-instance task: a bag of class `c` holds at least one witness
/// drawn near `class_centers[c]`; the remaining instances are distractors
/// from one zero-mean Gaussian shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_bags: usize,
    /// Inclusive instance-count range per bag.
    pub n_range: (usize, usize),
    pub dim: usize,
    pub classes: usize,
    /// Probability that any instance is a witness; one is forced if none.
    pub witness_rate: f64,
    /// Explicit centers; drawn on a sphere of `center_radius` when absent.
    pub class_centers: Option<Vec<Vec<f64>>>,
    pub center_radius: f64,
    pub noise_sigma: f64,
    pub distractor_sigma: f64,
    /// Optional `(P, D)` layout for every instance.
    pub shape: Option<(usize, usize)>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::witness_task(0)
    }
}

impl SyntheticSpec {
    /// The bundled benchmark task: 2000 bags of 2..=21 shaped 4x4
    /// instances, four classes.
    pub fn witness_task(seed: u64) -> Self {
        SyntheticSpec {
            n_bags: 2000,
            n_range: (2, MAX_BAG_SIZE),
            dim: 16,
            classes: 4,
            witness_rate: 0.1,
            class_centers: None,
            center_radius: 2.5,
            noise_sigma: 0.5,
            distractor_sigma: 1.0,
            shape: Some((4, 4)),
            train_fraction: 0.8,
            seed,
        }
    }

    /// Checks the spec; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(MivcError::Usage(m));
        let (lo, hi) = self.n_range;
        if lo == 0 || hi < lo {
            return bad(format!("n_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if self.n_bags < 2 {
            return bad("need at least 2 bags for a train/eval split".into());
        }
        if self.classes < 2 || self.dim == 0 {
            return bad("need at least 2 classes and a positive dim".into());
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad(format!("witness_rate {} outside (0, 1]", self.witness_rate));
        }
        // NaN fails both checks.
        let positive = self.noise_sigma > 0.0;
        let non_negative = self.distractor_sigma >= 0.0;
        if !positive || !non_negative {
            return bad("noise_sigma must be > 0 and distractor_sigma >= 0".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if let Some((p, d)) = self.shape {
            if p * d != self.dim {
                return bad(format!("shape {p}x{d} does not match dim {}", self.dim));
            }
        }
        let mut warnings = Vec::new();
        if hi > MAX_BAG_SIZE {
            warnings.push(format!("bags of up to {hi} instances exceed the usual maximum of {MAX_BAG_SIZE}"));
        }
        if let Some(centers) = &self.class_centers {
            if centers.len() != self.classes || centers.iter().any(|c| c.len() != self.dim) {
                return bad(format!("need {} centers of length {}", self.classes, self.dim));
            }
            for i in 0..centers.len() {
                for j in i + 1..centers.len() {
                    let dist: f64 = centers[i]
                        .iter()
                        .zip(&centers[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if dist < 1e-9 {
                        warnings.push(format!("class centers {i} and {j} coincide; classes are indistinguishable"));
                    }
                }
            }
        }
        Ok(warnings)
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        if let Some(c) = &self.class_centers {
            return c.clone();
        }
        let mut rng = Rng::new(self.seed).fork(u64::MAX);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x * self.center_radius / norm).collect()
            })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub train: Vec<Bag>,
    pub eval: Vec<Bag>,
    pub class_names: Vec<String>,
    pub centers: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Pure function of `spec`: same spec, same bags.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    let warnings = spec.validate()?;
    let centers = spec.centers();
    let root = Rng::new(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n_bags).map(|i| i % spec.classes).collect();
    root.fork(u64::MAX - 1).shuffle(&mut labels);

    let bags = par::map_range(spec.n_bags, |i| -> Result<Bag> {
        let mut rng = root.fork(i as u64);
        let label = labels[i];
        let n = rng.range_inclusive(spec.n_range.0, spec.n_range.1);
        let mut is_witness: Vec<bool> = (0..n).map(|_| rng.bernoulli(spec.witness_rate)).collect();
        if !is_witness.iter().any(|&w| w) {
            is_witness[rng.range_inclusive(0, n - 1)] = true;
        }
        let instances = is_witness
            .iter()
            .map(|&w| {
                let values: Vec<f64> = if w {
                    centers[label].iter().map(|c| c + spec.noise_sigma * rng.normal()).collect()
                } else {
                    (0..spec.dim).map(|_| spec.distractor_sigma * rng.normal()).collect()
                };
                match spec.shape {
                    Some(s) => InstanceEmbedding::with_shape(values, s),
                    None => InstanceEmbedding::new(values),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bag = Bag::new(format!("bag{i:05}"), instances)?.with_label(label);
        let witnesses: Vec<usize> = is_witness.iter().enumerate().filter(|(_, &w)| w).map(|(k, _)| k).collect();
        set_witnesses(&mut bag, &witnesses);
        Ok(bag)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let n_train = ((spec.n_bags as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, spec.n_bags - 1);
    let mut train = bags;
    let eval = train.split_off(n_train);
    Ok(SyntheticSet {
        train,
        eval,
        class_names: spec.class_names(),
        centers,
        warnings,
    })
}
