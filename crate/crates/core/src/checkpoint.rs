//! Binary model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MIVM"
//! 4       4     u32 version = 1
//! 8       4     u32 record count R
//! then R records:
//!         4     u32 name length L
//!         L     UTF-8 name
//!         4     u32 rank
//!         4*rank u32 dims
//!         8*prod(dims) f64 payload, row-major
//! ```
//!
//! All integers and floats are little-endian. Model settings are stored as
//! `meta.*` records ahead of the parameter arrays:
//!
//! | record               | dims | payload                                   |
//! |----------------------|------|-------------------------------------------|
//! | `meta.strategy`      | [1]  | index into [`Strategy::ALL`]              |
//! | `meta.encoder`       | [1]  | 0 identity, 1 mlp1                        |
//! | `meta.frozen`        | [3]  | encoder, aggregator, head (0/1)           |
//! | `meta.instance_shape`| [2]  | `(P, D)`, only when set                   |
//! | `meta.max_images`    | [1]  | concat-embed only                         |
//!
//! followed by `encoder.W`, `encoder.b`, `pool.w`, `pool.Z`, `pool.G`,
//! `concat.W1`, `concat.W2`, `head.W`, `head.b` as present.
//!
//! Example: a record named `head.b` holding `[0.5, -1.0]`:
//!
//! ```text
//! 06 00 00 00 68 65 61 64 2e 62 01 00 00 00 02 00 00 00
//! 00 00 00 00 00 00 e0 3f 00 00 00 00 00 00 f0 bf
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baselines::ConcatProjParams;
use crate::error::{LoadError, MivcError, Result};
use crate::fsio;
use crate::model::{self, Aggregator, EncoderKind, EncoderParams, HeadParams, Model, Strategy};
use crate::numkern::{Matrix, Vector};
use crate::pooling::{PoolingKind, PoolingParams};

pub const MAGIC: [u8; 4] = *b"MIVM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &r.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| LoadError::Malformed {
            path: self.path.to_path_buf(),
            detail: format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(LoadError::BadMagic { path: path.to_path_buf(), expected: MAGIC, found: magic }.into());
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(LoadError::BadVersion { path: path.to_path_buf(), version }.into());
    }
    let count = cur.u32()? as usize;
    let malformed = |detail: String| -> MivcError { LoadError::Malformed { path: path.to_path_buf(), detail }.into() };
    let mut records = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| malformed("record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| malformed(format!("{name}: dims overflow")))?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| malformed(format!("{name}: payload overflow")))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LoadError::NonFinite { path: path.to_path_buf(), index: i }.into());
        }
        records.push(Record { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(records)
}

fn meta(name: &str, data: Vec<f64>) -> Record {
    Record { name: name.into(), dims: vec![data.len() as u32], data }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn model_to_records(model: &Model) -> Vec<Record> {
    let mut records = vec![
        meta("meta.strategy", vec![model::strategy_code(model.strategy) as f64]),
        meta("meta.encoder", vec![flag(model.encoder.kind == EncoderKind::Mlp1)]),
        meta(
            "meta.frozen",
            vec![flag(model.encoder.frozen), flag(model.aggregator_frozen), flag(model.head.frozen)],
        ),
    ];
    if let Some((p, d)) = model.instance_shape {
        records.push(meta("meta.instance_shape", vec![p as f64, d as f64]));
    }
    if let Aggregator::ConcatEmbed(c) = &model.aggregator {
        records.push(meta("meta.max_images", vec![c.max_images as f64]));
    }
    for view in model.arrays() {
        records.push(Record {
            name: view.name.to_string(),
            dims: view.dims.iter().map(|&d| d as u32).collect(),
            data: view.data.to_vec(),
        });
    }
    records
}

struct RecordSet {
    by_name: BTreeMap<String, Record>,
    path: PathBuf,
}

impl RecordSet {
    fn err(&self, detail: String) -> MivcError {
        LoadError::Malformed { path: self.path.clone(), detail }.into()
    }

    fn take(&mut self, name: &str) -> Option<Record> {
        self.by_name.remove(name)
    }

    fn require(&mut self, name: &str) -> Result<Record> {
        self.take(name).ok_or_else(|| self.err(format!("missing record {name}")))
    }

    fn scalar(&mut self, name: &str) -> Result<usize> {
        let r = self.require(name)?;
        match r.data.as_slice() {
            [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            _ => Err(self.err(format!("{name} must hold one non-negative integer"))),
        }
    }

    fn vector(&mut self, name: &str) -> Result<Vector> {
        let r = self.require(name)?;
        if r.dims.len() != 1 {
            return Err(self.err(format!("{name} must have rank 1")));
        }
        Ok(Vector::new(r.data))
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let r = self.require(name)?;
        match r.dims.as_slice() {
            [rows, cols] => Matrix::new(*rows as usize, *cols as usize, r.data),
            _ => Err(self.err(format!("{name} must have rank 2"))),
        }
    }
}

pub fn model_from_records(records: Vec<Record>, path: &Path) -> Result<Model> {
    let mut set = RecordSet { by_name: BTreeMap::new(), path: path.to_path_buf() };
    for r in records {
        if set.by_name.contains_key(&r.name) {
            return Err(set.err(format!("duplicate record {}", r.name)));
        }
        set.by_name.insert(r.name.clone(), r);
    }
    let code = set.scalar("meta.strategy")?;
    let strategy = model::strategy_from_code(code).ok_or_else(|| set.err(format!("unknown strategy code {code}")))?;
    let encoder_kind = set.scalar("meta.encoder")?;
    let frozen = set.require("meta.frozen")?;
    let [enc_frozen, agg_frozen, head_frozen] = match frozen.data.as_slice() {
        [a, b, c] => [*a != 0.0, *b != 0.0, *c != 0.0],
        _ => return Err(set.err("meta.frozen must hold three flags".into())),
    };
    let instance_shape = match set.take("meta.instance_shape") {
        Some(r) => match r.data.as_slice() {
            [p, d] => Some((*p as usize, *d as usize)),
            _ => return Err(set.err("meta.instance_shape must hold two values".into())),
        },
        None => None,
    };
    let encoder = match encoder_kind {
        0 => EncoderParams::identity(enc_frozen),
        1 => EncoderParams::mlp1(set.matrix("encoder.W")?, set.vector("encoder.b")?, enc_frozen)?,
        k => return Err(set.err(format!("unknown encoder code {k}"))),
    };
    let aggregator = match strategy {
        Strategy::Single => Aggregator::SingleFirst,
        Strategy::ConcatGrid => Aggregator::ConcatGrid,
        Strategy::ConcatEmbed => {
            let max_images = set.scalar("meta.max_images")?;
            Aggregator::ConcatEmbed(ConcatProjParams::new(max_images, set.matrix("concat.W1")?, set.matrix("concat.W2")?)?)
        }
        s => Aggregator::Pool(match s.pooling_kind().expect("pooling strategy") {
            PoolingKind::Avg => PoolingParams::avg(),
            PoolingKind::Max => PoolingParams::max(),
            PoolingKind::Attn => PoolingParams::attention(set.vector("pool.w")?, set.matrix("pool.Z")?)?,
            PoolingKind::Gated => {
                PoolingParams::gated(set.vector("pool.w")?, set.matrix("pool.Z")?, set.matrix("pool.G")?)?
            }
        }),
    };
    let head = HeadParams::new(set.matrix("head.W")?, set.vector("head.b")?, head_frozen)?;
    if let Some(name) = set.by_name.keys().next() {
        return Err(set.err(format!("unexpected record {name}")));
    }
    let model = Model { strategy, encoder, aggregator, head, aggregator_frozen: agg_frozen, instance_shape };
    if let Some(m) = model.pooling().and_then(PoolingParams::input_dim) {
        if m != model.dim() {
            return Err(set.err(format!("pooling dim {m} does not match head dim {}", model.dim())));
        }
    }
    Ok(model)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    encode_records(&model_to_records(model))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_model(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fsio::read(path)?;
    model_from_records(decode_records(&bytes, path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainConfig;

    #[test]
    fn golden_record_bytes() {
        let bytes = encode_records(&[Record { name: "head.b".into(), dims: vec![2], data: vec![0.5, -1.0] }]);
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            concat!(
                "4d49564d", "01000000", "01000000",
                "06000000", "686561642e62", "01000000", "02000000",
                "000000000000e03f", "000000000000f0bf",
            )
        );
    }

    #[test]
    fn every_strategy_roundtrips_bit_exact() {
        for s in Strategy::ALL {
            let cfg = TrainConfig {
                strategy: s,
                encoder: EncoderKind::Mlp1,
                input_dim: 6,
                dim: 4,
                hidden: 3,
                classes: 3,
                patch_shape: Some((2, 2)),
                freeze_head: true,
                ..TrainConfig::default()
            };
            let model = Model::init(&cfg).unwrap();
            let bytes = encode_model(&model);
            let back = model_from_records(decode_records(&bytes, Path::new("m")).unwrap(), Path::new("m")).unwrap();
            assert_eq!(back, model, "{s}");
            assert_eq!(encode_model(&back), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::init(&TrainConfig::default()).unwrap();
        let bytes = encode_model(&model);
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_records(&bad, p), Err(MivcError::Load(LoadError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_records(&bad, p), Err(MivcError::Load(LoadError::BadVersion { .. }))));
        assert!(matches!(
            decode_records(&bytes[..bytes.len() - 3], p),
            Err(MivcError::Load(LoadError::Malformed { .. }))
        ));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_records(&bad, p), Err(MivcError::Load(LoadError::NonFinite { .. }))));
    }

    #[test]
    fn missing_file_is_named() {
        let err = load(Path::new("/nonexistent/model.mivm")).unwrap_err();
        assert!(matches!(err, MivcError::Load(LoadError::MissingFile(_))));
    }
}
