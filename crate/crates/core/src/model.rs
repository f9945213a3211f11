//! Feature-embedding latent factor scorer.
//!
//! A user (item) is represented by the weighted sum of its features'
//! embeddings and biases; the score is the dot product of the two
//! representations plus both biases. Parameters are stored as `f32`;
//! representations and dot products are accumulated in `f64`. Tests
//! instantiate the same code with `f64` storage for gradient checks.

use std::fmt::Debug;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;

pub const MODEL_MAGIC: &[u8; 8] = b"WMRBMDL1";
const MAGIC_PREFIX: &[u8; 7] = b"WMRBMDL";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {found:?} (expected {expected:?})")]
    VersionMismatch { found: char, expected: char },
    #[error("model file truncated")]
    Truncated,
    #[error("malformed model header: {0}")]
    Header(String),
    #[error("model shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: ModelShape, found: ModelShape },
}

/// Scalar type used for stored parameters.
pub trait Param: Copy + Debug + PartialEq + Into<f64> + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
}

impl Param for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub num_user_features: usize,
    pub num_item_features: usize,
}

/// Selects one of the four parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    UserEmbeddings,
    ItemEmbeddings,
    UserBiases,
    ItemBiases,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [
        ParamBlock::UserEmbeddings,
        ParamBlock::ItemEmbeddings,
        ParamBlock::UserBiases,
        ParamBlock::ItemBiases,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Param = f32> {
    shape: ModelShape,
    user_embeddings: Vec<T>,
    item_embeddings: Vec<T>,
    user_biases: Vec<T>,
    item_biases: Vec<T>,
}

/// Feature-weighted sum of embeddings and biases for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub vector: Vec<f64>,
    pub bias: f64,
}

pub type UserRepresentation = Representation;
pub type ItemRepresentation = Representation;

impl<T: Param> ModelParams<T> {
    /// Embeddings i.i.d. uniform in `[-scale, scale]`, biases zero.
    pub fn init(shape: ModelShape, seed: u64, scale: f64) -> Result<Self, ModelError> {
        if shape.dim == 0 {
            return Err(ModelError::Config("embedding dimension must be at least 1".into()));
        }
        if shape.num_user_features == 0 || shape.num_item_features == 0 {
            return Err(ModelError::Config("feature counts must be positive".into()));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(ModelError::Config(format!(
                "init scale must be finite and >= 0, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| {
                    if scale == 0.0 {
                        T::from_f64(0.0)
                    } else {
                        T::from_f64(rng.random_range(-scale..=scale))
                    }
                })
                .collect()
        };
        let user_embeddings = draw(shape.num_user_features * shape.dim);
        let item_embeddings = draw(shape.num_item_features * shape.dim);
        Ok(ModelParams {
            shape,
            user_embeddings,
            item_embeddings,
            user_biases: vec![T::from_f64(0.0); shape.num_user_features],
            item_biases: vec![T::from_f64(0.0); shape.num_item_features],
        })
    }

    pub fn from_parts(
        shape: ModelShape,
        user_embeddings: Vec<T>,
        item_embeddings: Vec<T>,
        user_biases: Vec<T>,
        item_biases: Vec<T>,
    ) -> Result<Self, ModelError> {
        let params = ModelParams {
            shape,
            user_embeddings,
            item_embeddings,
            user_biases,
            item_biases,
        };
        for block in ParamBlock::ALL {
            if params.block(block).len() != params.block_len(block) {
                return Err(ModelError::Config(format!("{block:?} has the wrong length")));
            }
        }
        Ok(params)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    fn block_len(&self, block: ParamBlock) -> usize {
        let s = self.shape;
        match block {
            ParamBlock::UserEmbeddings => s.num_user_features * s.dim,
            ParamBlock::ItemEmbeddings => s.num_item_features * s.dim,
            ParamBlock::UserBiases => s.num_user_features,
            ParamBlock::ItemBiases => s.num_item_features,
        }
    }

    pub fn block(&self, block: ParamBlock) -> &[T] {
        match block {
            ParamBlock::UserEmbeddings => &self.user_embeddings,
            ParamBlock::ItemEmbeddings => &self.item_embeddings,
            ParamBlock::UserBiases => &self.user_biases,
            ParamBlock::ItemBiases => &self.item_biases,
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [T] {
        match block {
            ParamBlock::UserEmbeddings => &mut self.user_embeddings,
            ParamBlock::ItemEmbeddings => &mut self.item_embeddings,
            ParamBlock::UserBiases => &mut self.user_biases,
            ParamBlock::ItemBiases => &mut self.item_biases,
        }
    }

    pub fn user_embedding(&self, feature: usize) -> &[T] {
        let d = self.shape.dim;
        &self.user_embeddings[feature * d..(feature + 1) * d]
    }

    pub fn item_embedding(&self, feature: usize) -> &[T] {
        let d = self.shape.dim;
        &self.item_embeddings[feature * d..(feature + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        ParamBlock::ALL
            .iter()
            .all(|&b| self.block(b).iter().all(|&v| v.into().is_finite()))
    }

    fn represent(&self, row: &[(usize, f64)], embeddings: &[T], biases: &[T]) -> Representation {
        let d = self.shape.dim;
        let mut vector = vec![0.0; d];
        let mut bias = 0.0;
        for &(f, w) in row {
            for (acc, &e) in vector.iter_mut().zip(&embeddings[f * d..(f + 1) * d]) {
                *acc += w * e.into();
            }
            bias += w * biases[f].into();
        }
        Representation { vector, bias }
    }

    pub fn user_repr(&self, row: &[(usize, f64)]) -> UserRepresentation {
        self.represent(row, &self.user_embeddings, &self.user_biases)
    }

    pub fn item_repr(&self, row: &[(usize, f64)]) -> ItemRepresentation {
        self.represent(row, &self.item_embeddings, &self.item_biases)
    }

    /// Representations of every item, for repeated scoring.
    pub fn item_table(&self, item_features: &FeatureMatrix) -> ItemTable {
        let d = self.shape.dim;
        let n = item_features.num_entities();
        let mut vectors = Vec::with_capacity(n * d);
        let mut biases = Vec::with_capacity(n);
        for i in 0..n {
            let r = self.item_repr(item_features.row(i));
            vectors.extend_from_slice(&r.vector);
            biases.push(r.bias);
        }
        ItemTable {
            dim: d,
            vectors,
            biases,
        }
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        let conv = |v: &[T]| v.iter().map(|&x| x.into()).collect::<Vec<f64>>();
        ModelParams {
            shape: self.shape,
            user_embeddings: conv(&self.user_embeddings),
            item_embeddings: conv(&self.item_embeddings),
            user_biases: conv(&self.user_biases),
            item_biases: conv(&self.item_biases),
        }
    }
}

/// f_y(x) = <u, v> + b_u + b_v
pub fn score(user: &Representation, item: &Representation) -> f64 {
    dot(&user.vector, &item.vector) + user.bias + item.bias
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed item representations, row-major.
#[derive(Debug, Clone)]
pub struct ItemTable {
    dim: usize,
    vectors: Vec<f64>,
    biases: Vec<f64>,
}

impl ItemTable {
    pub fn num_items(&self) -> usize {
        self.biases.len()
    }

    pub fn vector(&self, item: usize) -> &[f64] {
        &self.vectors[item * self.dim..(item + 1) * self.dim]
    }

    pub fn bias(&self, item: usize) -> f64 {
        self.biases[item]
    }

    pub fn score(&self, user: &Representation, item: usize) -> f64 {
        dot(&user.vector, self.vector(item)) + user.bias + self.biases[item]
    }

    pub fn score_batch(&self, user: &Representation, items: &[usize]) -> Vec<f64> {
        items.iter().map(|&i| self.score(user, i)).collect()
    }

    /// Scores of every item in id order.
    pub fn score_all(&self, user: &Representation, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_items()).map(|i| self.score(user, i)));
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    num_user_features: usize,
    num_item_features: usize,
}

pub fn write_model<W: Write>(params: &ModelParams<f32>, mut w: W) -> io::Result<()> {
    let s = params.shape;
    let header = serde_json::to_vec(&Header {
        dim: s.dim,
        num_user_features: s.num_user_features,
        num_item_features: s.num_item_features,
    })
    .map_err(io::Error::other)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for block in ParamBlock::ALL {
        for v in params.block(block) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ModelError::Truncated,
        _ => ModelError::Header(e.to_string()),
    })
}

/// Reads a model, optionally checking it against an expected shape.
pub fn read_model<R: Read>(mut r: R, expected: Option<ModelShape>) -> Result<ModelParams<f32>, ModelError> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic[..7] != MAGIC_PREFIX {
        return Err(ModelError::BadMagic);
    }
    if magic[7] != MODEL_MAGIC[7] {
        return Err(ModelError::VersionMismatch {
            found: magic[7] as char,
            expected: MODEL_MAGIC[7] as char,
        });
    }
    let mut len = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(ModelError::Header(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    read_exact_or_truncated(&mut r, &mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let shape = ModelShape {
        dim: header.dim,
        num_user_features: header.num_user_features,
        num_item_features: header.num_item_features,
    };
    if let Some(expected) = expected {
        if expected != shape {
            return Err(ModelError::Shape { expected, found: shape });
        }
    }
    if shape.dim == 0 || shape.num_user_features == 0 || shape.num_item_features == 0 {
        return Err(ModelError::Header("zero-sized model".into()));
    }
    let mut read_block = |n: usize| -> Result<Vec<f32>, ModelError> {
        let mut bytes = vec![0u8; n * 4];
        read_exact_or_truncated(&mut r, &mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let user_embeddings = read_block(shape.num_user_features * shape.dim)?;
    let item_embeddings = read_block(shape.num_item_features * shape.dim)?;
    let user_biases = read_block(shape.num_user_features)?;
    let item_biases = read_block(shape.num_item_features)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| ModelError::Header(e.to_string()))? != 0 {
        return Err(ModelError::Header("trailing bytes after parameters".into()));
    }
    ModelParams::from_parts(shape, user_embeddings, item_embeddings, user_biases, item_biases)
}

pub fn save_model(params: &ModelParams<f32>, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_model(params, BufWriter::new(file)).map_err(io_err)
}

pub fn load_model(path: &Path, expected: Option<ModelShape>) -> Result<ModelParams<f32>, ModelError> {
    let file = File::open(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_model(BufReader::new(file), expected)
}
