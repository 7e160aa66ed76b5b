use std::collections::BTreeMap;
use std::path::Path;

use crate::context::EmbeddingStore;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::objectives::{Model, ModelDims, Objective};

pub const MAGIC: &[u8; 4] = b"SRB1";
pub const VERSION: u32 = 1;

/// Tensor section holding the learnable context matrix.
pub const ATTENTION_SECTION: &str = "context.a";

/// What is needed to rebuild the model around the stored tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub objective: Objective,
    pub dims: ModelDims,
    pub n_classes: usize,
    /// Vocabulary codes in index order.
    pub vocab: Vec<i64>,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let d = &self.dims;
        let vocab: Vec<String> = self.vocab.iter().map(ToString::to_string).collect();
        format!(
            "objective = {}\nd_emb = {}\nhidden = {}\nheads = {}\nblocks = {}\nhead_hidden = {}\nn_classes = {}\nvocab = {}\n",
            self.objective,
            d.d_emb,
            d.hidden,
            d.heads,
            d.blocks,
            d.head_hidden,
            self.n_classes,
            vocab.join(",")
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::invalid(format!("checkpoint metadata line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::invalid(format!("checkpoint metadata {k}"))) };
        let vocab_text = get("vocab")?;
        let vocab = if vocab_text.is_empty() {
            Vec::new()
        } else {
            vocab_text
                .split(',')
                .map(|c| c.parse::<i64>().map_err(|_| Error::invalid("checkpoint vocabulary")))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            objective: get("objective")?.parse()?,
            dims: ModelDims {
                d_emb: num("d_emb")?,
                hidden: num("hidden")?,
                heads: num("heads")?,
                blocks: num("blocks")?,
                head_hidden: num("head_hidden")?,
            },
            n_classes: num("n_classes")?,
            vocab,
        })
    }
}

/// Trained parameters with their provenance, and an optional context store.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Digest of the config that trained the parameters.
    pub digest: String,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
    pub store: Option<EmbeddingStore>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, dims: ModelDims, vocab: &Vocabulary, digest: &str) -> Self {
        Self {
            digest: digest.to_string(),
            meta: CheckpointMeta {
                objective: model.objective,
                dims,
                n_classes: model.n_classes,
                vocab: vocab.ranked_codes(),
            },
            tensors: model.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
            store: None,
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::from_ranked(&self.meta.vocab)
    }

    /// Rebuilds the model; every model parameter must be present and no
    /// other section besides the context matrix is allowed.
    pub fn model(&self) -> Result<Model> {
        let m = &self.meta;
        let mut model = Model::new(m.objective, m.vocab.len() + 2, m.dims, m.n_classes, 0)?;
        let expected = model.params();
        let mut store = crate::numeric::ParamStore::new();
        for (name, t) in &self.tensors {
            if name == ATTENTION_SECTION {
                continue;
            }
            if !expected.contains(name) {
                return Err(Error::invalid(format!("checkpoint section {name} is not a model parameter")));
            }
            store.insert(name.clone(), t.clone());
        }
        model.set_params(&store)?;
        Ok(model)
    }

    pub fn attention(&self) -> Option<&Tensor> {
        self.tensors.get(ATTENTION_SECTION)
    }

    /// Fails on a digest mismatch unless `ignore` is set.
    pub fn check_digest(&self, expected: &str, ignore: bool) -> Result<()> {
        if self.digest != expected {
            if ignore {
                log::warn!("config digest mismatch ignored: checkpoint {}, config {expected}", self.digest);
            } else {
                return Err(Error::DigestMismatch { stored: self.digest.clone(), current: expected.to_string() });
            }
        }
        Ok(())
    }

    /// Layout, little-endian throughout: magic, u32 version, the digest and
    /// the metadata text as u64-length-prefixed UTF-8, a u64 section count,
    /// then per section its length-prefixed name, u64 rank, u64 dims and the
    /// f64 values; finally a u8 store flag followed by the length-prefixed
    /// store bytes when set.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.digest.as_bytes());
        put_bytes(&mut out, self.meta.to_text().as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            t.shape().iter().for_each(|&d| out.extend_from_slice(&(d as u64).to_le_bytes()));
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        match &self.store {
            Some(s) => {
                out.push(1);
                put_bytes(&mut out, &s.to_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotCheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let digest = r.string("digest")?;
        let meta = CheckpointMeta::from_text(&r.string("metadata")?)?;
        let n = r.u64("section count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = r.string("section name")?;
            let rank = r.u64("rank")?;
            let shape = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<usize>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Truncated(format!("section {name}")))?;
            if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Truncated(format!("section {name}")));
            }
            let data = (0..numel).map(|_| r.array("values").map(f64::from_le_bytes)).collect::<Result<Vec<f64>>>()?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let store = match r.take(1, "store flag")?[0] {
            0 => None,
            1 => {
                let len = r.u64("store length")?;
                Some(EmbeddingStore::from_bytes(r.take(len, "store")?)?)
            }
            f => return Err(Error::invalid(format!("bad store flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after the checkpoint"));
        }
        Ok(Self { digest, meta, tensors, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array(what)?)).map_err(|_| Error::Truncated(what.to_string()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u64(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::invalid(format!("{what} is not UTF-8")))
    }
}
