//! Global descriptors: Fisher vectors over a diagonal GMM, VLAD and SoftVLAD
//! over a k-means codebook, and the `OGDS` descriptor store.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{PatchFeatureSet, Side};
use crate::raster::write_bytes;
use crate::vocabulary::{posteriors, Codebook, DiagGmm};

pub const POWER_EPS: f64 = 1e-12;
pub const STORE_MAGIC: &[u8; 4] = b"OGDS";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregator {
    Fisher,
    Vlad,
    SoftVlad { alpha: f64 },
}

impl Aggregator {
    pub fn uses_gmm(&self) -> bool {
        matches!(self, Aggregator::Fisher)
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Fisher => f.write_str("fisher"),
            Aggregator::Vlad => f.write_str("vlad"),
            Aggregator::SoftVlad { alpha } => write!(f, "softvlad({alpha})"),
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown aggregator `{s}`"));
        match s {
            "fisher" => Ok(Aggregator::Fisher),
            "vlad" => Ok(Aggregator::Vlad),
            _ => {
                let inner = s
                    .strip_prefix("softvlad(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?;
                let alpha: f64 = inner.trim().parse().map_err(|_| bad())?;
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidInput(format!("softvlad alpha must be positive, got {alpha}")));
                }
                Ok(Aggregator::SoftVlad { alpha })
            }
        }
    }
}

impl Serialize for Aggregator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The model an aggregator encodes against.
#[derive(Debug, Clone, PartialEq)]
pub enum Vocabulary {
    Gmm(DiagGmm),
    Codebook(Codebook),
}

impl Vocabulary {
    pub fn dim(&self) -> usize {
        match self {
            Vocabulary::Gmm(g) => g.dim(),
            Vocabulary::Codebook(c) => c.dim(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Vocabulary::Gmm(g) => g.k(),
            Vocabulary::Codebook(c) => c.k(),
        }
    }

    pub fn digest(&self) -> String {
        match self {
            Vocabulary::Gmm(g) => g.digest(),
            Vocabulary::Codebook(c) => c.digest(),
        }
    }

    /// Reads either vocabulary file kind, dispatching on the magic.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match bytes.get(..4) {
            Some(b"OGGM") => Ok(Vocabulary::Gmm(DiagGmm::from_bytes(&bytes)?)),
            Some(b"OGKM") => Ok(Vocabulary::Codebook(Codebook::from_bytes(&bytes)?)),
            _ => Err(Error::Format { offset: 0, reason: "not a vocabulary file".into() }),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match self {
            Vocabulary::Gmm(g) => g.write(path),
            Vocabulary::Codebook(c) => c.write(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub vector: Vec<f64>,
    pub aggregator: Aggregator,
    pub vocab_digest: String,
}

impl GlobalDescriptor {
    pub fn new(vector: Vec<f64>, aggregator: Aggregator, vocab_digest: String) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global descriptor"));
        }
        let n = l2(&vector);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("descriptor norm {n} is not 1")));
        }
        Ok(Self { vector, aggregator, vocab_digest })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rows as f64, sorted lexicographically so the accumulation order does not
/// depend on the input patch order.
pub fn canonical_rows(rows: &[f64], dim: usize) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = rows.chunks(dim).collect();
    v.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    v
}

fn check_rows(rows: &[f64], dim: usize, vocab_dim: usize) -> Result<()> {
    if dim != vocab_dim {
        return Err(Error::dims(vocab_dim, dim));
    }
    if rows.is_empty() || rows.len() % dim != 0 {
        return Err(Error::Empty("patches"));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patches"));
    }
    Ok(())
}

/// Raw `2·K·D` Fisher vector, layout `[G_μ1 … G_μK, G_σ1 … G_σK]`.
pub fn fisher_vector_rows(gmm: &DiagGmm, rows: &[f64], dim: usize) -> Result<Vec<f64>> {
    check_rows(rows, dim, gmm.dim())?;
    let (k, d) = (gmm.k(), dim);
    let n = rows.len() / d;
    let mut out = vec![0.0; 2 * k * d];
    let inv_sd: Vec<Vec<f64>> = (0..k).map(|c| gmm.variance(c).iter().map(|v| 1.0 / v.sqrt()).collect()).collect();
    for x in canonical_rows(rows, d) {
        let g = posteriors(gmm, x);
        for c in 0..k {
            let gc = g[c];
            if gc == 0.0 {
                continue;
            }
            let mu = gmm.mean(c);
            for t in 0..d {
                let r = (x[t] - mu[t]) * inv_sd[c][t];
                out[c * d + t] += gc * r;
                out[(k + c) * d + t] += gc * (r * r - 1.0);
            }
        }
    }
    for c in 0..k {
        let w = gmm.weights()[c];
        let sm = 1.0 / (n as f64 * w.sqrt());
        let ss = 1.0 / (n as f64 * (2.0 * w).sqrt());
        out[c * d..(c + 1) * d].iter_mut().for_each(|v| *v *= sm);
        out[(k + c) * d..(k + c + 1) * d].iter_mut().for_each(|v| *v *= ss);
    }
    Ok(out)
}

fn set_rows(set: &PatchFeatureSet) -> Vec<f64> {
    set.as_slice().iter().map(|&v| v as f64).collect()
}

pub fn fisher_vector(gmm: &DiagGmm, patches: &PatchFeatureSet) -> Result<Vec<f64>> {
    fisher_vector_rows(gmm, &set_rows(patches), patches.dim())
}

/// Signed square root with `ε`, then ℓ2 normalization.
pub fn power_l2(raw: &[f64], eps: f64) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw descriptor"));
    }
    if raw.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateDescriptor("degenerate descriptor"));
    }
    // sign(0) = 0, so exact zeros stay zero
    let p: Vec<f64> = raw
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { v.signum() * (v.abs() + eps).sqrt() })
        .collect();
    let n = l2(&p);
    if !(n > 0.0) {
        return Err(Error::DegenerateDescriptor("degenerate descriptor"));
    }
    Ok(p.into_iter().map(|v| v / n).collect())
}

pub fn power_l2_normalize(raw: &[f64], aggregator: Aggregator, vocab_digest: &str) -> Result<GlobalDescriptor> {
    GlobalDescriptor::new(power_l2(raw, POWER_EPS)?, aggregator, vocab_digest.to_string())
}

/// Hard-assignment residual sums, `K·D`.
pub fn vlad_rows(cb: &Codebook, rows: &[f64], dim: usize) -> Result<Vec<f64>> {
    check_rows(rows, dim, cb.dim())?;
    let d = dim;
    let mut out = vec![0.0; cb.k() * d];
    for x in canonical_rows(rows, d) {
        let (c, _) = cb.nearest(x);
        let center = cb.center(c);
        for t in 0..d {
            out[c * d + t] += x[t] - center[t];
        }
    }
    Ok(out)
}

/// Soft-assignment residual sums with `a_ik = softmax_k(−α‖x_i − c_k‖²)`.
pub fn softvlad_rows(cb: &Codebook, rows: &[f64], dim: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    check_rows(rows, dim, cb.dim())?;
    let (k, d) = (cb.k(), dim);
    let mut out = vec![0.0; k * d];
    let mut a = vec![0.0; k];
    for x in canonical_rows(rows, d) {
        soft_assign(cb, x, alpha, &mut a);
        for c in 0..k {
            if a[c] == 0.0 {
                continue;
            }
            let center = cb.center(c);
            for t in 0..d {
                out[c * d + t] += a[c] * (x[t] - center[t]);
            }
        }
    }
    Ok(out)
}

pub fn soft_assign(cb: &Codebook, x: &[f64], alpha: f64, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let d2: f64 = x.iter().zip(cb.center(c)).map(|(a, b)| (a - b) * (a - b)).sum();
        *o = -alpha * d2;
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// ℓ2-normalizes each `D`-block in place; zero blocks stay zero.
pub fn intra_normalize(v: &mut [f64], dim: usize) {
    for block in v.chunks_mut(dim) {
        let n = l2(block);
        if n > 0.0 {
            block.iter_mut().for_each(|x| *x /= n);
        }
    }
}

pub fn vlad(cb: &Codebook, patches: &PatchFeatureSet) -> Result<Vec<f64>> {
    vlad_rows(cb, &set_rows(patches), patches.dim())
}

pub fn softvlad(cb: &Codebook, patches: &PatchFeatureSet, alpha: f64) -> Result<Vec<f64>> {
    softvlad_rows(cb, &set_rows(patches), patches.dim(), alpha)
}

/// Full aggregation of one patch matrix: raw vector, intra-normalization for
/// the VLAD family, then power + ℓ2 normalization.
pub fn encode_rows(vocab: &Vocabulary, aggregator: Aggregator, rows: &[f64], dim: usize) -> Result<GlobalDescriptor> {
    let raw = match (aggregator, vocab) {
        (Aggregator::Fisher, Vocabulary::Gmm(g)) => fisher_vector_rows(g, rows, dim)?,
        (Aggregator::Vlad, Vocabulary::Codebook(c)) => {
            let mut v = vlad_rows(c, rows, dim)?;
            intra_normalize(&mut v, dim);
            v
        }
        (Aggregator::SoftVlad { alpha }, Vocabulary::Codebook(c)) => {
            let mut v = softvlad_rows(c, rows, dim, alpha)?;
            intra_normalize(&mut v, dim);
            v
        }
        (a, _) => {
            return Err(Error::InvalidInput(format!("aggregator {a} does not match the vocabulary kind")))
        }
    };
    power_l2_normalize(&raw, aggregator, &vocab.digest())
}

pub fn encode(vocab: &Vocabulary, aggregator: Aggregator, patches: &PatchFeatureSet) -> Result<GlobalDescriptor> {
    encode_rows(vocab, aggregator, &set_rows(patches), patches.dim())
}

/// Encodes every set independently, results in input order.
pub fn encode_all(vocab: &Vocabulary, aggregator: Aggregator, sets: &[PatchFeatureSet]) -> Result<Vec<GlobalDescriptor>> {
    sets.par_iter().map(|s| encode(vocab, aggregator, s)).collect()
}

/// Named descriptors sharing one aggregator and vocabulary, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    pub side: Side,
    pub aggregator: Aggregator,
    pub vocab_digest: String,
    pub config_digest: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
}

impl DescriptorStore {
    pub fn new(side: Side, aggregator: Aggregator, vocab_digest: &str, config_digest: &str, dim: usize) -> Self {
        Self {
            side,
            aggregator,
            vocab_digest: vocab_digest.into(),
            config_digest: config_digest.into(),
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, id: &str, g: &GlobalDescriptor) -> Result<()> {
        if g.vocab_digest != self.vocab_digest {
            return Err(Error::DigestMismatch { expected: self.vocab_digest.clone(), actual: g.vocab_digest.clone() });
        }
        if g.aggregator != self.aggregator {
            return Err(Error::InvalidInput(format!(
                "descriptor built with {}, store holds {}",
                g.aggregator, self.aggregator
            )));
        }
        if g.dim() != self.dim {
            return Err(Error::dims(self.dim, g.dim()));
        }
        if self.ids.iter().any(|i| i == id) {
            return Err(Error::InvalidInput(format!("duplicate id `{id}`")));
        }
        self.ids.push(id.into());
        self.vectors.extend(g.vector.iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors[i * self.dim..(i + 1) * self.dim].iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.side.code());
        put_str(&mut out, &self.aggregator.to_string());
        put_str(&mut out, &self.vocab_digest);
        put_str(&mut out, &self.config_digest);
        for (i, id) in self.ids.iter().enumerate() {
            put_str(&mut out, id);
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad magic, expected OGDS".into() });
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported version {version}") });
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let side_at = r.pos;
        let side = Side::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::Format { offset: side_at, reason: "bad side tag".into() })?;
        let agg_at = r.pos;
        let aggregator = r.string()?.parse().map_err(|e: Error| Error::Format { offset: agg_at, reason: e.to_string() })?;
        let vocab_digest = r.string()?;
        let config_digest = r.string()?;
        let mut store = Self::new(side, aggregator, &vocab_digest, &config_digest, dim);
        let mut seen = HashSet::new();
        for _ in 0..n {
            let id_at = r.pos;
            let id = r.string()?;
            if !seen.insert(id.clone()) {
                return Err(Error::Format { offset: id_at, reason: format!("duplicate id `{id}`") });
            }
            let vec_at = r.pos;
            let raw = r.take(4 * dim)?;
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format { offset: vec_at, reason: format!("non-finite value in `{id}`") });
            }
            store.ids.push(id);
            store.vectors.extend(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, reason: "trailing bytes".into() });
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.bytes.len(), reason: format!("truncated, {n} more bytes expected") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format { offset: at, reason: "invalid utf-8".into() })
    }
}
