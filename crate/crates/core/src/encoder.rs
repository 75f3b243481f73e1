//! Unit embeddings (box geometry, hashed tokens, unit kind) and the
//! self-attention encoder over them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc_model::{Document, UnitKind};
use crate::error::{Error, Result};
use crate::nn::layers::{attention, dense, ffn, init_attention, init_dense, init_ffn, init_norm, norm};
use crate::nn::params::normal_like;
use crate::nn::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Number of token hash buckets.
    pub vocab: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            n_layers: 3,
            n_heads: 4,
            d_ffn: 256,
            vocab: 4096,
        }
    }
}

impl EncoderConfig {
    /// Dimensions of the full-size model with pretrained backbones.
    pub fn full_scale() -> Self {
        EncoderConfig {
            d_model: 768,
            n_layers: 3,
            n_heads: 12,
            d_ffn: 2048,
            vocab: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.vocab == 0 {
            return Err(Error::Config("d_ffn and vocab must be positive".into()));
        }
        Ok(())
    }
}

/// FNV-1a hash bucket of every lowercase whitespace token.
pub fn token_ids(text: &str, vocab: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|tok| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in tok.to_lowercase().bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % vocab as u64) as usize
        })
        .collect()
}

pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) {
    let d = cfg.d_model;
    init_dense(store, rng, "emb.pos1", 6, d);
    init_dense(store, rng, "emb.pos2", d, d);
    // Last row is the null vector used for units without text.
    store.insert("emb.tok", normal_like(rng, &[cfg.vocab + 1, d], 0.1));
    store.insert("emb.kind", normal_like(rng, &[UnitKind::ALL.len(), d], 0.1));
    init_dense(store, rng, "emb.proj", 3 * d, d);
    for l in 0..cfg.n_layers {
        init_norm(store, &format!("enc.{l}.ln1"), d);
        init_attention(store, rng, &format!("enc.{l}.att"), d);
        init_norm(store, &format!("enc.{l}.ln2"), d);
        init_ffn(store, rng, &format!("enc.{l}.ffn"), d, cfg.d_ffn);
    }
    init_norm(store, "enc.out", d);
}

/// Geometry features are measured in multiples of this many median unit
/// heights, from the top-left corner of the units' bounding region.
pub const GEO_UNIT: f64 = 4.0;

/// `[x1, y1, x2, y2, w, h]` per unit, translated to the units' top-left
/// corner and scaled by the median unit height, so features do not depend
/// on the page coordinate system.
pub fn geometry_features(doc: &Document) -> Vec<[f64; 6]> {
    let x0 = doc.units.iter().map(|u| u.bbox.x1).fold(f64::INFINITY, f64::min);
    let y0 = doc.units.iter().map(|u| u.bbox.y1).fold(f64::INFINITY, f64::min);
    let mh = doc.median_height();
    let s = if mh > 0.0 { 1.0 / (GEO_UNIT * mh) } else { 1.0 };
    doc.units
        .iter()
        .map(|u| {
            let b = u.bbox;
            [(b.x1 - x0) * s, (b.y1 - y0) * s, (b.x2 - x0) * s, (b.y2 - y0) * s, b.width() * s, b.height() * s]
        })
        .collect()
}

/// `N×d_model` unit embeddings: a geometry MLP over [`geometry_features`],
/// the mean of the unit's token embeddings, and a kind embedding, projected
/// from their concatenation.
pub fn embed_units<T: Real>(tape: &mut Tape<'_, T>, doc: &Document, cfg: &EncoderConfig) -> Result<Var> {
    let n = doc.len();
    let mut geo = Vec::with_capacity(6 * n);
    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(n);
    for (u, g) in doc.units.iter().zip(geometry_features(doc)) {
        geo.extend(g.map(T::c));
        let mut ids = token_ids(&u.text, cfg.vocab);
        if ids.is_empty() {
            ids.push(cfg.vocab);
        }
        spans.push((tokens.len(), ids.len()));
        tokens.extend(ids);
    }
    let mut avg = Tensor::<T>::zeros(&[n, tokens.len()]);
    for (u, &(start, len)) in spans.iter().enumerate() {
        let w = T::one() / T::c(len as f64);
        avg.row_mut(u)[start..start + len].iter_mut().for_each(|x| *x = w);
    }

    let geo = tape.constant(Tensor::new(vec![n, 6], geo)?);
    let h = dense(tape, geo, "emb.pos1")?;
    let h = tape.relu(h);
    let pos = dense(tape, h, "emb.pos2")?;

    let table = tape.param("emb.tok")?;
    let tok = tape.embedding_lookup(table, &tokens)?;
    let avg = tape.constant(avg);
    let text = tape.matmul(avg, tok)?;

    let kinds: Vec<usize> = doc.units.iter().map(|u| u.kind.index()).collect();
    let kt = tape.param("emb.kind")?;
    let kind = tape.embedding_lookup(kt, &kinds)?;

    let cat = tape.concat(&[pos, text, kind])?;
    dense(tape, cat, "emb.proj")
}

/// Pre-norm transformer layers without sequence positions.
pub fn encode<T: Real>(tape: &mut Tape<'_, T>, e: Var, cfg: &EncoderConfig) -> Result<Var> {
    let shape = tape.value(e).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Shape {
            op: "encode",
            detail: format!("input {shape:?}, d_model {}", cfg.d_model),
        });
    }
    let mut x = e;
    for l in 0..cfg.n_layers {
        let h = norm(tape, x, &format!("enc.{l}.ln1"))?;
        let a = attention(tape, h, h, None, cfg.n_heads, &format!("enc.{l}.att"))?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &format!("enc.{l}.ln2"))?;
        let f = ffn(tape, h, &format!("enc.{l}.ffn"))?;
        x = tape.add(x, f)?;
    }
    norm(tape, x, "enc.out")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc_model::testutil::*;
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            vocab: 32,
        }
    }

    fn store(cfg: &EncoderConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_encoder(&mut s, &mut ChaCha8Rng::seed_from_u64(5), cfg);
        s
    }

    #[test]
    fn embedding_shape_and_identical_units() {
        let cfg = tiny();
        let s = store(&cfg);
        let mut d = column_doc(3);
        d.units[2].bbox = d.units[0].bbox;
        d.units[2].text = d.units[0].text.clone();
        d.units[1].text.clear();
        d.units[1].kind = UnitKind::TextWidget;
        let mut t = Tape::with_params(&s);
        let e = embed_units(&mut t, &d, &cfg).unwrap();
        let v = t.value(e);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(v.row(0), v.row(2));
        assert!(v.all_finite());
    }

    #[test]
    fn single_unit_encodes() {
        let cfg = tiny();
        let s = store(&cfg);
        let mut t = Tape::with_params(&s);
        let e = embed_units(&mut t, &column_doc(1), &cfg).unwrap();
        let y = encode(&mut t, e, &cfg).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 8]);
        assert!(t.value(y).all_finite());
    }

    #[test]
    fn permutation_equivariant() {
        let cfg = tiny();
        let s = store(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = normal_like::<f64>(&mut rng, &[5, 8], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 8]);
        for (r, &p) in perm.iter().enumerate() {
            xp.row_mut(r).copy_from_slice(x.row(p));
        }
        let mut t = Tape::with_params(&s);
        let a = t.constant(x);
        let ya = encode(&mut t, a, &cfg).unwrap();
        let b = t.constant(xp);
        let yb = encode(&mut t, b, &cfg).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            for (u, v) in t.value(yb).row(r).iter().zip(t.value(ya).row(p)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_hashing() {
        assert_eq!(token_ids("Name:  name:", 4096).len(), 2);
        assert_eq!(token_ids("Name:", 4096), token_ids("name:", 4096));
        assert!(token_ids("", 7).is_empty());
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(EncoderConfig { n_heads: 3, ..tiny() }.validate().is_err());
    }
}
