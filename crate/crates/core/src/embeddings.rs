//! Frozen embeddings: the VLSB binary container and a deterministic,
//! differentiable pseudo text encoder.
//!
//! VLSB layout (little endian):
//!
//! | bytes | content                                    |
//! |-------|--------------------------------------------|
//! | 4     | magic `VLSB`                               |
//! | 1     | version: 1 = float32 payload, 2 = float64  |
//! | 4     | rows (u32)                                 |
//! | 4     | dim (u32)                                  |
//! | ...   | `rows * dim` values, row-major             |

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VLSB";
const HEADER_LEN: usize = 13;

/// Payload precision of a VLSB blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32 = 1,
    F64 = 2,
}

pub fn encode_vlsb(matrix: ArrayView2<'_, f64>, precision: Precision) -> Vec<u8> {
    let (rows, dim) = matrix.dim();
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(HEADER_LEN + rows * dim * width);
    out.extend_from_slice(MAGIC);
    out.push(precision as u8);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in matrix.iter() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Decodes one blob from the front of `bytes`, returning the matrix and the
/// number of bytes consumed.
pub fn decode_vlsb_prefix(bytes: &[u8]) -> Result<(Array2<f64>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let width = match bytes[4] {
        1 => 4,
        2 => 8,
        v => return Err(Error::Format(format!("unsupported version {v}"))),
    };
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let expected = rows * dim * width;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::PayloadLength { expected, found: payload.len() });
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in payload[..expected].chunks_exact(width).enumerate() {
        let v = if width == 4 {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().unwrap())
        };
        if !v.is_finite() {
            return Err(Error::NonFinite(i / dim, i % dim));
        }
        data.push(v);
    }
    let m = Array2::from_shape_vec((rows, dim), data).expect("shape checked above");
    Ok((m, HEADER_LEN + expected))
}

/// Decodes a buffer holding exactly one blob.
pub fn decode_vlsb(bytes: &[u8]) -> Result<Array2<f64>> {
    let (m, used) = decode_vlsb_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::PayloadLength { expected: used - HEADER_LEN, found: bytes.len() - HEADER_LEN });
    }
    Ok(m)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    decode_vlsb(&std::fs::read(path)?)
}

pub fn save_embeddings(path: impl AsRef<Path>, matrix: ArrayView2<'_, f64>) -> Result<()> {
    std::fs::write(path, encode_vlsb(matrix, Precision::F32))?;
    Ok(())
}

/// Seeded stand-in for a frozen text encoder: mean-pool token rows, apply a
/// fixed random projection and L2-normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEncoder {
    pub seed: u64,
    /// `out_dim x token_dim`
    projection: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub output: Array1<f64>,
    norm: f64,
    rows: usize,
}

impl PseudoEncoder {
    pub const DEFAULT_TOKEN_DIM: usize = 768;
    pub const DEFAULT_OUT_DIM: usize = 512;

    pub fn new(seed: u64, token_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (token_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((out_dim, token_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { seed, projection }
    }

    pub fn token_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    pub fn encode(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.encode_traced(tokens)?.output)
    }

    pub fn encode_traced(&self, tokens: ArrayView2<'_, f64>) -> Result<EncodeTrace> {
        let (rows, dim) = tokens.dim();
        if rows == 0 {
            return Err(Error::Empty("token rows"));
        }
        if dim != self.token_dim() {
            return Err(Error::Shape(format!("token dim {dim} != {}", self.token_dim())));
        }
        let mean = tokens.sum_axis(ndarray::Axis(0)) / rows as f64;
        let z = self.projection.dot(&mean);
        let norm = z.dot(&z).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateEncoding);
        }
        Ok(EncodeTrace { output: z / norm, norm, rows })
    }

    /// Gradient with respect to every token row given `d_out`. All rows
    /// share the same gradient because of the mean pooling; the shared row
    /// is returned.
    pub fn backward_row(&self, trace: &EncodeTrace, d_out: ArrayView1<'_, f64>) -> Array1<f64> {
        let f = &trace.output;
        let proj = f.dot(&d_out);
        let dz = (&d_out - &(f * proj)) / trace.norm;
        self.projection.t().dot(&dz) / trace.rows as f64
    }

    pub fn backward(&self, trace: &EncodeTrace, d_out: ArrayView1<'_, f64>) -> Array2<f64> {
        let row = self.backward_row(trace, d_out);
        let mut out = Array2::zeros((trace.rows, self.token_dim()));
        for mut r in out.rows_mut() {
            r.assign(&row);
        }
        out
    }
}

/// Convenience wrapper matching the operation name.
pub fn pseudo_encode(encoder: &PseudoEncoder, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    encoder.encode(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, concatenate, s, Axis};
    use proptest::prelude::*;

    fn random_tokens(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn vlsb_two_by_three() {
        let m = array![[1.0, 2.0, 3.0], [4.0, -5.5, 6.25]];
        let bytes = encode_vlsb(m.view(), Precision::F32);
        assert_eq!(&bytes[..4], b"VLSB");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes.len(), 13 + 24);
        assert_eq!(decode_vlsb(&bytes).unwrap(), m);
    }

    #[test]
    fn vlsb_truncated_payload() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode_vlsb(m.view(), Precision::F32);
        let err = decode_vlsb(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().starts_with("payload length mismatch"), "{err}");
    }

    #[test]
    fn vlsb_nan_rejected() {
        let m = array![[1.0, 2.0, 3.0], [4.0, f64::NAN, 6.0]];
        let bytes = encode_vlsb(m.view(), Precision::F32);
        assert_eq!(decode_vlsb(&bytes).unwrap_err().to_string(), "non-finite value at (1,1)");
    }

    #[test]
    fn vlsb_bad_magic_and_version() {
        let m = array![[1.0]];
        let mut bytes = encode_vlsb(m.view(), Precision::F32);
        bytes[4] = 9;
        assert!(matches!(decode_vlsb(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_vlsb(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn vlsb_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vlsb");
        let m = random_tokens(7, 5, 3);
        save_embeddings(&p, m.view()).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = load_embeddings(&p).unwrap();
        let p2 = dir.path().join("b.vlsb");
        save_embeddings(&p2, loaded.view()).unwrap();
        assert_eq!(first, std::fs::read(&p2).unwrap());
        assert_eq!(loaded, load_embeddings(&p2).unwrap());
    }

    #[test]
    fn same_seed_same_projection() {
        let a = PseudoEncoder::new(5, 16, 8);
        let b = PseudoEncoder::new(5, 16, 8);
        let c = PseudoEncoder::new(6, 16, 8);
        assert_eq!(a.projection, b.projection);
        assert_ne!(a.projection, c.projection);
    }

    #[test]
    fn encoding_is_unit_norm_and_duplication_invariant() {
        let enc = PseudoEncoder::new(1, 8, 6);
        let t = random_tokens(4, 8, 9);
        let out = enc.encode(t.view()).unwrap();
        assert!((out.dot(&out).sqrt() - 1.0).abs() < 1e-9);
        let doubled = concatenate(Axis(0), &[t.view(), t.view()]).unwrap();
        let out2 = enc.encode(doubled.view()).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_tokens_are_degenerate() {
        let enc = PseudoEncoder::new(1, 8, 6);
        let t = Array2::zeros((3, 8));
        assert!(matches!(enc.encode(t.view()), Err(Error::DegenerateEncoding)));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let enc = PseudoEncoder::new(4, 8, 6);
        let t = random_tokens(4, 8, 21);
        // random upstream direction turns the Jacobian check into a scalar one
        let w = random_tokens(1, 6, 22).row(0).to_owned();
        let trace = enc.encode_traced(t.view()).unwrap();
        let analytic = enc.backward(&trace, w.view());
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for i in 0..4 {
            for j in 0..8 {
                let mut tp = t.clone();
                tp[[i, j]] += h;
                let mut tm = t.clone();
                tm[[i, j]] -= h;
                let fp = enc.encode(tp.view()).unwrap().dot(&w);
                let fm = enc.encode(tm.view()).unwrap().dot(&w);
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - analytic[[i, j]]).abs() / fd.abs().max(analytic[[i, j]].abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    proptest! {
        #[test]
        fn encoding_is_row_permutation_invariant(seed in 0u64..1000, rot in 0usize..5) {
            let enc = PseudoEncoder::new(seed, 6, 4);
            let t = random_tokens(5, 6, seed + 1);
            let rotated = concatenate(Axis(0), &[t.slice(s![rot.., ..]), t.slice(s![..rot, ..])]).unwrap();
            let a = enc.encode(t.view()).unwrap();
            let b = enc.encode(rotated.view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
