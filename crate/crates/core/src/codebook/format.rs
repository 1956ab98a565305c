//! `CBK1` codebook files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "CBK1"
//! u32     version (1)
//! u32     S
//! u32     N
//! u32     d
//! u64     seed
//! u32[S]  permutation
//! f64[S·d] centers, row-major
//! f64[N·d·d] W_0 … W_{N-1}, row-major
//! u32     CRC32 of every preceding byte
//! ```

use super::Codebook;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

const MAGIC: &[u8; 4] = b"CBK1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 8;

impl Codebook {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.s() as u32);
        w.u32(self.n() as u32);
        w.u32(self.d() as u32);
        w.u64(self.seed());
        for &p in self.partition() {
            w.u32(p);
        }
        for &v in self.centers().data() {
            w.f64(v);
        }
        for m in self.ws() {
            for &v in m.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader::raw(bytes);
        let magic = head.take(4).map_err(|_| Error::BadFormat("missing CBK1 magic".into()))?;
        if magic != MAGIC {
            return Err(Error::BadFormat(format!("bad magic {magic:?}, expected CBK1")));
        }
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (s, n, d) = (head.u32()? as usize, head.u32()? as usize, head.u32()? as usize);
        if s == 0 || d == 0 || n == 0 || s % n != 0 {
            return Err(Error::BadFormat(format!("invalid header S={s} N={n} d={d}")));
        }
        let expected = HEADER_LEN + 4 * s + 8 * s * d + 8 * n * d * d + 4;
        if bytes.len() < expected {
            return Err(Error::Truncated);
        }
        if bytes.len() > expected {
            return Err(Error::BadFormat(format!("{} trailing bytes", bytes.len() - expected)));
        }

        let mut r = Reader::checked(bytes)?;
        r.take(HEADER_LEN - 8)?;
        let seed = r.u64()?;
        let perm = (0..s).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let centers = (0..s * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut w = Vec::with_capacity(n);
        for _ in 0..n {
            let m = (0..d * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            w.push(Tensor::new(vec![d, d], m)?);
        }
        r.expect_end()?;
        Codebook::new(Tensor::new(vec![s, d], centers)?, n, perm, w, seed)
            .map_err(|e| Error::BadFormat(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::partition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = partition(Tensor::randn(&[8, 3], 1.0, &mut rng), 2, 11).unwrap();
        cb.set_w(1, Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        cb
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cb = sample();
        let bytes = cb.to_bytes();
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.cbk");
        cb.save(&path).unwrap();
        assert_eq!(Codebook::load(&path).unwrap(), cb);
    }

    #[test]
    fn corrupt_magic_is_bad_format() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Codebook::from_bytes(&bytes), Err(Error::BadFormat(_))));
    }

    #[test]
    fn version_and_truncation_and_checksum_errors() {
        let good = sample().to_bytes();
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(Codebook::from_bytes(&v), Err(Error::Version { found: 2, .. })));
        assert!(matches!(Codebook::from_bytes(&good[..good.len() - 9]), Err(Error::Truncated)));
        let mut flipped = good.clone();
        flipped[HEADER_LEN + 3] ^= 1;
        assert!(matches!(Codebook::from_bytes(&flipped), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_with_indivisible_counts_is_rejected() {
        // S=10, N=4, d=1 with a valid checksum over otherwise plausible data
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(10);
        w.u32(4);
        w.u32(1);
        w.u64(0);
        (0..10).for_each(|i| w.u32(i));
        (0..10).for_each(|i| w.f64(i as f64));
        (0..4).for_each(|_| w.f64(1.0));
        let bytes = w.finish();
        let err = Codebook::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadFormat(ref m) if m.contains("S=10 N=4")), "{err}");
    }
}
