//! Clustered geometric MIMO channel model and the `FMCHEST1` dataset file.
//!
//! Each channel is a sum of plane-wave paths between two uniform linear
//! arrays:
//!
//! ```text
//! H = c * sum_{cluster, ray} alpha * a_rx(theta) a_tx(phi)^H
//! ```
//!
//! with `alpha ~ CN(0, 1)`, cluster mean angles uniform over the front
//! half-plane and per-ray Gaussian angular offsets. `c = 1/sqrt(C*R)` makes
//! `E ||H||_F^2 = M*N`, i.e. unit average power per entry.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexMatrix, Rng, RNG_ALGORITHM};

pub const DATASET_MAGIC: &[u8; 8] = b"FMCHEST1";
pub const DATASET_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModelConfig {
    pub m_rx: usize,
    pub n_tx: usize,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub angular_spread_deg: f64,
    /// Element spacing in wavelengths.
    pub antenna_spacing: f64,
    pub seed: u64,
}

impl ChannelModelConfig {
    pub fn new(m_rx: usize, n_tx: usize) -> Self {
        Self {
            m_rx,
            n_tx,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_rx == 0 || self.n_tx == 0 {
            return Err(Error::InvalidParameter("antenna counts must be >= 1".into()));
        }
        if self.n_clusters == 0 || self.rays_per_cluster == 0 {
            return Err(Error::InvalidParameter(
                "need at least one cluster and one ray".into(),
            ));
        }
        if !(self.angular_spread_deg >= 0.0) || !self.angular_spread_deg.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "angular spread must be finite and >= 0, got {}",
                self.angular_spread_deg
            )));
        }
        if !self.antenna_spacing.is_finite() {
            return Err(Error::InvalidParameter("antenna spacing must be finite".into()));
        }
        Ok(())
    }

    fn normalization(&self) -> f64 {
        1.0 / ((self.n_clusters * self.rays_per_cluster) as f64).sqrt()
    }
}

impl Default for ChannelModelConfig {
    fn default() -> Self {
        Self {
            m_rx: 16,
            n_tx: 64,
            n_clusters: 3,
            rays_per_cluster: 10,
            angular_spread_deg: 5.0,
            antenna_spacing: 0.5,
            seed: 0,
        }
    }
}

/// ULA response: entry `k` is `exp(j 2 pi spacing k sin(angle))`.
pub fn steering_vector(n_ant: usize, angle_rad: f64, spacing: f64) -> Vec<Complex64> {
    let phase = 2.0 * PI * spacing * angle_rad.sin();
    (0..n_ant)
        .map(|k| Complex64::from_polar(1.0, phase * k as f64))
        .collect()
}

/// One propagation path: complex gain, arrival and departure angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    pub aoa: f64,
    pub aod: f64,
}

/// Draw the clusters and rays for one channel realization.
pub fn draw_paths(cfg: &ChannelModelConfig, rng: &mut Rng) -> Vec<PathComponent> {
    let spread = cfg.angular_spread_deg.to_radians();
    let mut paths = Vec::with_capacity(cfg.n_clusters * cfg.rays_per_cluster);
    for _ in 0..cfg.n_clusters {
        let mean_aoa = PI * rng.uniform() - FRAC_PI_2;
        let mean_aod = PI * rng.uniform() - FRAC_PI_2;
        for _ in 0..cfg.rays_per_cluster {
            let aoa = mean_aoa + spread * rng.normal();
            let aod = mean_aod + spread * rng.normal();
            let gain = rng.complex_normal(1.0);
            paths.push(PathComponent { gain, aoa, aod });
        }
    }
    paths
}

/// Channel matrix for an explicit set of paths, normalized by `1/sqrt(C*R)`.
pub fn channel_from_paths(cfg: &ChannelModelConfig, paths: &[PathComponent]) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(cfg.m_rx, cfg.n_tx);
    let c = cfg.normalization();
    let n_tx = cfg.n_tx;
    for p in paths {
        let a_rx = steering_vector(cfg.m_rx, p.aoa, cfg.antenna_spacing);
        let a_tx = steering_vector(cfg.n_tx, p.aod, cfg.antenna_spacing);
        let g = p.gain * c;
        let data = h.data_mut();
        for (r, ar) in a_rx.iter().enumerate() {
            let row = &mut data[r * n_tx..(r + 1) * n_tx];
            let gr = g * ar;
            for (x, at) in row.iter_mut().zip(&a_tx) {
                *x += gr * at.conj();
            }
        }
    }
    h
}

pub fn generate_channel(cfg: &ChannelModelConfig, rng: &mut Rng) -> ComplexMatrix {
    let paths = draw_paths(cfg, rng);
    channel_from_paths(cfg, &paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Element type of the stored samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageDtype {
    F32,
    F64,
}

impl StorageDtype {
    fn code(self) -> u16 {
        match self {
            StorageDtype::F32 => 1,
            StorageDtype::F64 => 2,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(StorageDtype::F32),
            2 => Some(StorageDtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub config: ChannelModelConfig,
    pub dtype: StorageDtype,
    pub train: Vec<ComplexMatrix>,
    pub val: Vec<ComplexMatrix>,
    pub test: Vec<ComplexMatrix>,
}

impl ChannelDataset {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes::new(self.train.len(), self.val.len(), self.test.len())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.config.m_rx, self.config.n_tx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ComplexMatrix> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Average of `||H||_F^2 / (M N)` over every sample.
    pub fn mean_entry_power(&self) -> f64 {
        let (m, n) = self.shape();
        let total = self.sizes().total();
        if total == 0 {
            return 0.0;
        }
        self.iter().map(|h| h.frobenius_norm_sq()).sum::<f64>() / (total * m * n) as f64
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Build train/val/test splits from disjoint derived streams of `cfg.seed`.
///
/// With `F32` storage every sample (and the real-valued config fields) is
/// rounded to single precision so a save/load cycle is bit-exact.
pub fn build_dataset(
    cfg: &ChannelModelConfig,
    sizes: SplitSizes,
    dtype: StorageDtype,
) -> Result<ChannelDataset> {
    cfg.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidParameter(format!(
            "every split needs at least one sample, got {sizes:?}"
        )));
    }
    let mut cfg = *cfg;
    cfg.angular_spread_deg = round_f32(cfg.angular_spread_deg);
    cfg.antenna_spacing = round_f32(cfg.antenna_spacing);

    let root = Rng::new(cfg.seed);
    let split = |tag: u64, count: usize| -> Vec<ComplexMatrix> {
        let stream = root.derive(tag);
        (0..count)
            .map(|i| {
                let mut rng = stream.derive(i as u64);
                let mut h = generate_channel(&cfg, &mut rng);
                if dtype == StorageDtype::F32 {
                    for z in h.data_mut() {
                        *z = Complex64::new(round_f32(z.re), round_f32(z.im));
                    }
                }
                h
            })
            .collect()
    };
    Ok(ChannelDataset {
        config: cfg,
        dtype,
        train: split(1, sizes.train),
        val: split(2, sizes.val),
        test: split(3, sizes.test),
    })
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::InvalidParameter(format!("{what} = {x} exceeds u32")))
}

/// Serialize to the `FMCHEST1` layout (all integers little-endian):
///
/// ```text
///  0  magic "FMCHEST1"        8 bytes
///  8  version u16, dtype u16  (1 = f32, 2 = f64)
/// 12  M u32, 16 N u32
/// 20  n_train u32, 24 n_val u32, 28 n_test u32
/// 32  PRNG id, 8 bytes ASCII, zero padded
/// 40  seed u64
/// 48  n_clusters u32, 52 rays_per_cluster u32
/// 56  angular_spread_deg f32, 60 antenna_spacing f32
/// 64  samples: re, im interleaved, row-major, train | val | test
/// ```
pub fn encode_dataset(ds: &ChannelDataset) -> Result<Vec<u8>> {
    let cfg = &ds.config;
    let (m, n) = ds.shape();
    let sizes = ds.sizes();
    let mut buf = Vec::with_capacity(DATASET_HEADER_LEN + sizes.total() * m * n * 2 * ds.dtype.width());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&ds.dtype.code().to_le_bytes());
    for (v, what) in [
        (m, "M"),
        (n, "N"),
        (sizes.train, "n_train"),
        (sizes.val, "n_val"),
        (sizes.test, "n_test"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    let mut id = [0u8; 8];
    id[..RNG_ALGORITHM.len()].copy_from_slice(RNG_ALGORITHM.as_bytes());
    buf.extend_from_slice(&id);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&to_u32(cfg.n_clusters, "n_clusters")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cfg.rays_per_cluster, "rays_per_cluster")?.to_le_bytes());
    buf.extend_from_slice(&(cfg.angular_spread_deg as f32).to_le_bytes());
    buf.extend_from_slice(&(cfg.antenna_spacing as f32).to_le_bytes());
    debug_assert_eq!(buf.len(), DATASET_HEADER_LEN);

    for h in ds.iter() {
        if h.shape() != (m, n) {
            return Err(Error::Dimension(format!(
                "sample is {}x{}, dataset is {m}x{n}",
                h.rows(),
                h.cols()
            )));
        }
        for z in h.data() {
            match ds.dtype {
                StorageDtype::F32 => {
                    buf.extend_from_slice(&(z.re as f32).to_le_bytes());
                    buf.extend_from_slice(&(z.im as f32).to_le_bytes());
                }
                StorageDtype::F64 => {
                    buf.extend_from_slice(&z.re.to_le_bytes());
                    buf.extend_from_slice(&z.im.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &ChannelDataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.remaining()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let dtype_code = r.u16("dtype")?;
    let dtype = StorageDtype::from_code(dtype_code)
        .ok_or_else(|| Error::format(10, format!("unknown dtype code {dtype_code}")))?;
    let m = r.u32("M")? as usize;
    let n = r.u32("N")? as usize;
    if m == 0 || n == 0 {
        return Err(Error::format(12, format!("invalid shape {m}x{n}")));
    }
    let n_train = r.u32("n_train")? as usize;
    let n_val = r.u32("n_val")? as usize;
    let n_test = r.u32("n_test")? as usize;
    let id = r.take(8, "PRNG id")?;
    let id_str = String::from_utf8_lossy(id);
    let id_str = id_str.trim_end_matches('\0');
    if id_str != RNG_ALGORITHM {
        return Err(Error::format(32, format!("unknown PRNG id {id_str:?}")));
    }
    let seed = r.u64("seed")?;
    let n_clusters = r.u32("n_clusters")? as usize;
    let rays = r.u32("rays_per_cluster")? as usize;
    let spread = r.f32("angular_spread_deg")? as f64;
    let spacing = r.f32("antenna_spacing")? as f64;
    let config = ChannelModelConfig {
        m_rx: m,
        n_tx: n,
        n_clusters,
        rays_per_cluster: rays,
        angular_spread_deg: spread,
        antenna_spacing: spacing,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::format(48, format!("invalid channel metadata: {e}")))?;

    let total = n_train
        .checked_add(n_val)
        .and_then(|x| x.checked_add(n_test))
        .ok_or_else(|| Error::format(20, "sample counts overflow"))?;
    let payload = total
        .checked_mul(m * n * 2 * dtype.width())
        .ok_or_else(|| Error::format(20, "payload size overflows"))?;
    if r.remaining() != payload {
        return Err(Error::format(
            r.pos() as u64,
            format!(
                "payload is {} bytes, header implies {payload}",
                r.remaining()
            ),
        ));
    }

    let mut read_split = |count: usize| -> Result<Vec<ComplexMatrix>> {
        (0..count)
            .map(|_| {
                let offset = r.pos() as u64;
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m * n {
                    let z = match dtype {
                        StorageDtype::F32 => {
                            Complex64::new(r.f32("sample")? as f64, r.f32("sample")? as f64)
                        }
                        StorageDtype::F64 => Complex64::new(r.f64("sample")?, r.f64("sample")?),
                    };
                    data.push(z);
                }
                ComplexMatrix::new(m, n, data)
                    .map_err(|e| Error::format(offset, format!("bad sample: {e}")))
            })
            .collect()
    };
    let train = read_split(n_train)?;
    let val = read_split(n_val)?;
    let test = read_split(n_test)?;
    Ok(ChannelDataset {
        config,
        dtype,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steering_examples() {
        assert_eq!(steering_vector(1, 0.7, 0.5), vec![Complex64::new(1.0, 0.0)]);
        assert!(steering_vector(6, 0.0, 0.5)
            .iter()
            .all(|z| *z == Complex64::new(1.0, 0.0)));
        let v = steering_vector(4, FRAC_PI_2, 0.5);
        for (k, z) in v.iter().enumerate() {
            let expected = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!((z.re - expected).abs() < 1e-12 && z.im.abs() < 1e-12, "{k}: {z}");
        }
        assert!(steering_vector(16, 0.3, 0.5)
            .iter()
            .all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn forced_single_path_is_constant() {
        let cfg = ChannelModelConfig {
            m_rx: 4,
            n_tx: 8,
            n_clusters: 1,
            rays_per_cluster: 1,
            angular_spread_deg: 0.0,
            ..Default::default()
        };
        let path = PathComponent {
            gain: Complex64::new(1.0, 0.0),
            aoa: 0.0,
            aod: 0.0,
        };
        let h = channel_from_paths(&cfg, &[path]);
        assert!(h.data().iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn generated_channel_shape_and_finite() {
        let cfg = ChannelModelConfig::new(8, 32);
        let h = generate_channel(&cfg, &mut Rng::new(3));
        assert_eq!(h.shape(), (8, 32));
        assert!(h.is_finite());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let cfg = ChannelModelConfig {
            seed: 11,
            ..ChannelModelConfig::new(4, 8)
        };
        let ds = build_dataset(&cfg, SplitSizes::new(10, 2, 2), StorageDtype::F32).unwrap();
        assert_eq!(ds.sizes().total(), 14);
        let all: Vec<_> = ds.iter().collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        let again = build_dataset(&cfg, SplitSizes::new(10, 2, 2), StorageDtype::F32).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn empty_split_rejected() {
        let cfg = ChannelModelConfig::new(4, 8);
        assert!(build_dataset(&cfg, SplitSizes::new(10, 0, 2), StorageDtype::F32).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ChannelModelConfig::new(0, 8);
        assert!(cfg.validate().is_err());
        cfg.m_rx = 2;
        cfg.angular_spread_deg = -1.0;
        assert!(cfg.validate().is_err());
        cfg.angular_spread_deg = 1.0;
        cfg.rays_per_cluster = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trip_both_dtypes() {
        let cfg = ChannelModelConfig {
            seed: 5,
            ..ChannelModelConfig::new(3, 4)
        };
        for dtype in [StorageDtype::F32, StorageDtype::F64] {
            let ds = build_dataset(&cfg, SplitSizes::new(3, 2, 1), dtype).unwrap();
            let bytes = encode_dataset(&ds).unwrap();
            assert_eq!(bytes.len(), 64 + 6 * 12 * 2 * dtype.width());
            assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = ChannelModelConfig::new(2, 2);
        let ds = build_dataset(&cfg, SplitSizes::new(2, 1, 1), StorageDtype::F32).unwrap();
        let bytes = encode_dataset(&ds).unwrap();

        for cut in [0, 5, 30, 63, 64, bytes.len() - 1] {
            let err = decode_dataset(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let msg = decode_dataset(&bad).unwrap_err().to_string();
        assert!(msg.contains("FMCHEST1"), "{msg}");

        let mut bad = bytes.clone();
        bad[10] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format { offset: 10, .. })
        ));

        let mut bad = bytes.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { .. })));

        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { .. })));
    }
}
