//! CSI frames: the CSIF container, amplitude/phase extraction and linear
//! phase sanitization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::RealMatrix;

pub type Complex64 = Complex<f64>;

pub const CSIF_MAGIC: &[u8; 4] = b"CSIF";
pub const CSIF_VERSION: u16 = 1;
pub const CSIF_HEADER_LEN: usize = 24;

/// Physical subcarrier numbers of the 30 grouped subcarriers reported by the
/// Intel 5300 at 20 MHz.
pub const INTEL5300_SUBCARRIERS: [i32; 30] = [
    -28, -26, -24, -22, -20, -18, -16, -14, -12, -10, -8, -6, -4, -2, -1, 1, 3, 5, 7, 9, 11, 13,
    15, 17, 19, 21, 23, 25, 27, 28,
];

/// A complex `N x T` measurement matrix, rows ordered by `(tx, rx, subcarrier)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    n_tx: u16,
    n_rx: u16,
    n_sc: u16,
    sample_rate_hz: f64,
    data: DMatrix<Complex64>,
}

impl CsiFrame {
    pub fn new(n_tx: u16, n_rx: u16, n_sc: u16, sample_rate_hz: f64, data: DMatrix<Complex64>) -> Result<Self> {
        let n = n_tx as usize * n_rx as usize * n_sc as usize;
        if n == 0 {
            return Err(Error::Validation("frame needs at least one row".into()));
        }
        if data.nrows() != n {
            return Err(Error::Validation(format!(
                "{n_tx}x{n_rx}x{n_sc} antennas/subcarriers imply {n} rows, data has {}",
                data.nrows()
            )));
        }
        if data.ncols() < 2 {
            return Err(Error::Validation(format!("frame needs at least 2 packets, got {}", data.ncols())));
        }
        if data.ncols() > u32::MAX as usize {
            return Err(Error::Validation("packet count exceeds u32".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Validation(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if let Some(pos) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Validation(format!(
                "non-finite CSI entry at ({}, {})",
                pos % n,
                pos / n
            )));
        }
        Ok(Self {
            n_tx,
            n_rx,
            n_sc,
            sample_rate_hz,
            data,
        })
    }

    /// Frame holding a real matrix as its (zero-phase) complex entries.
    pub fn from_real(n_tx: u16, n_rx: u16, n_sc: u16, sample_rate_hz: f64, m: &RealMatrix) -> Result<Self> {
        Self::new(n_tx, n_rx, n_sc, sample_rate_hz, m.map(|v| Complex64::new(v, 0.0)))
    }

    pub fn n_tx(&self) -> u16 {
        self.n_tx
    }

    pub fn n_rx(&self) -> u16 {
        self.n_rx
    }

    pub fn n_sc(&self) -> u16 {
        self.n_sc
    }

    /// Rows `N = n_tx · n_rx · n_sc`.
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Packets.
    pub fn t(&self) -> usize {
        self.data.ncols()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn data(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    /// Flattened row of `(tx, rx, subcarrier)`.
    pub fn row_index(&self, tx: usize, rx: usize, sc: usize) -> usize {
        (tx * self.n_rx as usize + rx) * self.n_sc as usize + sc
    }
}

/// A frame and its activity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: CsiFrame,
    pub label: String,
}

pub fn amplitude(frame: &CsiFrame) -> RealMatrix {
    frame.data.map(|z| z.norm())
}

/// Entries whose phase is undefined.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct PhaseQuality {
    /// `(row, packet)` of every zero-magnitude entry.
    pub zero_magnitude: Vec<(usize, usize)>,
}

/// Principal argument in `(-π, π]`. Zero entries get phase 0 and are listed
/// in the quality report.
pub fn phase(frame: &CsiFrame) -> (RealMatrix, PhaseQuality) {
    let (n, t) = frame.data.shape();
    let mut out = DMatrix::zeros(n, t);
    let mut quality = PhaseQuality::default();
    for j in 0..t {
        for i in 0..n {
            let z = frame.data[(i, j)];
            if z.re == 0.0 && z.im == 0.0 {
                quality.zero_magnitude.push((i, j));
                continue;
            }
            let a = z.im.atan2(z.re);
            out[(i, j)] = if a <= -std::f64::consts::PI { std::f64::consts::PI } else { a };
        }
    }
    quality.zero_magnitude.sort_unstable();
    (out, quality)
}

/// How the linear phase trend over subcarriers is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeFit {
    /// Ordinary least squares over all subcarriers.
    #[default]
    LeastSquares,
    /// Slope through the first and last subcarrier.
    EndPoints,
}

/// Unwraps in place so consecutive differences lie in `[-π, π]`.
pub fn unwrap_phase(values: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    let mut offset = 0.0;
    for i in 1..values.len() {
        let raw = values[i];
        let d = raw + offset - values[i - 1];
        if !(-PI..=PI).contains(&d) {
            offset -= TAU * (d / TAU).round();
        }
        values[i] = raw + offset;
    }
}

/// Removes the sampling-offset phase ramp per antenna pair and packet:
/// unwrap across subcarriers, then subtract `a·k + b` so the block has zero
/// slope and zero mean over the subcarrier numbers `k`.
pub fn sanitize_phase(phase: &RealMatrix, subcarrier_index: &[i32], fit: SlopeFit) -> Result<RealMatrix> {
    let n_sc = subcarrier_index.len();
    if n_sc < 2 {
        return Err(Error::InvalidArgument("need at least two subcarriers to fit a line".into()));
    }
    if subcarrier_index.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("subcarrier indices must be strictly increasing".into()));
    }
    if !phase.nrows().is_multiple_of(n_sc) {
        return Err(Error::Shape(format!(
            "{} rows do not split into blocks of {n_sc} subcarriers",
            phase.nrows()
        )));
    }
    crate::ensure_finite(phase, "phase")?;
    let k: Vec<f64> = subcarrier_index.iter().map(|&v| v as f64).collect();
    let k_mean = k.iter().sum::<f64>() / n_sc as f64;
    let k_var: f64 = k.iter().map(|v| (v - k_mean).powi(2)).sum();
    let mut out = phase.clone();
    let mut block = vec![0.0; n_sc];
    for col in 0..phase.ncols() {
        for start in (0..phase.nrows()).step_by(n_sc) {
            for (i, b) in block.iter_mut().enumerate() {
                *b = phase[(start + i, col)];
            }
            unwrap_phase(&mut block);
            let mean = block.iter().sum::<f64>() / n_sc as f64;
            let slope = match fit {
                SlopeFit::LeastSquares => {
                    block.iter().zip(&k).map(|(p, kk)| (p - mean) * (kk - k_mean)).sum::<f64>() / k_var
                }
                SlopeFit::EndPoints => (block[n_sc - 1] - block[0]) / (k[n_sc - 1] - k[0]),
            };
            let intercept = mean - slope * k_mean;
            for i in 0..n_sc {
                out[(start + i, col)] = block[i] - slope * k[i] - intercept;
            }
        }
    }
    Ok(out)
}

/// Writes a frame in the CSIF layout.
pub fn write_frame<W: Write>(mut w: W, frame: &CsiFrame) -> std::io::Result<()> {
    w.write_all(CSIF_MAGIC)?;
    w.write_all(&CSIF_VERSION.to_le_bytes())?;
    w.write_all(&frame.n_tx.to_le_bytes())?;
    w.write_all(&frame.n_rx.to_le_bytes())?;
    w.write_all(&frame.n_sc.to_le_bytes())?;
    w.write_all(&(frame.t() as u32).to_le_bytes())?;
    w.write_all(&frame.sample_rate_hz.to_le_bytes())?;
    let mut row = Vec::with_capacity(frame.t() * 16);
    for i in 0..frame.n() {
        row.clear();
        for j in 0..frame.t() {
            let z = frame.data[(i, j)];
            row.extend_from_slice(&z.re.to_le_bytes());
            row.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&row)?;
    }
    w.flush()
}

/// Parsed CSIF header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsifHeader {
    pub n_tx: u16,
    pub n_rx: u16,
    pub n_sc: u16,
    pub t: u32,
    pub sample_rate_hz: f64,
}

impl CsifHeader {
    pub fn n(&self) -> usize {
        self.n_tx as usize * self.n_rx as usize * self.n_sc as usize
    }

    pub fn payload_len(&self) -> u64 {
        self.n() as u64 * self.t as u64 * 16
    }

    fn parse(buf: &[u8; CSIF_HEADER_LEN]) -> Result<Self> {
        if &buf[0..4] != CSIF_MAGIC {
            return Err(Error::Format("missing CSIF magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let version = u16_at(4);
        if version != CSIF_VERSION {
            return Err(Error::Format(format!("unsupported CSIF version {version}")));
        }
        Ok(Self {
            n_tx: u16_at(6),
            n_rx: u16_at(8),
            n_sc: u16_at(10),
            t: u32::from_le_bytes(buf[12..16].try_into().unwrap()),
            sample_rate_hz: f64::from_le_bytes(buf[16..24].try_into().unwrap()),
        })
    }
}

/// Reads a frame, row by row.
pub fn read_frame<R: Read>(r: R, declared_len: Option<u64>) -> Result<CsiFrame> {
    let mut r = BufReader::new(r);
    let mut head = [0u8; CSIF_HEADER_LEN];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("file shorter than the CSIF header".into()))?;
    let h = CsifHeader::parse(&head)?;
    if let Some(len) = declared_len {
        let expected = CSIF_HEADER_LEN as u64 + h.payload_len();
        if len != expected {
            return Err(Error::Corrupt(format!(
                "header declares {}x{} complex entries ({expected} bytes), file has {len} bytes",
                h.n(),
                h.t
            )));
        }
    }
    let (n, t) = (h.n(), h.t as usize);
    let mut data = DMatrix::from_element(n, t, Complex64::new(0.0, 0.0));
    let mut row = vec![0u8; t * 16];
    for i in 0..n {
        r.read_exact(&mut row).map_err(|_| {
            Error::Corrupt(format!("payload ends inside row {i} of {n} (expected {t} packets per row)"))
        })?;
        for j in 0..t {
            let o = j * 16;
            let re = f64::from_le_bytes(row[o..o + 8].try_into().unwrap());
            let im = f64::from_le_bytes(row[o + 8..o + 16].try_into().unwrap());
            data[(i, j)] = Complex64::new(re, im);
        }
    }
    let mut probe = [0u8; 1];
    if declared_len.is_none() && r.read(&mut probe).map_err(|e| Error::io("<csif>", e))? != 0 {
        return Err(Error::Corrupt("trailing bytes after CSIF payload".into()));
    }
    CsiFrame::new(h.n_tx, h.n_rx, h.n_sc, h.sample_rate_hz, data)
}

pub fn load_frame(path: &Path) -> Result<CsiFrame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    read_frame(file, Some(len)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn store_frame(path: &Path, frame: &CsiFrame) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_frame(BufWriter::new(file), frame).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn frame_from(values: &[(f64, f64)], n_sc: u16, t: usize) -> CsiFrame {
        let n = values.len() / t;
        let data = DMatrix::from_row_iterator(n, t, values.iter().map(|&(r, i)| Complex64::new(r, i)));
        CsiFrame::new(1, 1, n_sc, 1000.0, data).unwrap()
    }

    #[test]
    fn invariants_enforced() {
        let z = DMatrix::from_element(6, 4, Complex64::new(1.0, 0.0));
        assert!(CsiFrame::new(1, 2, 3, 1000.0, z.clone()).is_ok());
        assert!(CsiFrame::new(1, 2, 2, 1000.0, z.clone()).is_err());
        assert!(CsiFrame::new(1, 2, 3, 0.0, z.clone()).is_err());
        let one = DMatrix::from_element(6, 1, Complex64::new(1.0, 0.0));
        assert!(CsiFrame::new(1, 2, 3, 1000.0, one).is_err());
        let mut bad = z;
        bad[(2, 1)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(CsiFrame::new(1, 2, 3, 1000.0, bad), Err(Error::Validation(_))));
    }

    #[test]
    fn row_ordering() {
        let f = CsiFrame::new(3, 3, 30, 1000.0, DMatrix::from_element(270, 2, Complex64::new(0.0, 0.0))).unwrap();
        assert_eq!(f.row_index(0, 0, 0), 0);
        assert_eq!(f.row_index(0, 1, 0), 30);
        assert_eq!(f.row_index(2, 2, 29), 269);
    }

    #[test]
    fn amplitude_examples() {
        let f = frame_from(&[(3.0, 4.0), (0.0, 0.0), (0.3f64.cos(), 0.3f64.sin()), (-1.0, 0.0)], 2, 2);
        let a = amplitude(&f);
        assert_eq!(a[(0, 0)], 5.0);
        assert_eq!(a[(0, 1)], 0.0);
        assert!((a[(1, 0)] - 1.0).abs() < 1e-15);
        let zero = CsiFrame::new(1, 1, 2, 1.0, DMatrix::from_element(2, 3, Complex64::new(0.0, 0.0))).unwrap();
        assert_eq!(amplitude(&zero), DMatrix::zeros(2, 3));
    }

    #[test]
    fn phase_examples() {
        let f = frame_from(&[(0.0, 1.0), (-1.0, 0.0), (1.0, 1.0), (0.0, 0.0), (-1.0, -0.0), (2.0, 0.0)], 3, 2);
        let (p, q) = phase(&f);
        assert!((p[(0, 0)] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(p[(0, 1)], PI);
        assert!((p[(1, 0)] - FRAC_PI_4).abs() < 1e-15);
        assert_eq!(p[(1, 1)], 0.0);
        assert_eq!(p[(2, 0)], PI, "negative zero imaginary part stays on the principal branch");
        assert_eq!(q.zero_magnitude, vec![(1, 1)]);
    }

    #[test]
    fn amplitude_squares_match_components() {
        let f = frame_from(&[(1.5, -2.0), (0.1, 0.2), (-3.0, 0.5), (7.0, -7.0)], 2, 2);
        let a = amplitude(&f);
        for (x, z) in a.iter().zip(f.data().iter()) {
            assert!((x * x - (z.re * z.re + z.im * z.im)).abs() < 1e-12);
        }
    }

    #[test]
    fn unwrap_removes_jumps() {
        let mut v = vec![3.0, -3.0, 3.1];
        unwrap_phase(&mut v);
        assert!((v[1] - (-3.0 + 2.0 * PI)).abs() < 1e-12);
        assert!((v[2] - 3.1).abs() < 1e-12);
    }

    #[test]
    fn sanitize_errors() {
        let p = DMatrix::zeros(4, 3);
        assert!(sanitize_phase(&p, &[1], SlopeFit::LeastSquares).is_err());
        assert!(sanitize_phase(&p, &[1, 3, 2, 4], SlopeFit::LeastSquares).is_err());
        assert!(sanitize_phase(&p, &[1, 2, 3], SlopeFit::LeastSquares).is_err());
        assert_eq!(sanitize_phase(&p, &[1, 2], SlopeFit::LeastSquares).unwrap(), p);
    }

    #[test]
    fn affine_ramp_removed_by_both_fits() {
        let k = INTEL5300_SUBCARRIERS;
        let p = DMatrix::from_fn(60, 4, |i, j| {
            let raw = 0.01 * k[i % 30] as f64 * (1.0 + j as f64) + 0.3;
            // wrap to the principal branch to exercise unwrapping
            (raw + PI).rem_euclid(2.0 * PI) - PI
        });
        for fit in [SlopeFit::LeastSquares, SlopeFit::EndPoints] {
            let out = sanitize_phase(&p, &k, fit).unwrap();
            assert!(out.amax() < 1e-9, "{fit:?}: {}", out.amax());
        }
    }

    #[test]
    fn csif_header_layout() {
        let f = frame_from(&[(1.0, 2.0), (3.0, 4.0)], 1, 2);
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(&buf[0..4], b"CSIF");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 1000.0);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 2.0);
        assert_eq!(buf.len(), 24 + 2 * 16);
    }

    #[test]
    fn csif_errors() {
        let f = frame_from(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)], 2, 2);
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_frame(&bad_magic[..], None), Err(Error::Format(_))));
        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(matches!(read_frame(&bad_version[..], None), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 8];
        assert!(matches!(read_frame(short, None), Err(Error::Corrupt(_))));
        assert!(matches!(read_frame(short, Some(short.len() as u64)), Err(Error::Corrupt(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_frame(&long[..], None), Err(Error::Corrupt(_))));
        let mut nan = buf.clone();
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_frame(&nan[..], None), Err(Error::Validation(_))));
        assert_eq!(read_frame(&buf[..], Some(buf.len() as u64)).unwrap(), f);
    }

    fn ls_slope(y: &[f64], k: &[f64]) -> f64 {
        let n = y.len() as f64;
        let (mk, my) = (k.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let num: f64 = k.iter().zip(y).map(|(a, b)| (a - mk) * (b - my)).sum();
        let den: f64 = k.iter().map(|a| (a - mk).powi(2)).sum();
        num / den
    }

    #[test]
    fn bump_survives_sanitization() {
        let k = INTEL5300_SUBCARRIERS;
        let kf: Vec<f64> = k.iter().map(|&v| v as f64).collect();
        let bump_at = 11;
        let p = DMatrix::from_fn(30, 1, |i, _| 0.01 * kf[i] + 0.3 + if i == bump_at { 0.2 } else { 0.0 });
        let out = sanitize_phase(&p, &k, SlopeFit::LeastSquares).unwrap();
        let col: Vec<f64> = out.column(0).iter().copied().collect();
        assert!(ls_slope(&col, &kf).abs() < 1e-9);
        assert!(col.iter().sum::<f64>().abs() < 1e-9);
        // Oracle: the output equals the bump minus its own least-squares line.
        let bump: Vec<f64> = (0..30).map(|i| if i == bump_at { 0.2 } else { 0.0 }).collect();
        let a = ls_slope(&bump, &kf);
        let b = bump.iter().zip(&kf).map(|(y, x)| y - a * x).sum::<f64>() / 30.0;
        for i in 0..30 {
            assert!((col[i] - (bump[i] - a * kf[i] - b)).abs() < 1e-12);
        }
        let others = col.iter().enumerate().filter(|(i, _)| *i != bump_at).map(|(_, v)| v.abs()).fold(0.0, f64::max);
        assert!(col[bump_at] > 0.18 && col[bump_at] - others > 0.15);
    }

    #[test]
    fn end_point_fit_uses_extremes() {
        let k = [0, 1, 2, 3];
        let p = DMatrix::from_column_slice(4, 1, &[0.0, 0.5, 0.5, 0.3]);
        let out = sanitize_phase(&p, &k, SlopeFit::EndPoints).unwrap();
        assert!((out[(0, 0)] - out[(3, 0)]).abs() < 1e-12);
        assert!(out.sum().abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn wrapped(v: f64) -> f64 {
            (v + PI).rem_euclid(2.0 * PI) - PI
        }

        proptest! {
            #[test]
            fn sanitize_zero_slope_mean_and_idempotent(
                slope in -0.2f64..0.2,
                offset in -3.0f64..3.0,
                noise in proptest::collection::vec(-0.4f64..0.4, 60),
            ) {
                let k = INTEL5300_SUBCARRIERS;
                let kf: Vec<f64> = k.iter().map(|&v| v as f64).collect();
                let p = DMatrix::from_fn(30, 2, |i, j| wrapped(slope * kf[i] + offset + noise[i + 30 * j]));
                let once = sanitize_phase(&p, &k, SlopeFit::LeastSquares).unwrap();
                for j in 0..2 {
                    let col: Vec<f64> = once.column(j).iter().copied().collect();
                    prop_assert!(ls_slope(&col, &kf).abs() < 1e-9);
                    prop_assert!(col.iter().sum::<f64>().abs() / 30.0 < 1e-9);
                }
                let twice = sanitize_phase(&once, &k, SlopeFit::LeastSquares).unwrap();
                prop_assert!((twice - &once).amax() < 1e-9);
            }

            #[test]
            fn csif_round_trip_is_bit_exact(
                n_tx in 1u16..3, n_rx in 1u16..3, n_sc in 1u16..4, t in 2usize..6,
                seed in any::<u64>(),
            ) {
                let n = (n_tx * n_rx * n_sc) as usize;
                let mut state = seed;
                let data = DMatrix::from_fn(n, t, |_, _| {
                    state = crate::rng::splitmix64(state);
                    let re = f64::from_bits(state >> 2) * if state & 1 == 0 { 1.0 } else { -1.0 };
                    Complex64::new(re, (state >> 11) as f64 * -1e-9)
                });
                let f = CsiFrame::new(n_tx, n_rx, n_sc, 123.5, data).unwrap();
                let mut buf = Vec::new();
                write_frame(&mut buf, &f).unwrap();
                let back = read_frame(&buf[..], Some(buf.len() as u64)).unwrap();
                let mut again = Vec::new();
                write_frame(&mut again, &back).unwrap();
                prop_assert_eq!(&back, &f);
                prop_assert_eq!(buf, again);
            }
        }
    }
}
