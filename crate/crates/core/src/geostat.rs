//! Stationary Gaussian log-conductivity fields.
//!
//! Fields are drawn by circulant embedding: the exponential covariance is
//! wrapped onto a periodic torus at least twice the grid size, diagonalised
//! with a 2D FFT, and a complex white-noise vector is coloured by the square
//! root of the eigenvalues. The real part of the transform restricted to the
//! grid is an exact sample of the stationary field whenever the embedding is
//! non-negative definite.
//!
//! Random numbers come from ChaCha8 seeded with `seed_from_u64`, which is
//! platform independent; a given `(nx, ny, dx, dy, corr_len, seed)` always
//! yields the same bytes on the same build.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Largest torus (in points) the embedding is allowed to grow to.
const MAX_EMBEDDING_POINTS: usize = 1 << 24;
/// Relative size of negative eigenvalues accepted as round-off.
const NEGATIVE_EIGEN_TOL: f64 = 1e-10;
/// Negative spectral mass that may be clipped once the torus cannot grow.
const CLIP_MASS_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GeostatError {
    #[error("correlation length must be finite and > 0 (got {0})")]
    BadCorrelationLength(f64),
    #[error("field dimensions must be >= 1 and spacings > 0")]
    BadDimensions,
    #[error("variance must be finite and >= 0 (got {0})")]
    NegativeVariance(f64),
    #[error(
        "circulant embedding is not non-negative definite on a {m1}x{m2} torus \
         (min eigenvalue {min_eig:e}, max {max_eig:e}, clipped mass fraction {neg_mass:e}); \
         the grid aspect ratio or correlation length is too extreme"
    )]
    EmbeddingFailed {
        m1: usize,
        m2: usize,
        min_eig: f64,
        max_eig: f64,
        neg_mass: f64,
    },
    #[error("field file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Zero-mean, unit-variance field on an `nx` x `ny` lattice, row-major
/// (`j * nx + i`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub corr_len: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    pub k: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramPoint {
    pub lag: f64,
    /// `None` when no pair of cells is separated by this lag.
    pub semivariance: Option<f64>,
    pub pairs: usize,
}

/// Isotropic exponential covariance with unit sill.
pub fn exponential_covariance(h: f64, corr_len: f64) -> f64 {
    (-h / corr_len).exp()
}

pub fn generate_field(
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    corr_len: f64,
    seed: u64,
) -> Result<GaussianField, GeostatError> {
    if !(corr_len.is_finite() && corr_len > 0.0) {
        return Err(GeostatError::BadCorrelationLength(corr_len));
    }
    if nx == 0 || ny == 0 || !(dx > 0.0 && dy > 0.0) {
        return Err(GeostatError::BadDimensions);
    }

    let mut m1 = (2 * nx).next_power_of_two();
    let mut m2 = (2 * ny).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let eigen = loop {
        let eigen = embedding_eigenvalues(&mut planner, m1, m2, dx, dy, corr_len);
        let max_eig = eigen.iter().cloned().fold(f64::MIN, f64::max);
        let min_eig = eigen.iter().cloned().fold(f64::MAX, f64::min);
        if min_eig >= -NEGATIVE_EIGEN_TOL * max_eig {
            break eigen;
        }
        if 4 * m1 * m2 <= MAX_EMBEDDING_POINTS {
            m1 *= 2;
            m2 *= 2;
            continue;
        }
        let pos: f64 = eigen.iter().filter(|&&l| l > 0.0).sum();
        let neg: f64 = -eigen.iter().filter(|&&l| l < 0.0).sum::<f64>();
        if neg <= CLIP_MASS_TOL * pos {
            log::warn!(
                "circulant embedding clipped {:.3e} of spectral mass on {}x{} torus",
                neg / pos,
                m1,
                m2
            );
            break eigen;
        }
        return Err(GeostatError::EmbeddingFailed {
            m1,
            m2,
            min_eig,
            max_eig,
            neg_mass: neg / pos,
        });
    };

    let total = (m1 * m2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectrum: Vec<Complex64> = eigen
        .iter()
        .map(|&lambda| {
            let scale = (lambda.max(0.0) / total).sqrt();
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    fft2(&mut planner, &mut spectrum, m1, m2);

    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        values.extend(spectrum[j * m1..j * m1 + nx].iter().map(|c| c.re));
    }
    Ok(GaussianField {
        nx,
        ny,
        dx,
        dy,
        corr_len,
        seed,
        values,
    })
}

fn embedding_eigenvalues(
    planner: &mut FftPlanner<f64>,
    m1: usize,
    m2: usize,
    dx: f64,
    dy: f64,
    corr_len: f64,
) -> Vec<f64> {
    let mut c = Vec::with_capacity(m1 * m2);
    for j in 0..m2 {
        let hy = j.min(m2 - j) as f64 * dy;
        for i in 0..m1 {
            let hx = i.min(m1 - i) as f64 * dx;
            c.push(Complex64::new(exponential_covariance(hx.hypot(hy), corr_len), 0.0));
        }
    }
    fft2(planner, &mut c, m1, m2);
    c.into_iter().map(|z| z.re).collect()
}

/// In-place forward 2D FFT of a row-major `m2` x `m1` array.
fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex64], m1: usize, m2: usize) {
    let rows = planner.plan_fft_forward(m1);
    rows.process(data);
    let cols = planner.plan_fft_forward(m2);
    let mut column = vec![Complex64::new(0.0, 0.0); m2];
    let mut scratch = vec![Complex64::new(0.0, 0.0); cols.get_inplace_scratch_len()];
    for i in 0..m1 {
        for (j, v) in column.iter_mut().enumerate() {
            *v = data[j * m1 + i];
        }
        cols.process_with_scratch(&mut column, &mut scratch);
        for (j, v) in column.iter().enumerate() {
            data[j * m1 + i] = *v;
        }
    }
}

/// `K = exp(sqrt(sigma2) * Y)` cell by cell.
pub fn scale_to_conductivity(field: &GaussianField, sigma2: f64) -> Result<ConductivityField, GeostatError> {
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(GeostatError::NegativeVariance(sigma2));
    }
    let sigma = sigma2.sqrt();
    Ok(ConductivityField {
        k: field.values.iter().map(|y| (sigma * y).exp()).collect(),
        sigma2,
    })
}

/// Method-of-moments semivariance along the grid axes.
///
/// Each lag is converted to the nearest whole-cell offset along `x` and along
/// `y`; all pairs at either offset contribute. A lag with no pairs is
/// reported with `semivariance: None`.
pub fn empirical_variogram(field: &GaussianField, lags: &[f64]) -> Vec<VariogramPoint> {
    let (nx, ny) = (field.nx, field.ny);
    let v = &field.values;
    lags.iter()
        .map(|&lag| {
            let ox = (lag / field.dx).round() as usize;
            let oy = (lag / field.dy).round() as usize;
            let mut sum = 0.0;
            let mut pairs = 0usize;
            if ox < nx {
                for j in 0..ny {
                    let row = &v[j * nx..(j + 1) * nx];
                    for i in 0..nx - ox {
                        let d = row[i + ox] - row[i];
                        sum += d * d;
                    }
                    pairs += nx - ox;
                }
            }
            if oy < ny && oy > 0 {
                for j in 0..ny - oy {
                    for i in 0..nx {
                        let d = v[(j + oy) * nx + i] - v[j * nx + i];
                        sum += d * d;
                    }
                }
                pairs += (ny - oy) * nx;
            }
            VariogramPoint {
                lag,
                semivariance: (pairs > 0).then(|| sum / (2.0 * pairs as f64)),
                pairs,
            }
        })
        .collect()
}

impl GaussianField {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample variance about the sample mean.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    /// Writes `nx ny dx dy` followed by the values, one per line.
    pub fn write_text(&self, path: &Path) -> Result<(), GeostatError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {} {:.16e} {:.16e}", self.nx, self.ny, self.dx, self.dy)?;
        for v in &self.values {
            writeln!(w, "{v:.16e}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`GaussianField::write_text`]. Correlation
    /// length and seed are not stored and come back as NaN and 0.
    pub fn read_text(path: &Path) -> Result<GaussianField, GeostatError> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| GeostatError::Format("missing header".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(GeostatError::Format(format!("bad header `{header}`")));
        }
        let bad = |s: &str| GeostatError::Format(format!("bad header value `{s}`"));
        let nx: usize = parts[0].parse().map_err(|_| bad(parts[0]))?;
        let ny: usize = parts[1].parse().map_err(|_| bad(parts[1]))?;
        let dx: f64 = parts[2].parse().map_err(|_| bad(parts[2]))?;
        let dy: f64 = parts[3].parse().map_err(|_| bad(parts[3]))?;
        let mut values = Vec::with_capacity(nx * ny);
        for (n, line) in lines.enumerate() {
            let line = line?;
            values.push(
                line.trim()
                    .parse()
                    .map_err(|_| GeostatError::Format(format!("line {}: bad value `{line}`", n + 2)))?,
            );
        }
        if values.len() != nx * ny {
            return Err(GeostatError::Format(format!(
                "expected {} values, found {}",
                nx * ny,
                values.len()
            )));
        }
        Ok(GaussianField {
            nx,
            ny,
            dx,
            dy,
            corr_len: f64::NAN,
            seed: 0,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_field(60, 30, 1.0, 1.0, 10.0, 11).unwrap();
        let b = generate_field(60, 30, 1.0, 1.0, 10.0, 11).unwrap();
        let c = generate_field(60, 30, 1.0, 1.0, 10.0, 12).unwrap();
        let bits = |f: &GaussianField| f.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_bad_correlation_length() {
        assert!(matches!(
            generate_field(4, 4, 1.0, 1.0, 0.0, 1),
            Err(GeostatError::BadCorrelationLength(_))
        ));
        assert!(generate_field(0, 4, 1.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn long_correlation_gives_near_constant_field() {
        let f = generate_field(8, 8, 1.0, 1.0, 1e6, 3).unwrap();
        let gamma = empirical_variogram(&f, &[1.0])[0].semivariance.unwrap();
        assert!(gamma < 1e-4, "semivariance {gamma}");
    }

    #[test]
    fn white_noise_limit_hits_sill_at_every_lag() {
        let mut avg = [0.0; 3];
        let seeds = 10;
        for s in 0..seeds {
            let f = generate_field(64, 64, 1.0, 1.0, 1e-6, s).unwrap();
            for (a, p) in avg.iter_mut().zip(empirical_variogram(&f, &[1.0, 2.0, 5.0])) {
                *a += p.semivariance.unwrap() / seeds as f64;
            }
        }
        for a in avg {
            assert!((a - 1.0).abs() < 0.05, "semivariance {a}");
        }
    }

    #[test]
    fn variogram_lag_zero_and_empty_bins() {
        let f = generate_field(20, 10, 1.0, 1.0, 3.0, 5).unwrap();
        let pts = empirical_variogram(&f, &[0.0, 25.0]);
        assert_eq!(pts[0].semivariance, Some(0.0));
        assert_eq!(pts[1].semivariance, None);
        assert_eq!(pts[1].pairs, 0);
    }

    #[test]
    fn variogram_reaches_sill_far_away() {
        let seeds = 10;
        let mut far = 0.0;
        for s in 0..seeds {
            let f = generate_field(300, 60, 1.0, 1.0, 10.0, s).unwrap();
            far += empirical_variogram(&f, &[50.0])[0].semivariance.unwrap() / seeds as f64;
        }
        assert!((far - 1.0).abs() <= 0.15, "sill {far}");
    }

    #[test]
    fn conductivity_scaling() {
        let f = GaussianField {
            nx: 3,
            ny: 1,
            dx: 1.0,
            dy: 1.0,
            corr_len: 1.0,
            seed: 0,
            values: vec![1.0, -0.5, 0.2],
        };
        let zero = scale_to_conductivity(&f, 0.0).unwrap();
        assert!(zero.k.iter().all(|&k| k == 1.0));
        let four = scale_to_conductivity(&f, 4.0).unwrap();
        assert!((four.k[0] - 1f64.exp().powi(2)).abs() < 1e-12);
        assert!((four.k[0] - 7.389_056_098_930_65).abs() < 1e-12);
        assert!(matches!(
            scale_to_conductivity(&f, -1.0),
            Err(GeostatError::NegativeVariance(_))
        ));
    }

    #[test]
    fn scaling_preserves_rank_order() {
        let f = generate_field(40, 20, 1.0, 1.0, 5.0, 9).unwrap();
        let order = |k: &[f64]| {
            let mut idx: Vec<usize> = (0..k.len()).collect();
            idx.sort_by(|&a, &b| k[a].total_cmp(&k[b]));
            idx
        };
        let lo = scale_to_conductivity(&f, 0.1).unwrap();
        let hi = scale_to_conductivity(&f, 5.0).unwrap();
        assert_eq!(order(&lo.k), order(&hi.k));
        assert_eq!(order(&lo.k).last(), order(&f.values).last());
    }

    #[test]
    fn text_dump_round_trip() {
        let f = generate_field(7, 5, 2.0, 0.5, 3.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.txt");
        f.write_text(&path).unwrap();
        let back = GaussianField::read_text(&path).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!((back.nx, back.ny, back.dx, back.dy), (7, 5, 2.0, 0.5));
    }
}
