use casa_core::analysis::{
    correlation_matrix, correlation_report, cosine_similarity, gaussian_kde, linspace,
    loglog_slope, matrix_metrics, scott_bandwidth, ssim_global, ssim_matrix, trapezoid,
};
use casa_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn pearson_oracle(x: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let t = x.len() as f64;
    let mi = x.iter().map(|r| r[i]).sum::<f64>() / t;
    let mj = x.iter().map(|r| r[j]).sum::<f64>() / t;
    let cov: f64 = x.iter().map(|r| (r[i] - mi) * (r[j] - mj)).sum();
    let si: f64 = x.iter().map(|r| (r[i] - mi).powi(2)).sum::<f64>().sqrt();
    let sj: f64 = x.iter().map(|r| (r[j] - mj).powi(2)).sum::<f64>().sqrt();
    cov / (si * sj)
}

#[test]
fn pearson_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let t = rng.random_range(2..9);
        let n = rng.random_range(1..6);
        let x = random(t, n, &mut rng);
        let c = correlation_matrix(&tensor(&x)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j {
                    1.0
                } else {
                    pearson_oracle(&x, i, j)
                };
                assert!((c.matrix.at(i, j) - want).abs() < 1e-12);
                assert_eq!(c.matrix.at(i, j), c.matrix.at(j, i));
                assert!(c.matrix.at(i, j).abs() <= 1.0 + 1e-12);
            }
        }
        assert!(c.degenerate.iter().all(|d| !d));
    }
}

#[test]
fn correlation_needs_two_rows() {
    let r = correlation_matrix(&Tensor::zeros([1, 3]));
    assert!(matches!(r, Err(Error::InsufficientData(_))));
}

#[test]
fn matrix_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..7);
        let a = random(n, n, &mut rng);
        let b = random(n, n, &mut rng);
        let (mut sq, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                sq += (a[i][j] - b[i][j]).powi(2);
                dot += a[i][j] * b[i][j];
                na += a[i][j] * a[i][j];
                nb += b[i][j] * b[i][j];
            }
        }
        let m = matrix_metrics(&tensor(&a), &tensor(&b)).unwrap();
        assert!((m.mse - sq / (n * n) as f64).abs() < 1e-12);
        assert!((m.cosine - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
        let same = matrix_metrics(&tensor(&a), &tensor(&a)).unwrap();
        assert_eq!(same.mse, 0.0);
        assert!((same.cosine - 1.0).abs() < 1e-15);
    }
}

#[test]
fn ssim_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..7);
        let a = tensor(&random(n, n, &mut rng));
        let b = tensor(&random(n, n, &mut rng));
        assert_eq!(ssim_matrix(&a, &a).unwrap(), 1.0);
        let ab = ssim_matrix(&a, &b).unwrap();
        assert_eq!(ab, ssim_matrix(&b, &a).unwrap());
        assert!((-1.0..=1.0).contains(&ab));
    }
    let err = ssim_global(&Tensor::zeros([2, 2]), &Tensor::zeros([3, 3]), 2.0);
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn ssim_closed_form() {
    let a = Tensor::new([2, 2], vec![1.0, 0.5, 0.5, 1.0]).unwrap();
    let b = Tensor::new([2, 2], vec![1.0, -0.5, -0.5, 1.0]).unwrap();
    // means 0.75 / 0.25, variances 0.0625 / 0.5625, covariance 0.1875
    let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
    let want =
        (2.0 * 0.75 * 0.25 + c1) * (2.0 * 0.1875 + c2) / ((0.5625 + 0.0625 + c1) * (0.625 + c2));
    assert!((ssim_matrix(&a, &b).unwrap() - want).abs() < 1e-14);
}

#[test]
fn kde_mass_symmetry_and_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(1..40);
        let samples: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = scott_bandwidth(&samples);
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 6.0 * h;
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 6.0 * h;
        let grid = linspace(lo, hi, 4001);
        let f = gaussian_kde(&samples, h, &grid).unwrap();
        assert!(f.iter().all(|&v| v >= 0.0));
        assert!((trapezoid(&grid, &f) - 1.0).abs() < 1e-3);
    }
    let sym = [-0.7, -0.2, 0.2, 0.7];
    let grid = linspace(-2.0, 2.0, 81);
    let f = gaussian_kde(&sym, 0.3, &grid).unwrap();
    for i in 0..grid.len() {
        assert!((f[i] - f[grid.len() - 1 - i]).abs() < 1e-12);
    }
    assert!(gaussian_kde(&sym, 0.0, &grid).is_err());
}

#[test]
fn scott_rule() {
    let s = [1.0, 2.0, 3.0, 4.0, 5.0];
    let sd = 2.5f64.sqrt();
    assert!((scott_bandwidth(&s) - 5f64.powf(-0.2) * sd).abs() < 1e-15);
    assert!(scott_bandwidth(&[0.4, 0.4]) > 0.0);
}

#[test]
fn cosine_rejects_zero_norm() {
    assert_eq!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(Error::ZeroNorm)
    );
}

#[test]
fn report_self_row_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = tensor(&random(50, 4, &mut rng));
    let copy = truth.clone();
    let other = tensor(&random(50, 4, &mut rng));
    let report = correlation_report(&truth, &[("copy", &copy), ("other", &other)]).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.grid.len(), 512);
    for row in &report.rows[..2] {
        assert_eq!(row.mse, 0.0);
        assert!((row.cosine.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(row.ssim, 1.0);
        assert_eq!(row.pdf_mse, 0.0);
    }
    assert!(report.rows[2].mse > 0.0);
}

#[test]
fn slope_requires_positive_distinct_points() {
    assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    assert!(loglog_slope(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    let s = loglog_slope(&[1.0, 2.0, 4.0, 8.0], &[5.0, 10.0, 20.0, 40.0]).unwrap();
    assert!((s - 1.0).abs() < 1e-12);
}
