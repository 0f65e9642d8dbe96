//! Real spherical-harmonic basis up to degree 3, in the ordering and sign
//! convention standard for splatting renderers.

/// Maximum supported degree.
pub const MAX_DEGREE: usize = 3;
/// Coefficient count at the maximum degree.
pub const MAX_COEFFS: usize = 16;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for a given degree.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluate the basis at a unit direction. Entries past `coeff_count(degree)`
/// are zero.
pub fn basis(degree: usize, dir: [f64; 3]) -> [f64; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut b = [0.0; MAX_COEFFS];
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = C3[0] * y * (3.0 * xx - yy);
        b[10] = C3[1] * x * y * z;
        b[11] = C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = C3[5] * z * (xx - yy);
        b[15] = C3[6] * x * (xx - 3.0 * yy);
    }
    b
}

/// Partial derivatives of each basis entry with respect to the (unnormalized
/// in the chain-rule sense) direction components. `out[k] = [db_k/dx, db_k/dy, db_k/dz]`.
pub fn basis_grad(degree: usize, dir: [f64; 3]) -> [[f64; 3]; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; MAX_COEFFS];
    if degree >= 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
        g[11] = [
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ];
        g[12] = [
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        g[13] = [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ];
        g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
        g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalize(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn degree_zero_is_constant() {
        let a = basis(0, normalize([1.0, 2.0, -0.5]));
        let b = basis(0, normalize([-3.0, 0.1, 9.0]));
        assert_eq!(a, b);
        assert!((a[0] - C0).abs() < 1e-15);
        assert!(a[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn z_band_flips_sign_with_direction() {
        let up = basis(1, [0.0, 0.0, 1.0]);
        let down = basis(1, [0.0, 0.0, -1.0]);
        assert!((up[2] + down[2]).abs() < 1e-15);
        assert!(up[2] > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dirs = [
            normalize([0.3, -0.2, 0.9]),
            normalize([-1.0, 0.5, 0.2]),
            normalize([0.0, 1.0, 0.4]),
        ];
        let h = 1e-6;
        for dir in dirs {
            let g = basis_grad(3, dir);
            for axis in 0..3 {
                let mut dp = dir;
                let mut dm = dir;
                dp[axis] += h;
                dm[axis] -= h;
                // Raw (non-renormalized) perturbation: basis_grad is the
                // Jacobian of the polynomial, the normalization chain is
                // applied by callers.
                let bp = basis(3, dp);
                let bm = basis(3, dm);
                for k in 0..MAX_COEFFS {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert!(
                        (fd - g[k][axis]).abs() < 1e-6,
                        "basis {k} axis {axis}: fd {fd} vs analytic {}",
                        g[k][axis]
                    );
                }
            }
        }
    }
}
