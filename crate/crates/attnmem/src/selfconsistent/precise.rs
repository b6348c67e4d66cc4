//! Double-double evaluation of the fixed-point map.
//!
//! At small `γ` the `m` update divides by a near-cancelling difference and
//! `I + Λ₀Δ₀` is poorly conditioned, so the map evaluated in `f64` has a
//! rounding floor above `10⁻¹²`. Evaluating in double-double removes it.

use twofloat::TwoFloat;

use super::{Core, NoiseSystemParams};

type Dd = TwoFloat;
type M6 = [[Dd; 6]; 6];
type V6 = [Dd; 6];

fn dd(x: f64) -> Dd {
    Dd::from(x)
}

fn zero() -> M6 {
    [[dd(0.0); 6]; 6]
}

fn to_f64(x: Dd) -> f64 {
    x.hi() + x.lo()
}

fn matmul(a: &M6, b: &M6) -> M6 {
    let mut out = zero();
    for i in 0..6 {
        for j in 0..6 {
            let mut s = dd(0.0);
            for k in 0..6 {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
fn inverse(a: &M6) -> Option<M6> {
    let mut a = *a;
    let mut inv = zero();
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = dd(1.0);
    }
    for col in 0..6 {
        let pivot = (col..6).max_by(|&i, &j| to_f64(a[i][col]).abs().total_cmp(&to_f64(a[j][col]).abs()))?;
        if to_f64(a[pivot][col]) == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..6 {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..6 {
            if i == col {
                continue;
            }
            let f = a[i][col];
            if to_f64(f) == 0.0 {
                continue;
            }
            for j in 0..6 {
                let (acj, icj) = (a[col][j], inv[col][j]);
                a[i][j] -= f * acj;
                inv[i][j] -= f * icj;
            }
        }
    }
    Some(inv)
}

fn quad(t: &M6, x: &V6, y: &V6) -> Dd {
    let mut s = dd(0.0);
    for i in 0..6 {
        for j in 0..6 {
            s += x[i] * t[i][j] * y[j];
        }
    }
    s
}

/// Right-hand sides of the core equations, or `None` if `I + Λ₀Δ₀` is singular.
pub(super) fn map(params: &NoiseSystemParams, x: &Core) -> Option<Core> {
    let (c, a1, nu, gamma) = (dd(params.c), dd(params.a1), dd(params.nu), dd(params.gamma));
    let [m, d1, d2, d3, d4] = x.map(dd);
    let r = a1 / c;
    let a1sq_c1_c2 = a1 * a1 * (c + 1.0) / (c * c);

    let mut l0 = zero();
    l0[0][0] = a1sq_c1_c2;
    l0[0][1] = r;
    l0[0][2] = r;
    l0[0][4] = a1;
    l0[1][1] = dd(1.0);
    l0[1][2] = dd(1.0);
    l0[2][2] = dd(1.0);
    for i in 0..6 {
        for j in 0..i {
            l0[i][j] = l0[j][i];
        }
    }

    let g = (1.0 - gamma * m / c) / c;
    let blocks = [[m / c, d1, d2], [d1, d3, g], [d2, g, d4]];
    let mut d0 = zero();
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, &v) in row.iter().enumerate() {
            d0[2 * bi][2 * bj] = v;
            d0[2 * bi][2 * bj + 1] = a1 * v;
            d0[2 * bi + 1][2 * bj] = a1 * v;
            d0[2 * bi + 1][2 * bj + 1] = nu * v;
        }
    }

    let mut lhs = matmul(&l0, &d0);
    for (i, row) in lhs.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let t = matmul(&d0, &inverse(&lhs)?);
    let mut ts = zero();
    for i in 0..6 {
        for j in 0..6 {
            ts[i][j] = (t[i][j] + t[j][i]) * 0.5;
        }
    }

    let z = dd(0.0);
    let one = dd(1.0);
    let v = [a1sq_c1_c2, r, r, z, z, one];
    let v1 = [z, one, z, z, z, z];
    let v2 = [one, z, z, z, z, z];
    let v4 = [r, one, one, z, z, z];

    let vtv = quad(&ts, &v, &v);
    let m_new = 1.0 / (gamma / c + nu / c + a1 * a1 / (c * c) - vtv);
    let cd1 = -m_new * quad(&ts, &v, &v1);
    let cd2 = quad(&ts, &v2, &v1) + cd1 * (1.0 - quad(&ts, &v2, &v));
    let cd3 = quad(&ts, &v1, &v1) + cd1 * cd1 / m_new;
    let e4 = quad(&ts, &v4, &v) - r;
    let cd4 = quad(&ts, &v4, &v4) + m_new * e4 * e4;
    Some([m_new, cd1 / c, cd2 / c, cd3 / c, cd4 / c].map(to_f64))
}
