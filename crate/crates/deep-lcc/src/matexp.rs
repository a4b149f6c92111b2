//! Dense matrix exponential via scaling and squaring with a diagonal Padé
//! approximant, following Higham's algorithm and coefficients.

use nalgebra::DMatrix;

// 1-norm thresholds below which the [m/m] Padé approximant meets double
// precision without scaling, as published.
#[allow(clippy::excessive_precision)]
const THETA_3: f64 = 1.495585217958292e-2;
#[allow(clippy::excessive_precision)]
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

fn pade_coefficients(order: usize) -> Vec<f64> {
    // b_i = (2m - i)! m! / ((2m)! (m - i)! i!)
    let m = order;
    let mut b = vec![0.0; m + 1];
    b[0] = 1.0;
    // Recurrence b_{i+1}/b_i = (m - i) / ((2m - i)(i + 1)).
    for i in 0..m {
        b[i + 1] = b[i] * (m - i) as f64 / (((2 * m - i) * (i + 1)) as f64);
    }
    // Normalize so b_m corresponds to the standard integer coefficients;
    // only ratios matter for the approximant, so this form is sufficient.
    b
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_pq(a: &DMatrix<f64>, order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = pade_coefficients(order);
    let ident = DMatrix::identity(n, n);
    let a2 = a * a;

    if order <= 9 {
        // U = A (b1 I + b3 A² + b5 A⁴ + ...), V = b0 I + b2 A² + ...
        let mut even = ident.clone() * b[0];
        let mut odd = ident.clone() * b[1];
        let mut power = ident.clone();
        let mut k = 2;
        while k <= order {
            power = &power * &a2;
            even += &power * b[k];
            if k < order {
                odd += &power * b[k + 1];
            }
            k += 2;
        }
        let u = a * odd;
        (u, even)
    } else {
        // Order 13 with the factored form that avoids A⁸ and A¹⁰.
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let u_inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
        let u = a * (&a6 * &u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
        let v_inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
        let v = &a6 * &v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
        (u, v)
    }
}

/// Matrix exponential of a square matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "expm requires a square matrix");
    let norm = one_norm(a);

    let (order, squarings) = if norm <= THETA_3 {
        (3, 0)
    } else if norm <= THETA_5 {
        (5, 0)
    } else if norm <= THETA_7 {
        (7, 0)
    } else if norm <= THETA_9 {
        (9, 0)
    } else {
        let s = ((norm / THETA_13).log2().ceil()).max(0.0) as u32;
        (13, s)
    };

    let scaled = a / 2f64.powi(squarings as i32);
    let (u, v) = pade_pq(&scaled, order);
    // r = (V - U)^{-1} (V + U)
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut r = lhs
        .lu()
        .solve(&rhs)
        .expect("Padé denominator is nonsingular for scaled input");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Exponential of the augmented matrix `[[A, B], [0, 0]] * dt`, returning
/// `(e^{A dt}, ∫₀^dt e^{A s} ds · B)` — the zero-order-hold discretization
/// of a continuous pair in one call.
pub fn expm_with_integral(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let p = b.ncols();
    assert_eq!(b.nrows(), n, "input matrix row count must match the state dimension");
    let mut aug = DMatrix::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, p)).copy_from(&(b * dt));
    let e = expm(&aug);
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = e.view((0, n), (n, p)).into_owned();
    (a_d, b_d)
}
