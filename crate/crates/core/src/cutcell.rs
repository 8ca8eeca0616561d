//! Exact integration over the sub-region of a triangle where the linear
//! interpolant of a nodal field is negative.
//!
//! All clipping happens in barycentric coordinates: a P1 field is linear
//! there, so the negative set within one triangle is a convex polygon with
//! at most four corners, and any product of two P1 fields is a quadratic
//! polynomial integrated exactly by the three-edge-midpoint rule on each
//! sub-triangle of a fan.

/// Nodal values exactly at zero are pushed to the positive side by this
/// amount, keeping cut topology deterministic.
pub const TIE_EPS: f64 = 1e-12;

/// Apply the tie-breaking perturbation to a triple of nodal values.
pub fn tie_break(f: [f64; 3]) -> [f64; 3] {
    f.map(|v| if v == 0.0 { TIE_EPS } else { v })
}

/// Clipping result for one triangle: the polygon `{f<0} ∩ T` (barycentric,
/// counterclockwise) and the interface segment when the triangle is cut.
#[derive(Debug, Clone)]
pub struct CutTriangle {
    pub neg_poly: Poly,
    pub segment: Option<[[f64; 3]; 2]>,
}

/// Convex polygon in barycentric coordinates, at most 4 corners here.
#[derive(Debug, Clone, Default)]
pub struct Poly {
    pub pts: Vec<[f64; 3]>,
}

impl Poly {
    pub fn is_empty(&self) -> bool {
        self.pts.len() < 3
    }

    pub fn full_triangle() -> Poly {
        Poly {
            pts: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [
        a[0] + s * (b[0] - a[0]),
        a[1] + s * (b[1] - a[1]),
        a[2] + s * (b[2] - a[2]),
    ]
}

/// Value of the linear interpolant with nodal values `f` at barycentric `b`.
pub fn lin_value(f: [f64; 3], b: [f64; 3]) -> f64 {
    f[0] * b[0] + f[1] * b[1] + f[2] * b[2]
}

/// Clips the reference triangle against `{f < 0}` after tie-breaking.
pub fn cut_triangle(f_raw: [f64; 3]) -> CutTriangle {
    let f = tie_break(f_raw);
    let neg = f.map(|v| v < 0.0);
    match (neg[0], neg[1], neg[2]) {
        (true, true, true) => CutTriangle {
            neg_poly: Poly::full_triangle(),
            segment: None,
        },
        (false, false, false) => CutTriangle {
            neg_poly: Poly::default(),
            segment: None,
        },
        _ => {
            let corners = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            let mut poly = Vec::with_capacity(4);
            let mut crossings = Vec::with_capacity(2);
            for i in 0..3 {
                let j = (i + 1) % 3;
                if neg[i] {
                    poly.push(corners[i]);
                }
                if neg[i] != neg[j] {
                    let s = f[i] / (f[i] - f[j]);
                    let p = lerp(corners[i], corners[j], s);
                    poly.push(p);
                    crossings.push(p);
                }
            }
            debug_assert_eq!(crossings.len(), 2);
            CutTriangle {
                neg_poly: Poly { pts: poly },
                segment: Some([crossings[0], crossings[1]]),
            }
        }
    }
}

/// One Sutherland–Hodgman pass: clips a barycentric polygon against the
/// negative set of the linear function with nodal values `f` (tie-broken).
pub fn clip_poly_negative(poly: &Poly, f_raw: [f64; 3]) -> Poly {
    let f = tie_break(f_raw);
    let n = poly.pts.len();
    if n < 3 {
        return Poly::default();
    }
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let a = poly.pts[i];
        let b = poly.pts[(i + 1) % n];
        let fa = lin_value(f, a);
        let fb = lin_value(f, b);
        if fa < 0.0 {
            out.push(a);
        }
        if (fa < 0.0) != (fb < 0.0) {
            out.push(lerp(a, b, fa / (fa - fb)));
        }
    }
    Poly { pts: out }
}

/// Maps barycentric coordinates to cartesian given the triangle corners.
pub fn to_cart(tri: &[[f64; 2]; 3], b: [f64; 3]) -> [f64; 2] {
    [
        b[0] * tri[0][0] + b[1] * tri[1][0] + b[2] * tri[2][0],
        b[0] * tri[0][1] + b[1] * tri[1][1] + b[2] * tri[2][1],
    ]
}

/// Cartesian area of a barycentric polygon inside the given triangle.
pub fn poly_area(tri: &[[f64; 2]; 3], poly: &Poly) -> f64 {
    let n = poly.pts.len();
    if n < 3 {
        return 0.0;
    }
    let pts: Vec<[f64; 2]> = poly.pts.iter().map(|&b| to_cart(tri, b)).collect();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
    }
    0.5 * acc
}

/// Integrates `g` over a barycentric polygon, exactly for `g` quadratic in
/// the barycentric coordinates. Fan triangulation plus the 3-midpoint rule.
pub fn integrate_poly(
    tri: &[[f64; 2]; 3],
    poly: &Poly,
    mut g: impl FnMut([f64; 3]) -> f64,
) -> f64 {
    let n = poly.pts.len();
    if n < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    let p0 = poly.pts[0];
    for i in 1..(n - 1) {
        let p1 = poly.pts[i];
        let p2 = poly.pts[i + 1];
        let sub = Poly {
            pts: vec![p0, p1, p2],
        };
        let area = poly_area(tri, &sub);
        let m01 = lerp(p0, p1, 0.5);
        let m12 = lerp(p1, p2, 0.5);
        let m20 = lerp(p2, p0, 0.5);
        total += area / 3.0 * (g(m01) + g(m12) + g(m20));
    }
    total
}

/// Integrates `g` over a whole triangle (3-midpoint rule; exact for
/// quadratics in the barycentric coordinates).
pub fn integrate_triangle(area: f64, mut g: impl FnMut([f64; 3]) -> f64) -> f64 {
    let m01 = [0.5, 0.5, 0.0];
    let m12 = [0.0, 0.5, 0.5];
    let m20 = [0.5, 0.0, 0.5];
    area / 3.0 * (g(m01) + g(m12) + g(m20))
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

    #[test]
    fn fully_negative_and_positive() {
        let cut = cut_triangle([-1.0, -1.0, -1.0]);
        assert!((poly_area(&REF, &cut.neg_poly) - 0.5).abs() < 1e-14);
        assert!(cut.segment.is_none());

        let cut = cut_triangle([1.0, 1.0, 1.0]);
        assert!(cut.neg_poly.is_empty());
        assert!(cut.segment.is_none());
    }

    #[test]
    fn half_cut_area() {
        // f = x - 0.5 on the reference triangle: negative part is the
        // trapezoid x < 0.5 with area 0.5 - 0.125 = 0.375.
        let cut = cut_triangle([-0.5, 0.5, -0.5]);
        assert!((poly_area(&REF, &cut.neg_poly) - 0.375).abs() < 1e-14);
        let seg = cut.segment.unwrap();
        let a = to_cart(&REF, seg[0]);
        let b = to_cart(&REF, seg[1]);
        assert!((a[0] - 0.5).abs() < 1e-14 && (b[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn complement_areas_sum_to_triangle() {
        for f in [
            [-0.3, 0.7, 0.2],
            [0.3, -0.7, -0.2],
            [1.0, -1.0, 2.0],
            [-1e-9, 1.0, 1.0],
            [0.0, -1.0, 1.0],
        ] {
            let neg = cut_triangle(f);
            let pos = cut_triangle([-f[0], -f[1], -f[2]]);
            let total = poly_area(&REF, &neg.neg_poly) + poly_area(&REF, &pos.neg_poly);
            assert!(
                (total - 0.5).abs() < 1e-9,
                "f={f:?} total={total}"
            );
        }
    }

    #[test]
    fn quadratic_integration_exact() {
        // ∫_T λ0² over the reference triangle = area/6; ∫ λ0·λ1 = area/12.
        let v = integrate_triangle(0.5, |b| b[0] * b[0]);
        assert!((v - 0.5 / 6.0).abs() < 1e-15);
        let v = integrate_triangle(0.5, |b| b[0] * b[1]);
        assert!((v - 0.5 / 12.0).abs() < 1e-15);
        // Same results via the polygon path with the full triangle.
        let full = cut_triangle([-1.0, -1.0, -1.0]).neg_poly;
        let v = integrate_poly(&REF, &full, |b| b[0] * b[0]);
        assert!((v - 0.5 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn clip_poly_matches_direct_cut() {
        let f = [-0.4, 0.8, 0.1];
        let direct = cut_triangle(f);
        let clipped = clip_poly_negative(&Poly::full_triangle(), f);
        assert!(
            (poly_area(&REF, &direct.neg_poly) - poly_area(&REF, &clipped)).abs() < 1e-14
        );
    }

    #[test]
    fn double_clip_intersection_area() {
        // {x < 0.5} ∩ {y < x}: region below the diagonal within the strip.
        let fx = [-0.5, 0.5, -0.5]; // x - 0.5
        let fy = [0.0, -1.0, 1.0]; // y - x
        let first = cut_triangle(fx).neg_poly;
        let both = clip_poly_negative(&first, fy);
        // Analytic area of {0<y<x<0.5} plus nothing else inside T.
        assert!((poly_area(&REF, &both) - 0.125).abs() < 1e-12);
    }
}
