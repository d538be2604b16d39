//! Euclidean projections onto the per-market feasible boxes.

/// Projects `(y, eta)` onto `{0 <= y_j <= eta b_j, 0 <= eta <= 1}` in place.
///
/// For fixed `eta` the closest `y` is the clamp of `y` to `[0, eta b]`, so the
/// problem reduces to a convex piecewise quadratic in `eta` whose derivative
/// `eta - eta0 - sum_{y0_j > eta b_j} b_j (y0_j - eta b_j)` is increasing.
/// The root is found exactly by scanning the sorted breakpoints `y0_j / b_j`.
pub(crate) fn project_tender_activation(y: &mut [f64], eta: &mut f64, bounds: &[f64]) {
    let eta0 = *eta;
    for v in y.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    // derivative / 2 at a given eta
    let slope = |e: f64| -> f64 {
        let mut s = e - eta0;
        for (v, b) in y.iter().zip(bounds) {
            let over = v - e * b;
            if over > 0.0 {
                s -= b * over;
            }
        }
        s
    };

    let new_eta = if slope(0.0) >= 0.0 {
        0.0
    } else if slope(1.0) <= 0.0 {
        1.0
    } else {
        // Breakpoints inside (0, 1), ascending. Between consecutive
        // breakpoints the active set is fixed and the root is linear.
        let mut breaks: Vec<f64> = y
            .iter()
            .zip(bounds)
            .map(|(v, b)| v / b)
            .filter(|r| *r > 0.0 && *r < 1.0)
            .collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.push(1.0);
        let mut lo = 0.0;
        let mut root = None;
        for &hi in &breaks {
            if slope(hi) >= 0.0 {
                let mid = 0.5 * (lo + hi);
                let (mut num, mut den) = (eta0, 1.0);
                for (v, b) in y.iter().zip(bounds) {
                    if v - mid * b > 0.0 {
                        num += b * v;
                        den += b * b;
                    }
                }
                root = Some((num / den).clamp(lo, hi));
                break;
            }
            lo = hi;
        }
        root.unwrap_or(1.0)
    };

    *eta = new_eta;
    for (v, b) in y.iter_mut().zip(bounds) {
        let cap = new_eta * b;
        if *v > cap {
            *v = cap;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist2(y: &[f64], e: f64, y0: &[f64], e0: f64) -> f64 {
        y.iter().zip(y0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + (e - e0).powi(2)
    }

    #[test]
    fn feasible_points_are_fixed() {
        let b = [2.0, 4.0];
        let mut y = [0.5, 1.0];
        let mut e = 0.5;
        project_tender_activation(&mut y, &mut e, &b);
        assert_eq!((y, e), ([0.5, 1.0], 0.5));
    }

    #[test]
    fn small_tender_lifts_activation() {
        // y0 = (1, 0), eta0 = 0, b = (1, 1): minimise (y-1)^2 + eta^2 with
        // y = eta gives eta = 1/2.
        let mut y = [1.0, 0.0];
        let mut e = 0.0;
        project_tender_activation(&mut y, &mut e, &[1.0, 1.0]);
        assert!((e - 0.5).abs() < 1e-15 && (y[0] - 0.5).abs() < 1e-15);
    }

    proptest! {
        // The projection is feasible and no feasible sample is closer.
        #[test]
        fn projection_is_nearest(
            y0 in proptest::collection::vec(-3.0f64..5.0, 1..5),
            e0 in -1.0f64..2.0,
            seed in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let b: Vec<f64> = (0..y0.len()).map(|j| 0.5 + seed[j % 6] * 3.0).collect();
            let mut y = y0.clone();
            let mut e = e0;
            project_tender_activation(&mut y, &mut e, &b);
            prop_assert!((0.0..=1.0).contains(&e));
            for (v, bj) in y.iter().zip(&b) {
                prop_assert!(*v >= 0.0 && *v <= e * bj + 1e-12);
            }
            let best = dist2(&y, e, &y0, e0);
            for k in 0..=200 {
                let et = k as f64 / 200.0;
                let yt: Vec<f64> = y0.iter().zip(&b).map(|(v, bj)| v.clamp(0.0, et * bj)).collect();
                prop_assert!(dist2(&yt, et, &y0, e0) >= best - 1e-12);
            }
        }
    }
}
