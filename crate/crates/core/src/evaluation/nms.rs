use ndarray::Array2;

/// Separable `[1, 2, 1] / 4` smoothing with edge replication.
fn triangle_smooth(map: &Array2<f32>) -> Array2<f64> {
    let (h, w) = map.dim();
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        map[[y, x]] as f64
    };
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y, x - 1) + 2.0 * at(y, x) + at(y, x + 1)) / 4.0
    });
    let hat = |y: isize, x: usize| -> f64 { horiz[[y.clamp(0, h as isize - 1) as usize, x]] };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let yi = y as isize;
        (hat(yi - 1, x) + 2.0 * hat(yi, x) + hat(yi + 1, x)) / 4.0
    })
}

/// Unit vector `(dy, dx)` across the ridge at `(y, x)`: the eigenvector of
/// the smoothed map's Hessian with the smallest eigenvalue.
fn ridge_normal(s: &Array2<f64>, y: usize, x: usize) -> (f64, f64) {
    let (h, w) = s.dim();
    let at = |yy: isize, xx: isize| -> f64 {
        s[[yy.clamp(0, h as isize - 1) as usize, xx.clamp(0, w as isize - 1) as usize]]
    };
    let (yi, xi) = (y as isize, x as isize);
    let c = at(yi, xi);
    let sxx = at(yi, xi + 1) - 2.0 * c + at(yi, xi - 1);
    let syy = at(yi + 1, xi) - 2.0 * c + at(yi - 1, xi);
    let sxy = (at(yi + 1, xi + 1) - at(yi + 1, xi - 1) - at(yi - 1, xi + 1) + at(yi - 1, xi - 1)) / 4.0;

    if sxy.abs() < 1e-12 {
        return if sxx <= syy { (0.0, 1.0) } else { (1.0, 0.0) };
    }
    let half = (sxx - syy) / 2.0;
    let lambda = (sxx + syy) / 2.0 - (half * half + sxy * sxy).sqrt();
    // Two algebraically equivalent eigenvectors; take the better-conditioned.
    let (vx, vy) = if (lambda - syy).abs() >= (lambda - sxx).abs() {
        (lambda - syy, sxy)
    } else {
        (sxy, lambda - sxx)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    (vy / norm, vx / norm)
}

fn bilinear(map: &Array2<f32>, y: f64, x: f64) -> f64 {
    let (h, w) = map.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| map[[yy, xx]] as f64;
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// Zhang–Suen thinning of a binary support, in place.
fn zhang_suen(support: &mut Array2<bool>) {
    let (h, w) = support.dim();
    let get = |s: &Array2<bool>, y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && s[[y as usize, x as usize]]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !support[[y, x]] {
                        continue;
                    }
                    let (yi, xi) = (y as isize, x as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        get(support, yi - 1, xi),
                        get(support, yi - 1, xi + 1),
                        get(support, yi, xi + 1),
                        get(support, yi + 1, xi + 1),
                        get(support, yi + 1, xi),
                        get(support, yi + 1, xi - 1),
                        get(support, yi, xi - 1),
                        get(support, yi - 1, xi - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if !(2..=6).contains(&b) || a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                support[[y, x]] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Non-maximum suppression across the local ridge direction followed by
/// thinning of the surviving support. Retained pixels keep their value.
pub fn nms_thin(prob_map: &Array2<f32>) -> Array2<f32> {
    let (h, w) = prob_map.dim();
    if h == 0 || w == 0 {
        return prob_map.clone();
    }
    let smooth = triangle_smooth(prob_map);
    let mut support = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let v = prob_map[[y, x]] as f64;
            if v <= 0.0 {
                continue;
            }
            let (dy, dx) = ridge_normal(&smooth, y, x);
            let (yf, xf) = (y as f64, x as f64);
            let a = bilinear(prob_map, yf + dy, xf + dx);
            let b = bilinear(prob_map, yf - dy, xf - dx);
            support[[y, x]] = !(v * 1.01 < a || v * 1.01 < b);
        }
    }
    zhang_suen(&mut support);
    Array2::from_shape_fn((h, w), |(y, x)| if support[[y, x]] { prob_map[[y, x]] } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_is_fixed() {
        let z = Array2::<f32>::zeros((9, 13));
        assert_eq!(nms_thin(&z), z);
    }

    #[test]
    fn thin_lines_are_fixed() {
        let mut m = Array2::<f32>::zeros((24, 24));
        for x in 2..22 {
            m[[5, x]] = 0.8;
        }
        for y in 8..20 {
            m[[y, 12]] = 0.6;
        }
        for k in 0..8 {
            m[[10 + k, 2 + k]] = 1.0;
        }
        assert_eq!(nms_thin(&m), m);
    }

    #[test]
    fn soft_ridge_keeps_crest() {
        let mut m = Array2::<f32>::zeros((16, 20));
        for x in 0..20 {
            m[[7, x]] = 0.4;
            m[[8, x]] = 0.9;
            m[[9, x]] = 0.4;
        }
        let out = nms_thin(&m);
        for x in 0..20 {
            assert_eq!(out[[8, x]], 0.9);
            assert_eq!(out[[7, x]], 0.0);
            assert_eq!(out[[9, x]], 0.0);
        }
    }
}
