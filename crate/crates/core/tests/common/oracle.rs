//! Reference implementations written from the defining formulas.

use fewshot_gan::tensor::Array;

// sRGB (D65) to CIELAB, written out from the defining formulas.
pub fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        let c = (c + 1.0) / 2.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let [r, g, b] = rgb.map(lin);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d.powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn poly_kernel(x: &[f32], y: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

pub fn kid_brute_force(a: &Array<f32>, b: &Array<f32>) -> f64 {
    let f = a.last_dim();
    let rows = |x: &Array<f32>| x.data().chunks(f).map(<[f32]>::to_vec).collect::<Vec<_>>();
    let (xa, xb) = (rows(a), rows(b));
    let (m, n) = (xa.len() as f64, xb.len() as f64);
    let mut kxx = 0.0;
    for (i, p) in xa.iter().enumerate() {
        for (j, q) in xa.iter().enumerate() {
            if i != j {
                kxx += poly_kernel(p, q);
            }
        }
    }
    let mut kyy = 0.0;
    for (i, p) in xb.iter().enumerate() {
        for (j, q) in xb.iter().enumerate() {
            if i != j {
                kyy += poly_kernel(p, q);
            }
        }
    }
    let mut kxy = 0.0;
    for p in &xa {
        for q in &xb {
            kxy += poly_kernel(p, q);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}
