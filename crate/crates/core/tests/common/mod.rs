//! Test-only oracles, independent of the library's numerical routines.
#![allow(dead_code)]

/// Composite 20-point Gauss–Legendre rule with `panels` equal panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    // Nodes/weights of the 20-point rule on [-1, 1] (positive half).
    const X: [f64; 10] = [
        0.076_526_521_133_497_33,
        0.227_785_851_141_645_08,
        0.373_706_088_715_419_56,
        0.510_867_001_950_827_1,
        0.636_053_680_726_515,
        0.746_331_906_460_150_8,
        0.839_116_971_822_218_8,
        0.912_234_428_251_326,
        0.963_971_927_277_913_8,
        0.993_128_599_185_094_9,
    ];
    const W: [f64; 10] = [
        0.152_753_387_130_725_85,
        0.149_172_986_472_603_75,
        0.142_096_109_318_382_05,
        0.131_688_638_449_176_63,
        0.118_194_531_961_518_42,
        0.101_930_119_817_240_44,
        0.083_276_741_576_704_75,
        0.062_672_048_334_109_06,
        0.040_601_429_800_386_94,
        0.017_614_007_139_152_12,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let c = lo + 0.5 * h;
        let r = 0.5 * h;
        let mut s = 0.0;
        for i in 0..10 {
            s += W[i] * (f(c - r * X[i]) + f(c + r * X[i]));
        }
        total += s * r;
    }
    total
}

/// Bisection root of a monotone increasing function.
pub fn bisect<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Normal pdf written out independently of the library.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ(z) by quadrature of the density from 0.
pub fn normal_cdf_quad(z: f64) -> f64 {
    let half = gauss_legendre(normal_pdf, 0.0, z.abs(), 64);
    if z >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

/// Lanczos log-gamma (g = 7, n = 9), independent of libm.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Gamma cdf by quadrature of the density. For shapes below one the
/// substitution `t = s^(1/k)` removes the singularity at zero.
pub fn gamma_cdf_quad(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let density = |t: f64| {
        if t <= 0.0 {
            0.0
        } else {
            ((k - 1.0) * t.ln() - t - ln_gamma(k)).exp()
        }
    };
    if k >= 1.0 {
        return gauss_legendre(density, 0.0, x, 4000);
    }
    // ∫₀ᵃ t^(k-1) e^(-t) dt / Γ(k) = ∫₀^(a^k) e^(-s^(1/k)) ds / Γ(k+1)
    let a = x.min(1.0);
    let lg = ln_gamma(k + 1.0);
    let head = gauss_legendre(|s: f64| (-(s.powf(1.0 / k)) - lg).exp(), 0.0, a.powf(k), 400);
    if x > a {
        head + gauss_legendre(density, a, x, 4000)
    } else {
        head
    }
}
