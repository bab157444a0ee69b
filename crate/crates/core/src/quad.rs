//! Adaptive Gauss–Kronrod quadrature with helpers for the two awkward
//! shapes that show up around the operator M: integrable algebraic
//! singularities `|u - c|^(p-1)` and slowly decaying algebraic tails.

use crate::error::{FwnError, Result};

// 21-point Kronrod abscissae (descending, last is the centre) and weights.
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_980_221_475,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];
// 10-point Gauss weights, paired with XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Tolerances for the adaptive driver.
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_intervals: 2000,
        }
    }
}

impl QuadOptions {
    pub fn with_abs_tol(mut self, tol: f64) -> Self {
        self.abs_tol = tol;
        self
    }
    pub fn with_rel_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }
}

/// Integral value plus the accumulated error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub const ZERO: Estimate = Estimate {
        value: 0.0,
        error: 0.0,
    };

    pub fn scale(self, s: f64) -> Estimate {
        Estimate {
            value: self.value * s,
            error: self.error * s.abs(),
        }
    }
}

impl std::ops::Add for Estimate {
    type Output = Estimate;
    fn add(self, rhs: Estimate) -> Estimate {
        Estimate {
            value: self.value + rhs.value,
            error: self.error + rhs.error,
        }
    }
}

/// One 21-point Gauss–Kronrod panel on [a, b].
pub fn gk21<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64) -> Estimate {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[10];
    let mut gauss = 0.0;
    for j in 0..10 {
        let dx = half * XGK[j];
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    // Raw Kronrod/Gauss difference, no QUADPACK rescaling.
    Estimate { value, error }
}

struct Panel {
    a: f64,
    b: f64,
    est: Estimate,
}

/// Adaptive bisection on [a, b] until the summed error meets the tolerance.
pub fn integrate<F: Fn(f64) -> f64 + ?Sized>(
    f: &F,
    a: f64,
    b: f64,
    opts: &QuadOptions,
) -> Result<Estimate> {
    if a == b {
        return Ok(Estimate::ZERO);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(FwnError::Domain(format!(
            "finite interval required, got [{a}, {b}]"
        )));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut panels = vec![Panel {
        a: lo,
        b: hi,
        est: gk21(f, lo, hi),
    }];
    loop {
        let total = panels.iter().fold(Estimate::ZERO, |acc, p| acc + p.est);
        if !total.value.is_finite() {
            return Err(FwnError::Accuracy {
                estimate: f64::INFINITY,
                tol: opts.abs_tol,
                tail: 0.0,
            });
        }
        let target = opts.abs_tol.max(opts.rel_tol * total.value.abs());
        if total.error <= target {
            return Ok(total.scale(sign));
        }
        if panels.len() >= opts.max_intervals {
            return Err(FwnError::Accuracy {
                estimate: total.error,
                tol: target,
                tail: 0.0,
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.est.error.total_cmp(&y.1.est.error))
            .map(|(i, _)| i)
            .expect("at least one panel");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if mid <= p.a || mid >= p.b {
            // Interval collapsed to machine resolution; accept what we have.
            return Ok(total.scale(sign));
        }
        panels.push(Panel {
            a: p.a,
            b: mid,
            est: gk21(f, p.a, mid),
        });
        panels.push(Panel {
            a: mid,
            b: p.b,
            est: gk21(f, mid, p.b),
        });
    }
}

/// Integrates over [a, b] split at the interior `breaks` (unsorted is fine).
pub fn integrate_with_breaks<F: Fn(f64) -> f64 + ?Sized>(
    f: &F,
    a: f64,
    b: f64,
    breaks: &[f64],
    opts: &QuadOptions,
) -> Result<Estimate> {
    let mut pts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|x| *x > a && *x < b)
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut edges = Vec::with_capacity(pts.len() + 2);
    edges.push(a);
    edges.extend(pts);
    edges.push(b);
    let pieces = (edges.len() - 1) as f64;
    let sub = QuadOptions {
        abs_tol: opts.abs_tol / pieces,
        ..*opts
    };
    edges.windows(2).try_fold(Estimate::ZERO, |acc, w| {
        Ok(acc + integrate(f, w[0], w[1], &sub)?)
    })
}

/// `∫_start^∞ f` for integrands that decay at least like `x^-decay_power`
/// (decay_power > 1). Uses `x = start + e^w - 1`, which turns an algebraic
/// tail into an exponential one, and cuts the w-range where the neglected
/// remainder drops below `abs_tol`.
pub fn integrate_tail<F: Fn(f64) -> f64 + ?Sized>(
    f: &F,
    start: f64,
    decay_power: f64,
    opts: &QuadOptions,
) -> Result<Estimate> {
    if decay_power <= 1.0 {
        return Err(FwnError::Domain(format!(
            "tail integral needs decay power > 1, got {decay_power}"
        )));
    }
    let rate = decay_power - 1.0;
    let w_max = ((1.0 / opts.abs_tol.max(1e-300)).ln() / rate + 5.0).min(700.0);
    let g = |w: f64| {
        let e = w.exp();
        f(start + e - 1.0) * e
    };
    // Split the w-range into unit-ish chunks so bisection starts well placed.
    let chunks = w_max.ceil().max(1.0) as usize;
    let breaks: Vec<f64> = (1..chunks.min(64))
        .map(|k| w_max * k as f64 / chunks.min(64) as f64)
        .collect();
    integrate_with_breaks(&g, 0.0, w_max, &breaks, opts)
}

/// `∫_lo^hi |u - centre|^(power - 1) f(u) du` for `0 < power <= 1`.
///
/// Each side of `centre` is mapped by `|u - centre| = v^(1/power)`, which
/// absorbs the weight exactly: the transformed integrand is
/// `f(centre ± v^(1/power)) / power`. Points in `breaks` (discontinuities of
/// `f`) are carried through the map.
pub fn integrate_singular<F: Fn(f64) -> f64 + ?Sized>(
    f: &F,
    centre: f64,
    lo: f64,
    hi: f64,
    power: f64,
    breaks: &[f64],
    opts: &QuadOptions,
) -> Result<Estimate> {
    if !(power > 0.0 && power <= 1.0) {
        return Err(FwnError::Domain(format!(
            "singular weight exponent must lie in (0, 1], got {power}"
        )));
    }
    if lo >= hi {
        return Ok(Estimate::ZERO);
    }
    let inv = 1.0 / power;
    let mut total = Estimate::ZERO;
    let halves = (lo < centre) as usize + (hi > centre) as usize;
    let sub = QuadOptions {
        abs_tol: opts.abs_tol / halves.max(1) as f64,
        ..*opts
    };
    // Right side: u = centre + v^(1/p), u in [max(lo,c), hi].
    if hi > centre {
        let u0 = lo.max(centre);
        let v0 = (u0 - centre).powf(power);
        let v1 = (hi - centre).powf(power);
        let mapped: Vec<f64> = breaks
            .iter()
            .filter(|b| **b > u0 && **b < hi)
            .map(|b| (b - centre).powf(power))
            .collect();
        let g = |v: f64| f(centre + v.max(0.0).powf(inv)) * inv;
        total = total + integrate_with_breaks(&g, v0, v1, &mapped, &sub)?;
    }
    // Left side: u = centre - v^(1/p), u in [lo, min(hi,c)].
    if lo < centre {
        let u1 = hi.min(centre);
        let v0 = (centre - u1).powf(power);
        let v1 = (centre - lo).powf(power);
        let mapped: Vec<f64> = breaks
            .iter()
            .filter(|b| **b > lo && **b < u1)
            .map(|b| (centre - b).powf(power))
            .collect();
        let g = |v: f64| f(centre - v.max(0.0).powf(inv)) * inv;
        total = total + integrate_with_breaks(&g, v0, v1, &mapped, &sub)?;
    }
    Ok(total)
}
