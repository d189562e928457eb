//! Built-in numeric verification: fast suites that re-derive the
//! load-bearing numerics from independent oracles and report measured
//! error against tolerance. Wired to the CLI so a deployed binary can
//! prove its own arithmetic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use crate::curriculum::{build_curriculum, fake_source_ids};
use crate::error::Result;
use crate::hopfield::HopfieldMemory;
use crate::model::{
    full_objective_grads, full_objective_value, DiscConfig, Discriminator, HopfieldSpec,
    SegConfig, SegModel,
};
use crate::raster::Image;
use crate::seed::seeded_rng;
use crate::spectrum::fft2;

/// One check: what was measured and what it had to stay under.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(CheckResult::pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:26} measured {:10.3e}  tolerance {:8.1e}\n",
                if c.pass() { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            ));
        }
        out.push_str(if self.all_pass() {
            "all checks passed\n"
        } else {
            "CHECKS FAILED\n"
        });
        out
    }
}

/// Test hook: adds `delta` to the analytic gradient at one flat parameter
/// index (model parameters first, then discriminator) before the
/// finite-difference comparison. A correct pipeline must then fail the
/// gradient check.
#[derive(Debug, Clone, Copy)]
pub struct InjectedGradientBug {
    pub param_index: usize,
    pub delta: f64,
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let pixels = (0..h * w * 3).map(|_| rng.gen()).collect();
    Image::new(h, w, 3, pixels).expect("valid dimensions")
}

/// Direct `O(N^2)` DFT of one channel, raw (unshifted) bin order.
fn brute_dft_plane(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let ang = -2.0 * std::f64::consts::PI
                        * (ky as f64 * r as f64 / h as f64 + kx as f64 * c as f64 / w as f64);
                    acc += Complex::new(ang.cos(), ang.sin()) * plane[r * w + c];
                }
            }
            out[ky * w + kx] = acc;
        }
    }
    out
}

/// Max abs deviation between the fast transform and the direct DFT over a
/// few seeded rectangular images.
fn dft_oracle(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, "selfcheck_dft");
    let mut worst = 0.0f64;
    for (h, w) in [(4, 4), (5, 7), (8, 6), (9, 9)] {
        let img = random_image(h, w, &mut rng);
        let spec = fft2(&img)?;
        for c in 0..img.channels {
            let plane: Vec<f64> = (0..h * w).map(|i| img.pixels[i * img.channels + c]).collect();
            let brute = brute_dft_plane(&plane, h, w);
            for y in 0..h {
                let sy = (y + h - h / 2) % h;
                for x in 0..w {
                    let sx = (x + w - w / 2) % w;
                    let fast = spec.bins[(y * w + x) * img.channels + c];
                    let diff = (fast - brute[sy * w + sx]).norm();
                    worst = worst.max(diff);
                }
            }
        }
    }
    Ok(CheckResult {
        name: "dft_oracle",
        measured: worst,
        tolerance: 1e-9,
    })
}

/// Energy conservation: `sum |F|^2 / (H*W)` must equal `sum |x|^2`.
fn parseval(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, "selfcheck_parseval");
    let mut worst = 0.0f64;
    for (h, w) in [(6, 6), (7, 11), (16, 12)] {
        let img = random_image(h, w, &mut rng);
        let spec = fft2(&img)?;
        let spatial: f64 = img.pixels.iter().map(|v| v * v).sum();
        let spectral: f64 =
            spec.bins.iter().map(|b| b.norm_sqr()).sum::<f64>() / (h * w) as f64;
        worst = worst.max((spectral - spatial).abs() / spatial.abs().max(1e-300));
    }
    Ok(CheckResult {
        name: "parseval",
        measured: worst,
        tolerance: 1e-9,
    })
}

fn two_pattern_memory() -> HopfieldMemory {
    // 2x2 identity everything: similarity reduces to softmax([z0, z1])
    HopfieldMemory {
        m_n: 2,
        c_l: 2,
        c_s: 2,
        tau: 1.0,
        frozen: false,
        m: vec![1.0, 0.0, 0.0, 1.0],
        w_q: vec![1.0, 0.0, 0.0, 1.0],
        w_k: vec![1.0, 0.0, 0.0, 1.0],
        w_v: vec![1.0, 0.0, 0.0, 1.0],
    }
}

/// Hand-computed two-term softmax: sim([1,0]) = [e/(e+1), 1/(e+1)].
fn softmax_retrieval() -> Result<CheckResult> {
    let mem = two_pattern_memory();
    let e = std::f64::consts::E;
    let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
    let sim = mem.similarity(&[1.0, 0.0])?;
    let zhat = mem.retrieve(&[1.0, 0.0])?;
    let mut worst = 0.0f64;
    for i in 0..2 {
        worst = worst.max((sim[i] - expected[i]).abs());
        // identity values make the retrieval equal the similarity weights
        worst = worst.max((zhat[i] - expected[i]).abs());
    }
    Ok(CheckResult {
        name: "softmax_retrieval",
        measured: worst,
        tolerance: 1e-5,
    })
}

/// Similarity weights are a probability vector on random seeded memories.
fn similarity_normalization(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, "selfcheck_simsum");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m_n = rng.gen_range(1..=8);
        let c_l = rng.gen_range(1..=6);
        let c_s = rng.gen_range(1..=c_l);
        let mem = HopfieldMemory::init(m_n, c_l, c_s, 1.0, &mut rng)?;
        let z: Vec<f64> = (0..c_l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sim = mem.similarity(&z)?;
        worst = worst.max((sim.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(CheckResult {
        name: "similarity_normalization",
        measured: worst,
        tolerance: 1e-12,
    })
}

/// Analytic gradients of the combined objective against central finite
/// differences, every parameter of both networks, on a 6x6 input pair.
/// `bug` perturbs one analytic entry to prove the check can fail.
fn gradient_check(seed: u64, bug: Option<InjectedGradientBug>) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, "selfcheck_grad");
    let seg_cfg = SegConfig {
        in_channels: 3,
        hidden_channels: vec![4],
        feature_dim: 5,
        cls: 3,
        leaky_slope: 0.1,
        hopfield: Some(HopfieldSpec {
            memory_size: 4,
            similarity_dim: 3,
            tau: 1.0,
        }),
    };
    let disc_cfg = DiscConfig {
        in_channels: 3,
        hidden_channels: vec![3],
        leaky_slope: 0.1,
    };
    let model = SegModel::init(seg_cfg, rng.gen())?;
    let disc = Discriminator::init(disc_cfg, rng.gen())?;
    let labeled = random_image(6, 6, &mut rng);
    let labels: Vec<u8> = (0..36).map(|_| rng.gen_range(0..3u8)).collect();
    let target = random_image(6, 6, &mut rng);
    let lambda = 0.001;

    let (sg, dg, _) = full_objective_grads(&model, &disc, &labeled, &labels, &target, lambda)?;
    let mut analytic = sg.flat();
    analytic.extend(dg.flat());
    if let Some(b) = bug {
        analytic[b.param_index] += b.delta;
    }

    let seg_n = model.num_params();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let eval = |offset: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut d = disc.clone();
            if i < seg_n {
                let mut p = m.flat_params();
                p[i] += offset;
                m.set_flat_params(&p)?;
            } else {
                let mut p = d.flat_params();
                p[i - seg_n] += offset;
                d.set_flat_params(&p)?;
            }
            full_objective_value(&m, &d, &labeled, &labels, &target, lambda)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let a = analytic[i];
        // the scale floor keeps roundoff in the difference quotient from
        // dominating near-zero gradients; below it the check is absolute
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(CheckResult {
        name: "gradient_check",
        measured: worst,
        tolerance: 1e-5,
    })
}

/// Stage partition and fake-source pool sizes over randomized (n, k),
/// checked against the closed-form counts. Measured value is the number
/// of violations.
fn split_cardinality(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, "selfcheck_split");
    let mut violations = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(1..=60usize);
        let k = rng.gen_range(1..=n.min(8));
        let distances: Vec<(String, f64)> = (0..n)
            .map(|i| (format!("img{i:03}"), rng.gen_range(0.0..10.0)))
            .collect();
        let cur = build_curriculum(&distances, k)?;
        let kept = n - n % k;
        if cur.ordered.len() != kept || cur.dropped.len() != n % k {
            violations += 1;
        }
        if cur.stages().iter().any(|s| s.len() != kept / k) {
            violations += 1;
        }
        for j in 1..=k {
            let pool = fake_source_ids(&cur, j)?;
            if pool.len() != kept * (j - 1) / (2 * k) {
                violations += 1;
            }
            if j == 1 && !pool.is_empty() {
                violations += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "split_cardinality",
        measured: violations as f64,
        tolerance: 0.0,
    })
}

/// Run every suite. All randomness derives from `seed`; `bug` is the
/// negative-control hook for the gradient check.
pub fn run_all(seed: u64, bug: Option<InjectedGradientBug>) -> Result<CheckReport> {
    Ok(CheckReport {
        checks: vec![
            dft_oracle(seed)?,
            parseval(seed)?,
            softmax_retrieval()?,
            similarity_normalization(seed)?,
            gradient_check(seed, bug)?,
            split_cardinality(seed)?,
        ],
    })
}
