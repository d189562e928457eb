//! Modern continuous Hopfield memory used as a feature-retrieval layer.
//!
//! A bank of `m_n` stored patterns of width `c_l` is addressed through
//! learned query/key projections into a `c_s`-dimensional similarity
//! space. For a feature vector `z`:
//!
//! ```text
//! sim_i = softmax_i( tau * (Wq' z) . (Wk' m_i) )
//! zhat  = sum_i sim_i * (Wv m_i)
//! ```
//!
//! so `zhat` is always a convex combination of the projected patterns.
//! The classic associative recall `z <- M' softmax(tau M z)` is exposed
//! separately for diagnostics; one update suffices near a stored pattern.
//!
//! Freezing pins the patterns and the key/value projections, leaving only
//! the query projection trainable; frozen parameters report exactly zero
//! gradient and are skipped by optimizers.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::artifact;
use crate::error::{Error, Result};
use crate::nn::softmax_inplace;
use crate::seed::uniform_symmetric;

#[derive(Debug, Clone, PartialEq)]
pub struct HopfieldMemory {
    pub m_n: usize,
    pub c_l: usize,
    pub c_s: usize,
    pub tau: f64,
    pub frozen: bool,
    /// Stored patterns, `m_n x c_l` row-major.
    pub m: Vec<f64>,
    /// Query projection, `c_l x c_s` row-major.
    pub w_q: Vec<f64>,
    /// Key projection, `c_l x c_s` row-major.
    pub w_k: Vec<f64>,
    /// Value projection, `c_l x c_l` row-major.
    pub w_v: Vec<f64>,
}

/// Key/value projections of the current patterns, reusable across many
/// queries while the parameters stay fixed.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// `m_n x c_s`: row i is `Wk' m_i`.
    pub k_proj: Vec<f64>,
    /// `m_n x c_l`: row i is `Wv m_i`.
    pub v_proj: Vec<f64>,
}

/// Per-query intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LocCache {
    pub q: Vec<f64>,
    pub sim: Vec<f64>,
}

/// Gradient accumulators matching the parameter shapes.
#[derive(Debug, Clone)]
pub struct HopfieldGrads {
    pub m: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl HopfieldGrads {
    pub fn zeros(mem: &HopfieldMemory) -> Self {
        HopfieldGrads {
            m: vec![0.0; mem.m.len()],
            w_q: vec![0.0; mem.w_q.len()],
            w_k: vec![0.0; mem.w_k.len()],
            w_v: vec![0.0; mem.w_v.len()],
        }
    }
}

impl HopfieldMemory {
    /// Seeded init: every weight uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// with `fan_in = c_l`. Draw order is fixed: patterns, Wq, Wk, Wv.
    pub fn init(m_n: usize, c_l: usize, c_s: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m_n == 0 {
            return Err(Error::Parameter("memory needs at least one pattern".into()));
        }
        if c_s == 0 || c_s > c_l {
            return Err(Error::Parameter(format!(
                "similarity width must satisfy 1 <= c_s <= c_l, got c_s={c_s}, c_l={c_l}"
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be positive and finite, got {tau}")));
        }
        let scale = 1.0 / (c_l as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| uniform_symmetric(rng, scale)).collect() };
        Ok(HopfieldMemory {
            m_n,
            c_l,
            c_s,
            tau,
            frozen: false,
            m: draw(m_n * c_l),
            w_q: draw(c_l * c_s),
            w_k: draw(c_l * c_s),
            w_v: draw(c_l * c_l),
        })
    }

    /// Freezing is idempotent and only flips the flag; parameters are
    /// untouched so checkpoints stay bitwise comparable across the call.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut k_proj = vec![0.0; self.m_n * self.c_s];
        let mut v_proj = vec![0.0; self.m_n * self.c_l];
        for i in 0..self.m_n {
            let pat = &self.m[i * self.c_l..(i + 1) * self.c_l];
            for s in 0..self.c_s {
                let mut acc = 0.0;
                for l in 0..self.c_l {
                    acc += self.w_k[l * self.c_s + s] * pat[l];
                }
                k_proj[i * self.c_s + s] = acc;
            }
            for r in 0..self.c_l {
                let mut acc = 0.0;
                for c in 0..self.c_l {
                    acc += self.w_v[r * self.c_l + c] * pat[c];
                }
                v_proj[i * self.c_l + r] = acc;
            }
        }
        Snapshot { k_proj, v_proj }
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.c_l {
            return Err(Error::InvalidInput(format!(
                "query has {} entries, memory stores width-{} patterns",
                z.len(),
                self.c_l
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite query".into()));
        }
        Ok(())
    }

    /// Project `z`, score it against every pattern, softmax the scores.
    pub fn similarity(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_query(z)?;
        let snap = self.snapshot();
        let (_, cache) = self.forward_with(&snap, z);
        Ok(cache.sim)
    }

    /// Full retrieval: the similarity-weighted sum of projected patterns.
    pub fn retrieve(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_query(z)?;
        let snap = self.snapshot();
        let (zhat, _) = self.forward_with(&snap, z);
        Ok(zhat)
    }

    /// Unvalidated fast path used per spatial location by the model.
    pub fn forward_with(&self, snap: &Snapshot, z: &[f64]) -> (Vec<f64>, LocCache) {
        let mut q = vec![0.0; self.c_s];
        for s in 0..self.c_s {
            let mut acc = 0.0;
            for l in 0..self.c_l {
                acc += self.w_q[l * self.c_s + s] * z[l];
            }
            q[s] = acc;
        }
        let mut sim = vec![0.0; self.m_n];
        for i in 0..self.m_n {
            let mut acc = 0.0;
            for s in 0..self.c_s {
                acc += q[s] * snap.k_proj[i * self.c_s + s];
            }
            sim[i] = self.tau * acc;
        }
        softmax_inplace(&mut sim);
        let mut zhat = vec![0.0; self.c_l];
        for i in 0..self.m_n {
            let w = sim[i];
            let row = &snap.v_proj[i * self.c_l..(i + 1) * self.c_l];
            for r in 0..self.c_l {
                zhat[r] += w * row[r];
            }
        }
        (zhat, LocCache { q, sim })
    }

    /// Accumulate parameter gradients for one query and return the gradient
    /// with respect to `z`. Frozen parameters accumulate exactly nothing.
    pub fn backward_with(
        &self,
        snap: &Snapshot,
        z: &[f64],
        cache: &LocCache,
        upstream: &[f64],
        grads: &mut HopfieldGrads,
    ) -> Vec<f64> {
        let (m_n, c_l, c_s) = (self.m_n, self.c_l, self.c_s);
        let q = &cache.q;
        let sim = &cache.sim;

        // dL/dsim_i = upstream . v_i
        let mut dsim = vec![0.0; m_n];
        for i in 0..m_n {
            let row = &snap.v_proj[i * c_l..(i + 1) * c_l];
            let mut acc = 0.0;
            for r in 0..c_l {
                acc += row[r] * upstream[r];
            }
            dsim[i] = acc;
        }
        // softmax backward
        let dot: f64 = (0..m_n).map(|i| sim[i] * dsim[i]).sum();
        let dlogit: Vec<f64> = (0..m_n).map(|i| sim[i] * (dsim[i] - dot)).collect();

        // dq = tau * K' dlogit
        let mut dq = vec![0.0; c_s];
        for s in 0..c_s {
            let mut acc = 0.0;
            for i in 0..m_n {
                acc += dlogit[i] * snap.k_proj[i * c_s + s];
            }
            dq[s] = self.tau * acc;
        }
        // dz = Wq dq
        let mut dz = vec![0.0; c_l];
        for l in 0..c_l {
            let mut acc = 0.0;
            for s in 0..c_s {
                acc += self.w_q[l * c_s + s] * dq[s];
            }
            dz[l] = acc;
        }
        // Wq is trainable in both regimes.
        for l in 0..c_l {
            let zl = z[l];
            for s in 0..c_s {
                grads.w_q[l * c_s + s] += zl * dq[s];
            }
        }
        if !self.frozen {
            // Wk q, Wv' g, M' sim, M' dlogit: the shared contractions.
            let mut wk_q = vec![0.0; c_l];
            let mut wv_g = vec![0.0; c_l];
            for l in 0..c_l {
                let mut acc = 0.0;
                for s in 0..c_s {
                    acc += self.w_k[l * c_s + s] * q[s];
                }
                wk_q[l] = acc;
            }
            for c in 0..c_l {
                let mut acc = 0.0;
                for r in 0..c_l {
                    acc += self.w_v[r * c_l + c] * upstream[r];
                }
                wv_g[c] = acc;
            }
            let mut m_sim = vec![0.0; c_l];
            let mut m_dlogit = vec![0.0; c_l];
            for i in 0..m_n {
                let pat = &self.m[i * c_l..(i + 1) * c_l];
                for l in 0..c_l {
                    m_sim[l] += sim[i] * pat[l];
                    m_dlogit[l] += dlogit[i] * pat[l];
                }
            }
            for i in 0..m_n {
                let row = &mut grads.m[i * c_l..(i + 1) * c_l];
                let a = self.tau * dlogit[i];
                let b = sim[i];
                for l in 0..c_l {
                    row[l] += a * wk_q[l] + b * wv_g[l];
                }
            }
            for l in 0..c_l {
                let md = self.tau * m_dlogit[l];
                for s in 0..c_s {
                    grads.w_k[l * c_s + s] += md * q[s];
                }
            }
            for r in 0..c_l {
                let g = upstream[r];
                for c in 0..c_l {
                    grads.w_v[r * c_l + c] += g * m_sim[c];
                }
            }
        }
        dz
    }

    /// One-query convenience wrapper: forward, then backward.
    pub fn hopfield_backward(&self, z: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, HopfieldGrads)> {
        self.check_query(z)?;
        if upstream.len() != self.c_l {
            return Err(Error::InvalidInput(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                self.c_l
            )));
        }
        let snap = self.snapshot();
        let (_, cache) = self.forward_with(&snap, z);
        let mut grads = HopfieldGrads::zeros(self);
        let dz = self.backward_with(&snap, z, &cache, upstream, &mut grads);
        Ok((dz, grads))
    }

    /// Classic associative recall, iterating `z <- M' softmax(tau M z)`
    /// until the sup-norm step falls below `tol`. Returns the final state
    /// and the number of updates applied.
    pub fn mchn_iterate(&self, q: &[f64], max_iters: usize, tol: f64) -> Result<(Vec<f64>, usize)> {
        self.check_query(q)?;
        if max_iters == 0 {
            return Err(Error::Parameter("max_iters must be at least 1".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
        }
        let mut z = q.to_vec();
        for it in 1..=max_iters {
            let mut logits = vec![0.0; self.m_n];
            for i in 0..self.m_n {
                let pat = &self.m[i * self.c_l..(i + 1) * self.c_l];
                let mut acc = 0.0;
                for l in 0..self.c_l {
                    acc += pat[l] * z[l];
                }
                logits[i] = self.tau * acc;
            }
            softmax_inplace(&mut logits);
            let mut next = vec![0.0; self.c_l];
            for i in 0..self.m_n {
                let w = logits[i];
                let pat = &self.m[i * self.c_l..(i + 1) * self.c_l];
                for l in 0..self.c_l {
                    next[l] += w * pat[l];
                }
            }
            let step = z
                .iter()
                .zip(next.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            z = next;
            if step < tol {
                return Ok((z, it));
            }
        }
        Ok((z, max_iters))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "M_N": self.m_n,
            "C_l": self.c_l,
            "C_s": self.c_s,
            "tau": self.tau,
            "frozen": self.frozen,
        });
        artifact::write_blob(path, &header, &[&self.m, &self.w_q, &self.w_k, &self.w_v])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = artifact::read_blob(path)?;
        let field = |k: &str| -> Result<u64> {
            header[k]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("{}: header missing {k}", path.display())))
        };
        let m_n = field("M_N")? as usize;
        let c_l = field("C_l")? as usize;
        let c_s = field("C_s")? as usize;
        let tau = header["tau"]
            .as_f64()
            .ok_or_else(|| Error::Format(format!("{}: header missing tau", path.display())))?;
        let frozen = header["frozen"]
            .as_bool()
            .ok_or_else(|| Error::Format(format!("{}: header missing frozen", path.display())))?;
        let parts = artifact::split_payload(&payload, &[m_n * c_l, c_l * c_s, c_l * c_s, c_l * c_l])?;
        let mut it = parts.into_iter();
        Ok(HopfieldMemory {
            m_n,
            c_l,
            c_s,
            tau,
            frozen,
            m: it.next().expect("four arrays"),
            w_q: it.next().expect("four arrays"),
            w_k: it.next().expect("four arrays"),
            w_v: it.next().expect("four arrays"),
        })
    }
}
